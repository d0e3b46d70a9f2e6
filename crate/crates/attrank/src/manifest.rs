//! JSON-lines manifests: one header object, then one sample per line.
//!
//! Header keys: `version`, `split`, `K`, `d_in`, `vocab`,
//! `attribute_table_hash`, `num_samples`, `attribute_table`.
//! Sample keys: `sample_id`, `identity_id`, `image_id`, `patch_features`
//! (rows of reals), `caption` (words), `annotation`, `attributes`,
//! `confusable`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use attrank_core::attributes::{AttributeAnnotation, AttributeTable, Vocabulary};
use attrank_core::synth::{DatasetManifest, Sample, Split};
use attrank_core::DenseTensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub version: u32,
    pub split: Split,
    #[serde(rename = "K")]
    pub num_attributes: usize,
    pub d_in: usize,
    pub vocab: Vocabulary,
    pub attribute_table_hash: String,
    pub num_samples: usize,
    pub attribute_table: AttributeTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: usize,
    identity_id: usize,
    image_id: usize,
    patch_features: Vec<Vec<f64>>,
    caption: Vec<String>,
    annotation: AttributeAnnotation,
    attributes: BTreeSet<usize>,
    confusable: bool,
}

impl SampleRecord {
    fn from_sample(s: &Sample) -> Self {
        let p = &s.patch_features;
        SampleRecord {
            sample_id: s.sample_id,
            identity_id: s.identity_id,
            image_id: s.image_id,
            patch_features: (0..p.rows()).map(|r| p.row(r).to_vec()).collect(),
            caption: s.caption.clone(),
            annotation: s.annotation.clone(),
            attributes: s.attributes.clone(),
            confusable: s.confusable,
        }
    }

    fn into_sample(self) -> attrank_core::Result<Sample> {
        Ok(Sample {
            sample_id: self.sample_id,
            identity_id: self.identity_id,
            image_id: self.image_id,
            patch_features: DenseTensor::from_rows(&self.patch_features)?,
            caption: self.caption,
            annotation: self.annotation,
            attributes: self.attributes,
            confusable: self.confusable,
        })
    }
}

pub fn header_of(m: &DatasetManifest) -> ManifestHeader {
    ManifestHeader {
        version: m.version,
        split: m.split,
        num_attributes: m.num_attributes,
        d_in: m.patch_dim,
        vocab: m.vocab.clone(),
        attribute_table_hash: m.attribute_table_hash(),
        num_samples: m.samples.len(),
        attribute_table: m.attribute_table.clone(),
    }
}

pub fn write_manifest<W: Write>(m: &DatasetManifest, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, &header_of(m))?;
    out.write_all(b"\n")?;
    for s in &m.samples {
        serde_json::to_writer(&mut out, &SampleRecord::from_sample(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(m, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Parses a manifest from `reader`; `path` only labels errors.
pub fn read_manifest<R: BufRead>(reader: R, path: &Path) -> Result<DatasetManifest> {
    let parse = |line: usize, reason: String| Error::Parse { path: path.into(), line, reason };
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header: ManifestHeader = match lines.next() {
        Some((n, l)) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?).map_err(|e| parse(n, e.to_string()))?,
        None => return Err(Error::Format { path: path.into(), reason: "empty file, expected a header line".into() }),
    };
    if header.version != MANIFEST_VERSION {
        return Err(parse(1, format!("unsupported manifest version {}", header.version)));
    }
    if header.attribute_table.content_hash() != header.attribute_table_hash {
        return Err(parse(1, "attribute_table_hash does not match the embedded table".into()));
    }
    let mut samples = Vec::with_capacity(header.num_samples);
    for (n, l) in lines {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&l).map_err(|e| parse(n, e.to_string()))?;
        samples.push(rec.into_sample().map_err(|e| parse(n, e.to_string()))?);
    }
    if samples.len() != header.num_samples {
        return Err(Error::Truncated { path: path.into(), expected: header.num_samples, found: samples.len() });
    }
    let m = DatasetManifest {
        version: header.version,
        split: header.split,
        num_attributes: header.num_attributes,
        patch_dim: header.d_in,
        vocab: header.vocab,
        attribute_table: header.attribute_table,
        samples,
    };
    m.validate().map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(BufReader::new(f), path)
}
