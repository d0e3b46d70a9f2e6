use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use attrank::checkpoint::Checkpoint;
use attrank::config::{load_synth_config, load_train_config, parse_json};
use attrank::manifest::{load_manifest, read_manifest, save_manifest, write_manifest};
use attrank::Error;
use attrank_core::attributes::{extract_attributes, render_caption, AttributeTable};
use attrank_core::model::ModelParams;
use attrank_core::synth::{generate_dataset, DatasetManifest, Sample, Split, SynthConfig};
use attrank_core::train::{model_config_for, TrainConfig, Trainer};
use attrank_core::DenseTensor;

fn tiny() -> DatasetManifest {
    let table = AttributeTable::builtin(2).unwrap();
    let vocab = table.vocabulary();
    let sample = |id: usize, identity: usize, present: &[usize], rows: &[[f64; 2]]| {
        let attributes: BTreeSet<usize> = present.iter().copied().collect();
        let absent: Vec<usize> = (0..2).filter(|a| !attributes.contains(a)).collect();
        let caption = render_caption(&table, present, &absent);
        Sample {
            sample_id: id,
            identity_id: identity,
            image_id: id,
            patch_features: DenseTensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            annotation: extract_attributes(&caption, &table),
            caption,
            attributes,
            confusable: true,
        }
    };
    let samples =
        vec![sample(0, 0, &[0], &[[0.5, -1.25], [0.0, 2.0]]), sample(1, 1, &[0, 1], &[[0.1, 1e-7], [-3.0, 0.25]])];
    DatasetManifest {
        version: 1,
        split: Split::Test,
        num_attributes: 2,
        patch_dim: 2,
        vocab,
        attribute_table: table,
        samples,
    }
}

fn golden_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/tiny_manifest.jsonl"))
}

#[test]
fn manifest_matches_golden_file() {
    let mut bytes = Vec::new();
    write_manifest(&tiny(), &mut bytes).unwrap();
    if std::env::var_os("BLESS").is_some() {
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap(), String::from_utf8(golden).unwrap());
    assert_eq!(load_manifest(golden_path()).unwrap(), tiny());
}

#[test]
fn golden_header_field_names() {
    let text = std::fs::read_to_string(golden_path()).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: BTreeSet<&str> = header.as_object().unwrap().keys().map(String::as_str).collect();
    let want: BTreeSet<&str> =
        ["version", "split", "K", "d_in", "vocab", "attribute_table_hash", "num_samples", "attribute_table"].into();
    assert_eq!(keys, want);
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn generated_manifest_round_trips() {
    let d = generate_dataset(&SynthConfig { identities: 12, seed: 7, ..SynthConfig::default() }, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for m in [&d.train, &d.test] {
        let p = dir.path().join("m.jsonl");
        save_manifest(m, &p).unwrap();
        assert_eq!(&load_manifest(&p).unwrap(), m);
        let first = std::fs::read(&p).unwrap();
        save_manifest(&load_manifest(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}

fn read(text: &str) -> Result<DatasetManifest, Error> {
    read_manifest(Cursor::new(text.as_bytes()), Path::new("m.jsonl"))
}

fn golden_lines() -> Vec<String> {
    std::fs::read_to_string(golden_path()).unwrap().lines().map(String::from).collect()
}

#[test]
fn truncated_manifest_is_detected() {
    let lines = golden_lines();
    match read(&format!("{}\n{}\n", lines[0], lines[1])) {
        Err(Error::Truncated { expected: 2, found: 1, .. }) => {}
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    let lines = golden_lines();
    let broken = lines[2].replacen("\"confusable\":true", "\"confusable\":maybe", 1);
    match read(&format!("{}\n{}\n{}\n", lines[0], lines[1], broken)) {
        Err(Error::Parse { line: 3, .. }) => {}
        other => panic!("expected a line 3 parse error, got {other:?}"),
    }
    let extra = lines[1].replacen('{', "{\"colour\":1,", 1);
    match read(&format!("{}\n{}\n{}\n", lines[0], extra, lines[2])) {
        Err(Error::Parse { line: 2, reason, .. }) => assert!(reason.contains("colour")),
        other => panic!("expected a line 2 parse error, got {other:?}"),
    }
}

#[test]
fn tampered_table_hash_is_rejected() {
    let lines = golden_lines();
    let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    let hash = v["attribute_table_hash"].as_str().unwrap();
    let header = lines[0].replace(hash, &"0".repeat(hash.len()));
    assert!(matches!(read(&format!("{header}\n{}\n{}\n", lines[1], lines[2])), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(read(""), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = generate_dataset(&SynthConfig { identities: 8, seed: 3, ..SynthConfig::default() }, 32).unwrap();
    let cfg = TrainConfig { batch_size: 4, epochs: 2, warmup_epochs: 1, ..TrainConfig::desk_scale() };
    let mut t = Trainer::for_manifest(cfg, &d.train).unwrap();
    t.fit(&d.train, None, Some(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    Checkpoint::from_trainer(&t).save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap().trainer().unwrap();
    for (id, v) in t.params.iter() {
        let w = back.params.get(id);
        assert!(v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{}", id.name());
    }
    assert_eq!(back, t);
    let plain = ModelParams::init(model_config_for(&d.train), 9).unwrap();
    Checkpoint::from_params(&plain).save(&p).unwrap();
    assert_eq!(Checkpoint::load(&p).unwrap().params().unwrap(), plain);
    assert!(Checkpoint::load(&p).unwrap().trainer().is_err());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = generate_dataset(&SynthConfig { identities: 8, seed: 5, ..SynthConfig::default() }, 32).unwrap();
    let cfg = TrainConfig { batch_size: 4, epochs: 3, warmup_epochs: 1, ..TrainConfig::desk_scale() };
    let mut straight = Trainer::for_manifest(cfg, &d.train).unwrap();
    let full = straight.fit(&d.train, None, None).unwrap();

    let mut first = Trainer::for_manifest(cfg, &d.train).unwrap();
    let head = first.fit(&d.train, None, Some(13)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.json");
    Checkpoint::from_trainer(&first).save(&p).unwrap();
    let mut resumed = attrank::checkpoint::load_trainer(&p).unwrap();
    let tail = resumed.fit(&d.train, None, None).unwrap();

    let joined: Vec<_> = head.steps.iter().chain(&tail.steps).collect();
    assert_eq!(joined.len(), full.steps.len());
    for (a, b) in joined.iter().zip(&full.steps) {
        assert_eq!(a.losses.total.to_bits(), b.losses.total.to_bits(), "step {}", b.step);
    }
    assert_eq!(resumed.params, straight.params);
}

#[test]
fn configs_reject_unknown_keys() {
    let p = Path::new("c.json");
    assert!(parse_json::<TrainConfig>(r#"{"epochs": 3, "learning_rate": 1}"#, p).is_err());
    assert!(parse_json::<SynthConfig>(r#"{"identities": 3, "colour": 1}"#, p).is_err());
    let c: TrainConfig = parse_json(r#"{"epochs": 7}"#, p).unwrap();
    assert_eq!(c, TrainConfig { epochs: 7, ..TrainConfig::default() });
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("s.json");
    std::fs::write(&f, r#"{"mentioned_positive": 8, "mentioned_negative": 5}"#).unwrap();
    assert!(matches!(load_synth_config(&f), Err(Error::Core(attrank_core::Error::Config { .. }))));
    std::fs::write(&f, r#"{"batch_size": 0}"#).unwrap();
    assert!(load_train_config(&f).is_err());
    assert!(matches!(load_train_config(&dir.path().join("missing.json")), Err(Error::Io { .. })));
}
