//! Attribute table, caption analysis and positive/negative prompt rendering.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";
pub const SLOT: &str = "{}";

pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Words that negate a phrase starting within the next two positions.
pub const NEGATION_WORDS: [&str; 3] = ["no", "not", "without"];
pub const NEGATION_WINDOW: usize = 2;

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Word-level vocabulary. Ids 0, 1 and 2 are always `[SOS]`, `[EOS]` and
/// `[MASK]`; the remaining words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_owned())
            .filter(|w| w != SOS && w != EOS && w != MASK)
            .collect();
        let all: Vec<String> = [SOS, EOS, MASK].iter().map(|s| s.to_string()).chain(set).collect();
        Self::try_from(all).expect("specials lead and words are unique")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn sos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        1
    }

    pub fn mask(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Maps words to ids, listing every missing word on failure.
    pub fn tokenize<S: AsRef<str>>(&self, text: &[S]) -> Result<Vec<usize>> {
        let mut missing = BTreeSet::new();
        let ids: Vec<usize> = text
            .iter()
            .filter_map(|w| {
                let w = w.as_ref();
                let id = self.id(w);
                if id.is_none() {
                    missing.insert(w.to_owned());
                }
                id
            })
            .collect();
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::UnknownWords(missing.into_iter().collect()))
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != SOS || words[1] != EOS || words[2] != MASK {
            return Err(Error::Config { field: "vocab", reason: "must start with [SOS], [EOS], [MASK]".into() });
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config { field: "vocab", reason: format!("duplicate word `{w}`") });
            }
        }
        Ok(Self { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeEntry {
    pub id: usize,
    pub phrase: Vec<String>,
    pub positive_template: Vec<String>,
    pub negative_template: Vec<String>,
}

/// On-disk form: `{"id": 0, "phrase": "hat", "pos": "... {}", "neg": "... {}"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAttributeEntry {
    pub id: usize,
    pub phrase: String,
    pub pos: String,
    pub neg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RawAttributeEntry>", into = "Vec<RawAttributeEntry>")]
pub struct AttributeTable {
    entries: Vec<AttributeEntry>,
}

impl TryFrom<Vec<RawAttributeEntry>> for AttributeTable {
    type Error = Error;

    fn try_from(raw: Vec<RawAttributeEntry>) -> Result<Self> {
        let mut entries = Vec::with_capacity(raw.len());
        let mut phrases = BTreeSet::new();
        for (pos, r) in raw.into_iter().enumerate() {
            if r.id != pos {
                return Err(Error::AttributeTable(format!("expected id {pos}, found {}", r.id)));
            }
            let phrase = words(&r.phrase);
            if phrase.is_empty() || phrase.iter().any(|w| w == SLOT) {
                return Err(Error::AttributeTable(format!("attribute {pos} has an invalid phrase")));
            }
            if !phrases.insert(phrase.clone()) {
                return Err(Error::AttributeTable(format!("duplicate phrase `{}`", r.phrase)));
            }
            let template = |t: &str| {
                let w = words(t);
                if w.iter().filter(|x| *x == SLOT).count() == 1 {
                    Ok(w)
                } else {
                    Err(Error::AttributeTable(format!("template `{t}` must contain exactly one {SLOT}")))
                }
            };
            entries.push(AttributeEntry {
                id: pos,
                phrase,
                positive_template: template(&r.pos)?,
                negative_template: template(&r.neg)?,
            });
        }
        Ok(Self { entries })
    }
}

impl From<AttributeTable> for Vec<RawAttributeEntry> {
    fn from(t: AttributeTable) -> Self {
        t.entries
            .into_iter()
            .map(|e| RawAttributeEntry {
                id: e.id,
                phrase: e.phrase.join(" "),
                pos: e.positive_template.join(" "),
                neg: e.negative_template.join(" "),
            })
            .collect()
    }
}

const DEFAULT_ATTRIBUTES: [(&str, &str, &str); 16] = [
    ("hat", "the person is wearing a {}", "the person is not wearing a {}"),
    ("glasses", "the person is wearing {}", "the person is not wearing {}"),
    ("backpack", "the person is carrying a {}", "the person is not carrying a {}"),
    ("grey jacket", "the person is wearing a {}", "the person is not wearing a {}"),
    ("long hair", "the person has {}", "the person does not have {}"),
    ("shorts", "the person is wearing {}", "the person is not wearing {}"),
    ("handbag", "the person is carrying a {}", "the person is not carrying a {}"),
    ("boots", "the person is wearing {}", "the person is not wearing {}"),
    ("red shirt", "the person is wearing a {}", "the person is not wearing a {}"),
    ("scarf", "the person is wearing a {}", "the person is not wearing a {}"),
    ("umbrella", "the person is holding an {}", "the person is not holding an {}"),
    ("white shoes", "the person is wearing {}", "the person is not wearing {}"),
    ("beard", "the person has a {}", "the person does not have a {}"),
    ("skirt", "the person is wearing a {}", "the person is not wearing a {}"),
    ("bicycle", "the person is riding a {}", "the person is not riding a {}"),
    ("belt", "the person is wearing a {}", "the person is not wearing a {}"),
];

/// Words used by generated captions around attribute phrases.
pub const CAPTION_WORDS: [&str; 4] = ["a", "person", "with", "no"];

impl AttributeTable {
    /// The first `k` entries of the built-in pedestrian attribute list.
    pub fn builtin(k: usize) -> Result<Self> {
        if k == 0 || k > DEFAULT_ATTRIBUTES.len() {
            return Err(Error::Config {
                field: "num_attributes",
                reason: format!("built-in table supports 1..={} attributes", DEFAULT_ATTRIBUTES.len()),
            });
        }
        let raw = DEFAULT_ATTRIBUTES[..k]
            .iter()
            .enumerate()
            .map(|(id, (p, pos, neg))| RawAttributeEntry {
                id,
                phrase: (*p).into(),
                pos: (*pos).into(),
                neg: (*neg).into(),
            })
            .collect::<Vec<_>>();
        Self::try_from(raw)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AttributeEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&AttributeEntry> {
        self.entries.get(id)
    }

    /// Every word the table can produce, plus the caption connectives.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut all: Vec<String> = CAPTION_WORDS.iter().map(|s| s.to_string()).collect();
        for e in &self.entries {
            all.extend(e.phrase.iter().cloned());
            all.extend(e.positive_template.iter().filter(|w| *w != SLOT).cloned());
            all.extend(e.negative_template.iter().filter(|w| *w != SLOT).cloned());
        }
        Vocabulary::from_words(all)
    }

    /// Hex SHA-256 of the canonical JSON-like rendering of the table.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(format!("{}|{}|{}|{}\n", e.id, e.phrase.join(" "), e.positive_template.join(" "), e.negative_template.join(" ")));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Present (`positive_ids`) and absent (`negative_ids`) attributes of one
/// caption; disjoint and, when produced by extraction, exhaustive.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeAnnotation {
    pub positive_ids: BTreeSet<usize>,
    pub negative_ids: BTreeSet<usize>,
}

impl AttributeAnnotation {
    pub fn validate(&self, table: &AttributeTable) -> Result<()> {
        if let Some(id) = self.positive_ids.intersection(&self.negative_ids).next() {
            return Err(Error::Annotation(format!("attribute {id} is both present and absent")));
        }
        if let Some(id) = self.positive_ids.iter().chain(&self.negative_ids).find(|&&i| i >= table.len()) {
            return Err(Error::Annotation(format!("attribute {id} not in a table of {}", table.len())));
        }
        Ok(())
    }

    /// Exchanges present and absent sets.
    pub fn swapped(&self) -> Self {
        Self { positive_ids: self.negative_ids.clone(), negative_ids: self.positive_ids.clone() }
    }
}

/// Detects attribute phrases in a lower-cased caption. A phrase counts as
/// present unless one of [`NEGATION_WORDS`] occurs in the two words before
/// it; negated or unmentioned attributes are absent. When a phrase occurs
/// both negated and plain, the negation wins.
pub fn extract_attributes<S: AsRef<str>>(caption: &[S], table: &AttributeTable) -> AttributeAnnotation {
    let text: Vec<&str> = caption.iter().map(AsRef::as_ref).collect();
    let mut ann = AttributeAnnotation::default();
    for entry in table.entries() {
        let n = entry.phrase.len();
        let mut seen = false;
        let mut negated = false;
        if text.len() >= n {
            for start in 0..=text.len() - n {
                if text[start..start + n].iter().zip(&entry.phrase).all(|(a, b)| *a == b) {
                    seen = true;
                    let lo = start.saturating_sub(NEGATION_WINDOW);
                    if text[lo..start].iter().any(|w| NEGATION_WORDS.contains(w)) {
                        negated = true;
                    }
                }
            }
        }
        if seen && !negated {
            ann.positive_ids.insert(entry.id);
        } else {
            ann.negative_ids.insert(entry.id);
        }
    }
    ann
}

/// Token ids of templated prompt sentences, one per annotated attribute.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positive: Vec<(usize, Vec<usize>)>,
    pub negative: Vec<(usize, Vec<usize>)>,
}

impl PromptSet {
    pub fn swapped(&self) -> Self {
        Self { positive: self.negative.clone(), negative: self.positive.clone() }
    }
}

pub fn fill_template(template: &[String], phrase: &[String]) -> Vec<String> {
    template
        .iter()
        .flat_map(|w| if w == SLOT { phrase.to_vec() } else { alloc::vec![w.clone()] })
        .collect()
}

pub fn render_prompts(ann: &AttributeAnnotation, table: &AttributeTable, vocab: &Vocabulary) -> Result<PromptSet> {
    ann.validate(table)?;
    let mut missing = BTreeSet::new();
    let mut render = |ids: &BTreeSet<usize>, positive: bool| -> Vec<(usize, Vec<usize>)> {
        ids.iter()
            .filter_map(|&id| {
                let e = &table.entries()[id];
                let t = if positive { &e.positive_template } else { &e.negative_template };
                match vocab.tokenize(&fill_template(t, &e.phrase)) {
                    Ok(tokens) => Some((id, tokens)),
                    Err(Error::UnknownWords(w)) => {
                        missing.extend(w);
                        None
                    }
                    Err(_) => None,
                }
            })
            .collect()
    };
    let positive = render(&ann.positive_ids, true);
    let negative = render(&ann.negative_ids, false);
    if !missing.is_empty() {
        return Err(Error::UnknownWords(missing.into_iter().collect()));
    }
    Ok(PromptSet { positive, negative })
}

/// Balance factor `Count(positive) / Count(negative)`, or 1 when either
/// count is zero.
pub fn gamma(pos_count: usize, neg_count: usize) -> f64 {
    if pos_count == 0 || neg_count == 0 {
        1.0
    } else {
        pos_count as f64 / neg_count as f64
    }
}

/// Caption words: `a person with <present…> no <absent> no <absent>`.
pub fn render_caption(table: &AttributeTable, positives: &[usize], negatives: &[usize]) -> Vec<String> {
    let mut out: Vec<String> = ["a", "person"].iter().map(|s| s.to_string()).collect();
    if !positives.is_empty() {
        out.push("with".into());
        for &id in positives {
            out.extend(table.entries()[id].phrase.iter().cloned());
        }
    }
    append_negatives(&mut out, table, negatives);
    out
}

/// Appends one `no <phrase>` descriptor per attribute.
pub fn append_negatives(caption: &mut Vec<String>, table: &AttributeTable, negatives: &[usize]) {
    for &id in negatives {
        caption.push("no".into());
        caption.extend(table.entries()[id].phrase.iter().cloned());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_attr_table() -> AttributeTable {
        AttributeTable::try_from(vec![
            RawAttributeEntry {
                id: 0,
                phrase: "grey jacket".into(),
                pos: "the person is wearing a {}".into(),
                neg: "the person is not wearing a {}".into(),
            },
            RawAttributeEntry {
                id: 1,
                phrase: "glasses".into(),
                pos: "the person is wearing {}".into(),
                neg: "the person is not wearing {}".into(),
            },
        ])
        .unwrap()
    }

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn extracts_motivating_example() {
        let t = two_attr_table();
        let a = extract_attributes(&words("man wearing a grey jacket"), &t);
        assert_eq!(a.positive_ids, set(&[0]));
        assert_eq!(a.negative_ids, set(&[1]));
    }

    #[test]
    fn empty_caption_is_all_negative() {
        let t = two_attr_table();
        let a = extract_attributes::<&str>(&[], &t);
        assert!(a.positive_ids.is_empty());
        assert_eq!(a.negative_ids, set(&[0, 1]));
    }

    #[test]
    fn negation_window_is_two_words() {
        let t = two_attr_table();
        let a = extract_attributes(&words("not wearing glasses"), &t);
        assert!(a.positive_ids.is_empty());
        assert!(a.negative_ids.contains(&1));
        // "not" three words before the phrase is outside the window.
        let a = extract_attributes(&words("not wearing the glasses"), &t);
        assert_eq!(a.positive_ids, set(&[1]));
        let a = extract_attributes(&words("a person without a grey jacket"), &t);
        assert!(a.negative_ids.contains(&0));
        let a = extract_attributes(&words("glasses and no glasses"), &t);
        assert!(a.negative_ids.contains(&1));
    }

    #[test]
    fn renders_hat_prompts() {
        let table = AttributeTable::builtin(12).unwrap();
        let vocab = table.vocabulary();
        let ann = AttributeAnnotation { positive_ids: set(&[0]), negative_ids: BTreeSet::new() };
        let p = render_prompts(&ann, &table, &vocab).unwrap();
        assert_eq!(p.positive, vec![(0, vocab.tokenize(&words("the person is wearing a hat")).unwrap())]);
        assert!(p.negative.is_empty());
        let p = render_prompts(&ann.swapped(), &table, &vocab).unwrap();
        assert_eq!(p.negative, vec![(0, vocab.tokenize(&words("the person is not wearing a hat")).unwrap())]);
        let empty = render_prompts(&AttributeAnnotation::default(), &table, &vocab).unwrap();
        assert_eq!(empty, PromptSet::default());
    }

    #[test]
    fn render_reports_missing_words() {
        let table = AttributeTable::builtin(3).unwrap();
        let vocab = Vocabulary::from_words(["the", "person", "is", "wearing", "a"]);
        let ann = AttributeAnnotation { positive_ids: set(&[0, 1]), negative_ids: BTreeSet::new() };
        match render_prompts(&ann, &table, &vocab) {
            Err(Error::UnknownWords(w)) => assert_eq!(w, vec![String::from("glasses"), String::from("hat")]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_overlapping_annotation() {
        let table = AttributeTable::builtin(3).unwrap();
        let ann = AttributeAnnotation { positive_ids: set(&[1]), negative_ids: set(&[1]) };
        assert!(ann.validate(&table).is_err());
        let ann = AttributeAnnotation { positive_ids: set(&[7]), negative_ids: BTreeSet::new() };
        assert!(ann.validate(&table).is_err());
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma(4, 2), 2.0);
        assert_eq!(gamma(3, 3), 1.0);
        assert_eq!(gamma(0, 5), 1.0);
        assert_eq!(gamma(5, 0), 1.0);
    }

    #[test]
    fn table_validation() {
        let mut raw: Vec<RawAttributeEntry> = two_attr_table().into();
        raw[1].id = 2;
        assert!(AttributeTable::try_from(raw.clone()).is_err());
        raw[1].id = 1;
        raw[1].pos = "no slot here".into();
        assert!(AttributeTable::try_from(raw.clone()).is_err());
        raw[1].pos = "{} and {}".into();
        assert!(AttributeTable::try_from(raw.clone()).is_err());
        raw[1].pos = "with {}".into();
        raw[1].phrase = "grey jacket".into();
        assert!(AttributeTable::try_from(raw).is_err());
    }

    #[test]
    fn builtin_captions_round_trip_through_extraction() {
        let table = AttributeTable::builtin(12).unwrap();
        let cap = render_caption(&table, &[3, 0, 11], &[4, 1]);
        assert_eq!(cap.join(" "), "a person with grey jacket hat white shoes no long hair no glasses");
        let a = extract_attributes(&cap, &table);
        assert_eq!(a.positive_ids, set(&[0, 3, 11]));
        assert_eq!(a.negative_ids.len(), 9);
        assert!(table.vocabulary().tokenize(&cap).is_ok());
    }

    #[test]
    fn vocabulary_specials_lead() {
        let v = Vocabulary::from_words(["b", "a", "a", MASK]);
        assert_eq!(v.words(), &[SOS, EOS, MASK, "a", "b"]);
        assert_eq!((v.sos(), v.eos(), v.mask()), (0, 1, 2));
        assert!(Vocabulary::try_from(vec![String::from("x")]).is_err());
    }
}
