//! Domain types shared by every stage: traces, rubric items, the rubric
//! artifact and per-trace classifications.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::digest;

/// Current `rubric.json` schema version.
pub const RUBRIC_VERSION: u32 = 1;

/// Upper bound on the number of whitespace-separated words in an item description.
pub const MAX_DESCRIPTION_WORDS: usize = 25;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unsupported rubric version {0} (expected {RUBRIC_VERSION})")]
    UnsupportedVersion(u32),
    #[error("invalid rubric item {id}: {reason}")]
    InvalidItem { id: String, reason: String },
    #[error("duplicate rubric item id {0}")]
    DuplicateItem(String),
    #[error("keyword index is inconsistent with items: {0}")]
    InconsistentIndex(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed rubric document: {0}")]
    Malformed(String),
}

/// Binary correctness label. `Correct` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Incorrect = 0,
    Correct = 1,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Incorrect),
            1 => Some(Label::Correct),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn is_correct(self) -> bool {
        self == Label::Correct
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bit())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bit())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bit = u8::deserialize(deserializer)?;
        Label::from_bit(bit)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {bit}")))
    }
}

/// One ingested reasoning trace with its question, optional gold solution
/// and optional correctness label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub solution: Option<String>,
    pub trace: String,
    #[serde(default)]
    pub final_answer: Option<String>,
    #[serde(default)]
    pub label: Option<Label>,
    pub domain: String,
}

impl TraceRecord {
    pub fn char_len(&self) -> usize {
        self.trace.chars().count()
    }

    /// Stable identifier of the question text; the line schema carries none.
    pub fn question_id(&self) -> String {
        question_id(&self.question)
    }
}

pub fn question_id(question: &str) -> String {
    format!("q-{}", &digest::sha256_hex(question.as_bytes())[..12])
}

/// A trace reduced to the steps that influence its final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedTrace {
    pub trace_id: String,
    pub summary: String,
    /// False when compression was skipped and `summary` is the raw trace.
    pub compressed: bool,
}

impl CompressedTrace {
    pub fn passthrough(record: &TraceRecord) -> CompressedTrace {
        CompressedTrace {
            trace_id: record.id.clone(),
            summary: record.trace.clone(),
            compressed: false,
        }
    }
}

/// One mined failure mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricItem {
    pub id: String,
    pub description: String,
    pub keyword: String,
    pub canonical_keyword: String,
    pub verification: Vec<String>,
    pub source_trace_id: String,
    pub source_question_id: String,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max_words` whitespace-separated words.
pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

impl RubricItem {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| {
            Err(ModelError::InvalidItem {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.trim().is_empty() {
            return fail("empty id");
        }
        if self.description.trim().is_empty() {
            return fail("empty description");
        }
        if word_count(&self.description) > MAX_DESCRIPTION_WORDS {
            return fail("description exceeds 25 words");
        }
        if self.keyword.trim().is_empty() || self.canonical_keyword.trim().is_empty() {
            return fail("empty keyword");
        }
        if self.verification.is_empty() {
            return fail("no verification details");
        }
        if self.verification.iter().any(|v| v.trim().is_empty()) {
            return fail("empty verification entry");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricMeta {
    pub builder_model: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    pub seed: u64,
    pub item_count: usize,
    pub keyword_count: usize,
}

/// The error taxonomy: ordered items plus a canonical-keyword index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rubric {
    pub version: u32,
    pub domain: String,
    pub items: Vec<RubricItem>,
    pub keyword_index: BTreeMap<String, Vec<String>>,
    pub meta: RubricMeta,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RubricDocument {
    version: u32,
    domain: String,
    items: Vec<RubricItem>,
    keyword_index: BTreeMap<String, Vec<String>>,
    meta: RubricMeta,
}

/// Groups item ids by canonical keyword, preserving item order within each key.
pub fn build_keyword_index(items: &[RubricItem]) -> BTreeMap<String, Vec<String>> {
    let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for item in items {
        index
            .entry(item.canonical_keyword.clone())
            .or_default()
            .push(item.id.clone());
    }
    index
}

impl Rubric {
    /// Assembles a rubric, rebuilding the index and the count fields of `meta`.
    pub fn new(
        domain: impl Into<String>,
        items: Vec<RubricItem>,
        mut meta: RubricMeta,
    ) -> Result<Rubric, ModelError> {
        let keyword_index = build_keyword_index(&items);
        meta.item_count = items.len();
        meta.keyword_count = keyword_index.len();
        let rubric = Rubric {
            version: RUBRIC_VERSION,
            domain: domain.into(),
            items,
            keyword_index,
            meta,
        };
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn empty(domain: impl Into<String>, meta: RubricMeta) -> Rubric {
        Rubric::new(domain, Vec::new(), meta).expect("empty rubric is always valid")
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, id: &str) -> Option<&RubricItem> {
        self.items.iter().find(|item| item.id == id)
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.keyword_index.keys().map(String::as_str)
    }

    pub fn original_keywords(&self) -> BTreeSet<&str> {
        self.items.iter().map(|item| item.keyword.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.version != RUBRIC_VERSION {
            return Err(ModelError::UnsupportedVersion(self.version));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            item.validate()?;
            if !seen.insert(item.id.as_str()) {
                return Err(ModelError::DuplicateItem(item.id.clone()));
            }
        }
        let rebuilt = build_keyword_index(&self.items);
        if rebuilt != self.keyword_index {
            let stored: BTreeSet<_> = self.keyword_index.keys().collect();
            let expected: BTreeSet<_> = rebuilt.keys().collect();
            let detail = if stored != expected {
                format!("keys {stored:?} != canonical keywords {expected:?}")
            } else {
                "item lists differ from canonical keyword grouping".to_string()
            };
            return Err(ModelError::InconsistentIndex(detail));
        }
        if self.meta.item_count != self.items.len()
            || self.meta.keyword_count != self.keyword_index.len()
        {
            return Err(ModelError::InconsistentIndex(
                "meta counts disagree with items".to_string(),
            ));
        }
        Ok(())
    }

    /// Canonical form: sorted keys, UTF-8, no insignificant whitespace.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("rubric serializes to JSON");
        digest::canonical_json(&value)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Rubric, ModelError> {
        let raw: Value =
            serde_json::from_slice(bytes).map_err(|e| ModelError::Malformed(e.to_string()))?;
        if let Some(version) = raw.get("version").and_then(Value::as_u64) {
            if version != u64::from(RUBRIC_VERSION) {
                return Err(ModelError::UnsupportedVersion(version as u32));
            }
        }
        let doc: RubricDocument =
            serde_json::from_value(raw).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let rubric = Rubric {
            version: doc.version,
            domain: doc.domain,
            items: doc.items,
            keyword_index: doc.keyword_index,
            meta: doc.meta,
        };
        rubric.validate()?;
        Ok(rubric)
    }

    pub fn digest(&self) -> String {
        digest::sha256_hex(&self.to_canonical_bytes())
    }

    /// Uniform sample of `n` items without replacement, kept in rubric order.
    ///
    /// Samples for the same seed are nested: the `n`-item sample is a subset
    /// of every larger sample, since all sizes take a prefix of one seeded
    /// permutation.
    pub fn truncate(&self, n: usize, seed: u64) -> Result<Rubric, ModelError> {
        if n == 0 {
            return Err(ModelError::InvalidConfig(
                "rubric size must be at least 1".to_string(),
            ));
        }
        if n >= self.items.len() {
            return Ok(self.clone());
        }
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        let items = keep.into_iter().map(|i| self.items[i].clone()).collect();
        let mut meta = self.meta.clone();
        meta.params
            .insert("sample_size".to_string(), Value::from(n as u64));
        meta.params.insert("sample_seed".to_string(), Value::from(seed));
        Rubric::new(self.domain.clone(), items, meta)
    }

    /// The same items indexed by their original, unclustered keywords.
    pub fn unclustered(&self) -> Rubric {
        let items = self
            .items
            .iter()
            .cloned()
            .map(|mut item| {
                item.canonical_keyword = item.keyword.clone();
                item
            })
            .collect();
        Rubric::new(self.domain.clone(), items, self.meta.clone())
            .expect("unclustering preserves item validity")
    }
}

/// One applied rubric item with the judge's evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedItem {
    pub item_id: String,
    pub evidence: String,
}

/// Result of classifying one trace. Serialized as one `preds.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub trace_id: String,
    pub predicted: Label,
    pub tagged_keywords: BTreeSet<String>,
    #[serde(rename = "applied")]
    pub applied_items: Vec<AppliedItem>,
}

impl Classification {
    /// A trace is incorrect exactly when at least one item survived application.
    pub fn from_applied(
        trace_id: impl Into<String>,
        tagged_keywords: BTreeSet<String>,
        applied_items: Vec<AppliedItem>,
    ) -> Classification {
        let predicted = if applied_items.is_empty() {
            Label::Correct
        } else {
            Label::Incorrect
        };
        Classification {
            trace_id: trace_id.into(),
            predicted,
            tagged_keywords,
            applied_items,
        }
    }

    pub fn verdict(trace_id: impl Into<String>, predicted: Label) -> Classification {
        Classification {
            trace_id: trace_id.into(),
            predicted,
            tagged_keywords: BTreeSet::new(),
            applied_items: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, keyword: &str) -> RubricItem {
        RubricItem {
            id: id.to_string(),
            description: format!("Error pattern {id}"),
            keyword: keyword.to_string(),
            canonical_keyword: keyword.to_string(),
            verification: vec!["look for it".to_string()],
            source_trace_id: "t1".to_string(),
            source_question_id: "q-1".to_string(),
        }
    }

    fn sample_rubric(n: usize) -> Rubric {
        let items = (0..n)
            .map(|i| item(&format!("item-{i:04}"), &format!("kw{}", i % 7)))
            .collect();
        Rubric::new("test", items, RubricMeta::default()).unwrap()
    }

    #[test]
    fn label_serializes_as_bit() {
        assert_eq!(serde_json::to_string(&Label::Correct).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Label>("0").unwrap(), Label::Incorrect);
        assert!(serde_json::from_str::<Label>("2").is_err());
    }

    #[test]
    fn empty_rubric_round_trips() {
        let rubric = Rubric::empty("chem", RubricMeta::default());
        let bytes = rubric.to_canonical_bytes();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains(r#""items":[]"#));
        assert!(text.contains(r#""keyword_index":{}"#));
        assert_eq!(Rubric::from_slice(&bytes).unwrap(), rubric);
    }

    #[test]
    fn chemical_engineering_scale_round_trips() {
        let items = (0..296)
            .map(|i| item(&format!("item-{i:04}"), &format!("kw{:02}", i % 90)))
            .collect();
        let rubric = Rubric::new("chemical-engineering", items, RubricMeta::default()).unwrap();
        let back = Rubric::from_slice(&rubric.to_canonical_bytes()).unwrap();
        assert_eq!(back.items.len(), 296);
        assert_eq!(back.keyword_index.len(), 90);
        assert_eq!(back, rubric);
    }

    #[test]
    fn canonical_form_has_sorted_keys_and_no_whitespace() {
        let text = String::from_utf8(sample_rubric(3).to_canonical_bytes()).unwrap();
        assert!(text.starts_with(r#"{"domain":"test","items":[{"canonical_keyword""#));
        assert!(!text.contains(": ") && !text.contains('\n'));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut value = serde_json::to_value(sample_rubric(2)).unwrap();
        value["version"] = Value::from(2);
        let bytes = serde_json::to_vec(&value).unwrap();
        assert_eq!(
            Rubric::from_slice(&bytes),
            Err(ModelError::UnsupportedVersion(2))
        );
    }

    #[test]
    fn tampered_index_rejected() {
        let mut value = serde_json::to_value(sample_rubric(4)).unwrap();
        value["keyword_index"]["kw0"] = serde_json::json!(["item-0001"]);
        let err = Rubric::from_slice(&serde_json::to_vec(&value).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::InconsistentIndex(_)));
    }

    #[test]
    fn item_validation() {
        let mut long = item("a", "k");
        long.description = vec!["word"; 26].join(" ");
        assert!(long.validate().is_err());
        long.description = vec!["word"; 25].join(" ");
        assert!(long.validate().is_ok());
        let mut bare = item("b", "k");
        bare.verification.clear();
        assert!(bare.validate().is_err());
        bare.verification = vec![" ".to_string()];
        assert!(bare.validate().is_err());
    }

    #[test]
    fn truncate_rejects_zero() {
        assert!(matches!(
            sample_rubric(5).truncate(0, 1),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn truncate_identity_when_n_covers_rubric() {
        let rubric = sample_rubric(10);
        assert_eq!(rubric.truncate(10, 3).unwrap(), rubric);
        assert_eq!(rubric.truncate(50, 3).unwrap(), rubric);
    }

    #[test]
    fn truncate_to_25_of_250() {
        let rubric = sample_rubric(250);
        let small = rubric.truncate(25, 42).unwrap();
        assert_eq!(small.items.len(), 25);
        assert!(small
            .keyword_index
            .keys()
            .all(|k| rubric.keyword_index.contains_key(k)));
        small.validate().unwrap();
        let again = rubric.truncate(25, 42).unwrap();
        assert_eq!(small.to_canonical_bytes(), again.to_canonical_bytes());
    }

    #[test]
    fn truncation_is_nested_under_one_seed() {
        let rubric = sample_rubric(250);
        let ids = |n| -> BTreeSet<String> {
            rubric
                .truncate(n, 9)
                .unwrap()
                .items
                .into_iter()
                .map(|i| i.id)
                .collect()
        };
        let (a, b, c) = (ids(25), ids(50), ids(100));
        assert!(a.is_subset(&b) && b.is_subset(&c));
    }

    #[test]
    fn classification_decision_rule() {
        let none = Classification::from_applied("t", BTreeSet::new(), vec![]);
        assert_eq!(none.predicted, Label::Correct);
        let one = Classification::from_applied(
            "t",
            BTreeSet::from(["k".to_string()]),
            vec![AppliedItem {
                item_id: "a".into(),
                evidence: "seen".into(),
            }],
        );
        assert_eq!(one.predicted, Label::Incorrect);
        let line = serde_json::to_value(&one).unwrap();
        assert_eq!(line["applied"][0]["item_id"], "a");
        assert_eq!(line["predicted"], 0);
    }
}
