//! Rubric construction from the incorrect traces of a training set:
//! compression, item extraction and keyword clustering.

use std::collections::{BTreeMap, BTreeSet};

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::TraceDataset;
use crate::gateway::{Gateway, GatewayError, TemplateId};
use crate::model::{
    truncate_words, word_count, CompressedTrace, Label, ModelError, Rubric, RubricItem, RubricMeta,
    TraceRecord, MAX_DESCRIPTION_WORDS,
};
use crate::responses::parse_json_object;

/// Exemplar shown to the extractor.
pub const EXAMPLE_ITEM: &str = r#"{"description": "Treats a gauge pressure reading as absolute pressure, so the gas-law calculation uses a pressure that is too low.", "keyword": "pressure units", "verification": ["Check whether a pressure stated as gauge is converted to absolute before it is used in PV = nRT.", "Look for atmospheric pressure being omitted when a tank or vessel pressure is given."]}"#;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("trace {0} is empty")]
    EmptyTrace(String),
    #[error("trace {0} is not labeled incorrect")]
    NotIncorrect(String),
    #[error("compressing trace {trace_id}: {source}")]
    Compression {
        trace_id: String,
        source: GatewayError,
    },
    #[error("extracting from trace {trace_id}: {source}")]
    Extraction {
        trace_id: String,
        source: GatewayError,
    },
    #[error("clustering keywords: {0}")]
    Clustering(GatewayError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl BuildError {
    /// Script misses and configuration problems abort a build; other
    /// per-trace failures are recorded and skipped.
    fn is_fatal(&self) -> bool {
        let source = match self {
            BuildError::Compression { source, .. } | BuildError::Extraction { source, .. } => source,
            _ => return true,
        };
        matches!(source, GatewayError::ScriptMiss { .. } | GatewayError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub compress: bool,
    pub cluster: bool,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            compress: true,
            cluster: true,
            seed: 0,
        }
    }
}

/// Summarizes `record`'s trace, or passes it through when `enabled` is false.
pub async fn compress_trace(
    gateway: &Gateway,
    record: &TraceRecord,
    enabled: bool,
) -> Result<CompressedTrace, BuildError> {
    if record.trace.trim().is_empty() {
        return Err(BuildError::EmptyTrace(record.id.clone()));
    }
    if !enabled {
        return Ok(CompressedTrace::passthrough(record));
    }
    let request = gateway
        .request(TemplateId::Compress)
        .var("question", record.question.as_str())
        .var("trace", record.trace.as_str());
    let reply = gateway
        .complete(request)
        .await
        .map_err(|source| BuildError::Compression {
            trace_id: record.id.clone(),
            source,
        })?;
    let summary = reply.text.trim();
    Ok(CompressedTrace {
        trace_id: record.id.clone(),
        // An empty summary carries nothing; fall back to the raw trace.
        summary: if summary.is_empty() {
            record.trace.clone()
        } else {
            summary.to_string()
        },
        compressed: !summary.is_empty(),
    })
}

#[derive(Deserialize)]
struct ExtractionReply {
    items: Vec<DraftItem>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Checks {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
struct DraftItem {
    description: String,
    keyword: String,
    verification: Checks,
}

struct Draft {
    description: String,
    keyword: String,
    verification: Vec<String>,
}

fn parse_extraction(text: &str) -> Option<Vec<Draft>> {
    let reply: ExtractionReply = parse_json_object(text)?;
    reply
        .items
        .into_iter()
        .map(|d| {
            let verification: Vec<String> = match d.verification {
                Checks::One(s) => vec![s],
                Checks::Many(v) => v,
            }
            .into_iter()
            .map(|s| s.trim().to_string())
            .collect();
            let description = d.description.trim().to_string();
            let keyword = d.keyword.trim().to_string();
            let ok = !description.is_empty()
                && !keyword.is_empty()
                && !verification.is_empty()
                && verification.iter().all(|v| !v.is_empty());
            ok.then_some(Draft {
                description,
                keyword,
                verification,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Extraction {
    /// Items in response order; ids are provisional (`<trace id>#<n>`).
    Items {
        items: Vec<RubricItem>,
        truncated: usize,
    },
    /// No usable reply after one re-prompt.
    Failed { reason: String },
}

/// Mines rubric items from one incorrect trace.
///
/// An unparseable reply or an over-long description triggers one re-prompt.
/// Descriptions still over the limit after that are cut to 25 words.
pub async fn extract_items(
    gateway: &Gateway,
    record: &TraceRecord,
    compressed: &CompressedTrace,
) -> Result<Extraction, BuildError> {
    if record.label != Some(Label::Incorrect) {
        return Err(BuildError::NotIncorrect(record.id.clone()));
    }
    if compressed.summary.trim().is_empty() {
        return Err(BuildError::EmptyTrace(record.id.clone()));
    }
    let mut feedback = String::new();
    let mut drafts = None;
    for attempt in 0..2 {
        let request = gateway
            .request(TemplateId::Extract)
            .var("question", record.question.as_str())
            .var(
                "solution",
                record.solution.as_deref().unwrap_or("(not available)"),
            )
            .var("trace", compressed.summary.as_str())
            .var("example_item", EXAMPLE_ITEM)
            .var("feedback", feedback.as_str());
        let reply = gateway
            .complete(request)
            .await
            .map_err(|source| BuildError::Extraction {
                trace_id: record.id.clone(),
                source,
            })?;
        match parse_extraction(&reply.text) {
            None => {
                drafts = None;
                feedback = "\nYour previous reply could not be parsed. Reply with the JSON object only, and give every item a description, a keyword and at least one verification entry.\n".to_string();
            }
            Some(parsed) => {
                let too_long = parsed
                    .iter()
                    .any(|d| word_count(&d.description) > MAX_DESCRIPTION_WORDS);
                drafts = Some(parsed);
                if !too_long {
                    break;
                }
                if attempt == 0 {
                    feedback = "\nSome descriptions in your previous reply were longer than 25 words. Keep every description under 25 words.\n".to_string();
                }
            }
        }
    }
    let Some(drafts) = drafts else {
        return Ok(Extraction::Failed {
            reason: "unparseable extraction reply after re-prompt".to_string(),
        });
    };
    let mut truncated = 0;
    let items = drafts
        .into_iter()
        .enumerate()
        .map(|(n, d)| {
            let description = if word_count(&d.description) > MAX_DESCRIPTION_WORDS {
                truncated += 1;
                tracing::warn!(trace = %record.id, "item description over 25 words; truncated");
                truncate_words(&d.description, MAX_DESCRIPTION_WORDS)
            } else {
                d.description
            };
            RubricItem {
                id: format!("{}#{}", record.id, n + 1),
                description,
                canonical_keyword: d.keyword.clone(),
                keyword: d.keyword,
                verification: d.verification,
                source_trace_id: record.id.clone(),
                source_question_id: record.question_id(),
            }
        })
        .collect();
    Ok(Extraction::Items { items, truncated })
}

/// Original keyword to canonical keyword.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordClusterMap {
    pub mapping: BTreeMap<String, String>,
}

impl KeywordClusterMap {
    pub fn identity<'a>(keywords: impl IntoIterator<Item = &'a str>) -> KeywordClusterMap {
        KeywordClusterMap {
            mapping: keywords
                .into_iter()
                .map(|k| (k.to_string(), k.to_string()))
                .collect(),
        }
    }

    pub fn canonical_count(&self) -> usize {
        self.mapping.values().collect::<BTreeSet<_>>().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClusterStatus {
    Applied,
    Disabled,
    Skipped { reason: String },
}

#[derive(Deserialize)]
struct ClusterReply {
    groups: Vec<ClusterGroup>,
}

#[derive(Deserialize)]
struct ClusterGroup {
    canonical: String,
    members: Vec<String>,
}

fn parse_grouping(text: &str, keywords: &BTreeSet<&str>) -> Result<KeywordClusterMap, String> {
    let reply: ClusterReply =
        parse_json_object(text).ok_or_else(|| "reply is not a grouping object".to_string())?;
    let mut mapping = BTreeMap::new();
    for group in reply.groups {
        let canonical = group.canonical.trim();
        if canonical.is_empty() {
            return Err("group with empty canonical keyword".to_string());
        }
        for member in group.members {
            let member = member.trim();
            if !keywords.contains(member) {
                return Err(format!("unknown keyword {member:?}"));
            }
            if let Some(previous) = mapping.insert(member.to_string(), canonical.to_string()) {
                if previous != canonical {
                    return Err(format!("keyword {member:?} placed in two groups"));
                }
            }
        }
    }
    for keyword in keywords {
        mapping
            .entry(keyword.to_string())
            .or_insert_with(|| keyword.to_string());
    }
    Ok(KeywordClusterMap { mapping })
}

/// Groups related original keywords and re-indexes the rubric under the
/// canonical ones. Item count and order never change. A grouping that names
/// unknown keywords is retried once; after that clustering is skipped.
pub async fn cluster_keywords(
    gateway: &Gateway,
    rubric: &Rubric,
) -> Result<(Rubric, KeywordClusterMap, ClusterStatus), BuildError> {
    let keywords = rubric.original_keywords();
    if keywords.is_empty() {
        return Ok((
            rubric.clone(),
            KeywordClusterMap::default(),
            ClusterStatus::Skipped {
                reason: "empty rubric".to_string(),
            },
        ));
    }
    let listing = keywords
        .iter()
        .map(|k| format!("- {k}"))
        .collect::<Vec<_>>()
        .join("\n");
    let mut feedback = String::new();
    let mut last_error = String::new();
    for _ in 0..2 {
        let request = gateway
            .request(TemplateId::Cluster)
            .var("keywords", listing.as_str())
            .var("feedback", feedback.as_str());
        let reply = gateway
            .complete(request)
            .await
            .map_err(BuildError::Clustering)?;
        match parse_grouping(&reply.text, &keywords) {
            Ok(map) => {
                let items = rubric
                    .items
                    .iter()
                    .cloned()
                    .map(|mut item| {
                        item.canonical_keyword = map.mapping[&item.keyword].clone();
                        item
                    })
                    .collect();
                let mut meta = rubric.meta.clone();
                meta.params.insert("clustered".to_string(), Value::Bool(true));
                let clustered = Rubric::new(rubric.domain.clone(), items, meta)?;
                return Ok((clustered, map, ClusterStatus::Applied));
            }
            Err(reason) => {
                tracing::warn!(%reason, "rejected keyword grouping");
                feedback = format!("\nYour previous grouping was rejected: {reason}. Use only keywords from the list.\n");
                last_error = reason;
            }
        }
    }
    let identity = KeywordClusterMap {
        mapping: rubric
            .items
            .iter()
            .map(|i| (i.keyword.clone(), i.canonical_keyword.clone()))
            .collect(),
    };
    Ok((
        rubric.clone(),
        identity,
        ClusterStatus::Skipped { reason: last_error },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceFailure {
    pub trace_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildStats {
    pub training_traces: usize,
    pub incorrect_traces: usize,
    pub items: usize,
    pub extraction_failures: Vec<TraceFailure>,
    /// Incorrect traces for which the extractor found nothing.
    pub empty_extractions: Vec<String>,
    pub truncated_descriptions: usize,
    /// Items whose description repeats an earlier one verbatim (kept).
    pub duplicate_descriptions: usize,
    pub original_keywords: usize,
    pub canonical_keywords: usize,
    pub keyword_reduction_ratio: f64,
    pub clustering: ClusterStatus,
    pub warnings: Vec<String>,
}

async fn mine_trace(
    gateway: &Gateway,
    record: &TraceRecord,
    compress: bool,
) -> Result<Extraction, BuildError> {
    let compressed = compress_trace(gateway, record, compress).await?;
    extract_items(gateway, record, &compressed).await
}

/// Full pipeline: incorrect traces, compression, extraction, aggregation,
/// clustering. Deterministic for a scripted provider.
pub async fn build_rubric(
    gateway: &Gateway,
    train: &TraceDataset,
    config: &BuildConfig,
) -> Result<(Rubric, BuildStats), BuildError> {
    let incorrect: Vec<&TraceRecord> = train
        .records
        .iter()
        .filter(|r| r.label == Some(Label::Incorrect))
        .collect();
    let mut warnings = Vec::new();
    if incorrect.is_empty() {
        warnings.push("no incorrect traces in the training set; rubric is empty".to_string());
        tracing::warn!("no incorrect traces; building an empty rubric");
    }

    let results: Vec<Result<Extraction, BuildError>> = stream::iter(&incorrect)
        .map(|record| mine_trace(gateway, record, config.compress))
        .buffered(gateway.concurrency())
        .collect()
        .await;

    let mut items = Vec::new();
    let mut failures = Vec::new();
    let mut empty = Vec::new();
    let mut truncated_total = 0;
    for (record, result) in incorrect.iter().zip(results) {
        match result {
            Ok(Extraction::Items { items: mined, truncated }) => {
                truncated_total += truncated;
                if mined.is_empty() {
                    empty.push(record.id.clone());
                }
                items.extend(mined);
            }
            Ok(Extraction::Failed { reason }) => failures.push(TraceFailure {
                trace_id: record.id.clone(),
                reason,
            }),
            Err(e) if e.is_fatal() => return Err(e),
            Err(e) => failures.push(TraceFailure {
                trace_id: record.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    for (n, item) in items.iter_mut().enumerate() {
        item.id = format!("item-{:04}", n + 1);
    }
    let mut seen = BTreeSet::new();
    let duplicates = items
        .iter()
        .filter(|i| !seen.insert(i.description.to_lowercase()))
        .count();
    if duplicates > 0 {
        tracing::info!(duplicates, "duplicate item descriptions kept");
    }

    let mut params = BTreeMap::new();
    params.insert("compress".to_string(), Value::Bool(config.compress));
    params.insert("cluster".to_string(), Value::Bool(config.cluster));
    params.insert("train_digest".to_string(), Value::from(train.digest()));
    params.insert(
        "templates".to_string(),
        serde_json::json!({
            "compress": TemplateId::Compress.asset_name(),
            "extract": TemplateId::Extract.asset_name(),
            "cluster": TemplateId::Cluster.asset_name(),
        }),
    );
    let meta = RubricMeta {
        builder_model: gateway.provider_fingerprint(),
        params,
        seed: config.seed,
        ..RubricMeta::default()
    };
    let rubric = Rubric::new(train.domain.clone(), items, meta)?;
    let original_keywords = rubric.original_keywords().len();

    let (rubric, clustering) = if !config.cluster {
        (rubric, ClusterStatus::Disabled)
    } else if rubric.is_empty() {
        (
            rubric,
            ClusterStatus::Skipped {
                reason: "empty rubric".to_string(),
            },
        )
    } else {
        let (clustered, _, status) = cluster_keywords(gateway, &rubric).await?;
        if let ClusterStatus::Skipped { reason } = &status {
            warnings.push(format!("keyword clustering skipped: {reason}"));
        }
        (clustered, status)
    };

    let canonical_keywords = rubric.keyword_index.len();
    let stats = BuildStats {
        training_traces: train.len(),
        incorrect_traces: incorrect.len(),
        items: rubric.len(),
        extraction_failures: failures,
        empty_extractions: empty,
        truncated_descriptions: truncated_total,
        duplicate_descriptions: duplicates,
        original_keywords,
        canonical_keywords,
        keyword_reduction_ratio: if original_keywords == 0 {
            0.0
        } else {
            1.0 - canonical_keywords as f64 / original_keywords as f64
        },
        clustering,
        warnings,
    };
    Ok((rubric, stats))
}
