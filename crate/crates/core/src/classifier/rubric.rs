use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use async_trait::async_trait;
use serde::Deserialize;

use super::{ClassifierConfig, ClassifyError, Stage, TraceClassifier};
use crate::builder::compress_trace;
use crate::builder::BuildError;
use crate::gateway::{Gateway, TemplateId};
use crate::model::{AppliedItem, Classification, CompressedTrace, Rubric, RubricItem, TraceRecord};
use crate::responses::parse_json_object;

#[derive(Deserialize)]
struct TagReply {
    keywords: Vec<String>,
}

fn says_none(text: &str) -> bool {
    matches!(
        text.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase().as_str(),
        "none" | "no" | "n a"
    )
}

/// Stage one: which canonical keywords fit the trace. Keywords outside the
/// rubric are dropped.
pub async fn tag_keywords(
    gateway: &Gateway,
    question: &str,
    compressed: &CompressedTrace,
    rubric: &Rubric,
) -> Result<BTreeSet<String>, ClassifyError> {
    if rubric.is_empty() {
        return Ok(BTreeSet::new());
    }
    let listing = rubric
        .keywords()
        .map(|k| format!("- {k}"))
        .collect::<Vec<_>>()
        .join("\n");
    let request = gateway
        .request(TemplateId::TagKeywords)
        .var("question", question)
        .var("trace", compressed.summary.as_str())
        .var("keywords", listing);
    let reply = gateway
        .complete(request)
        .await
        .map_err(ClassifyError::stage(Stage::Tag))?;
    if says_none(&reply.text) {
        return Ok(BTreeSet::new());
    }
    let parsed: TagReply =
        parse_json_object(&reply.text).ok_or_else(|| ClassifyError::Unparseable {
            stage: Stage::Tag,
            detail: reply.text.chars().take(200).collect(),
        })?;
    let mut tags = BTreeSet::new();
    for keyword in parsed.keywords {
        let keyword = keyword.trim();
        if rubric.keyword_index.contains_key(keyword) {
            tags.insert(keyword.to_string());
        } else {
            tracing::warn!(trace = %compressed.trace_id, keyword, "dropping unknown tagged keyword");
        }
    }
    Ok(tags)
}

/// Items indexed under any of `tags`, in rubric order.
pub fn assemble_mini_rubric(tags: &BTreeSet<String>, rubric: &Rubric) -> Vec<RubricItem> {
    let ids: BTreeSet<&str> = tags
        .iter()
        .filter_map(|t| rubric.keyword_index.get(t))
        .flatten()
        .map(String::as_str)
        .collect();
    rubric
        .items
        .iter()
        .filter(|item| ids.contains(item.id.as_str()))
        .cloned()
        .collect()
}

#[derive(Clone)]
pub struct ApplyOptions {
    pub exemplars: Arc<BTreeMap<String, String>>,
    pub excerpt_chars: usize,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions {
            exemplars: Arc::default(),
            excerpt_chars: super::DEFAULT_EXCERPT_CHARS,
        }
    }
}

fn excerpt(text: &str, limit: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= limit {
        flat
    } else {
        let mut cut: String = flat.chars().take(limit).collect();
        cut.push_str(" ...");
        cut
    }
}

/// Checklist text for the application prompt. Each item starts with
/// `[<id>]` and lists its checks on `Check:` lines.
pub fn render_items(items: &[RubricItem], options: &ApplyOptions) -> String {
    items
        .iter()
        .map(|item| {
            let mut block = format!(
                "[{}] keyword: {}\nError: {}\n",
                item.id, item.canonical_keyword, item.description
            );
            for check in &item.verification {
                block.push_str(&format!("Check: {}\n", excerpt(check, usize::MAX)));
            }
            let example = options
                .exemplars
                .get(&item.source_trace_id)
                .map(|t| excerpt(t, options.excerpt_chars))
                .unwrap_or_else(|| "(not available)".to_string());
            block.push_str(&format!(
                "Example (trace {}): {example}\n",
                item.source_trace_id
            ));
            block
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Deserialize)]
struct ApplyReply {
    applied: Vec<AppliedEntry>,
}

#[derive(Deserialize)]
struct AppliedEntry {
    item_id: String,
    #[serde(default)]
    evidence: String,
}

async fn apply_chunk(
    gateway: &Gateway,
    question: &str,
    compressed: &CompressedTrace,
    chunk: &[RubricItem],
    options: &ApplyOptions,
    template: TemplateId,
) -> Result<Vec<AppliedItem>, ClassifyError> {
    let stage = if template == TemplateId::ConfirmItems {
        Stage::Confirm
    } else {
        Stage::Apply
    };
    let request = gateway
        .request(template)
        .var("question", question)
        .var("trace", compressed.summary.as_str())
        .var("items", render_items(chunk, options));
    // Oversized checklists are split and the halves applied separately.
    if chunk.len() > 1 && !gateway.fits(&request).map_err(ClassifyError::stage(stage))? {
        let (left, right) = chunk.split_at(chunk.len() / 2);
        let mut applied =
            Box::pin(apply_chunk(gateway, question, compressed, left, options, template)).await?;
        applied.extend(
            Box::pin(apply_chunk(gateway, question, compressed, right, options, template)).await?,
        );
        return Ok(applied);
    }
    let reply = gateway
        .complete(request)
        .await
        .map_err(ClassifyError::stage(stage))?;
    if says_none(&reply.text) {
        return Ok(Vec::new());
    }
    let parsed: ApplyReply =
        parse_json_object(&reply.text).ok_or_else(|| ClassifyError::Unparseable {
            stage,
            detail: reply.text.chars().take(200).collect(),
        })?;
    Ok(parsed
        .applied
        .into_iter()
        .map(|e| AppliedItem {
            item_id: e.item_id.trim().to_string(),
            evidence: e.evidence,
        })
        .collect())
}

/// Stage two: which mini-rubric items apply to the trace. Ids outside the
/// mini-rubric are dropped; results follow mini-rubric order.
pub async fn apply_rubric(
    gateway: &Gateway,
    question: &str,
    compressed: &CompressedTrace,
    mini: &[RubricItem],
    options: &ApplyOptions,
    template: TemplateId,
) -> Result<Vec<AppliedItem>, ClassifyError> {
    if mini.is_empty() {
        return Ok(Vec::new());
    }
    let raw = apply_chunk(gateway, question, compressed, mini, options, template).await?;
    let mut evidence: BTreeMap<String, String> = BTreeMap::new();
    for entry in raw {
        if mini.iter().any(|item| item.id == entry.item_id) {
            evidence.entry(entry.item_id).or_insert(entry.evidence);
        } else {
            tracing::warn!(trace = %compressed.trace_id, item = %entry.item_id, "dropping applied id outside the mini-rubric");
        }
    }
    Ok(mini
        .iter()
        .filter_map(|item| {
            evidence.remove(&item.id).map(|evidence| AppliedItem {
                item_id: item.id.clone(),
                evidence,
            })
        })
        .collect())
}

/// Two-stage rubric judge: tag keywords, gather the mini-rubric, apply it,
/// optionally confirm, and call the trace incorrect if anything survives.
pub struct RubricClassifier {
    rubric: Arc<Rubric>,
    second_filter: bool,
    compress: bool,
    options: ApplyOptions,
}

impl RubricClassifier {
    pub fn new(
        rubric: Arc<Rubric>,
        config: &ClassifierConfig,
        exemplars: Arc<BTreeMap<String, String>>,
    ) -> Result<RubricClassifier, ClassifyError> {
        config.validate()?;
        let rubric = match config.rubric_size {
            Some(n) => Arc::new(rubric.truncate(n, config.seed)?),
            None => rubric,
        };
        Ok(RubricClassifier {
            rubric,
            second_filter: config.second_filter,
            compress: config.compress_at_inference,
            options: ApplyOptions {
                exemplars,
                excerpt_chars: config.excerpt_chars,
            },
        })
    }

    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }
}

#[async_trait]
impl TraceClassifier for RubricClassifier {
    fn name(&self) -> String {
        "rubric".to_string()
    }

    async fn classify(
        &self,
        gateway: &Gateway,
        record: &TraceRecord,
    ) -> Result<Classification, ClassifyError> {
        let compressed = compress_trace(gateway, record, self.compress)
            .await
            .map_err(|e| match e {
                BuildError::Compression { source, .. } => ClassifyError::Stage {
                    stage: Stage::Compress,
                    source,
                },
                other => ClassifyError::Unparseable {
                    stage: Stage::Compress,
                    detail: other.to_string(),
                },
            })?;
        let tags = tag_keywords(gateway, &record.question, &compressed, &self.rubric).await?;
        let mini = assemble_mini_rubric(&tags, &self.rubric);
        let mut applied = apply_rubric(
            gateway,
            &record.question,
            &compressed,
            &mini,
            &self.options,
            TemplateId::ApplyItems,
        )
        .await?;
        if self.second_filter && !applied.is_empty() {
            let candidates: Vec<RubricItem> = mini
                .iter()
                .filter(|item| applied.iter().any(|a| a.item_id == item.id))
                .cloned()
                .collect();
            let confirmed = apply_rubric(
                gateway,
                &record.question,
                &compressed,
                &candidates,
                &self.options,
                TemplateId::ConfirmItems,
            )
            .await?;
            applied.retain(|a| confirmed.iter().any(|c| c.item_id == a.item_id));
        }
        Ok(Classification::from_applied(record.id.clone(), tags, applied))
    }
}
