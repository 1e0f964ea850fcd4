//! Synthetic worlds: planted error families, traces carrying marker text for
//! each planted family, and provider rules that answer every pipeline prompt
//! from those markers alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{CorpusError, TraceDataset};
use crate::digest;
use crate::gateway::{CompletionRequest, ProviderScript, TemplateId};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsError, MetricsReport};
use crate::model::{Classification, Label, Rubric, TraceRecord};

pub const DOMAIN: &str = "synthetic";
pub const NOISE_MARKER: &str = "<<explore>>";
const SENTINEL_OPEN: &str = "<<flaw:";
const SENTINEL_CLOSE: &str = ">>";
const VARIANT_SUFFIX: &str = "-error";
const PHANTOM_FAMILY: &str = "phantom-step";
// Keeps world draws independent of splits and samples made with the same seed.
const WORLD_STREAM: u64 = 0x5747;

const FAMILY_NAMES: [(&str, &str); 10] = [
    ("sign-flip", "drops a minus sign while moving a term across the equation"),
    ("unit-mismatch", "adds quantities expressed in different units"),
    ("off-by-one", "counts the endpoints of a range one time too many"),
    ("dropped-term", "loses a term when expanding the product"),
    ("wrong-formula", "uses the area formula where the perimeter was asked"),
    ("premature-stop", "stops after the first candidate without checking the rest"),
    ("misread-question", "answers for the quantity that was given instead of the one asked"),
    ("arithmetic-slip", "miscomputes a product in an intermediate step"),
    ("bad-rounding", "rounds an intermediate value and carries the error forward"),
    ("case-omission", "ignores the negative case of an absolute value"),
];

pub fn sentinel(tag: &str) -> String {
    format!("{SENTINEL_OPEN}{tag}{SENTINEL_CLOSE}")
}

/// Family tags of all markers in `text`, in order of first appearance.
pub fn sentinels_in(text: &str) -> Vec<String> {
    let mut found: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find(SENTINEL_OPEN) {
        let after = &rest[start + SENTINEL_OPEN.len()..];
        match after.find(SENTINEL_CLOSE) {
            Some(end) => {
                let tag = &after[..end];
                if !tag.is_empty() && !found.iter().any(|f| f == tag) {
                    found.push(tag.to_string());
                }
                rest = &after[end + SENTINEL_CLOSE.len()..];
            }
            None => break,
        }
    }
    found
}

fn listed_keywords(listing: &str) -> Vec<String> {
    listing
        .lines()
        .filter_map(|l| l.trim().strip_prefix("- "))
        .map(|k| k.trim().to_string())
        .filter(|k| !k.is_empty())
        .collect()
}

/// Provider behavior for a synthetic world. Every answer is derived from the
/// markers present in the request slots.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelRules {
    pub families: Vec<String>,
    /// Families the extractor never reports.
    #[serde(default)]
    pub never_extract: BTreeSet<String>,
    /// Extract either `<tag>` or `<tag>-error` as the keyword, so clustering
    /// has near-duplicates to merge.
    #[serde(default)]
    pub keyword_variants: bool,
}

impl SentinelRules {
    pub fn family_of_keyword(&self, keyword: &str) -> Option<&str> {
        let base = keyword.strip_suffix(VARIANT_SUFFIX).unwrap_or(keyword);
        self.families
            .iter()
            .find(|f| f.as_str() == keyword || f.as_str() == base)
            .map(String::as_str)
    }

    fn keyword_for(&self, trace: &str, tag: &str) -> String {
        let variant = self.keyword_variants
            && digest::sha256_hex(format!("{trace}\u{0}{tag}").as_bytes())
                .as_bytes()
                .last()
                .is_some_and(|b| b % 2 == 1);
        if variant {
            format!("{tag}{VARIANT_SUFFIX}")
        } else {
            tag.to_string()
        }
    }

    pub fn respond(&self, request: &CompletionRequest) -> Option<String> {
        let slot = |name: &str| request.get(name).unwrap_or("");
        let trace = slot("trace");
        let text = match request.template {
            TemplateId::Grade => {
                if slot("final_answer").trim() == slot("solution").trim() {
                    "CORRECT".to_string()
                } else {
                    "INCORRECT".to_string()
                }
            }
            TemplateId::Compress => {
                let kept: Vec<&str> = trace.lines().filter(|l| !l.contains(NOISE_MARKER)).collect();
                if kept.is_empty() {
                    trace.to_string()
                } else {
                    kept.join("\n")
                }
            }
            TemplateId::Extract => {
                let items: Vec<_> = sentinels_in(trace)
                    .into_iter()
                    .filter(|tag| self.families.contains(tag) && !self.never_extract.contains(tag))
                    .map(|tag| {
                        json!({
                            "description": format!("Applies the {tag} step wrongly, which carries an error into the final answer."),
                            "keyword": self.keyword_for(trace, &tag),
                            "verification": [format!("Look for the marker {} in the reasoning.", sentinel(&tag))],
                        })
                    })
                    .collect();
                json!({ "items": items }).to_string()
            }
            TemplateId::Cluster => {
                let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for keyword in listed_keywords(slot("keywords")) {
                    let canonical = self.family_of_keyword(&keyword).unwrap_or(&keyword).to_string();
                    groups.entry(canonical).or_default().push(keyword);
                }
                let groups: Vec<_> = groups
                    .into_iter()
                    .map(|(canonical, members)| json!({"canonical": canonical, "members": members}))
                    .collect();
                json!({ "groups": groups }).to_string()
            }
            TemplateId::TagKeywords => {
                let present = sentinels_in(trace);
                let tagged: Vec<String> = listed_keywords(slot("keywords"))
                    .into_iter()
                    .filter(|k| {
                        self.family_of_keyword(k)
                            .is_some_and(|f| present.iter().any(|p| p == f))
                    })
                    .collect();
                json!({ "keywords": tagged }).to_string()
            }
            TemplateId::ApplyItems | TemplateId::ConfirmItems => {
                let mut applied = Vec::new();
                let mut current: Option<&str> = None;
                for line in slot("items").lines() {
                    if let Some(rest) = line.strip_prefix('[') {
                        current = rest.split(']').next();
                    } else if let (Some(id), Some(check)) = (current, line.strip_prefix("Check:")) {
                        let hit = sentinels_in(check)
                            .into_iter()
                            .find_map(|tag| trace.lines().find(|l| l.contains(&sentinel(&tag))));
                        if let Some(evidence) = hit {
                            applied.push(json!({"item_id": id, "evidence": evidence.trim()}));
                            current = None;
                        }
                    }
                }
                json!({ "applied": applied }).to_string()
            }
            TemplateId::Baseline(k) => {
                let flawed = trace.contains(SENTINEL_OPEN);
                match (k >= 4, flawed) {
                    (false, true) => "INCORRECT",
                    (false, false) => "CORRECT",
                    (true, true) => "CONTINUE THINKING",
                    (true, false) => "ANSWER NOW",
                }
                .to_string()
            }
        };
        Some(text)
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("predictions for traces outside the world: {}", .0.join(", "))]
    UnknownTraces(Vec<String>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub families: usize,
    pub traces: usize,
    pub incorrect_fraction: f64,
    /// Adds a never-extracted family and a correct decoy trace carrying a
    /// marker.
    pub adversarial: bool,
    pub keyword_variants: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            families: 6,
            traces: 120,
            incorrect_fraction: 0.5,
            adversarial: false,
            keyword_variants: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Family {
    pub tag: String,
    pub description: String,
}

/// Ground truth written next to the traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub config: WorldConfig,
    pub families: Vec<Family>,
    /// Planted families per trace; empty for correct traces.
    pub planted: BTreeMap<String, BTreeSet<String>>,
    /// Correct traces that nonetheless carry a marker.
    #[serde(default)]
    pub decoys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub truth: WorldTruth,
    pub dataset: TraceDataset,
    pub script: ProviderScript,
}

fn family_list(n: usize) -> Vec<Family> {
    (0..n)
        .map(|i| match FAMILY_NAMES.get(i) {
            Some((tag, description)) => Family {
                tag: tag.to_string(),
                description: description.to_string(),
            },
            None => Family {
                tag: format!("family-{i}"),
                description: format!("makes planted mistake number {i}"),
            },
        })
        .collect()
}

fn trace_text(
    rng: &mut ChaCha8Rng,
    (a, b, c): (i64, i64, i64),
    flaws: &[(String, String)],
    final_answer: i64,
) -> String {
    let mut steps = vec![
        format!("Read the problem; the given values are {a}, {b} and {c}."),
        format!("Multiply {b} by {c} to get {}.", b * c),
    ];
    for (tag, description) in flaws {
        steps.push(format!("{} Here the solver {description}.", sentinel(tag)));
    }
    steps.push(format!("Add {a} to the product, giving {final_answer}."));
    let mut lines = Vec::new();
    for (n, step) in steps.into_iter().enumerate() {
        if rng.gen_bool(0.4) {
            lines.push(format!(
                "{NOISE_MARKER} Maybe another route works; try case {}.",
                rng.gen_range(1..100)
            ));
        }
        lines.push(format!("Step {}: {step}", n + 1));
    }
    lines.push(format!("Final answer: {final_answer}"));
    lines.join("\n")
}

/// Deterministic world for the given parameters.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, SynthError> {
    if config.families == 0 {
        return Err(SynthError::InvalidParameter("at least one family is required".into()));
    }
    if config.traces == 0 {
        return Err(SynthError::InvalidParameter("at least one trace is required".into()));
    }
    if !(config.incorrect_fraction > 0.0 && config.incorrect_fraction < 1.0) {
        return Err(SynthError::InvalidParameter(format!(
            "incorrect fraction {} is outside (0, 1)",
            config.incorrect_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(WORLD_STREAM);
    let mut families = family_list(config.families);
    let mut never_extract = BTreeSet::new();
    if config.adversarial {
        families.push(Family {
            tag: PHANTOM_FAMILY.to_string(),
            description: "skips a justification the extractor never reports".to_string(),
        });
        never_extract.insert(PHANTOM_FAMILY.to_string());
    }
    let n_incorrect = (config.traces as f64 * config.incorrect_fraction).round() as usize;
    let mut order: Vec<usize> = (0..config.traces).collect();
    order.shuffle(&mut rng);
    let mut incorrect_rank: BTreeMap<usize, usize> = BTreeMap::new();
    for (rank, index) in order.iter().take(n_incorrect).enumerate() {
        incorrect_rank.insert(*index, rank);
    }
    let decoy_index = order.get(n_incorrect).copied().filter(|_| config.adversarial);

    let mut records = Vec::with_capacity(config.traces);
    let mut planted = BTreeMap::new();
    let mut decoys = Vec::new();
    for i in 0..config.traces {
        let id = format!("syn-{i:04}");
        let abc = (
            rng.gen_range(1..50),
            rng.gen_range(2..20),
            rng.gen_range(2..20),
        );
        let answer = abc.0 + abc.1 * abc.2;
        let mut set = BTreeSet::new();
        if let Some(rank) = incorrect_rank.get(&i) {
            set.insert(families[rank % config.families].tag.clone());
            if rng.gen_bool(0.3) {
                set.insert(families[rng.gen_range(0..config.families)].tag.clone());
            }
            if config.adversarial && rank % 5 == 0 {
                set.insert(PHANTOM_FAMILY.to_string());
            }
        }
        let mut flaws: Vec<(String, String)> = families
            .iter()
            .filter(|f| set.contains(&f.tag))
            .map(|f| (f.tag.clone(), f.description.clone()))
            .collect();
        if Some(i) == decoy_index {
            flaws.push((families[0].tag.clone(), "double-checks this step and finds it fine".into()));
            decoys.push(id.clone());
        }
        let final_answer = if set.is_empty() {
            answer
        } else {
            answer + rng.gen_range(1..10)
        };
        let trace = trace_text(&mut rng, abc, &flaws, final_answer);
        records.push(TraceRecord {
            id: id.clone(),
            question: format!(
                "Problem {i}: compute {} + {} * {}.",
                abc.0, abc.1, abc.2
            ),
            solution: Some(answer.to_string()),
            trace,
            final_answer: Some(final_answer.to_string()),
            label: Some(if set.is_empty() {
                Label::Correct
            } else {
                Label::Incorrect
            }),
            domain: DOMAIN.to_string(),
        });
        planted.insert(id, set);
    }
    let dataset = TraceDataset::new(records, format!("synthetic world seed {}", config.seed))?;
    let script = ProviderScript {
        version: 1,
        entries: BTreeMap::new(),
        sentinel: Some(SentinelRules {
            families: families.iter().map(|f| f.tag.clone()).collect(),
            never_extract,
            keyword_variants: config.keyword_variants,
        }),
    };
    Ok(SyntheticWorld {
        truth: WorldTruth {
            config: config.clone(),
            families,
            planted,
            decoys,
        },
        dataset,
        script,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    std::fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl SyntheticWorld {
    pub fn rules(&self) -> &SentinelRules {
        self.script.sentinel.as_ref().expect("worlds always carry sentinel rules")
    }

    /// Writes `traces.jsonl`, `truth.json` and `script.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(&dir.join("traces.jsonl"), &self.dataset.to_jsonl())?;
        write_file(&dir.join("truth.json"), &pretty(&self.truth))?;
        write_file(&dir.join("script.json"), &pretty(&self.script))?;
        Ok(())
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("world types serialize");
    bytes.push(b'\n');
    bytes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub family_coverage: f64,
    pub covered_families: Vec<String>,
    pub missing_families: Vec<String>,
    /// Share of incorrect traces whose tags include a planted family.
    pub routing_fidelity: f64,
    pub metrics: MetricsReport,
}

/// How well a rubric and its predictions recover the planted truth.
pub fn evaluate_recovery(
    rubric: &Rubric,
    truth: &WorldTruth,
    rules: &SentinelRules,
    predictions: &[Classification],
) -> Result<RecoveryReport, SynthError> {
    let unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !truth.planted.contains_key(&p.trace_id))
        .map(|p| p.trace_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(SynthError::UnknownTraces(unknown));
    }
    let item_family = |item: &crate::model::RubricItem| -> Option<String> {
        rules
            .family_of_keyword(&item.keyword)
            .map(str::to_string)
            .or_else(|| item.verification.iter().flat_map(|v| sentinels_in(v)).next())
    };
    let covered: BTreeSet<String> = rubric.items.iter().filter_map(item_family).collect();
    let (covered_families, missing_families): (Vec<String>, Vec<String>) = truth
        .families
        .iter()
        .map(|f| f.tag.clone())
        .partition(|tag| covered.contains(tag));

    let mut cm = ConfusionMatrix::default();
    let mut incorrect = 0usize;
    let mut routed = 0usize;
    for p in predictions {
        let planted = &truth.planted[&p.trace_id];
        let gold = if planted.is_empty() {
            Label::Correct
        } else {
            Label::Incorrect
        };
        cm.record(gold, p.predicted);
        if !planted.is_empty() {
            incorrect += 1;
            let hit = p.tagged_keywords.iter().any(|k| {
                rules
                    .family_of_keyword(k)
                    .is_some_and(|f| planted.contains(f))
            });
            routed += usize::from(hit);
        }
    }
    Ok(RecoveryReport {
        family_coverage: covered_families.len() as f64 / truth.families.len() as f64,
        covered_families,
        missing_families,
        routing_fidelity: if incorrect == 0 {
            0.0
        } else {
            routed as f64 / incorrect as f64
        },
        metrics: compute_metrics(cm)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(seed: u64) -> SyntheticWorld {
        generate_world(&WorldConfig {
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn label_counts_follow_fraction() {
        let w = world(1);
        let incorrect = w
            .dataset
            .records
            .iter()
            .filter(|r| r.label == Some(Label::Incorrect))
            .count();
        assert_eq!((incorrect, w.dataset.len() - incorrect), (60, 60));
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(world(9), world(9));
        assert_ne!(world(9).dataset, world(10).dataset);
    }

    #[test]
    fn labels_agree_with_planted_sets() {
        let w = world(3);
        for r in &w.dataset.records {
            let planted = &w.truth.planted[&r.id];
            assert_eq!(r.label == Some(Label::Incorrect), !planted.is_empty());
            let found: BTreeSet<String> = sentinels_in(&r.trace).into_iter().collect();
            assert_eq!(&found, planted);
        }
    }

    #[test]
    fn every_family_planted() {
        let w = world(4);
        let used: BTreeSet<&String> = w.truth.planted.values().flatten().collect();
        assert_eq!(used.len(), 6);
    }

    #[test]
    fn bad_parameters_rejected() {
        for config in [
            WorldConfig { families: 0, ..WorldConfig::default() },
            WorldConfig { incorrect_fraction: 1.0, ..WorldConfig::default() },
            WorldConfig { incorrect_fraction: 0.0, ..WorldConfig::default() },
            WorldConfig { traces: 0, ..WorldConfig::default() },
        ] {
            assert!(matches!(generate_world(&config), Err(SynthError::InvalidParameter(_))));
        }
    }

    #[test]
    fn adversarial_cells_present() {
        let w = generate_world(&WorldConfig {
            adversarial: true,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_eq!(w.truth.decoys.len(), 1);
        let decoy = w.dataset.get(&w.truth.decoys[0]).unwrap();
        assert_eq!(decoy.label, Some(Label::Correct));
        assert!(!sentinels_in(&decoy.trace).is_empty());
        assert!(w.rules().never_extract.contains(PHANTOM_FAMILY));
    }

    #[test]
    fn marker_scan() {
        assert_eq!(
            sentinels_in("a <<flaw:x>> b <<flaw:y>> <<flaw:x>> <<flaw:"),
            vec!["x".to_string(), "y".to_string()]
        );
    }

    fn rules() -> SentinelRules {
        SentinelRules {
            families: vec!["sign-flip".into(), "off-by-one".into()],
            never_extract: BTreeSet::new(),
            keyword_variants: false,
        }
    }

    fn ask(template: TemplateId, vars: &[(&str, &str)]) -> String {
        let mut req = CompletionRequest::new(template);
        for (k, v) in vars {
            req = req.var(k, *v);
        }
        rules().respond(&req).unwrap()
    }

    #[test]
    fn rules_answer_each_template() {
        let flawed = "Step 1: fine\n<<explore>> noise\nStep 2: <<flaw:sign-flip>> oops";
        assert_eq!(ask(TemplateId::Compress, &[("trace", flawed)]), "Step 1: fine\nStep 2: <<flaw:sign-flip>> oops");
        assert_eq!(ask(TemplateId::Grade, &[("final_answer", "4"), ("solution", " 4 ")]), "CORRECT");
        let extracted: serde_json::Value = serde_json::from_str(&ask(TemplateId::Extract, &[("trace", flawed)])).unwrap();
        assert_eq!(extracted["items"][0]["keyword"], "sign-flip");
        let tagged = ask(TemplateId::TagKeywords, &[("trace", flawed), ("keywords", "- sign-flip\n- off-by-one")]);
        assert_eq!(tagged, r#"{"keywords":["sign-flip"]}"#);
        let items = "[item-0001] keyword: sign-flip\nError: x\nCheck: Look for <<flaw:sign-flip>>.\n\n[item-0002] keyword: off-by-one\nCheck: Look for <<flaw:off-by-one>>.";
        let applied = ask(TemplateId::ApplyItems, &[("trace", flawed), ("items", items)]);
        assert_eq!(applied, r#"{"applied":[{"evidence":"Step 2: <<flaw:sign-flip>> oops","item_id":"item-0001"}]}"#);
        assert_eq!(ask(TemplateId::Baseline(4), &[("trace", flawed)]), "CONTINUE THINKING");
        assert_eq!(ask(TemplateId::Baseline(0), &[("trace", "clean")]), "CORRECT");
    }

    #[test]
    fn cluster_merges_variants() {
        let reply = ask(TemplateId::Cluster, &[("keywords", "- off-by-one\n- sign-flip\n- sign-flip-error\n- other")]);
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v["groups"].as_array().unwrap().len(), 3);
        assert_eq!(v["groups"][2]["members"], json!(["sign-flip", "sign-flip-error"]));
    }

    #[test]
    fn empty_rubric_recovers_nothing() {
        let w = world(5);
        let preds: Vec<Classification> = w
            .dataset
            .records
            .iter()
            .map(|r| Classification::verdict(r.id.clone(), Label::Correct))
            .collect();
        let report = evaluate_recovery(
            &Rubric::empty(DOMAIN, Default::default()),
            &w.truth,
            w.rules(),
            &preds,
        )
        .unwrap();
        assert_eq!(report.family_coverage, 0.0);
        assert_eq!(report.metrics.specificity, 0.0);
    }

    #[test]
    fn unknown_prediction_ids_rejected() {
        let w = world(5);
        let preds = vec![Classification::verdict("nope", Label::Correct)];
        assert!(matches!(
            evaluate_recovery(&Rubric::empty(DOMAIN, Default::default()), &w.truth, w.rules(), &preds),
            Err(SynthError::UnknownTraces(_))
        ));
    }
}
