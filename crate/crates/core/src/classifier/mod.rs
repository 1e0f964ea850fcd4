//! Trace-correctness classifiers.
//!
//! Each strategy implements [`TraceClassifier`] and is registered by name in
//! a [`ClassifierRegistry`]: `rubric` for the two-stage rubric judge and
//! `baseline-0` through `baseline-5` for the single-prompt judges.

mod baseline;
mod rubric;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use async_trait::async_trait;
use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TraceDataset;
use crate::gateway::{Gateway, GatewayError};
use crate::model::{Classification, ModelError, Rubric, TraceRecord};

pub use baseline::BaselineClassifier;
pub use rubric::{
    apply_rubric, assemble_mini_rubric, render_items, tag_keywords, ApplyOptions, RubricClassifier,
};

/// Default length of the source-trace exemplar shown with each item.
pub const DEFAULT_EXCERPT_CHARS: usize = 1_500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Compress,
    Tag,
    Apply,
    Confirm,
    Baseline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Compress => "compress",
            Stage::Tag => "tag",
            Stage::Apply => "apply",
            Stage::Confirm => "confirm",
            Stage::Baseline => "baseline",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: GatewayError },
    #[error("{stage} stage: unparseable reply: {detail}")]
    Unparseable { stage: Stage, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ClassifyError {
    pub(crate) fn stage(stage: Stage) -> impl FnOnce(GatewayError) -> ClassifyError {
        move |source| ClassifyError::Stage { stage, source }
    }
}

/// Rubric judge or one of the six baseline prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Rubric,
    Baseline(u8),
}

impl Mode {
    pub fn name(self) -> String {
        match self {
            Mode::Rubric => "rubric".to_string(),
            Mode::Baseline(k) => format!("baseline-{k}"),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Mode {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "rubric" {
            return Ok(Mode::Rubric);
        }
        s.strip_prefix("baseline-")
            .or_else(|| s.strip_prefix("baseline_"))
            .and_then(|k| k.parse::<u8>().ok())
            .filter(|k| *k <= 5)
            .map(Mode::Baseline)
            .ok_or_else(|| ClassifyError::Config(format!("unknown classifier mode {s:?}")))
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub mode: Mode,
    pub second_filter: bool,
    pub rubric_size: Option<usize>,
    pub compress_at_inference: bool,
    pub seed: u64,
    pub excerpt_chars: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            mode: Mode::Rubric,
            second_filter: false,
            rubric_size: None,
            compress_at_inference: true,
            seed: 0,
            excerpt_chars: DEFAULT_EXCERPT_CHARS,
        }
    }
}

impl ClassifierConfig {
    pub fn baseline(k: u8) -> ClassifierConfig {
        ClassifierConfig {
            mode: Mode::Baseline(k),
            ..ClassifierConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        match self.mode {
            Mode::Baseline(k) if k > 5 => {
                Err(ClassifyError::Config(format!("baseline strategy {k} does not exist")))
            }
            Mode::Baseline(_) if self.second_filter => Err(ClassifyError::Config(
                "second filter is only valid in rubric mode".into(),
            )),
            Mode::Baseline(_) if self.rubric_size.is_some() => Err(ClassifyError::Config(
                "rubric size is only valid in rubric mode".into(),
            )),
            _ if self.rubric_size == Some(0) => {
                Err(ClassifyError::Config("rubric size must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Inputs a strategy may need besides its configuration.
#[derive(Clone, Default)]
pub struct ClassifierContext {
    pub rubric: Option<Arc<Rubric>>,
    /// Source-trace text by trace id, shown as item exemplars.
    pub exemplars: Arc<BTreeMap<String, String>>,
}

#[async_trait]
pub trait TraceClassifier: Send + Sync {
    fn name(&self) -> String;

    async fn classify(
        &self,
        gateway: &Gateway,
        record: &TraceRecord,
    ) -> Result<Classification, ClassifyError>;
}

type Factory =
    Box<dyn Fn(&ClassifierConfig, &ClassifierContext) -> Result<Box<dyn TraceClassifier>, ClassifyError> + Send + Sync>;

/// Classifier strategies selectable by name.
pub struct ClassifierRegistry {
    factories: BTreeMap<String, Factory>,
}

impl ClassifierRegistry {
    pub fn empty() -> ClassifierRegistry {
        ClassifierRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> ClassifierRegistry {
        let mut registry = ClassifierRegistry::empty();
        registry.register("rubric", |config, ctx| {
            let rubric = ctx.rubric.clone().ok_or_else(|| {
                ClassifyError::Config("rubric mode needs a rubric".to_string())
            })?;
            Ok(Box::new(RubricClassifier::new(
                rubric,
                config,
                ctx.exemplars.clone(),
            )?))
        });
        for k in 0..=5u8 {
            registry.register(&Mode::Baseline(k).name(), move |_, _| {
                Ok(Box::new(BaselineClassifier::new(k)?))
            });
        }
        registry
    }

    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&ClassifierConfig, &ClassifierContext) -> Result<Box<dyn TraceClassifier>, ClassifyError>
            + Send
            + Sync
            + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        config: &ClassifierConfig,
        ctx: &ClassifierContext,
    ) -> Result<Box<dyn TraceClassifier>, ClassifyError> {
        config.validate()?;
        let name = config.mode.name();
        let factory = self
            .factories
            .get(&name)
            .ok_or_else(|| ClassifyError::Config(format!("no classifier registered as {name:?}")))?;
        factory(config, ctx)
    }
}

impl Default for ClassifierRegistry {
    fn default() -> Self {
        ClassifierRegistry::with_builtins()
    }
}

/// Trace text by id, for showing each item's source trace as an exemplar.
pub fn exemplars(dataset: &TraceDataset) -> Arc<BTreeMap<String, String>> {
    Arc::new(
        dataset
            .records
            .iter()
            .map(|r| (r.id.clone(), r.trace.clone()))
            .collect(),
    )
}

/// Classifies records concurrently, keeping input order.
pub async fn classify_all(
    classifier: &dyn TraceClassifier,
    gateway: &Gateway,
    records: &[TraceRecord],
) -> Vec<Result<Classification, ClassifyError>> {
    stream::iter(records)
        .map(|record| classifier.classify(gateway, record))
        .buffered(gateway.concurrency())
        .collect()
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for mode in [Mode::Rubric, Mode::Baseline(0), Mode::Baseline(5)] {
            assert_eq!(mode.name().parse::<Mode>().unwrap(), mode);
        }
        assert!("baseline-6".parse::<Mode>().is_err());
        assert!("vibes".parse::<Mode>().is_err());
    }

    #[test]
    fn rubric_only_options_rejected_for_baselines() {
        let mut config = ClassifierConfig::baseline(2);
        config.second_filter = true;
        assert!(config.validate().is_err());
        let mut config = ClassifierConfig::baseline(2);
        config.rubric_size = Some(25);
        assert!(config.validate().is_err());
        assert!(ClassifierConfig::baseline(2).validate().is_ok());
    }

    #[test]
    fn registry_lists_all_strategies() {
        let names = ClassifierRegistry::default().names().join(",");
        assert_eq!(
            names,
            "baseline-0,baseline-1,baseline-2,baseline-3,baseline-4,baseline-5,rubric"
        );
    }

    #[test]
    fn rubric_mode_requires_rubric() {
        let err = ClassifierRegistry::default()
            .build(&ClassifierConfig::default(), &ClassifierContext::default())
            .err()
            .unwrap();
        assert!(matches!(err, ClassifyError::Config(_)));
    }
}
