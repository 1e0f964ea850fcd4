//! Mining reasoning-error rubrics from incorrect traces, classifying traces
//! against them, and serving the classifier as a reward.

pub mod ablation;
pub mod builder;
pub mod classifier;
pub mod corpus;
pub mod digest;
pub mod gateway;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod responses;
pub mod reward;
pub mod synth;

pub use model::{
    AppliedItem, Classification, CompressedTrace, Label, Rubric, RubricItem, RubricMeta,
    TraceRecord,
};
