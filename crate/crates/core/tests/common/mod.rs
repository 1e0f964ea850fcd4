#![allow(dead_code)]

use std::sync::Arc;

use errata_core::builder::{build_rubric, BuildConfig, BuildStats};
use errata_core::classifier::{
    classify_all, exemplars, ClassifierConfig, ClassifierContext, ClassifierRegistry,
};
use errata_core::corpus::{split, TraceDataset};
use errata_core::gateway::{Gateway, GatewayConfig, ScriptedProvider};
use errata_core::synth::{generate_world, SyntheticWorld, WorldConfig};
use errata_core::{Classification, Rubric};

pub fn world(seed: u64, traces: usize) -> SyntheticWorld {
    generate_world(&WorldConfig {
        seed,
        traces,
        ..WorldConfig::default()
    })
    .unwrap()
}

pub fn gateway(world: &SyntheticWorld) -> Gateway {
    Gateway::new(
        Arc::new(ScriptedProvider::new(world.script.clone())),
        GatewayConfig::for_tests(),
    )
}

pub struct PipelineRun {
    pub train: TraceDataset,
    pub val: TraceDataset,
    pub rubric: Rubric,
    pub stats: BuildStats,
    pub predictions: Vec<Classification>,
}

/// Split, build with defaults, classify the validation split.
pub async fn run_pipeline(world: &SyntheticWorld, seed: u64, config: ClassifierConfig) -> PipelineRun {
    let gw = gateway(world);
    let (train, val) = split(&world.dataset, 0.8, seed).unwrap();
    let (rubric, stats) = build_rubric(
        &gw,
        &train,
        &BuildConfig {
            seed,
            ..BuildConfig::default()
        },
    )
    .await
    .unwrap();
    let ctx = ClassifierContext {
        rubric: Some(Arc::new(rubric.clone())),
        exemplars: exemplars(&train),
    };
    let classifier = ClassifierRegistry::default().build(&config, &ctx).unwrap();
    let predictions = classify_all(classifier.as_ref(), &gw, &val.records)
        .await
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    PipelineRun {
        train,
        val,
        rubric,
        stats,
        predictions,
    }
}
