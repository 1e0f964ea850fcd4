use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use errata_core::ablation::{run_matrix, Grid, MatrixInputs};
use errata_core::builder::{build_rubric, BuildConfig};
use errata_core::classifier::{classify_all, ClassifierConfig, ClassifierContext, ClassifierRegistry, Mode};
use errata_core::corpus::{filter_by_length, grade_dataset, split, BUILD_MAX_CHARS, RL_MAX_CHARS};
use errata_core::manifest::{file_digest, manifest_path, RunManifest};
use errata_core::metrics::{evaluate, metrics_table};
use errata_core::reward::{self, PenaltyScope, RewardConfig, RewardScorer};
use errata_core::synth::{generate_world, WorldConfig};
use serde_json::{json, Value};

use crate::args::*;
use crate::support::{self, finish, gateway, manifest_with_provider, normalized, pretty_json, write};

pub async fn grade(args: GradeArgs) -> Result<()> {
    let gw = gateway(&args.provider)?;
    let dataset = support::load_dataset_permissive(&args.input, args.permissive)?;
    let (graded, report) = grade_dataset(&gw, &dataset).await?;
    if !report.ungraded.is_empty() {
        tracing::warn!(count = report.ungraded.len(), "records left ungraded and dropped");
    }
    graded.write_jsonl(&args.out)?;
    let mut manifest = manifest_with_provider("grade", &args, &gw, &args.provider)?;
    manifest.input(&args.input)?;
    manifest.summary = serde_json::to_value(&report)?;
    finish(manifest, &[&args.out])
}

pub fn split_cmd(args: SplitArgs) -> Result<()> {
    let dataset = support::load_dataset(&args.input)?;
    let (train, val) = split(&dataset, args.ratio, args.seed)?;
    train.write_jsonl(&args.train_out)?;
    val.write_jsonl(&args.val_out)?;
    let mut manifest = RunManifest::new("split", serde_json::to_value(&args)?).seed("split", args.seed);
    manifest.input(&args.input)?;
    manifest.summary = json!({ "train": train.len(), "validation": val.len() });
    finish(manifest, &[&args.train_out, &args.val_out])
}

pub fn filter(args: FilterArgs) -> Result<()> {
    let max_chars = match (args.max_chars, args.preset) {
        (Some(n), _) => n,
        (None, Some(LengthPreset::Rl)) => RL_MAX_CHARS,
        (None, Some(LengthPreset::Build)) => BUILD_MAX_CHARS,
        (None, None) => bail!("either --max-chars or --preset is required"),
    };
    let dataset = support::load_dataset(&args.input)?;
    let (kept, dropped) = filter_by_length(&dataset, max_chars)?;
    kept.write_jsonl(&args.out)?;
    let mut manifest = RunManifest::new(
        "filter",
        json!({ "args": serde_json::to_value(&args)?, "max_chars": max_chars }),
    );
    manifest.input(&args.input)?;
    manifest.summary = json!({ "kept": kept.len(), "dropped": dropped });
    finish(manifest, &[&args.out])
}

pub async fn build(args: BuildArgs) -> Result<()> {
    let gw = gateway(&args.provider)?;
    let train = support::load_dataset(&args.input)?;
    let config = BuildConfig {
        compress: !args.no_compress,
        cluster: !args.no_cluster,
        seed: args.seed,
    };
    let (rubric, stats) = build_rubric(&gw, &train, &config).await?;
    for warning in &stats.warnings {
        tracing::warn!(%warning);
    }
    write(&args.out, &rubric.to_canonical_bytes())?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.stats {
        write(path, &pretty_json(&stats)?)?;
        outputs.push(path);
    }
    let mut manifest = manifest_with_provider("build", &config, &gw, &args.provider)?.seed("build", args.seed);
    manifest.input(&args.input)?;
    manifest.summary = json!({
        "items": stats.items,
        "incorrect_traces": stats.incorrect_traces,
        "extraction_failures": stats.extraction_failures.len(),
        "canonical_keywords": stats.canonical_keywords,
        "rubric_digest": rubric.digest(),
    });
    finish(manifest, &outputs)
}

pub async fn classify(args: ClassifyArgs) -> Result<()> {
    let mode: Mode = args.mode.parse()?;
    let config = ClassifierConfig {
        mode,
        second_filter: args.second_filter,
        rubric_size: args.rubric_size,
        compress_at_inference: !args.no_compress,
        seed: args.seed,
        excerpt_chars: args.excerpt_chars,
    };
    config.validate()?;
    let rubric = match (&args.rubric, mode) {
        (Some(path), _) => Some(Arc::new(support::load_rubric(path)?)),
        (None, Mode::Rubric) => bail!("--rubric is required in rubric mode"),
        (None, Mode::Baseline(_)) => None,
    };
    let ctx = ClassifierContext {
        rubric,
        exemplars: support::load_exemplars(args.exemplars.as_deref())?,
    };
    let classifier = ClassifierRegistry::with_builtins().build(&config, &ctx)?;
    let gw = gateway(&args.provider)?;
    let dataset = support::load_dataset(&args.input)?;

    let results = classify_all(classifier.as_ref(), &gw, &dataset.records).await;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (record, result) in dataset.records.iter().zip(results) {
        match result {
            Ok(c) => {
                lines.extend(serde_json::to_vec(&c)?);
                lines.push(b'\n');
            }
            Err(e) => failed.push(json!({ "trace_id": record.id, "error": e.to_string() })),
        }
    }
    if !failed.is_empty() {
        bail!(
            "classification failed for {} of {} traces: {}",
            failed.len(),
            dataset.len(),
            Value::Array(failed)
        );
    }
    write(&args.out, &lines)?;

    let mut manifest = manifest_with_provider("classify", &config, &gw, &args.provider)?.seed("classify", args.seed);
    manifest.input(&args.input)?;
    if let Some(path) = &args.rubric {
        manifest.input(path)?;
    }
    if let Some(path) = &args.exemplars {
        manifest.input(path)?;
    }
    manifest.summary = json!({ "traces": dataset.len(), "classifier": classifier.name() });
    finish(manifest, &[&args.out])
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let gold = support::load_dataset(&args.gold)?;
    let preds = support::load_predictions(&args.pred)?;
    let pred_manifest = manifest_path(&args.pred);
    let classify_config = if pred_manifest.exists() {
        RunManifest::load(&pred_manifest)
            .with_context(|| format!("reading {}", pred_manifest.display()))?
            .config
    } else {
        Value::Null
    };
    let config = json!({
        "gold_digest": file_digest(&args.gold)?,
        "pred_digest": file_digest(&args.pred)?,
        "classify": classify_config,
    });
    let report = evaluate(&gold, &preds, config)?;
    write(&args.out, &pretty_json(&report)?)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.csv {
        write(path, metrics_table([(args.name.as_str(), Some(&report.metrics))])?.as_bytes())?;
        outputs.push(path);
    }
    let mut manifest = RunManifest::new("eval", serde_json::to_value(&args)?);
    manifest.input(&args.gold)?;
    manifest.input(&args.pred)?;
    manifest.summary = serde_json::to_value(&report.metrics)?;
    finish(manifest, &outputs)
}

pub async fn ablate(args: AblateArgs) -> Result<()> {
    let mut grid = match &args.grid {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_slice::<Grid>(&bytes).with_context(|| format!("parsing grid {}", path.display()))?
        }
        None => Grid::standard(args.seed),
    };
    grid.parallel |= args.parallel;
    grid.validate()?;

    let gw = gateway(&args.provider)?;
    let rubric = support::load_rubric(&args.rubric)?;
    let eval_set = support::load_dataset(&args.input)?;
    let train = args.train.as_deref().map(support::load_dataset).transpose()?;
    let exemplars = match &train {
        Some(t) => errata_core::classifier::exemplars(t),
        None => Arc::default(),
    };
    let inputs = MatrixInputs {
        gateway: &gw,
        eval: &eval_set,
        rubric: &rubric,
        train: train.as_ref(),
        exemplars,
    };
    let report = run_matrix(&inputs, &grid).await?;
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        tracing::warn!(cell = %cell.cell.name, error = cell.error.as_deref().unwrap_or(""), "cell failed");
    }
    write(&args.out, &pretty_json(&report)?)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(path) = &args.csv {
        write(path, report.table()?.as_bytes())?;
        outputs.push(path);
    }
    let mut manifest = manifest_with_provider("ablate", &grid, &gw, &args.provider)?.seed("grid", grid.seed);
    manifest.input(&args.rubric)?;
    manifest.input(&args.input)?;
    if let Some(path) = &args.train {
        manifest.input(path)?;
    }
    manifest.summary = json!({
        "cells": report.cells.len(),
        "failed": report.cells.iter().filter(|c| c.error.is_some()).count(),
    });
    finish(manifest, &outputs)
}

pub async fn serve(args: ServeArgs) -> Result<()> {
    let gw = Arc::new(gateway(&args.provider)?);
    let rubric = Arc::new(support::load_rubric(&args.rubric)?);
    let config = RewardConfig {
        mode: match args.mode {
            ServeMode::Rubric => Mode::Rubric,
            ServeMode::Baseline => Mode::Baseline(0),
        },
        penalty: args.penalty == Switch::On,
        penalty_threshold: args.penalty_threshold,
        penalty_scope: match args.penalty_scope {
            Scope::All => PenaltyScope::All,
            Scope::CorrectOnly => PenaltyScope::CorrectOnly,
        },
    };
    let scorer = RewardScorer::new(
        gw.clone(),
        rubric.clone(),
        config.clone(),
        support::load_exemplars(args.exemplars.as_deref())?,
    )?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .with_context(|| format!("invalid address {}:{}", args.host, args.port))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;

    let mut manifest = manifest_with_provider("serve", &config, &gw, &args.provider)?;
    manifest.input(&args.rubric)?;
    manifest.summary = json!({ "rubric_digest": rubric.digest(), "rubric_items": rubric.len() });
    tracing::info!(
        addr = %listener.local_addr()?,
        manifest = %serde_json::to_string(&manifest)?,
        "reward service listening"
    );
    reward::serve(listener, Arc::new(scorer), async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    })
    .await?;
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let out = normalized(&args.out);
    let config = WorldConfig {
        seed: args.seed,
        families: args.families,
        traces: args.traces,
        incorrect_fraction: args.incorrect_fraction,
        adversarial: args.adversarial,
        keyword_variants: !args.no_keyword_variants,
    };
    let world = generate_world(&config)?;
    world.write(&out)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&config)?).seed("world", args.seed);
    for name in ["traces.jsonl", "truth.json", "script.json"] {
        manifest.output(&out.join(name))?;
    }
    manifest.summary = json!({
        "traces": world.dataset.len(),
        "families": world.truth.families.len(),
        "decoys": world.truth.decoys.len(),
    });
    manifest.write_for(&out)?;
    Ok(())
}
