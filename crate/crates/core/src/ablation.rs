//! Configuration matrices: every cell classifies the same evaluation set with
//! one combination of toggles and reports its metrics.

use std::collections::BTreeMap;
use std::sync::Arc;

use futures::future;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::{build_rubric, BuildConfig};
use crate::classifier::{classify_all, ClassifierConfig, Mode, RubricClassifier, TraceClassifier};
use crate::corpus::TraceDataset;
use crate::gateway::Gateway;
use crate::metrics::{evaluate, metrics_table, MetricsReport};
use crate::model::Rubric;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("duplicate cell name {0:?}")]
    DuplicateCell(String),
    #[error("evaluation set has no records")]
    EmptyEvalSet,
    #[error("writing table: {0}")]
    Table(#[from] csv::Error),
}

fn yes() -> bool {
    true
}

/// One configuration. Absent fields take the defaults of the full pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    /// Compress traces before tagging and application.
    #[serde(default = "yes")]
    pub compress: bool,
    /// Also rebuild the rubric without compression when `compress` is off.
    /// Needs the training set.
    #[serde(default)]
    pub compress_at_build: bool,
    /// Route by clustered keywords; off routes by the original keywords.
    #[serde(default = "yes")]
    pub cluster: bool,
    #[serde(default)]
    pub second_filter: bool,
    /// Sample this many items; absent means the full rubric.
    #[serde(default)]
    pub rubric_size: Option<usize>,
}

impl CellSpec {
    pub fn full(name: impl Into<String>) -> CellSpec {
        CellSpec {
            name: name.into(),
            compress: true,
            compress_at_build: false,
            cluster: true,
            second_filter: false,
            rubric_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Run cells concurrently instead of one after another.
    #[serde(default)]
    pub parallel: bool,
}

pub const SIZE_SWEEP: [usize; 4] = [25, 50, 100, 150];

fn on_off(flag: bool) -> &'static str {
    if flag {
        "on"
    } else {
        "off"
    }
}

impl Grid {
    /// Compression x clustering x second filter, then the size sweep with the
    /// full rubric last.
    pub fn standard(seed: u64) -> Grid {
        let mut cells = Vec::new();
        for compress in [true, false] {
            for cluster in [true, false] {
                for second_filter in [false, true] {
                    cells.push(CellSpec {
                        name: format!(
                            "compress={} cluster={} filter={}",
                            on_off(compress),
                            on_off(cluster),
                            on_off(second_filter)
                        ),
                        compress,
                        cluster,
                        second_filter,
                        ..CellSpec::full("")
                    });
                }
            }
        }
        for size in SIZE_SWEEP {
            cells.push(CellSpec {
                rubric_size: Some(size),
                ..CellSpec::full(format!("size={size}"))
            });
        }
        cells.push(CellSpec::full("size=full"));
        Grid {
            cells,
            seed,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<(), AblationError> {
        if self.cells.is_empty() {
            return Err(AblationError::EmptyGrid);
        }
        let mut seen = std::collections::BTreeSet::new();
        for cell in &self.cells {
            if !seen.insert(cell.name.as_str()) {
                return Err(AblationError::DuplicateCell(cell.name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: CellSpec,
    pub eval_set_digest: String,
    pub seed: u64,
    pub script_digest: String,
    pub rubric_digest: Option<String>,
    /// Item ids the cell classified with, in rubric order.
    pub item_ids: Vec<String>,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub eval_set_digest: String,
    pub seed: u64,
    pub script_digest: String,
    pub rubric_digest: String,
    pub traces: usize,
    pub cells: Vec<CellReport>,
}

impl MatrixReport {
    /// CSV with one row per cell: balanced accuracy, specificity, F0.5.
    pub fn table(&self) -> Result<String, AblationError> {
        Ok(metrics_table(
            self.cells
                .iter()
                .map(|c| (c.cell.name.as_str(), c.metrics.as_ref())),
        )?)
    }

    pub fn cell(&self, name: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.cell.name == name)
    }
}

/// Shared inputs for a matrix run.
pub struct MatrixInputs<'a> {
    pub gateway: &'a Gateway,
    pub eval: &'a TraceDataset,
    pub rubric: &'a Rubric,
    /// Needed only by cells that rebuild the rubric.
    pub train: Option<&'a TraceDataset>,
    pub exemplars: Arc<BTreeMap<String, String>>,
}

async fn cell_rubric(inputs: &MatrixInputs<'_>, cell: &CellSpec, seed: u64) -> Result<Rubric, String> {
    let base = if !cell.compress && cell.compress_at_build {
        let train = inputs
            .train
            .ok_or("rebuilding without compression needs the training set")?;
        let config = BuildConfig {
            compress: false,
            cluster: true,
            seed,
        };
        build_rubric(inputs.gateway, train, &config)
            .await
            .map_err(|e| format!("rebuilding rubric: {e}"))?
            .0
    } else {
        inputs.rubric.clone()
    };
    Ok(if cell.cluster { base } else { base.unclustered() })
}

async fn run_cell(inputs: &MatrixInputs<'_>, cell: &CellSpec, seed: u64, shared: &MatrixReport) -> CellReport {
    let mut report = CellReport {
        cell: cell.clone(),
        eval_set_digest: shared.eval_set_digest.clone(),
        seed,
        script_digest: shared.script_digest.clone(),
        rubric_digest: None,
        item_ids: Vec::new(),
        metrics: None,
        error: None,
    };
    let rubric = match cell_rubric(inputs, cell, seed).await {
        Ok(r) => r,
        Err(e) => {
            report.error = Some(e);
            return report;
        }
    };
    let config = ClassifierConfig {
        mode: Mode::Rubric,
        second_filter: cell.second_filter,
        rubric_size: cell.rubric_size,
        compress_at_inference: cell.compress,
        seed,
        ..ClassifierConfig::default()
    };
    let classifier = match RubricClassifier::new(Arc::new(rubric), &config, inputs.exemplars.clone()) {
        Ok(c) => c,
        Err(e) => {
            report.error = Some(e.to_string());
            return report;
        }
    };
    report.rubric_digest = Some(classifier.rubric().digest());
    report.item_ids = classifier.rubric().items.iter().map(|i| i.id.clone()).collect();

    let results = classify_all(&classifier as &dyn TraceClassifier, inputs.gateway, &inputs.eval.records).await;
    let mut predictions = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (record, result) in inputs.eval.records.iter().zip(results) {
        match result {
            Ok(p) => predictions.push(p),
            Err(e) => failures.push(format!("{}: {e}", record.id)),
        }
    }
    if !failures.is_empty() {
        report.error = Some(format!(
            "{} of {} traces failed to classify; first: {}",
            failures.len(),
            inputs.eval.len(),
            failures[0]
        ));
        return report;
    }
    match evaluate(inputs.eval, &predictions, serde_json::Value::Null) {
        Ok(eval) => report.metrics = Some(eval.metrics),
        Err(e) => report.error = Some(e.to_string()),
    }
    report
}

/// Runs every cell on the same evaluation set. A failed cell is recorded with
/// its error and the remaining cells still run.
pub async fn run_matrix(inputs: &MatrixInputs<'_>, grid: &Grid) -> Result<MatrixReport, AblationError> {
    grid.validate()?;
    if inputs.eval.is_empty() {
        return Err(AblationError::EmptyEvalSet);
    }
    let mut report = MatrixReport {
        eval_set_digest: inputs.eval.digest(),
        seed: grid.seed,
        script_digest: inputs.gateway.provider_fingerprint(),
        rubric_digest: inputs.rubric.digest(),
        traces: inputs.eval.len(),
        cells: Vec::new(),
    };
    let cells = if grid.parallel {
        future::join_all(grid.cells.iter().map(|cell| run_cell(inputs, cell, grid.seed, &report))).await
    } else {
        let mut done = Vec::with_capacity(grid.cells.len());
        for cell in &grid.cells {
            tracing::info!(cell = %cell.name, "running ablation cell");
            done.push(run_cell(inputs, cell, grid.seed, &report).await);
        }
        done
    };
    report.cells = cells;
    Ok(report)
}
