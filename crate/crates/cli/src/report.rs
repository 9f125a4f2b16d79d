//! JSON run reports and plain-text label files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;
use spice_core::metrics::evaluate;
use spice_core::self_train::DegenerateEvent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

impl Scores {
    pub fn of(pred: &[usize], truth: &[usize]) -> anyhow::Result<Self> {
        let e = evaluate(pred, truth)?;
        Ok(Self {
            acc: e.acc,
            nmi: e.nmi,
            ari: e.ari,
        })
    }

    pub fn maybe(pred: &[usize], truth: Option<&[usize]>) -> anyhow::Result<Option<Self>> {
        truth.map(|t| Self::of(pred, t)).transpose()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfMetrics {
    pub per_head_loss: Vec<f64>,
    pub selected_head: Option<usize>,
    /// Mean training loss of every head in the last epoch.
    pub final_epoch_loss: Vec<f64>,
    pub scores: Option<Scores>,
    pub degenerate: Vec<DegenerateEvent>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectMetrics {
    pub n_s: usize,
    pub tau_c: f64,
    pub size: usize,
    pub coverage: f64,
    pub per_cluster: Vec<usize>,
    pub starved: Vec<usize>,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemiMetrics {
    pub epoch_losses: Vec<f64>,
    pub mask_rates: Vec<f64>,
    pub scores: Option<Scores>,
}

#[derive(Debug, Clone, Serialize)]
pub struct KMeansMetrics {
    pub inertia: f64,
    pub iterations: usize,
    pub scores: Option<Scores>,
}

/// Everything a run computes. Deterministic for a fixed configuration.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub self_train: Option<SelfMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select: Option<SelectMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semi: Option<SemiMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kmeans: Option<KMeansMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataInfo {
    pub source: String,
    pub n: usize,
    pub d: usize,
    pub labeled: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    pub data: Option<DataInfo>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_labels(path: &Path, labels: &[usize]) -> anyhow::Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_labels(path: &Path) -> anyhow::Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut labels = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse() {
            Ok(l) => labels.push(l),
            Err(_) => bail!("{}:{}: expected a label, got `{line}`", path.display(), no + 1),
        }
    }
    Ok(labels)
}
