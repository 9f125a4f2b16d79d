//! Stage runners shared by the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use spice_core::checkpoint::save_checkpoint;
use spice_core::data::{load_embeddings, save_embeddings, synth_gmm};
use spice_core::kmeans::{kmeans, KMeansConfig};
use spice_core::numeric::streams;
use spice_core::reliability::{select_reliable, ReliableSet};
use spice_core::self_train::{train_self, SelfTrainOutcome};
use spice_core::semi::{train_semi, SemiOutcome};
use spice_core::{EmbeddingDataset, FileFormat, RngState};

use crate::config::{ConfigError, Settings};
use crate::report::{
    write_labels, DataInfo, KMeansMetrics, Metrics, RunReport, Scores, SelectMetrics,
    SelfMetrics, SemiMetrics,
};

/// A run in progress: settings, output directory and the report being filled.
pub struct Run {
    pub settings: Settings,
    pub out: PathBuf,
    pub report: RunReport,
}

impl Run {
    pub fn start(command: &str, settings: Settings) -> anyhow::Result<Self> {
        let out = PathBuf::from(&settings.out);
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let report = RunReport {
            command: command.into(),
            seed: settings.seed,
            config: settings.echo(),
            data: None,
            timings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            metrics: Metrics::default(),
            failure: None,
        };
        let cfg_path = out.join("run.cfg");
        fs::write(&cfg_path, settings.to_config_text())?;
        let mut run = Self {
            settings,
            out,
            report,
        };
        run.artifact("config", &cfg_path);
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.report
            .artifacts
            .insert(name.into(), path.display().to_string());
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> anyhow::Result<T>) -> anyhow::Result<T> {
        let t = Instant::now();
        let out = f(self);
        let secs = t.elapsed().as_secs_f64();
        info!("{stage}: {secs:.2}s");
        self.report.timings.insert(stage.into(), secs);
        out
    }

    /// Loads `data`, or generates the configured mixture when unset.
    pub fn dataset(&mut self) -> anyhow::Result<EmbeddingDataset> {
        let ds = self.timed("data", |run| {
            let s = &run.settings;
            match &s.data {
                Some(path) => {
                    let path = Path::new(path);
                    Ok(load_embeddings(path, FileFormat::from_path(path))?)
                }
                None => {
                    let mut rng = RngState::derive(s.seed, streams::SYNTH);
                    Ok(synth_gmm(&s.synth_spec(), &mut rng)?)
                }
            }
        })?;
        if let Some(k) = ds.k_hint.filter(|&k| k != self.settings.k) {
            warn!("dataset labels suggest k={k}, clustering with k={}", self.settings.k);
        }
        self.report.data = Some(DataInfo {
            source: ds.source.clone(),
            n: ds.len(),
            d: ds.dim(),
            labeled: ds.true_labels.is_some(),
        });
        Ok(ds)
    }

    pub fn save_dataset(&mut self, ds: &EmbeddingDataset, path: &Path) -> anyhow::Result<()> {
        save_embeddings(ds, path, FileFormat::from_path(path))?;
        self.artifact("embeddings", path);
        Ok(())
    }

    pub fn self_stage(&mut self, ds: &EmbeddingDataset) -> anyhow::Result<SelfTrainOutcome> {
        let cfg = self.settings.self_config()?;
        let outcome = self.timed("self", |_| Ok(train_self(ds, &cfg)?))?;
        let labels_path = self.path("self_labels.txt");
        write_labels(&labels_path, &outcome.labels)?;
        self.artifact("self_labels", &labels_path);
        if let Some(head) = outcome.pool.selected_head() {
            let head_path = self.path("self_head.bin");
            save_checkpoint(head, &head_path)?;
            self.artifact("self_head", &head_path);
        }
        self.report.metrics.self_train = Some(SelfMetrics {
            per_head_loss: outcome.pool.per_head_loss.clone(),
            selected_head: outcome.pool.selected,
            final_epoch_loss: outcome.epoch_losses.last().cloned().unwrap_or_default(),
            scores: Scores::maybe(&outcome.labels, ds.true_labels.as_deref())?,
            degenerate: outcome.degenerate.clone(),
            warnings: outcome.warnings.clone(),
        });
        Ok(outcome)
    }

    pub fn select_stage(&mut self, ds: &EmbeddingDataset, labels: &[usize]) -> anyhow::Result<ReliableSet> {
        self.settings.validate_select()?;
        if labels.len() != ds.len() {
            return Err(ConfigError(format!(
                "{} labels for {} samples",
                labels.len(),
                ds.len()
            ))
            .into());
        }
        let (n_s, tau_c, k) = (self.settings.n_s, self.settings.tau_c, self.settings.k);
        let set = self.timed("select", |_| Ok(select_reliable(&ds.features, labels, n_s, tau_c)?))?;
        let path = self.path("reliable.txt");
        set.write(&path)?;
        self.artifact("reliable", &path);
        let starved = set.starved_clusters(k);
        if !starved.is_empty() {
            warn!("no reliable samples for clusters {starved:?}");
        }
        self.report.metrics.select = Some(SelectMetrics {
            n_s,
            tau_c,
            size: set.len(),
            coverage: set.len() as f64 / ds.len() as f64,
            per_cluster: set.per_cluster(k),
            starved,
            purity: match ds.true_labels.as_deref() {
                Some(truth) if !set.is_empty() => Some(set.aligned_purity(labels, truth)?),
                _ => None,
            },
        });
        Ok(set)
    }

    pub fn semi_stage(&mut self, ds: &EmbeddingDataset, reliable: &ReliableSet) -> anyhow::Result<SemiOutcome> {
        let cfg = self.settings.semi_config()?;
        let outcome = self.timed("semi", |_| Ok(train_semi(ds, reliable, &cfg)?))?;
        let labels_path = self.path("semi_labels.txt");
        write_labels(&labels_path, &outcome.labels)?;
        self.artifact("semi_labels", &labels_path);
        let head_path = self.path("semi_head.bin");
        save_checkpoint(&outcome.model, &head_path)?;
        self.artifact("semi_head", &head_path);
        self.report.metrics.semi = Some(SemiMetrics {
            epoch_losses: outcome.epoch_losses.clone(),
            mask_rates: outcome.mask_rates.clone(),
            scores: Scores::maybe(&outcome.labels, ds.true_labels.as_deref())?,
        });
        Ok(outcome)
    }

    pub fn kmeans_stage(&mut self, ds: &EmbeddingDataset) -> anyhow::Result<Vec<usize>> {
        let (k, seed) = (self.settings.k, self.settings.seed);
        let res = self.timed("kmeans", |_| {
            let mut rng = RngState::derive(seed, streams::KMEANS);
            Ok(kmeans(&ds.features, k, &KMeansConfig::default(), &mut rng)?)
        })?;
        let path = self.path("kmeans_labels.txt");
        write_labels(&path, &res.labels)?;
        self.artifact("kmeans_labels", &path);
        self.report.metrics.kmeans = Some(KMeansMetrics {
            inertia: res.inertia,
            iterations: res.iterations,
            scores: Scores::maybe(&res.labels, ds.true_labels.as_deref())?,
        });
        Ok(res.labels)
    }

    /// Writes the JSON report and prints a short summary. Full pipelines
    /// write `report.json`, single stages `<command>-report.json`.
    pub fn finish(mut self) -> anyhow::Result<RunReport> {
        let name = match self.report.command.as_str() {
            "pipeline" => "report.json".to_string(),
            other => format!("{other}-report.json"),
        };
        let path = self.path(&name);
        self.artifact("report", &path);
        self.report.write(&path)?;
        summarize(&self.report);
        Ok(self.report)
    }
}

fn line(stage: &str, scores: Option<Scores>) {
    match scores {
        Some(s) => println!("{stage:<8} acc {:.4}  nmi {:.4}  ari {:.4}", s.acc, s.nmi, s.ari),
        None => println!("{stage:<8} done (no ground truth)"),
    }
}

fn summarize(report: &RunReport) {
    let m = &report.metrics;
    if let Some(s) = &m.self_train {
        line("self", s.scores);
        if let Some(h) = s.selected_head {
            println!("         selected head {h} of {}", s.per_head_loss.len());
        }
    }
    if let Some(s) = &m.select {
        print!("select   {} reliable ({:.1}%)", s.size, 100.0 * s.coverage);
        match s.purity {
            Some(p) => println!(", purity {p:.4}"),
            None => println!(),
        }
    }
    if let Some(s) = &m.semi {
        line("semi", s.scores);
    }
    if let Some(s) = &m.kmeans {
        line("kmeans", s.scores);
    }
    if let Some(f) = &report.failure {
        println!("failed: {f}");
    }
    if let Some(p) = report.artifacts.get("report") {
        println!("report   {p}");
    }
}
