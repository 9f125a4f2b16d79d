//! Semi-supervised retraining: reliable samples act as fixed labeled data,
//! every sample also serves as unlabeled data whose confident weak-view
//! predictions become hard targets for its strong view.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{transform, EmbeddingDataset, Strength, TransformConfig};
use crate::error::{Result, SpiceError};
use crate::head::{init_semi_head, Mlp};
use crate::loss::{CrossEntropy, HeadLoss};
use crate::numeric::{argmax, streams, Matrix, RngState};
use crate::optim::make_optimizer;
use crate::registry::StrategySpec;
use crate::reliability::ReliableSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiTrainConfig {
    pub k: usize,
    /// Labeled samples per step, `B`.
    pub batch: usize,
    /// Unlabeled-to-labeled ratio `μ`.
    pub mu: usize,
    /// Confidence threshold for pseudo-targets.
    pub tau: f64,
    /// Passes over the full dataset as unlabeled data.
    pub epochs: usize,
    pub hidden: usize,
    /// Noise levels relative to the per-dimension feature std.
    pub transform: TransformConfig,
    pub optimizer: StrategySpec,
    pub seed: u64,
}

impl SemiTrainConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            batch: 64,
            mu: 7,
            tau: 0.95,
            epochs: 30,
            hidden: 512,
            transform: TransformConfig {
                weak_noise_sigma: 0.02,
                ..TransformConfig::default()
            },
            optimizer: StrategySpec::with_param("adam", crate::optim::DEFAULT_ADAM_LR),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(SpiceError::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.batch == 0 || self.mu == 0 || self.hidden == 0 {
            return Err(SpiceError::Config(
                "batch, mu and hidden width must all be >= 1".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SpiceError::Config(format!(
                "confidence threshold must lie in (0, 1], got {}",
                self.tau
            )));
        }
        self.transform.validate()?;
        make_optimizer(&self.optimizer)?;
        Ok(())
    }

    /// Optimizer steps per epoch: one pass over `n` unlabeled samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.mu * self.batch).max(1)
    }
}

/// Hard pseudo-target for each row whose top probability reaches `tau`.
pub fn confidence_mask(probs: &Matrix, tau: f64) -> Vec<Option<usize>> {
    probs
        .row_iter()
        .map(|row| {
            let c = argmax(row);
            (row[c] >= tau).then_some(c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiLoss {
    pub total: f64,
    pub supervised: f64,
    pub consistency: f64,
    /// Unlabeled samples that passed the confidence gate.
    pub masked: usize,
    pub grads: Vec<f64>,
}

/// Loss and gradient for already-perturbed inputs and fixed pseudo-targets.
///
/// `targets[b]` is the hard label for `strong_unlabeled` row `b`, or `None`
/// when the gate is closed. Targets are constants: no gradient flows into
/// whatever produced them.
pub fn semi_loss_with_targets(
    model: &Mlp,
    weak_labeled: &Matrix,
    labels: &[usize],
    strong_unlabeled: &Matrix,
    targets: &[Option<usize>],
) -> Result<SemiLoss> {
    if weak_labeled.rows() == 0 {
        return Err(SpiceError::InvalidArgument("empty labeled batch".into()));
    }
    if targets.len() != strong_unlabeled.rows() {
        return Err(SpiceError::shape(strong_unlabeled.rows(), targets.len()));
    }
    let trace = model.forward_traced(weak_labeled)?;
    let (supervised, grad_logits) = CrossEntropy.loss_and_logit_grad(&trace.probs, labels)?;
    let mut grads = model.backward(&trace, &grad_logits)?;

    let (rows, hard): (Vec<usize>, Vec<usize>) = targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|c| (i, c)))
        .unzip();
    let mut consistency = 0.0;
    if !rows.is_empty() {
        let x = strong_unlabeled.select_rows(&rows);
        let trace = model.forward_traced(&x)?;
        let (mean, mut grad_logits) = CrossEntropy.loss_and_logit_grad(&trace.probs, &hard)?;
        // CrossEntropy averages over gated rows; the objective averages over all μB
        let scale = rows.len() as f64 / strong_unlabeled.rows() as f64;
        consistency = mean * scale;
        grad_logits.as_mut_slice().iter_mut().for_each(|g| *g *= scale);
        let g2 = model.backward(&trace, &grad_logits)?;
        grads.iter_mut().zip(g2).for_each(|(a, b)| *a += b);
    }
    Ok(SemiLoss {
        total: supervised + consistency,
        supervised,
        consistency,
        masked: rows.len(),
        grads,
    })
}

/// Full objective on raw batches: supervised CE on weak views of the labeled
/// batch plus gated CE between strong views and weak-view argmax targets.
pub fn semi_loss(
    model: &Mlp,
    labeled: (&Matrix, &[usize]),
    unlabeled: &Matrix,
    cfg: &SemiTrainConfig,
    transform_cfg: &TransformConfig,
    rng: &mut RngState,
) -> Result<SemiLoss> {
    let (x, y) = labeled;
    if x.rows() == 0 {
        return Err(SpiceError::InvalidArgument("empty labeled batch".into()));
    }
    let weak_l = transform(x, transform_cfg, Strength::Weak, rng);
    let weak_u = transform(unlabeled, transform_cfg, Strength::Weak, rng);
    let strong_u = transform(unlabeled, transform_cfg, Strength::Strong, rng);
    let q = model.forward(&weak_u)?;
    let targets = confidence_mask(&q, cfg.tau);
    semi_loss_with_targets(model, &weak_l, y, &strong_u, &targets)
}

#[derive(Debug, Clone)]
pub struct SemiOutcome {
    pub model: Mlp,
    pub labels: Vec<usize>,
    pub probs: Matrix,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of unlabeled samples passing the gate, per epoch.
    pub mask_rates: Vec<f64>,
}

/// Trains a fresh network from the reliable set and returns its labels on
/// the untransformed features.
pub fn train_semi(
    dataset: &EmbeddingDataset,
    reliable: &ReliableSet,
    cfg: &SemiTrainConfig,
) -> Result<SemiOutcome> {
    dataset.validate()?;
    cfg.validate()?;
    let n = dataset.len();
    if let Some(&bad) = reliable.indices.iter().find(|&&i| i >= n) {
        return Err(SpiceError::InvalidArgument(format!(
            "reliable index {bad} outside dataset of {n} samples"
        )));
    }
    if let Some(&label) = reliable.labels.iter().find(|&&l| l >= cfg.k) {
        return Err(SpiceError::InvalidLabel { label, k: cfg.k });
    }
    let starved = reliable.starved_clusters(cfg.k);
    if !starved.is_empty() {
        return Err(SpiceError::ClusterStarvation { clusters: starved });
    }

    let features = &dataset.features;
    let transform_cfg = cfg.transform.clone().calibrated(features);
    let mut rng = RngState::derive(cfg.seed, streams::SEMI);
    let mut model = init_semi_head(dataset.dim(), cfg.hidden, cfg.k, &mut rng)?;
    let mut optimizer = make_optimizer(&cfg.optimizer)?;

    let steps_per_epoch = cfg.steps_per_epoch(n);
    let total_steps = steps_per_epoch * cfg.epochs;
    let without_replacement = reliable.len() >= cfg.batch * total_steps;
    let mut labeled_order: Vec<usize> = (0..reliable.len()).collect();
    labeled_order.shuffle(&mut rng);
    let mut labeled_cursor = 0;

    let unlabeled_size = cfg.mu * cfg.batch;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut mask_rates = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut masked = 0usize;
        for step in 0..steps_per_epoch {
            let picks: Vec<usize> = if without_replacement {
                let p = labeled_order[labeled_cursor..labeled_cursor + cfg.batch].to_vec();
                labeled_cursor += cfg.batch;
                p
            } else {
                (0..cfg.batch)
                    .map(|_| rng.random_range(0..reliable.len()))
                    .collect()
            };
            let lx = features.select_rows(&picks.iter().map(|&p| reliable.indices[p]).collect::<Vec<_>>());
            let ly: Vec<usize> = picks.iter().map(|&p| reliable.labels[p]).collect();
            let urows: Vec<usize> = (0..unlabeled_size)
                .map(|i| order[(step * unlabeled_size + i) % n])
                .collect();
            let ux = features.select_rows(&urows);
            let out = semi_loss(&model, (&lx, &ly), &ux, cfg, &transform_cfg, &mut rng)?;
            if !out.total.is_finite() {
                return Err(SpiceError::Diverged(format!(
                    "semi-supervised loss became {} in epoch {epoch}",
                    out.total
                )));
            }
            optimizer.step(model.params_mut(), &out.grads)?;
            loss_sum += out.total;
            masked += out.masked;
        }
        epoch_losses.push(loss_sum / steps_per_epoch as f64);
        mask_rates.push(masked as f64 / (steps_per_epoch * unlabeled_size) as f64);
        log::debug!(
            "semi epoch {epoch}: loss {:.4}, mask rate {:.3}",
            epoch_losses[epoch],
            mask_rates[epoch]
        );
    }
    let (labels, probs) = model.predict(features)?;
    Ok(SemiOutcome {
        model,
        labels,
        probs,
        epoch_losses,
        mask_rates,
    })
}
