//! Training objectives for classifier heads.
//!
//! Every loss is a [`HeadLoss`] registered by name (`ds-ce`, `ce`, `tce`) and
//! reports both its mean value and the gradient with respect to the logits
//! that produced the probabilities, so heads backpropagate uniformly.

use std::fmt::Debug;
use std::sync::OnceLock;

use crate::error::{Result, SpiceError};
use crate::head::Mlp;
use crate::numeric::{softmax_backward, softmax_in_place, Matrix};
use crate::registry::{Registry, StrategySpec};

/// Probabilities below this are clamped inside `ln` for plain cross-entropy.
pub const CE_FLOOR: f64 = 1e-12;

pub const DEFAULT_TCE_TEMPERATURE: f64 = 0.2;

pub trait HeadLoss: Send + Sync + Debug {
    fn name(&self) -> String;

    /// Mean loss over the rows of `probs` (each a probability vector).
    fn loss(&self, probs: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(self.loss_and_logit_grad(probs, labels)?.0)
    }

    /// Mean loss and dL/dlogits, where `probs = softmax(logits)` row-wise.
    fn loss_and_logit_grad(&self, probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)>;
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(SpiceError::shape(probs.rows(), labels.len()));
    }
    if probs.rows() == 0 {
        return Err(SpiceError::InvalidArgument("empty batch".into()));
    }
    let k = probs.cols();
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(SpiceError::InvalidLabel { label, k }),
        None => Ok(()),
    }
}

/// Cross-entropy after re-applying softmax to `probs / temperature`.
/// Temperature 1 is the double-softmax loss.
fn resoftmax_ce(probs: &Matrix, labels: &[usize], temperature: f64) -> Result<(f64, Matrix)> {
    check_labels(probs, labels)?;
    let m = probs.rows() as f64;
    let mut q = probs.clone();
    q.as_mut_slice().iter_mut().for_each(|v| *v /= temperature);
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = q.row_mut(r);
        softmax_in_place(row);
        loss -= row[l].ln();
        row[l] -= 1.0;
        row.iter_mut().for_each(|v| *v /= temperature * m);
    }
    Ok((loss / m, softmax_backward(probs, &q)))
}

/// Double-softmax cross-entropy: CE on `softmax(p)` where `p` is already a softmax output.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleSoftmaxCe;

impl HeadLoss for DoubleSoftmaxCe {
    fn name(&self) -> String {
        "ds-ce".into()
    }

    fn loss_and_logit_grad(&self, probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        resoftmax_ce(probs, labels, 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl HeadLoss for CrossEntropy {
    fn name(&self) -> String {
        "ce".into()
    }

    fn loss_and_logit_grad(&self, probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        check_labels(probs, labels)?;
        let m = probs.rows() as f64;
        let mut grad = probs.clone();
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            loss -= probs.get(r, l).max(CE_FLOOR).ln();
            let row = grad.row_mut(r);
            row[l] -= 1.0;
            row.iter_mut().for_each(|v| *v /= m);
        }
        Ok((loss / m, grad))
    }
}

/// Cross-entropy on `softmax(p / T)`.
#[derive(Debug, Clone, Copy)]
pub struct TemperedCe {
    pub temperature: f64,
}

impl HeadLoss for TemperedCe {
    fn name(&self) -> String {
        format!("tce:{}", self.temperature)
    }

    fn loss_and_logit_grad(&self, probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        resoftmax_ce(probs, labels, self.temperature)
    }
}

pub fn loss_registry() -> &'static Registry<dyn HeadLoss> {
    static REG: OnceLock<Registry<dyn HeadLoss>> = OnceLock::new();
    REG.get_or_init(|| {
        Registry::<dyn HeadLoss>::new("loss")
            .register("ds-ce", &["ds_ce", "dsce"], "double-softmax cross-entropy", |_| {
                Ok(Box::new(DoubleSoftmaxCe))
            })
            .register("ce", &[], "plain cross-entropy", |_| Ok(Box::new(CrossEntropy)))
            .register("tce", &[], "cross-entropy on softmax(p / T), T defaults to 0.2", |t| {
                let temperature = t.unwrap_or(DEFAULT_TCE_TEMPERATURE);
                if !(temperature > 0.0) {
                    return Err(SpiceError::Config(format!(
                        "tce temperature must be > 0, got {temperature}"
                    )));
                }
                Ok(Box::new(TemperedCe { temperature }))
            })
    })
}

pub fn make_loss(spec: &StrategySpec) -> Result<Box<dyn HeadLoss>> {
    loss_registry().create(spec)
}

pub fn ds_ce_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    DoubleSoftmaxCe.loss(probs, labels)
}

pub fn ce_loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    CrossEntropy.loss(probs, labels)
}

pub fn tce_loss(probs: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
    TemperedCe { temperature }.loss(probs, labels)
}

/// `Σ_c q̄_c ln q̄_c` for the column mean `q̄`; ranges over `[−ln k, 0]`,
/// lowest when clusters are used uniformly.
pub fn entropy_regularizer(probs: &Matrix) -> f64 {
    column_mean(probs)
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.ln())
        .sum()
}

fn column_mean(probs: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; probs.cols()];
    for row in probs.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    let m = probs.rows().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    mean
}

/// Regularizer value and its gradient with respect to the logits.
pub fn entropy_regularizer_logit_grad(probs: &Matrix) -> (f64, Matrix) {
    let mean = column_mean(probs);
    let m = probs.rows().max(1) as f64;
    let value = mean.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum();
    let per_col: Vec<f64> = mean
        .iter()
        .map(|&q| if q > 0.0 { (q.ln() + 1.0) / m } else { 0.0 })
        .collect();
    let mut gp = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        gp.row_mut(r).copy_from_slice(&per_col);
    }
    (value, softmax_backward(probs, &gp))
}

/// `loss + entropy_weight × regularizer` on a batch and its flat parameter gradient.
pub fn objective_and_grad(
    head: &Mlp,
    features: &Matrix,
    labels: &[usize],
    loss: &dyn HeadLoss,
    entropy_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let trace = head.forward_traced(features)?;
    let (mut value, mut grad_logits) = loss.loss_and_logit_grad(&trace.probs, labels)?;
    if entropy_weight != 0.0 {
        let (reg, reg_grad) = entropy_regularizer_logit_grad(&trace.probs);
        value += entropy_weight * reg;
        grad_logits
            .as_mut_slice()
            .iter_mut()
            .zip(reg_grad.as_slice())
            .for_each(|(g, r)| *g += entropy_weight * r);
    }
    Ok((value, head.backward(&trace, &grad_logits)?))
}

/// Gradient of the mean double-softmax loss with respect to every head parameter.
pub fn ds_ce_backward(head: &Mlp, features: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    Ok(objective_and_grad(head, features, labels, &DoubleSoftmaxCe, 0.0)?.1)
}
