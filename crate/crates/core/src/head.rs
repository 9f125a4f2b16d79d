//! Fully connected classifier heads with ReLU hidden layers and a softmax
//! output. The two-layer `D → D → k` head is the one trained during
//! self-labeling; the deeper variant backs the semi-supervised stage.
//!
//! Parameters live in one flat buffer, layer by layer, each as the weight
//! matrix (`in × out`, row-major) followed by the bias. Optimizers, checkpoints
//! and gradient checks all operate on that buffer.

use rand::Rng;

use crate::error::{Result, SpiceError};
use crate::numeric::{gemm_raw, softmax_in_place, Matrix, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

/// Layer inputs recorded during a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Matrix>,
    pub probs: Matrix,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut RngState) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        for l in 0..mlp.num_layers() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = mlp.layer_range(l);
            for v in &mut mlp.params[w] {
                *v = rng.random_range(-s..s);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(SpiceError::InvalidArgument(format!("bad layer dims {dims:?}")));
        }
        if *dims.last().unwrap() < 2 {
            return Err(SpiceError::InvalidArgument("need at least 2 outputs".into()));
        }
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; len],
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        mlp.set_params(&params)?;
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(SpiceError::shape(self.params.len(), params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(SpiceError::InvalidInput("non-finite parameter".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer_range(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut off = 0;
        for w in self.dims.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    /// Weight matrix (`in × out`) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (Matrix, Vec<f64>) {
        let (w, b) = self.layer_range(layer);
        let wm = Matrix::from_vec(self.dims[layer], self.dims[layer + 1], self.params[w].to_vec())
            .expect("parameters are finite");
        (wm, self.params[b].to_vec())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(SpiceError::shape(
                format!("{} feature columns", self.input_dim()),
                x.cols(),
            ));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &Matrix) -> Matrix {
        let (w, b) = self.layer_range(layer);
        let out_dim = self.dims[layer + 1];
        let mut z = Matrix::zeros(x.rows(), out_dim);
        for r in 0..x.rows() {
            z.row_mut(r).copy_from_slice(&self.params[b.clone()]);
        }
        gemm_raw(
            (x.rows(), x.cols(), out_dim),
            x.as_slice(),
            x.cols(),
            false,
            &self.params[w],
            out_dim,
            false,
            z.as_mut_slice(),
            1.0,
        );
        z
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = self.affine(0, x);
        for l in 1..self.num_layers() {
            relu(&mut a);
            a = self.affine(l, &a);
        }
        Ok(a)
    }

    /// Row-wise class probabilities.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.logits(x)?;
        for r in 0..z.rows() {
            softmax_in_place(z.row_mut(r));
        }
        Ok(z)
    }

    pub fn forward_traced(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        inputs.push(x.clone());
        let mut a = self.affine(0, x);
        for l in 1..self.num_layers() {
            relu(&mut a);
            inputs.push(a.clone());
            a = self.affine(l, &a);
        }
        for r in 0..a.rows() {
            softmax_in_place(a.row_mut(r));
        }
        Ok(Trace { inputs, probs: a })
    }

    /// Flat parameter gradient given dL/dlogits for the traced batch.
    pub fn backward(&self, trace: &Trace, grad_logits: &Matrix) -> Result<Vec<f64>> {
        if grad_logits.shape() != trace.probs.shape() {
            return Err(SpiceError::shape(
                format!("{:?}", trace.probs.shape()),
                format!("{:?}", grad_logits.shape()),
            ));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_logits.clone();
        let m = delta.rows();
        for l in (0..self.num_layers()).rev() {
            let input = &trace.inputs[l];
            let (in_dim, out_dim) = (self.dims[l], self.dims[l + 1]);
            let (w, b) = self.layer_range(l);
            gemm_raw(
                (in_dim, m, out_dim),
                input.as_slice(),
                in_dim,
                true,
                delta.as_slice(),
                out_dim,
                false,
                &mut grads[w.clone()],
                0.0,
            );
            let gb = &mut grads[b];
            for row in delta.row_iter() {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            if l > 0 {
                let mut next = Matrix::zeros(m, in_dim);
                gemm_raw(
                    (m, out_dim, in_dim),
                    delta.as_slice(),
                    out_dim,
                    false,
                    &self.params[w],
                    out_dim,
                    true,
                    next.as_mut_slice(),
                    0.0,
                );
                for (g, &a) in next.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(grads)
    }

    /// Row-wise argmax (lowest index on ties) together with the probabilities.
    pub fn predict(&self, x: &Matrix) -> Result<(Vec<usize>, Matrix)> {
        let probs = self.forward(x)?;
        let labels = probs.row_iter().map(crate::numeric::argmax).collect();
        Ok((labels, probs))
    }
}

fn relu(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Two-layer `D → D → k` head used by self-labeling.
pub fn init_head(d: usize, k: usize, rng: &mut RngState) -> Result<Mlp> {
    if d < 2 || k < 2 {
        return Err(SpiceError::InvalidArgument(format!(
            "head needs d >= 2 and k >= 2, got d={d}, k={k}"
        )));
    }
    Mlp::new(&[d, d, k], rng)
}

/// Three-layer `D → H → H → k` network for the semi-supervised stage.
pub fn init_semi_head(d: usize, hidden: usize, k: usize, rng: &mut RngState) -> Result<Mlp> {
    if d < 2 || k < 2 || hidden == 0 {
        return Err(SpiceError::InvalidArgument(format!(
            "semi head needs d >= 2, k >= 2, hidden >= 1; got d={d}, hidden={hidden}, k={k}"
        )));
    }
    Mlp::new(&[d, hidden, hidden, k], rng)
}
