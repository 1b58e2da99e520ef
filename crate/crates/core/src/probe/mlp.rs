//! A small multilayer perceptron with manual backpropagation.
//!
//! Batches are `B × width` matrices, one sample per row. The network ends in
//! logits; [`softmax_rows`] turns them into distributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Fixed affine input scaling `(x - mean) / std`; never trained.
    Standardize { mean: DVector<f64>, std: DVector<f64> },
    /// `y = x Wᵀ + b`, with `w` of shape `outputs × inputs`.
    Dense { w: DMatrix<f64>, b: DVector<f64> },
    BatchNorm {
        gamma: DVector<f64>,
        beta: DVector<f64>,
        running_mean: DVector<f64>,
        running_var: DVector<f64>,
    },
    Relu,
    /// Inverted dropout with drop probability `p`.
    Dropout { p: f64 },
}

/// Shape-only description of a layer, used in checkpoint descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Standardize { width: usize },
    Dense { inputs: usize, outputs: usize },
    BatchNorm { width: usize },
    Relu,
    Dropout { p: f64 },
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Layer::Dense {
            w: DMatrix::from_fn(outputs, inputs, |_, _| rng.gen_range(-bound..bound)),
            b: DVector::zeros(outputs),
        }
    }

    pub fn batch_norm(width: usize) -> Self {
        Layer::BatchNorm {
            gamma: DVector::from_element(width, 1.0),
            beta: DVector::zeros(width),
            running_mean: DVector::zeros(width),
            running_var: DVector::from_element(width, 1.0),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Standardize { mean, .. } => LayerSpec::Standardize { width: mean.len() },
            Layer::Dense { w, .. } => LayerSpec::Dense {
                inputs: w.ncols(),
                outputs: w.nrows(),
            },
            Layer::BatchNorm { gamma, .. } => LayerSpec::BatchNorm { width: gamma.len() },
            Layer::Relu => LayerSpec::Relu,
            Layer::Dropout { p } => LayerSpec::Dropout { p: *p },
        }
    }

    /// Zero-valued layer with the given shape, to be filled from a checkpoint.
    pub fn from_spec(spec: &LayerSpec) -> Self {
        match *spec {
            LayerSpec::Standardize { width } => Layer::Standardize {
                mean: DVector::zeros(width),
                std: DVector::from_element(width, 1.0),
            },
            LayerSpec::Dense { inputs, outputs } => Layer::Dense {
                w: DMatrix::zeros(outputs, inputs),
                b: DVector::zeros(outputs),
            },
            LayerSpec::BatchNorm { width } => Layer::batch_norm(width),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { p } => Layer::Dropout { p },
        }
    }

    /// Width consumed, if the layer fixes it.
    fn input_width(&self) -> Option<usize> {
        match self {
            Layer::Standardize { mean, .. } => Some(mean.len()),
            Layer::Dense { w, .. } => Some(w.ncols()),
            Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
            _ => None,
        }
    }

    fn output_width(&self, input: usize) -> usize {
        match self {
            Layer::Dense { w, .. } => w.nrows(),
            _ => input,
        }
    }

    /// Stored tensors, in checkpoint order. Running statistics included.
    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Layer::Standardize { mean, std } => vec![mean.as_slice(), std.as_slice()],
            Layer::Dense { w, b } => vec![w.as_slice(), b.as_slice()],
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                gamma.as_slice(),
                beta.as_slice(),
                running_mean.as_slice(),
                running_var.as_slice(),
            ],
            _ => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Standardize { mean, std } => vec![mean.as_mut_slice(), std.as_mut_slice()],
            Layer::Dense { w, b } => vec![w.as_mut_slice(), b.as_mut_slice()],
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                gamma.as_mut_slice(),
                beta.as_mut_slice(),
                running_mean.as_mut_slice(),
                running_var.as_mut_slice(),
            ],
            _ => vec![],
        }
    }

    /// Trainable tensors only, aligned with [`Grads`].
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense { w, b } => vec![w.as_mut_slice(), b.as_mut_slice()],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma.as_mut_slice(), beta.as_mut_slice()],
            _ => vec![],
        }
    }
}

/// What a train-mode forward pass remembers for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Dense { x: DMatrix<f64> },
    BatchNorm {
        xhat: DMatrix<f64>,
        inv_std: DVector<f64>,
        mean: DVector<f64>,
        var: DVector<f64>,
    },
    Relu { y: DMatrix<f64> },
    Dropout { mask: DMatrix<f64> },
}

/// Gradients of every trainable tensor, flattened per layer in
/// [`Layer::params_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<Vec<f64>>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    /// Layers before this index are frozen: always run in eval mode, never
    /// updated, and not differentiated.
    pub frozen: usize,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let m = Self { layers, frozen: 0 };
        m.output_width()?;
        Ok(m)
    }

    pub fn input_width(&self) -> Option<usize> {
        self.layers.iter().find_map(Layer::input_width)
    }

    /// Output width, checking that layer shapes chain.
    pub fn output_width(&self) -> Result<usize> {
        let mut width = self
            .input_width()
            .ok_or_else(|| Error::arg("network has no sized layer"))?;
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(w) = l.input_width() {
                if w != width {
                    return Err(Error::arg(format!("layer {i} expects width {w}, gets {width}")));
                }
            }
            if let Layer::Dropout { p } = l {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::arg(format!("dropout p {p} outside [0, 1)")));
                }
            }
            width = l.output_width(width);
        }
        Ok(width)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn has_batch_norm(&self) -> bool {
        self.layers[self.frozen..]
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        match self.input_width() {
            Some(w) if w == x.ncols() => Ok(()),
            Some(w) => Err(Error::arg(format!("input has {} features, network expects {w}", x.ncols()))),
            None => Err(Error::arg("network has no sized layer")),
        }
    }

    /// Logits in eval mode: running statistics, no dropout.
    pub fn logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers {
            h = eval_layer(l, h);
        }
        Ok(h)
    }

    /// Output distributions in eval mode.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Activations after the first `n` layers in eval mode.
    pub fn embed(&self, x: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in &self.layers[..n] {
            h = eval_layer(l, h);
        }
        Ok(h)
    }

    /// Train-mode forward pass. Does not touch running statistics; see
    /// [`Mlp::update_running_stats`].
    pub fn forward_train(&self, x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, Vec<Cache>)> {
        self.check_input(x)?;
        if x.nrows() < 2 && self.has_batch_norm() {
            return Err(Error::arg("batch norm needs at least 2 samples per batch"));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if i < self.frozen {
                h = eval_layer(l, h);
                caches.push(Cache::None);
                continue;
            }
            let (out, cache) = train_layer(l, h, rng);
            h = out;
            caches.push(cache);
        }
        Ok((h, caches))
    }

    /// Output distributions in the requested mode.
    pub fn forward(&mut self, x: &DMatrix<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        match mode {
            Mode::Eval => self.predict(x),
            Mode::Train => {
                let (logits, caches) = self.forward_train(x, rng)?;
                self.update_running_stats(&caches, x.nrows());
                Ok(softmax_rows(&logits))
            }
        }
    }

    /// Exponential moving average of batch statistics, momentum
    /// [`BN_MOMENTUM`], unbiased variance.
    pub fn update_running_stats(&mut self, caches: &[Cache], batch: usize) {
        let unbias = batch as f64 / (batch as f64 - 1.0).max(1.0);
        for (l, c) in self.layers.iter_mut().zip(caches) {
            if let (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::BatchNorm { mean, var, .. },
            ) = (l, c)
            {
                *running_mean = &*running_mean * (1.0 - BN_MOMENTUM) + mean * BN_MOMENTUM;
                *running_var = &*running_var * (1.0 - BN_MOMENTUM) + var * (BN_MOMENTUM * unbias);
            }
        }
    }

    /// Gradients of a loss with respect to every trainable tensor, given
    /// the loss gradient at the logits.
    pub fn backward(&self, caches: &[Cache], dlogits: DMatrix<f64>) -> Grads {
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut d = dlogits;
        for i in (self.frozen..self.layers.len()).rev() {
            let (dx, g) = backward_layer(&self.layers[i], &caches[i], d);
            grads[i] = g;
            d = dx;
        }
        Grads(grads)
    }

    /// Mean KL loss and its gradients in train mode. The clamped KL is
    /// used for the value; the gradient at the logits is `(p - t) / B`.
    pub fn loss_and_grads(
        &self,
        x: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Grads, Vec<Cache>)> {
        let (logits, caches) = self.forward_train(x, rng)?;
        if targets.shape() != logits.shape() {
            return Err(Error::arg(format!(
                "targets {:?} do not match outputs {:?}",
                targets.shape(),
                logits.shape()
            )));
        }
        let p = softmax_rows(&logits);
        let loss = mean_kl(targets, &p);
        let dlogits = (&p - targets) / x.nrows() as f64;
        Ok((loss, self.backward(&caches, dlogits), caches))
    }

    /// Mutable trainable tensors past the frozen prefix, in [`Grads`] order.
    pub fn trainable_mut(&mut self) -> Vec<(usize, Vec<&mut [f64]>)> {
        let frozen = self.frozen;
        self.layers
            .iter_mut()
            .enumerate()
            .skip(frozen)
            .map(|(i, l)| (i, l.params_mut()))
            .collect()
    }

    /// Every stored tensor of the first `n` layers, little-endian.
    pub fn tensor_bytes(&self, n: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers[..n] {
            for t in l.tensors() {
                for x in t {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }
}

/// Mean over rows of `Σ t ln(t / max(p, ε))`, zero-target terms skipped.
pub fn mean_kl(targets: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (t_row, p_row) in targets.row_iter().zip(p.row_iter()) {
        let t: Vec<f64> = t_row.iter().copied().collect();
        let q: Vec<f64> = p_row.iter().copied().collect();
        total += crate::labels::kl_divergence(&t, &q, crate::labels::KL_EPSILON);
    }
    total / targets.nrows() as f64
}

fn eval_layer(l: &Layer, mut h: DMatrix<f64>) -> DMatrix<f64> {
    match l {
        Layer::Standardize { mean, std } => {
            for mut row in h.row_iter_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = (*x - mean[j]) / std[j];
                }
            }
            h
        }
        Layer::Dense { w, b } => {
            let mut y = &h * w.transpose();
            for mut row in y.row_iter_mut() {
                row += b.transpose();
            }
            y
        }
        Layer::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => {
            for mut row in h.row_iter_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = gamma[j] * (*x - running_mean[j]) / (running_var[j] + BN_EPS).sqrt() + beta[j];
                }
            }
            h
        }
        Layer::Relu => {
            h.apply(|x| *x = x.max(0.0));
            h
        }
        Layer::Dropout { .. } => h,
    }
}

fn train_layer(l: &Layer, h: DMatrix<f64>, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Cache) {
    match l {
        Layer::Standardize { .. } => (eval_layer(l, h), Cache::None),
        Layer::Dense { .. } => {
            let y = eval_layer(l, h.clone());
            (y, Cache::Dense { x: h })
        }
        Layer::BatchNorm { gamma, beta, .. } => {
            let n = h.nrows() as f64;
            let mean = DVector::from_iterator(h.ncols(), h.column_iter().map(|c| c.sum() / n));
            let var = DVector::from_iterator(
                h.ncols(),
                h.column_iter()
                    .zip(mean.iter())
                    .map(|(c, m)| c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n),
            );
            let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let mut xhat = h;
            for (j, mut col) in xhat.column_iter_mut().enumerate() {
                col.apply(|x| *x = (*x - mean[j]) * inv_std[j]);
            }
            let mut y = xhat.clone();
            for (j, mut col) in y.column_iter_mut().enumerate() {
                col.apply(|x| *x = gamma[j] * *x + beta[j]);
            }
            (
                y,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    mean,
                    var,
                },
            )
        }
        Layer::Relu => {
            let y = eval_layer(l, h);
            (y.clone(), Cache::Relu { y })
        }
        Layer::Dropout { p } => {
            if *p == 0.0 {
                return (h, Cache::Dropout { mask: DMatrix::from_element(0, 0, 0.0) });
            }
            let keep = 1.0 - p;
            let mask = DMatrix::from_fn(h.nrows(), h.ncols(), |_, _| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            (h.component_mul(&mask), Cache::Dropout { mask })
        }
    }
}

fn backward_layer(l: &Layer, cache: &Cache, dy: DMatrix<f64>) -> (DMatrix<f64>, Vec<Vec<f64>>) {
    match (l, cache) {
        (Layer::Dense { w, .. }, Cache::Dense { x }) => {
            let dw = dy.transpose() * x;
            let db: Vec<f64> = dy.column_iter().map(|c| c.sum()).collect();
            let dx = &dy * w;
            (dx, vec![dw.as_slice().to_vec(), db])
        }
        (Layer::BatchNorm { gamma, .. }, Cache::BatchNorm { xhat, inv_std, .. }) => {
            let n = dy.nrows() as f64;
            let mut dx = DMatrix::zeros(dy.nrows(), dy.ncols());
            let mut dgamma = vec![0.0; dy.ncols()];
            let mut dbeta = vec![0.0; dy.ncols()];
            for j in 0..dy.ncols() {
                let dyj = dy.column(j);
                let xj = xhat.column(j);
                dbeta[j] = dyj.sum();
                dgamma[j] = dyj.dot(&xj);
                let s = gamma[j] * dbeta[j];
                let sx = gamma[j] * dgamma[j];
                for r in 0..dy.nrows() {
                    let dxhat = gamma[j] * dyj[r];
                    dx[(r, j)] = inv_std[j] / n * (n * dxhat - s - xj[r] * sx);
                }
            }
            (dx, vec![dgamma, dbeta])
        }
        (Layer::Relu, Cache::Relu { y }) => {
            let mut dx = dy;
            dx.zip_apply(y, |d, y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            });
            (dx, vec![])
        }
        (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
            if mask.is_empty() {
                (dy, vec![])
            } else {
                (dy.component_mul(mask), vec![])
            }
        }
        (Layer::Standardize { std, .. }, _) => {
            let mut dx = dy;
            for mut row in dx.row_iter_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x /= std[j];
                }
            }
            (dx, vec![])
        }
        _ => unreachable!("cache does not match layer"),
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `p <- p (1 - lr·wd) - lr · m̂ / (√v̂ + ε)` for every trainable tensor.
    pub fn step(&mut self, model: &mut Mlp, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        if self.m.is_empty() {
            self.m = grads.0.iter().map(|l| l.iter().map(|g| vec![0.0; g.len()]).collect()).collect();
            self.v = self.m.clone();
        }
        for (li, params) in model.trainable_mut() {
            for (pi, p) in params.into_iter().enumerate() {
                let g = &grads.0[li][pi];
                let m = &mut self.m[li][pi];
                let v = &mut self.v[li][pi];
                for k in 0..p.len() {
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                    p[k] *= 1.0 - lr * self.weight_decay;
                    p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}
