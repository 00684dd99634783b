//! LF-CNN and VAR-CNN: forward pass, loss and hand-derived backward pass.
//!
//! Both variants share the layer stack
//!
//! ```text
//! X (n × t) ──Wᵀ──▶ latent (k × t) ──temporal conv──▶ (k × t') ──ReLU──▶ max-pool(2, 2)
//!   ──flatten──▶ dropout ──dense──▶ softmax
//! ```
//!
//! with `t' = t - l + 1` (valid padding). LF-CNN convolves each latent
//! component with its own `l`-tap filter. VAR-CNN gives every output component
//! an `l × k` kernel spanning all components, which is `l·k²` temporal weights
//! instead of `l·k`.
//!
//! The flattened feature index is `component · pooled_len + pooled_time`, so
//! the output weights of one class reshape to a `k × pooled_len` map.

use std::fmt;

use crate::error::{param_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{correlate_into, max_pool1d, pooled_len, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Lf,
    Var,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lf => "lf",
            Variant::Var => "var",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lf" | "lf-cnn" => Ok(Variant::Lf),
            "var" | "var-cnn" => Ok(Variant::Var),
            other => param_err(format!("unknown variant `{other}` (expected lf or var)")),
        }
    }
}

pub const DEFAULT_N_LATENT: usize = 32;
pub const DEFAULT_FILTER_LEN: usize = 7;
pub const DEFAULT_POOL: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const DEFAULT_L1: f64 = 3e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_channels: usize,
    pub n_latent: usize,
    pub filter_len: usize,
    pub n_times: usize,
    pub pool_factor: usize,
    pub pool_stride: usize,
    pub n_classes: usize,
    /// Probability of dropping a flattened feature during training.
    pub dropout_rate: f64,
    pub l1_lambda: f64,
}

impl ModelConfig {
    /// Configuration with the default hyperparameters for the given data shape.
    pub fn new(variant: Variant, n_channels: usize, n_times: usize, n_classes: usize) -> Self {
        Self {
            variant,
            n_channels,
            n_latent: DEFAULT_N_LATENT,
            filter_len: DEFAULT_FILTER_LEN,
            n_times,
            pool_factor: DEFAULT_POOL,
            pool_stride: DEFAULT_POOL,
            n_classes,
            dropout_rate: DEFAULT_DROPOUT,
            l1_lambda: DEFAULT_L1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 || self.n_latent == 0 || self.n_classes == 0 {
            return param_err("n_channels, n_latent and n_classes must be >= 1");
        }
        if self.n_latent > self.n_channels {
            return param_err(format!(
                "n_latent ({}) must not exceed n_channels ({})",
                self.n_latent, self.n_channels
            ));
        }
        if self.filter_len == 0 || self.filter_len > self.n_times {
            return param_err(format!(
                "filter_len ({}) must be in 1..=n_times ({})",
                self.filter_len, self.n_times
            ));
        }
        if self.pool_factor == 0 || self.pool_stride == 0 {
            return param_err("pool factor and stride must be >= 1");
        }
        if self.pooled_len() == 0 {
            return param_err("epoch too short for one pooling window");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return param_err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.l1_lambda >= 0.0) || !self.l1_lambda.is_finite() {
            return param_err("l1_lambda must be finite and >= 0");
        }
        Ok(())
    }

    pub fn conv_len(&self) -> usize {
        self.n_times + 1 - self.filter_len
    }

    pub fn pooled_len(&self) -> usize {
        pooled_len(self.conv_len(), self.pool_factor, self.pool_stride)
    }

    pub fn n_features(&self) -> usize {
        self.n_latent * self.pooled_len()
    }

    pub fn temporal_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::Lf => vec![self.n_latent, self.filter_len],
            Variant::Var => vec![self.n_latent, self.filter_len, self.n_latent],
        }
    }

    pub fn temporal_param_count(&self) -> usize {
        self.temporal_shape().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.n_channels * self.n_latent
            + self.temporal_param_count()
            + self.n_latent
            + self.n_features() * self.n_classes
            + self.n_classes
    }
}

/// Trainable tensors. Also used for gradients, which share the shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `n × k` spatial filters; column `c` extracts latent component `c`.
    pub spatial: Tensor,
    /// LF: `k × l`. VAR: `k × l × k`, indexed `[out component, tap, in component]`.
    pub temporal: Tensor,
    pub b_temporal: Tensor,
    /// `F × n_classes`.
    pub w_out: Tensor,
    pub b_out: Tensor,
}

pub const PARAM_NAMES: [&str; 5] = ["spatial", "temporal", "b_temporal", "w_out", "b_out"];

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            spatial: Tensor::zeros(&[cfg.n_channels, cfg.n_latent]),
            temporal: Tensor::zeros(&cfg.temporal_shape()),
            b_temporal: Tensor::zeros(&[cfg.n_latent]),
            w_out: Tensor::zeros(&[cfg.n_features(), cfg.n_classes]),
            b_out: Tensor::zeros(&[cfg.n_classes]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.spatial,
            &self.temporal,
            &self.b_temporal,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.spatial,
            &mut self.temporal,
            &mut self.b_temporal,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    /// Whether each tensor in [`Self::tensors`] order is a weight (penalized) or a bias.
    pub const IS_WEIGHT: [bool; 5] = [true, true, false, true, false];

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = Self::zeros(cfg);
        for ((have, want), name) in self.tensors().iter().zip(expect.tensors()).zip(PARAM_NAMES) {
            if have.shape() != want.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, config expects {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Sum of absolute values over weight tensors; biases excluded.
    pub fn weight_l1(&self) -> f64 {
        self.tensors()
            .iter()
            .zip(Self::IS_WEIGHT)
            .filter(|(_, w)| *w)
            .map(|(t, _)| t.l1_norm())
            .sum()
    }

    pub(crate) fn axpy(&mut self, a: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += a * s;
            }
        }
    }

    pub(crate) fn scale_in_place(&mut self, a: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= a);
        }
    }

    /// Fraction of weight entries with `|w| < threshold`.
    pub fn sparsity(&self, threshold: f64) -> f64 {
        let (mut small, mut total) = (0usize, 0usize);
        for (t, is_w) in self.tensors().iter().zip(Self::IS_WEIGHT) {
            if is_w {
                small += t.data().iter().filter(|v| v.abs() < threshold).count();
                total += t.len();
            }
        }
        small as f64 / total as f64
    }
}

pub type Gradients = ModelParams;

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    /// `k × t`.
    pub latent: Tensor,
    /// `k × t'`, before the ReLU.
    pub conv_pre_relu: Tensor,
    /// Argmax position (into the conv time axis) of every pooling window, `k × pooled_len`.
    pub pool_argmax: Vec<usize>,
    /// Flattened pooled features before dropout.
    pub features: Vec<f64>,
    /// Multiplier per feature; `None` at inference.
    pub dropout_mask: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

fn check_epoch(cfg: &ModelConfig, epoch: &Tensor) -> Result<()> {
    if epoch.shape() != [cfg.n_channels, cfg.n_times] {
        return Err(Error::Dimension {
            op: "forward",
            lhs: epoch.shape().to_vec(),
            rhs: vec![cfg.n_channels, cfg.n_times],
        });
    }
    Ok(())
}

/// `latent = Wᵀ·X`.
pub fn spatial_forward(params: &ModelParams, epoch: &Tensor) -> Result<Tensor> {
    let (n, k) = (params.spatial.rows(), params.spatial.cols());
    let [rows, t] = epoch.shape() else {
        return Err(Error::Dimension {
            op: "spatial_forward",
            lhs: epoch.shape().to_vec(),
            rhs: vec![n],
        });
    };
    if *rows != n {
        return Err(Error::Dimension {
            op: "spatial_forward",
            lhs: epoch.shape().to_vec(),
            rhs: params.spatial.shape().to_vec(),
        });
    }
    let t = *t;
    let mut latent = vec![0.0; k * t];
    let w = params.spatial.data();
    for r in 0..n {
        let xrow = epoch.row(r);
        for c in 0..k {
            let wv = w[r * k + c];
            let lrow = &mut latent[c * t..(c + 1) * t];
            for (l, &x) in lrow.iter_mut().zip(xrow) {
                *l += wv * x;
            }
        }
    }
    Tensor::new(vec![k, t], latent)
}

/// Output of the temporal block for one trial.
#[derive(Debug, Clone)]
pub struct TemporalOutput {
    /// `k × pooled_len`.
    pub pooled: Tensor,
    pub conv_pre_relu: Tensor,
    pub pool_argmax: Vec<usize>,
}

/// Temporal convolution (+ bias) → ReLU → max-pool over time.
pub fn temporal_forward(cfg: &ModelConfig, params: &ModelParams, latent: &Tensor) -> Result<TemporalOutput> {
    let (k, t) = (latent.rows(), latent.cols());
    if t < cfg.filter_len || k != cfg.n_latent {
        return Err(Error::Dimension {
            op: "temporal_forward",
            lhs: latent.shape().to_vec(),
            rhs: vec![cfg.n_latent, cfg.filter_len],
        });
    }
    let l = cfg.filter_len;
    let tc = t + 1 - l;
    let taps = params.temporal.data();
    let mut conv = vec![0.0; k * tc];
    let mut kernel = vec![0.0; l];
    for c in 0..k {
        let out = &mut conv[c * tc..(c + 1) * tc];
        out.fill(params.b_temporal.data()[c]);
        match cfg.variant {
            Variant::Lf => correlate_into(latent.row(c), &taps[c * l..(c + 1) * l], out),
            Variant::Var => {
                for src in 0..k {
                    for (j, kv) in kernel.iter_mut().enumerate() {
                        *kv = taps[(c * l + j) * k + src];
                    }
                    correlate_into(latent.row(src), &kernel, out);
                }
            }
        }
    }
    let pl = pooled_len(tc, cfg.pool_factor, cfg.pool_stride);
    let mut pooled = Vec::with_capacity(k * pl);
    let mut argmax = Vec::with_capacity(k * pl);
    let mut relu = vec![0.0; tc];
    for c in 0..k {
        for (r, &v) in relu.iter_mut().zip(&conv[c * tc..(c + 1) * tc]) {
            *r = v.max(0.0);
        }
        let (vals, idx) = max_pool1d(&relu, cfg.pool_factor, cfg.pool_stride);
        pooled.extend(vals);
        argmax.extend(idx);
    }
    Ok(TemporalOutput {
        pooled: Tensor::new(vec![k, pl], pooled)?,
        conv_pre_relu: Tensor::new(vec![k, tc], conv)?,
        pool_argmax: argmax,
    })
}

/// Dense layer and softmax on the flattened features.
pub fn output_forward(params: &ModelParams, features: &[f64], mask: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (f, classes) = (params.w_out.rows(), params.w_out.cols());
    if features.len() != f || mask.is_some_and(|m| m.len() != f) {
        return Err(Error::Dimension {
            op: "output_forward",
            lhs: vec![features.len()],
            rhs: params.w_out.shape().to_vec(),
        });
    }
    let mut logits = params.b_out.data().to_vec();
    let w = params.w_out.data();
    for (i, &x) in features.iter().enumerate() {
        let h = match mask {
            Some(m) => x * m[i],
            None => x,
        };
        if h == 0.0 {
            continue;
        }
        for (z, &wv) in logits.iter_mut().zip(&w[i * classes..(i + 1) * classes]) {
            *z += h * wv;
        }
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite { op: "output_forward" });
    }
    let probs = softmax(&logits);
    Ok((logits, probs))
}

pub fn forward(cfg: &ModelConfig, params: &ModelParams, epoch: &Tensor, mask: Option<Vec<f64>>) -> Result<ForwardCache> {
    check_epoch(cfg, epoch)?;
    let latent = spatial_forward(params, epoch)?;
    let temporal = temporal_forward(cfg, params, &latent)?;
    let features = temporal.pooled.into_data();
    let (logits, probabilities) = output_forward(params, &features, mask.as_deref())?;
    Ok(ForwardCache {
        input: epoch.clone(),
        latent,
        conv_pre_relu: temporal.conv_pre_relu,
        pool_argmax: temporal.pool_argmax,
        features,
        dropout_mask: mask,
        logits,
        probabilities,
    })
}

/// Class probabilities at inference (no dropout).
pub fn predict_proba(cfg: &ModelConfig, params: &ModelParams, epoch: &Tensor) -> Result<Vec<f64>> {
    Ok(forward(cfg, params, epoch, None)?.probabilities)
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(f64::MIN_POSITIVE).ln()
}

/// Cross-entropy plus `l1_lambda` times the weight l1 norm (biases excluded).
pub fn loss(params: &ModelParams, probabilities: &[f64], label: usize, l1_lambda: f64) -> f64 {
    cross_entropy(probabilities, label) + l1_lambda * params.weight_l1()
}

/// Gradient of the cross-entropy term alone.
pub fn backward_data(cfg: &ModelConfig, params: &ModelParams, cache: &ForwardCache, label: usize) -> Result<Gradients> {
    let (k, l, tc, pl) = (cfg.n_latent, cfg.filter_len, cfg.conv_len(), cfg.pooled_len());
    let classes = cfg.n_classes;
    if cache.latent.shape() != [k, cfg.n_times]
        || cache.conv_pre_relu.shape() != [k, tc]
        || cache.pool_argmax.len() != k * pl
        || cache.probabilities.len() != classes
    {
        return Err(Error::Contract(
            "forward cache does not match the model configuration".into(),
        ));
    }
    if label >= classes {
        return param_err(format!("label {label} out of range"));
    }
    let mut g = ModelParams::zeros(cfg);

    let mut dlogits = cache.probabilities.clone();
    dlogits[label] -= 1.0;
    g.b_out.data_mut().copy_from_slice(&dlogits);

    // Dense layer: dW_out = h ⊗ dlogits, dfeatures = mask ⊙ (W_out · dlogits).
    let w_out = params.w_out.data();
    let mut dfeat = vec![0.0; k * pl];
    {
        let gw = g.w_out.data_mut();
        for i in 0..k * pl {
            let m = cache.dropout_mask.as_ref().map_or(1.0, |m| m[i]);
            let h = cache.features[i] * m;
            let row = &mut gw[i * classes..(i + 1) * classes];
            let mut back = 0.0;
            for ((gv, &dz), &wv) in row.iter_mut().zip(&dlogits).zip(&w_out[i * classes..(i + 1) * classes]) {
                *gv = h * dz;
                back += wv * dz;
            }
            dfeat[i] = back * m;
        }
    }

    // Max-pool and ReLU: only the winning, positive positions carry gradient.
    let conv = cache.conv_pre_relu.data();
    let mut dconv_sparse: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    for c in 0..k {
        for p in 0..pl {
            let pos = cache.pool_argmax[c * pl + p];
            let d = dfeat[c * pl + p];
            if d != 0.0 && conv[c * tc + pos] > 0.0 {
                dconv_sparse[c].push((pos, d));
            }
        }
    }

    let taps = params.temporal.data();
    let latent = cache.latent.data();
    let t = cfg.n_times;
    let mut dlatent = vec![0.0; k * t];
    {
        let gb = g.b_temporal.data_mut();
        for c in 0..k {
            gb[c] = dconv_sparse[c].iter().map(|(_, d)| d).sum();
        }
    }
    let gt = g.temporal.data_mut();
    match cfg.variant {
        Variant::Lf => {
            for c in 0..k {
                let lrow = &latent[c * t..(c + 1) * t];
                for &(pos, d) in &dconv_sparse[c] {
                    for j in 0..l {
                        gt[c * l + j] += d * lrow[pos + j];
                        dlatent[c * t + pos + j] += d * taps[c * l + j];
                    }
                }
            }
        }
        Variant::Var => {
            for c in 0..k {
                for &(pos, d) in &dconv_sparse[c] {
                    for j in 0..l {
                        let base = (c * l + j) * k;
                        for src in 0..k {
                            gt[base + src] += d * latent[src * t + pos + j];
                            dlatent[src * t + pos + j] += d * taps[base + src];
                        }
                    }
                }
            }
        }
    }

    // Spatial layer: dW[r, c] = <X[r, :], dlatent[c, :]>.
    let n = cfg.n_channels;
    let gs = g.spatial.data_mut();
    for r in 0..n {
        let xrow = cache.input.row(r);
        for c in 0..k {
            if dconv_sparse[c].is_empty() {
                continue;
            }
            let drow = &dlatent[c * t..(c + 1) * t];
            gs[r * k + c] = xrow.iter().zip(drow).map(|(a, b)| a * b).sum();
        }
    }
    for (t, name) in g.tensors().iter().zip(PARAM_NAMES) {
        if !t.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
    }
    Ok(g)
}

/// Adds `lambda · sign(w)` to the weight gradients; the subgradient at `w == 0` is 0.
pub fn add_l1_subgradient(grads: &mut Gradients, params: &ModelParams, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for ((g, p), is_w) in grads.tensors_mut().into_iter().zip(params.tensors()).zip(ModelParams::IS_WEIGHT) {
        if !is_w {
            continue;
        }
        for (gv, &w) in g.data_mut().iter_mut().zip(p.data()) {
            if w > 0.0 {
                *gv += lambda;
            } else if w < 0.0 {
                *gv -= lambda;
            }
        }
    }
}

/// Full gradient of [`loss`] for one trial.
pub fn backward(cfg: &ModelConfig, params: &ModelParams, cache: &ForwardCache, label: usize) -> Result<Gradients> {
    let mut g = backward_data(cfg, params, cache, label)?;
    add_l1_subgradient(&mut g, params, cfg.l1_lambda);
    Ok(g)
}

/// LF parameters equivalent to the diagonal slices of a VAR kernel bank.
pub fn var_diagonal_as_lf(cfg: &ModelConfig, params: &ModelParams) -> Result<(ModelConfig, ModelParams)> {
    if cfg.variant != Variant::Var {
        return param_err("expected a VAR configuration");
    }
    let (k, l) = (cfg.n_latent, cfg.filter_len);
    let lf_cfg = ModelConfig {
        variant: Variant::Lf,
        ..cfg.clone()
    };
    let taps = params.temporal.data();
    let diag = (0..k)
        .flat_map(|c| (0..l).map(move |j| taps[(c * l + j) * k + c]))
        .collect();
    let lf = ModelParams {
        temporal: Tensor::new(vec![k, l], diag)?,
        ..params.clone()
    };
    Ok((lf_cfg, lf))
}
