//! Per-layer linear probes.
//!
//! A probe is a multinomial logistic regression `W·pool(x) + b` trained on
//! one layer's activations. The probe for the final-logits block is the
//! identity map, so the model's own logits enter the stack unchanged.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::dataio::{put_u32, ActivationDump, LayerBlock, Reader};
use crate::error::{invalid_arg, invariant};
use crate::numeric::{argmax, derive_seed, log_sum_exp, pairwise_mean, seeded_rng, softmax_into};
use crate::{Error, FormatError, Matrix, Result};

pub const BUNDLE_MAGIC: [u8; 4] = *b"LPRB";
pub const BUNDLE_VERSION: u32 = 1;

/// Default cap on a probe's input width; wider layers are average-pooled.
pub const DEFAULT_MAX_POOLED_DIM: usize = 512;

/// Contiguous-window average pooling down to `output_dim` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub output_dim: usize,
}

impl PoolSpec {
    /// Window `j` covers `[ceil(j·f/m), ceil((j+1)·f/m))`; for `f >= m` every
    /// window is non-empty and the widest ones come first.
    fn window(&self, f: usize, j: usize) -> (usize, usize) {
        let m = self.output_dim;
        ((j * f).div_ceil(m), ((j + 1) * f).div_ceil(m))
    }

    fn check(&self, f: usize) -> Result<()> {
        if self.output_dim == 0 || self.output_dim > f {
            return Err(invalid_arg!(
                "pool output_dim must be in 1..={f}, got {}",
                self.output_dim
            ));
        }
        Ok(())
    }
}

fn pool_into<T: Copy + Into<f64>>(features: &[T], spec: &PoolSpec, out: &mut [f64]) {
    let f = features.len();
    for (j, o) in out.iter_mut().enumerate() {
        let (lo, hi) = spec.window(f, j);
        let s: f64 = features[lo..hi].iter().map(|&v| v.into()).sum();
        *o = s / (hi - lo) as f64;
    }
}

/// Averages `features` over `spec.output_dim` contiguous windows.
pub fn average_pool(features: &[f64], spec: &PoolSpec) -> Result<Vec<f64>> {
    spec.check(features.len())?;
    let mut out = vec![0.0; spec.output_dim];
    pool_into(features, spec, &mut out);
    Ok(out)
}

/// Linear classifier on one layer's (optionally pooled) activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    layer_index: u32,
    input_dim: usize,
    pool: Option<PoolSpec>,
    /// `K × pooled_dim`.
    weights: Matrix<f32>,
    bias: Vec<f32>,
}

impl LinearProbe {
    pub fn new(
        layer_index: u32,
        input_dim: usize,
        pool: Option<PoolSpec>,
        weights: Matrix<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let width = match pool {
            Some(p) => {
                p.check(input_dim)?;
                p.output_dim
            }
            None => input_dim,
        };
        if weights.cols() != width {
            return Err(Error::DimensionMismatch {
                what: "probe weight columns",
                expected: width,
                found: weights.cols(),
            });
        }
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                what: "probe bias length",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        if weights.as_slice().iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invariant!("probe for layer {layer_index} has non-finite parameters"));
        }
        Ok(Self {
            layer_index,
            input_dim,
            pool,
            weights,
            bias,
        })
    }

    /// Identity probe for the final-logits block.
    pub fn identity(layer_index: u32, n_classes: usize) -> Self {
        let mut weights = Matrix::zeros(n_classes, n_classes);
        for k in 0..n_classes {
            weights.set(k, k, 1.0);
        }
        Self {
            layer_index,
            input_dim: n_classes,
            pool: None,
            weights,
            bias: vec![0.0; n_classes],
        }
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn pool(&self) -> Option<PoolSpec> {
        self.pool
    }

    pub fn weights(&self) -> &Matrix<f32> {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn is_identity(&self) -> bool {
        let k = self.n_classes();
        self.pool.is_none()
            && self.input_dim == k
            && self.bias.iter().all(|&b| b == 0.0)
            && (0..k).all(|i| (0..k).all(|j| self.weights.get(i, j) == if i == j { 1.0 } else { 0.0 }))
    }

    fn width(&self) -> usize {
        self.weights.cols()
    }

    fn logits_into(&self, x: &[f32], pooled: &mut [f64], out: &mut [f64]) {
        match &self.pool {
            Some(spec) => pool_into(x, spec, pooled),
            None => {
                for (p, &v) in pooled.iter_mut().zip(x) {
                    *p = v as f64;
                }
            }
        }
        for (k, o) in out.iter_mut().enumerate() {
            let w = self.weights.row(k);
            let mut z = self.bias[k] as f64;
            for (&wj, &xj) in w.iter().zip(pooled.iter()) {
                z += wj as f64 * xj;
            }
            *o = z;
        }
    }
}

/// Applies a probe to every row of a layer block.
pub fn probe_logits(probe: &LinearProbe, layer: &LayerBlock) -> Result<Matrix<f64>> {
    if layer.feature_dim() != probe.input_dim {
        return Err(Error::DimensionMismatch {
            what: "layer feature dim vs probe input dim",
            expected: probe.input_dim,
            found: layer.feature_dim(),
        });
    }
    let n = layer.n_examples();
    let k = probe.n_classes();
    let mut out = Matrix::zeros(n, k);
    let mut pooled = vec![0.0; probe.width()];
    for i in 0..n {
        probe.logits_into(layer.data().row(i), &mut pooled, out.row_mut(i));
    }
    Ok(out)
}

/// Argmax accuracy of each layer's probe, in layer order.
pub fn probe_accuracy_curve(probes: &[LinearProbe], dump: &ActivationDump) -> Result<Vec<f64>> {
    dump.layers()
        .iter()
        .map(|layer| {
            let probe = find_probe(probes, layer.layer_index())?;
            let logits = probe_logits(probe, layer)?;
            let hits = logits
                .iter_rows()
                .zip(dump.labels())
                .filter(|(row, &y)| argmax(row) == y as usize)
                .count();
            Ok(hits as f64 / dump.n_examples() as f64)
        })
        .collect()
}

pub(crate) fn find_probe(probes: &[LinearProbe], layer_index: u32) -> Result<&LinearProbe> {
    probes
        .iter()
        .find(|p| p.layer_index == layer_index)
        .ok_or(Error::MissingProbe(layer_index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// ℓ₂ penalty on the weights (not the bias).
    pub weight_decay: f64,
    /// Layers wider than this are average-pooled to this width.
    pub max_pooled_dim: Option<usize>,
    /// Train on z-scored features and fold the scaling back into `W`, `b`.
    pub standardize: bool,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 50,
            decay_factor: 0.5,
            decay_every: 10,
            batch_size: 128,
            seed: 0,
            weight_decay: 0.0,
            max_pooled_dim: Some(DEFAULT_MAX_POOLED_DIM),
            standardize: true,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid_arg!("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_arg!("momentum must be in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(invalid_arg!("epochs must be >= 1"));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(invalid_arg!("batch_size and decay_every must be >= 1"));
        }
        if !(self.decay_factor > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid_arg!("decay_factor must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * libm::pow(self.decay_factor, (epoch / self.decay_every) as f64)
    }

    fn pool_for(&self, f: usize) -> Option<PoolSpec> {
        match self.max_pooled_dim {
            Some(m) if f > m => Some(PoolSpec { output_dim: m }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeTrace {
    /// Mean training cross-entropy after each epoch.
    pub epoch_loss: Vec<f64>,
    /// Only one class was present in the training labels.
    pub single_class: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub trace: ProbeTrace,
}

/// Mean softmax cross-entropy of `W·x + b` and its gradient.
///
/// `weight_decay` adds `(λ/2)‖W‖²`. Returns `(loss, dW, db)`.
pub fn cross_entropy_loss_and_grad(
    weights: &Matrix<f64>,
    bias: &[f64],
    features: &Matrix<f64>,
    labels: &[u32],
    weight_decay: f64,
) -> (f64, Matrix<f64>, Vec<f64>) {
    let idx: Vec<usize> = (0..features.rows()).collect();
    let mut gw = Matrix::zeros(weights.rows(), weights.cols());
    let mut gb = vec![0.0; bias.len()];
    let loss = batch_step(weights, bias, features, labels, &idx, weight_decay, &mut gw, &mut gb);
    (loss, gw, gb)
}

/// Fills the mean gradient over `idx`, returns the mean loss.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    w: &Matrix<f64>,
    b: &[f64],
    x: &Matrix<f64>,
    labels: &[u32],
    idx: &[usize],
    weight_decay: f64,
    gw: &mut Matrix<f64>,
    gb: &mut [f64],
) -> f64 {
    let k = b.len();
    let mut z = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut losses = Vec::with_capacity(idx.len());
    gw.as_mut_slice().fill(0.0);
    gb.fill(0.0);
    for &i in idx {
        let xi = x.row(i);
        affine(w, b, xi, &mut z);
        let y = labels[i] as usize;
        losses.push(log_sum_exp(&z) - z[y]);
        softmax_into(&z, &mut p);
        p[y] -= 1.0;
        for c in 0..k {
            gb[c] += p[c];
            for (g, &v) in gw.row_mut(c).iter_mut().zip(xi) {
                *g += p[c] * v;
            }
        }
    }
    let scale = 1.0 / idx.len() as f64;
    gb.iter_mut().for_each(|g| *g *= scale);
    for (g, &wv) in gw.as_mut_slice().iter_mut().zip(w.as_slice()) {
        *g = *g * scale + weight_decay * wv;
    }
    let penalty = 0.5 * weight_decay * w.as_slice().iter().map(|v| v * v).sum::<f64>();
    pairwise_mean(&losses) + penalty
}

fn affine(w: &Matrix<f64>, b: &[f64], x: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = b[c] + w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

fn mean_loss(w: &Matrix<f64>, b: &[f64], x: &Matrix<f64>, labels: &[u32]) -> f64 {
    let mut z = vec![0.0; b.len()];
    let losses: Vec<f64> = (0..x.rows())
        .map(|i| {
            affine(w, b, x.row(i), &mut z);
            log_sum_exp(&z) - z[labels[i] as usize]
        })
        .collect();
    pairwise_mean(&losses)
}

/// Trains a probe on one (non-final) layer by mini-batch SGD with momentum
/// and step decay. Deterministic for a fixed `config.seed`.
pub fn train_probe(
    layer: &LayerBlock,
    labels: &[u32],
    n_classes: usize,
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    config.validate()?;
    if layer.is_final_logits() {
        return Err(invalid_arg!(
            "layer {} holds the final logits; its probe is the identity",
            layer.layer_index()
        ));
    }
    let n = layer.n_examples();
    if n == 0 || labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "label count vs layer rows",
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= n_classes) {
        return Err(invalid_arg!("label {y} outside [0, {n_classes})"));
    }
    let f = layer.feature_dim();
    let pool = config.pool_for(f);
    let width = pool.map_or(f, |p| p.output_dim);

    let mut x = Matrix::zeros(n, width);
    for i in 0..n {
        let src = layer.data().row(i);
        match &pool {
            Some(spec) => pool_into(src, spec, x.row_mut(i)),
            None => {
                for (d, &v) in x.row_mut(i).iter_mut().zip(src) {
                    *d = v as f64;
                }
            }
        }
    }
    let (mean, scale) = if config.standardize {
        standardize_columns(&mut x)
    } else {
        (vec![0.0; width], vec![1.0; width])
    };

    let single_class = labels.iter().all(|&y| y == labels[0]);
    let mut w = Matrix::<f64>::zeros(n_classes, width);
    let mut b = vec![0.0; n_classes];
    let mut vw = Matrix::<f64>::zeros(n_classes, width);
    let mut vb = vec![0.0; n_classes];
    let mut gw = Matrix::<f64>::zeros(n_classes, width);
    let mut gb = vec![0.0; n_classes];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(config.seed);
    let mut trace = ProbeTrace {
        epoch_loss: Vec::with_capacity(config.epochs),
        single_class,
    };

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            batch_step(&w, &b, &x, labels, batch, config.weight_decay, &mut gw, &mut gb);
            for ((wv, v), g) in w.as_mut_slice().iter_mut().zip(vw.as_mut_slice()).zip(gw.as_slice()) {
                *v = config.momentum * *v + g;
                *wv -= lr * *v;
            }
            for ((bv, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = config.momentum * *v + g;
                *bv -= lr * *v;
            }
        }
        let loss = mean_loss(&w, &b, &x, labels);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: alloc::format!("probe for layer {} diverged", layer.layer_index()),
            });
        }
        trace.epoch_loss.push(loss);
    }

    // Fold the z-scoring into the parameters: W' = W / s, b' = b - W'·mean.
    let mut weights = Matrix::zeros(n_classes, width);
    let mut bias = vec![0f32; n_classes];
    for c in 0..n_classes {
        let mut shift = 0.0;
        for j in 0..width {
            let wj = w.get(c, j) / scale[j];
            shift += wj * mean[j];
            weights.set(c, j, wj as f32);
        }
        bias[c] = (b[c] - shift) as f32;
    }
    let probe = LinearProbe::new(layer.layer_index(), f, pool, weights, bias)?;
    Ok(TrainedProbe { probe, trace })
}

/// Centers and scales every column in place, returning `(mean, scale)`.
/// Constant columns keep scale 1.
fn standardize_columns(x: &mut Matrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (x.rows(), x.cols());
    let mut mean = vec![0.0; f];
    let mut scale = vec![1.0; f];
    let mut col = vec![0.0; n];
    for j in 0..f {
        for (i, c) in col.iter_mut().enumerate() {
            *c = x.get(i, j);
        }
        let m = pairwise_mean(&col);
        for c in col.iter_mut() {
            *c = (*c - m) * (*c - m);
        }
        let sd = libm::sqrt(pairwise_mean(&col));
        mean[j] = m;
        if sd > 1e-12 * (1.0 + m.abs()) {
            scale[j] = sd;
        }
        for i in 0..n {
            x.set(i, j, (x.get(i, j) - m) / scale[j]);
        }
    }
    (mean, scale)
}

/// Seed used for the probe of a given layer, derived from the run seed.
pub fn probe_seed(master: u64, layer_index: u32) -> u64 {
    derive_seed(master, layer_index as u64)
}

/// Trains (or, for the final-logits block, constructs) the probe of the
/// `position`-th layer. Only that layer's data is read.
pub fn train_layer_probe(
    dump: &ActivationDump,
    position: usize,
    config: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    let layer = dump
        .layers()
        .get(position)
        .ok_or_else(|| invalid_arg!("layer position {position} out of range"))?;
    if layer.is_final_logits() {
        return Ok(TrainedProbe {
            probe: LinearProbe::identity(layer.layer_index(), dump.n_classes()),
            trace: ProbeTrace::default(),
        });
    }
    let cfg = ProbeTrainConfig {
        seed: probe_seed(config.seed, layer.layer_index()),
        ..config.clone()
    };
    train_probe(layer, dump.labels(), dump.n_classes(), &cfg)
}

/// One probe per layer, in layer order.
pub fn train_probes(dump: &ActivationDump, config: &ProbeTrainConfig) -> Result<Vec<TrainedProbe>> {
    (0..dump.layers().len())
        .map(|pos| train_layer_probe(dump, pos, config))
        .collect()
}

/// Serializes probes to the bundle layout:
///
/// ```text
/// "LPRB"  u32 version=1  u32 count
/// per probe: u32 layer_index  u8 pool_kind (0 none, 1 average)  u32 pool_output_dim
///            u32 n_classes  u32 input_dim
///            f32 weights[n_classes * width]  f32 bias[n_classes]
/// u32 CRC32 of every preceding byte
/// ```
///
/// `width` is `pool_output_dim` when pooled, `input_dim` otherwise.
pub fn encode_bundle(probes: &[LinearProbe]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BUNDLE_MAGIC);
    put_u32(&mut out, BUNDLE_VERSION);
    put_u32(&mut out, probes.len() as u32);
    for p in probes {
        put_u32(&mut out, p.layer_index);
        match p.pool {
            Some(spec) => {
                out.push(1);
                put_u32(&mut out, spec.output_dim as u32);
            }
            None => {
                out.push(0);
                put_u32(&mut out, 0);
            }
        }
        put_u32(&mut out, p.n_classes() as u32);
        put_u32(&mut out, p.input_dim as u32);
        for v in p.weights.as_slice().iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn decode_bundle(bytes: &[u8]) -> core::result::Result<Vec<LinearProbe>, FormatError> {
    let mut r = Reader::new(bytes);
    r.expect_magic(BUNDLE_MAGIC)?;
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(FormatError::VersionMismatch {
            expected: BUNDLE_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer_index = r.u32()?;
        let kind = r.u8()?;
        let pool_dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let width = if kind == 1 { pool_dim } else { input_dim };
        let weights = r.f32_vec(k.saturating_mul(width))?;
        let bias = r.f32_vec(k)?;
        raw.push((layer_index, kind, pool_dim, k, input_dim, weights, bias));
    }
    r.finish_with_crc()?;
    let mut probes = Vec::with_capacity(raw.len());
    for (layer_index, kind, pool_dim, k, input_dim, weights, bias) in raw {
        let pool = match kind {
            0 => None,
            1 => Some(PoolSpec { output_dim: pool_dim }),
            other => return Err(invariant!("unknown pool kind {other}").into()),
        };
        let width = pool.map_or(input_dim, |p| p.output_dim);
        let weights = Matrix::from_vec(k, width, weights)?;
        probes.push(LinearProbe::new(layer_index, input_dim, pool, weights, bias)?);
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: &[&[f32]]) -> LayerBlock {
        LayerBlock::new(1, Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn average_pool_examples() {
        let even = average_pool(&[1.0, 2.0, 3.0, 4.0], &PoolSpec { output_dim: 2 }).unwrap();
        assert_eq!(even, vec![1.5, 3.5]);
        let short_last = average_pool(&[1.0, 2.0, 3.0], &PoolSpec { output_dim: 2 }).unwrap();
        assert_eq!(short_last, vec![1.5, 3.0]);
        let x = [0.3, -1.0, 7.5];
        assert_eq!(average_pool(&x, &PoolSpec { output_dim: 3 }).unwrap(), x.to_vec());
    }

    #[test]
    fn average_pool_always_emits_output_dim_windows() {
        for f in 1..40 {
            for m in 1..=f {
                let x: Vec<f64> = (0..f).map(|v| v as f64).collect();
                let spec = PoolSpec { output_dim: m };
                assert_eq!(average_pool(&x, &spec).unwrap().len(), m);
                let covered: usize = (0..m).map(|j| spec.window(f, j)).map(|(a, b)| b - a).sum();
                assert_eq!(covered, f);
            }
        }
    }

    #[test]
    fn average_pool_rejects_bad_dims() {
        assert!(average_pool(&[1.0, 2.0], &PoolSpec { output_dim: 0 }).is_err());
        assert!(average_pool(&[1.0, 2.0], &PoolSpec { output_dim: 3 }).is_err());
    }

    #[test]
    fn identity_probe_reproduces_logits_exactly() {
        let logits = LayerBlock::final_logits(3, Matrix::from_rows(&[[1.0f32, 2.0], [3.0, 4.0]]).unwrap());
        let probe = LinearProbe::identity(3, 2);
        assert!(probe.is_identity());
        let out = probe_logits(&probe, &logits).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let probe = LinearProbe::new(1, 3, None, Matrix::zeros(2, 3), vec![0.5, -2.0]).unwrap();
        let out = probe_logits(&probe, &block(&[&[1.0, 2.0, 3.0], &[9.0, 9.0, 9.0]])).unwrap();
        assert_eq!(out.row(0), &[0.5, -2.0]);
        assert_eq!(out.row(1), &[0.5, -2.0]);
    }

    #[test]
    fn unit_weights_pass_features_through() {
        let w = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let probe = LinearProbe::new(1, 2, None, w, vec![0.0, 0.0]).unwrap();
        let out = probe_logits(&probe, &block(&[&[0.5, -0.5]])).unwrap();
        assert_eq!(out.row(0), &[0.5, -0.5]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let probe = LinearProbe::identity(1, 3);
        assert!(matches!(
            probe_logits(&probe, &block(&[&[1.0, 2.0]])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn learning_rate_schedule_halves_every_ten_epochs() {
        let cfg = ProbeTrainConfig::default();
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        assert_eq!(cfg.learning_rate_at(9), 0.01);
        assert_eq!(cfg.learning_rate_at(10), 0.005);
        assert!((cfg.learning_rate_at(25) - 0.0025).abs() < 1e-18);
    }

    #[test]
    fn final_logits_layer_cannot_be_trained() {
        let layer = LayerBlock::final_logits(2, Matrix::from_rows(&[[0.0f32, 1.0]]).unwrap());
        assert!(train_probe(&layer, &[0], 2, &ProbeTrainConfig::default()).is_err());
    }

    #[test]
    fn single_class_trains_with_warning() {
        let layer = block(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let t = train_probe(&layer, &[1, 1, 1], 2, &ProbeTrainConfig::default()).unwrap();
        assert!(t.trace.single_class);
        let logits = probe_logits(&t.probe, &layer).unwrap();
        assert!(logits.iter_rows().all(|r| r[1] > r[0]));
    }

    #[test]
    fn wide_layers_are_pooled() {
        let cfg = ProbeTrainConfig {
            max_pooled_dim: Some(4),
            epochs: 2,
            ..Default::default()
        };
        let rows: Vec<Vec<f32>> = (0..8).map(|i| (0..10).map(|j| (i * j) as f32).collect()).collect();
        let layer = LayerBlock::new(1, Matrix::from_rows(&rows).unwrap());
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let t = train_probe(&layer, &labels, 2, &cfg).unwrap();
        assert_eq!(t.probe.pool(), Some(PoolSpec { output_dim: 4 }));
        assert_eq!(t.probe.weights().cols(), 4);
        assert_eq!(probe_logits(&t.probe, &layer).unwrap().cols(), 2);
    }

    #[test]
    fn bundle_corruption_is_detected() {
        let probe = LinearProbe::new(
            2,
            6,
            Some(PoolSpec { output_dim: 3 }),
            Matrix::from_rows(&[[0.1f32, 0.2, 0.3], [-1.0, 0.0, 1.0]]).unwrap(),
            vec![0.25, -0.25],
        )
        .unwrap();
        let mut bytes = encode_bundle(&[probe.clone(), LinearProbe::identity(3, 2)]);
        assert_eq!(decode_bundle(&bytes).unwrap()[0], probe);
        bytes[30] ^= 1;
        assert!(matches!(decode_bundle(&bytes), Err(FormatError::ChecksumMismatch { .. })));
    }
}
