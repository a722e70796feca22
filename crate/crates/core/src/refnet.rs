//! A small ReLU MLP and 2-D synthetic tasks, used to produce activation
//! dumps end to end without an external framework.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataio::{ActivationDump, LayerBlock};
use crate::error::invalid_arg;
use crate::numeric::{argmax, log_sum_exp, pairwise_mean, seeded_rng, softmax_into};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    GaussianMixture,
    Spiral,
}

impl core::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_mixture" | "gaussian-mixture" | "gmm" => Ok(TaskKind::GaussianMixture),
            "spiral" => Ok(TaskKind::Spiral),
            other => Err(invalid_arg!("unknown task kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n: usize,
    pub n_classes: usize,
    /// Gaussian mixture: isotropic std around each center. Spiral: std of
    /// the angular jitter in radians.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    /// Three interleaved spiral arms with enough angular jitter that the
    /// classes overlap near the origin.
    fn default() -> Self {
        Self {
            kind: TaskKind::Spiral,
            n: 5000,
            n_classes: 3,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Points in the plane with balanced labels (class counts differ by at most
/// one), in a seeded random order.
pub fn generate_task(task: &SyntheticTask) -> Result<(Matrix<f64>, Vec<u32>)> {
    let k = task.n_classes;
    if k < 2 || task.n < k {
        return Err(invalid_arg!("synthetic task needs K >= 2 and n >= K"));
    }
    let mut rng = seeded_rng(task.seed);
    let mut labels: Vec<u32> = (0..task.n).map(|i| (i % k) as u32).collect();
    labels.shuffle(&mut rng);
    let mut x = Matrix::zeros(task.n, 2);
    let tau = core::f64::consts::TAU;
    for (i, &y) in labels.iter().enumerate() {
        let base = tau * y as f64 / k as f64;
        let (px, py) = match task.kind {
            TaskKind::GaussianMixture => {
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                (2.0 * libm::cos(base) + task.noise * nx, 2.0 * libm::sin(base) + task.noise * ny)
            }
            TaskKind::Spiral => {
                let t: f64 = rng.random_range(0.0..1.0);
                let jitter: f64 = rng.sample(StandardNormal);
                let theta = base + 4.0 * t + task.noise * jitter;
                (t * libm::sin(theta), t * libm::cos(theta))
            }
        };
        x.set(i, 0, px);
        x.set(i, 1, py);
    }
    Ok((x, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefNetSpec {
    /// Input width, hidden widths, then the class count.
    pub layer_widths: Vec<usize>,
    /// ℓ₂ penalty `(l2/2)‖W‖²` on every weight matrix.
    pub l2: f64,
    pub epochs: usize,
    /// Peak learning rate; decayed to zero by a cosine schedule.
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RefNetSpec {
    fn default() -> Self {
        Self {
            layer_widths: vec![2, 32, 32, 32, 3],
            l2: 1e-4,
            epochs: 60,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl RefNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 4 {
            return Err(invalid_arg!(
                "need an input width, at least two hidden widths and a class count ({} widths given)",
                self.layer_widths.len()
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(invalid_arg!("layer widths must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.l2 < 0.0 || self.batch_size == 0 {
            return Err(invalid_arg!("need lr > 0, momentum in [0, 1), l2 >= 0 and batch_size >= 1"));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }
}

/// Fully connected layer `out = W·in + b`, `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.iter_rows().zip(&self.bias)) {
            *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// ReLU MLP; every layer but the last is followed by a ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let sd = libm::sqrt(2.0 / fan_in as f64);
                let data = (0..fan_in * fan_out)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Dense {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized buffer"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    fn scratch(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect()
    }

    /// Fills `acts[l]` with the output of layer `l` (post-ReLU for hidden
    /// layers, raw logits for the last).
    fn forward_into(&self, x: &[f64], acts: &mut [Vec<f64>]) {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.split_at_mut(l);
            let input = if l == 0 { x } else { &done[l - 1] };
            layer.apply(input, &mut rest[0]);
            if l != last {
                rest[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    /// Every layer's output for one input.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = self.scratch();
        self.forward_into(x, &mut acts);
        acts
    }

    pub fn logits(&self, x: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(x.rows(), self.n_classes());
        let mut acts = self.scratch();
        for i in 0..x.rows() {
            self.forward_into(x.row(i), &mut acts);
            out.row_mut(i).copy_from_slice(acts.last().expect("non-empty net"));
        }
        out
    }

    pub fn accuracy(&self, x: &Matrix<f64>, labels: &[u32]) -> f64 {
        let logits = self.logits(x);
        let hits = logits
            .iter_rows()
            .zip(labels)
            .filter(|(r, &y)| argmax(r) == y as usize)
            .count();
        hits as f64 / labels.len().max(1) as f64
    }

    /// Mean cross-entropy plus `(l2/2)Σ‖W‖²` over `idx`, with gradients
    /// accumulated into `grads` (overwritten).
    fn loss_and_grad_over(
        &self,
        x: &Matrix<f64>,
        labels: &[u32],
        idx: &[usize],
        l2: f64,
        grads: &mut [Dense],
        acts: &mut [Vec<f64>],
        deltas: &mut [Vec<f64>],
    ) -> f64 {
        for g in grads.iter_mut() {
            g.weights.as_mut_slice().fill(0.0);
            g.bias.fill(0.0);
        }
        let last = self.layers.len() - 1;
        let mut losses = Vec::with_capacity(idx.len());
        for &i in idx {
            let xi = x.row(i);
            self.forward_into(xi, acts);
            let y = labels[i] as usize;
            losses.push(log_sum_exp(&acts[last]) - acts[last][y]);
            softmax_into(&acts[last], &mut deltas[last]);
            deltas[last][y] -= 1.0;
            for l in (0..=last).rev() {
                if l > 0 {
                    let (lower, upper) = deltas.split_at_mut(l);
                    let d_out = &upper[0];
                    let d_in = &mut lower[l - 1];
                    d_in.fill(0.0);
                    for (r, &dr) in d_out.iter().enumerate() {
                        for (di, &w) in d_in.iter_mut().zip(self.layers[l].weights.row(r)) {
                            *di += w * dr;
                        }
                    }
                    for (di, &a) in d_in.iter_mut().zip(&acts[l - 1]) {
                        if a <= 0.0 {
                            *di = 0.0;
                        }
                    }
                }
                let input: &[f64] = if l == 0 { xi } else { &acts[l - 1] };
                let g = &mut grads[l];
                for (r, &dr) in deltas[l].iter().enumerate() {
                    g.bias[r] += dr;
                    for (gw, &a) in g.weights.row_mut(r).iter_mut().zip(input) {
                        *gw += dr * a;
                    }
                }
            }
        }
        let scale = 1.0 / idx.len() as f64;
        let mut penalty = 0.0;
        for (g, layer) in grads.iter_mut().zip(&self.layers) {
            g.bias.iter_mut().for_each(|v| *v *= scale);
            for (gw, &w) in g.weights.as_mut_slice().iter_mut().zip(layer.weights.as_slice()) {
                *gw = *gw * scale + l2 * w;
                penalty += w * w;
            }
        }
        pairwise_mean(&losses) + 0.5 * l2 * penalty
    }

    /// Full-data objective and gradient, for checking backprop.
    pub fn loss_and_grad(&self, x: &Matrix<f64>, labels: &[u32], l2: f64) -> (f64, Vec<Dense>) {
        let idx: Vec<usize> = (0..x.rows()).collect();
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut acts = self.scratch();
        let mut deltas = self.scratch();
        let loss = self.loss_and_grad_over(x, labels, &idx, l2, &mut grads, &mut acts, &mut deltas);
        (loss, grads)
    }

    pub fn loss(&self, x: &Matrix<f64>, labels: &[u32], l2: f64) -> f64 {
        let logits = self.logits(x);
        let per: Vec<f64> = logits
            .iter_rows()
            .zip(labels)
            .map(|(r, &y)| log_sum_exp(r) - r[y as usize])
            .collect();
        let penalty: f64 = self
            .layers
            .iter()
            .flat_map(|l| l.weights.as_slice())
            .map(|w| w * w)
            .sum();
        pairwise_mean(&per) + 0.5 * l2 * penalty
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub net: Mlp,
    /// Full training objective after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch SGD with momentum, ℓ₂ and a cosine learning-rate schedule.
pub fn train_refnet(spec: &RefNetSpec, features: &Matrix<f64>, labels: &[u32]) -> Result<TrainedNet> {
    spec.validate()?;
    if features.cols() != spec.layer_widths[0] || labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            what: "features vs network input / label count",
            expected: spec.layer_widths[0],
            found: features.cols(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= spec.n_classes()) {
        return Err(invalid_arg!("label {y} outside [0, {})", spec.n_classes()));
    }
    let mut net = Mlp::init(&spec.layer_widths, spec.seed);
    let mut velocity: Vec<Dense> = net.layers.iter().map(Dense::zeros_like).collect();
    let mut grads: Vec<Dense> = net.layers.iter().map(Dense::zeros_like).collect();
    let mut acts = net.scratch();
    let mut deltas = net.scratch();
    let mut rng = seeded_rng(crate::numeric::derive_seed(spec.seed, 1));
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut epoch_loss = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            net.loss_and_grad_over(features, labels, batch, spec.l2, &mut grads, &mut acts, &mut deltas);
            for ((layer, v), g) in net.layers.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                let params = layer.weights.as_mut_slice().iter_mut().chain(layer.bias.iter_mut());
                let vel = v.weights.as_mut_slice().iter_mut().chain(v.bias.iter_mut());
                let grad = g.weights.as_slice().iter().chain(&g.bias);
                for ((p, v), g) in params.zip(vel).zip(grad) {
                    *v = spec.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        let loss = net.loss(features, labels, spec.l2);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: alloc::format!("reference network training objective is {loss}"),
            });
        }
        epoch_loss.push(loss);
    }
    Ok(TrainedNet { net, epoch_loss })
}

/// One block per hidden layer (post-ReLU, indices 1..) plus the logits,
/// flagged as the final block.
pub fn export_activations(net: &Mlp, features: &Matrix<f64>, labels: &[u32]) -> Result<ActivationDump> {
    if features.cols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dim vs network input",
            expected: net.input_dim(),
            found: features.cols(),
        });
    }
    let n = features.rows();
    let mut blocks: Vec<Matrix<f32>> = net
        .layers
        .iter()
        .map(|l| Matrix::zeros(n, l.bias.len()))
        .collect();
    let mut acts = net.scratch();
    for i in 0..n {
        net.forward_into(features.row(i), &mut acts);
        for (block, a) in blocks.iter_mut().zip(&acts) {
            for (dst, &v) in block.row_mut(i).iter_mut().zip(a) {
                *dst = v as f32;
            }
        }
    }
    let last = blocks.len() - 1;
    let layers = blocks
        .into_iter()
        .enumerate()
        .map(|(l, data)| {
            let index = l as u32 + 1;
            if l == last {
                LayerBlock::final_logits(index, data)
            } else {
                LayerBlock::new(index, data)
            }
        })
        .collect();
    ActivationDump::new(net.n_classes() as u32, layers, labels.to_vec())
}
