//! The logit stack and the two calibrators fitted on it.
//!
//! For every example the stack holds one `K`-vector of logits per probe,
//! the model's own logits last. LATES predicts `softmax(Σ_k β_k r_k)` with
//! `β ≥ 0`, fitted by projected SGD from `β₀ = (0, …, 0, 1)`. Temperature
//! scaling is the restriction to `β = (0, …, 0, 1/τ)`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::dataio::ActivationDump;
use crate::error::{invalid_arg, invariant};
use crate::numeric::{log_sum_exp, pairwise_mean, pairwise_sum_rows, seeded_rng, softmax_into};
use crate::probes::{find_probe, probe_logits, LinearProbe};
use crate::{Error, Matrix, Result};

/// Probabilities below this are clipped before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1e3;

/// `n × d × K` tensor of probe logits; the last probe slice is the model's.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitStack {
    n: usize,
    d: usize,
    k: usize,
    values: Vec<f64>,
}

impl LogitStack {
    /// Stacks per-probe `n × K` logit matrices; the last one must be the
    /// model's own logits.
    pub fn from_slices(slices: &[Matrix<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| invalid_arg!("a logit stack needs at least one probe"))?;
        let (n, k) = (first.rows(), first.cols());
        let d = slices.len();
        for s in slices {
            if s.rows() != n || s.cols() != k {
                return Err(Error::DimensionMismatch {
                    what: "probe logit matrix shape (rows * K)",
                    expected: n * k,
                    found: s.rows() * s.cols(),
                });
            }
        }
        let mut values = vec![0.0; n * d * k];
        for (p, s) in slices.iter().enumerate() {
            for i in 0..n {
                let at = (i * d + p) * k;
                values[at..at + k].copy_from_slice(s.row(i));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(invariant!("non-finite logit in stack at flat index {pos}"));
        }
        Ok(Self { n, d, k, values })
    }

    /// `d = 1` stack around a plain logit matrix.
    pub fn from_logits(logits: &Matrix<f64>) -> Result<Self> {
        Self::from_slices(core::slice::from_ref(logits))
    }

    pub fn n_examples(&self) -> usize {
        self.n
    }

    pub fn n_probes(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    /// The `d × K` block `R(x_i)`, probe-major.
    pub fn example(&self, i: usize) -> &[f64] {
        &self.values[i * self.d * self.k..(i + 1) * self.d * self.k]
    }

    pub fn get(&self, i: usize, probe: usize, class: usize) -> f64 {
        self.values[(i * self.d + probe) * self.k + class]
    }

    /// `n × K` logits of one probe.
    pub fn slice(&self, probe: usize) -> Matrix<f64> {
        let mut m = Matrix::zeros(self.n, self.k);
        for i in 0..self.n {
            let at = (i * self.d + probe) * self.k;
            m.row_mut(i).copy_from_slice(&self.values[at..at + self.k]);
        }
        m
    }

    pub fn final_logits(&self) -> Matrix<f64> {
        self.slice(self.d - 1)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let w = self.d * self.k;
        let mut values = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            values.extend_from_slice(self.example(i));
        }
        Self {
            n: indices.len(),
            d: self.d,
            k: self.k,
            values,
        }
    }

    fn combine_into(&self, i: usize, beta: &[f64], z: &mut [f64]) {
        z.fill(0.0);
        for (r, &b) in self.example(i).chunks_exact(self.k).zip(beta) {
            for (zc, &rc) in z.iter_mut().zip(r) {
                *zc += b * rc;
            }
        }
    }
}

/// Applies every probe to its layer and stacks the results in layer order.
pub fn build_logit_stack(probes: &[LinearProbe], dump: &ActivationDump) -> Result<LogitStack> {
    if dump.final_logits().is_none() {
        return Err(invalid_arg!("dump has no final-logits block to anchor the stack"));
    }
    let k = dump.n_classes();
    let slices = dump
        .layers()
        .iter()
        .map(|layer| {
            let probe = find_probe(probes, layer.layer_index())?;
            if probe.n_classes() != k {
                return Err(Error::DimensionMismatch {
                    what: "probe class count",
                    expected: k,
                    found: probe.n_classes(),
                });
            }
            if layer.is_final_logits() && !probe.is_identity() {
                return Err(invalid_arg!(
                    "probe for final-logits layer {} must be the identity",
                    layer.layer_index()
                ));
            }
            probe_logits(probe, layer)
        })
        .collect::<Result<Vec<_>>>()?;
    LogitStack::from_slices(&slices)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Negative log-likelihood (cross-entropy).
    #[default]
    Nll,
    /// `Σ_y (p_y − 1[y = label])²`.
    Square,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nll => "nll",
            LossKind::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub mean: f64,
    /// Examples whose true-class probability was clipped at [`PROB_FLOOR`].
    pub clipped: usize,
}

/// Mean per-example loss of a probability matrix.
pub fn loss_value(probs: &Matrix<f64>, labels: &[u32], kind: LossKind) -> Result<LossValue> {
    check_labels(probs.rows(), probs.cols(), labels)?;
    let mut clipped = 0;
    let per: Vec<f64> = probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| {
            let y = y as usize;
            match kind {
                LossKind::Nll => {
                    if p[y] < PROB_FLOOR {
                        clipped += 1;
                    }
                    -libm::log(p[y].max(PROB_FLOOR))
                }
                LossKind::Square => square_loss_row(p, y),
            }
        })
        .collect();
    Ok(LossValue {
        mean: pairwise_mean(&per),
        clipped,
    })
}

pub(crate) fn square_loss_row(p: &[f64], y: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(c, &pc)| {
            let e = if c == y { pc - 1.0 } else { pc };
            e * e
        })
        .sum()
}

pub(crate) fn check_labels(n: usize, k: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "label count",
            expected: n,
            found: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= k) {
        return Err(invalid_arg!("label {y} outside [0, {k})"));
    }
    Ok(())
}

fn check_beta(stack: &LogitStack, beta: &[f64]) -> Result<()> {
    if beta.len() != stack.d {
        return Err(Error::DimensionMismatch {
            what: "beta length vs probe count",
            expected: stack.d,
            found: beta.len(),
        });
    }
    Ok(())
}

/// Row `i` is `softmax(Σ_k beta_k · R(x_i)[k])`.
pub fn lates_predict(stack: &LogitStack, beta: &[f64]) -> Result<Matrix<f64>> {
    check_beta(stack, beta)?;
    let mut out = Matrix::zeros(stack.n, stack.k);
    let mut z = vec![0.0; stack.k];
    for i in 0..stack.n {
        stack.combine_into(i, beta, &mut z);
        softmax_into(&z, out.row_mut(i));
    }
    Ok(out)
}

/// `β₀ = (0, …, 0, 1)`.
pub fn initial_beta(d: usize) -> Vec<f64> {
    let mut b = vec![0.0; d];
    if let Some(last) = b.last_mut() {
        *last = 1.0;
    }
    b
}

/// The LATES weights equivalent to temperature `tau`.
pub fn temperature_beta(d: usize, tau: f64) -> Vec<f64> {
    let mut b = vec![0.0; d];
    if let Some(last) = b.last_mut() {
        *last = 1.0 / tau;
    }
    b
}

/// Per-example loss and gradient of the loss w.r.t. the combined logits `z`.
fn example_loss_and_dz(z: &[f64], y: usize, kind: LossKind, p: &mut [f64], dz: &mut [f64]) -> f64 {
    softmax_into(z, p);
    match kind {
        LossKind::Nll => {
            dz.copy_from_slice(p);
            dz[y] -= 1.0;
            log_sum_exp(z) - z[y]
        }
        LossKind::Square => {
            // d/dz_c Σ_y (p_y - e_y)² = 2 p_c [(p_c - e_c) - Σ_y (p_y - e_y) p_y]
            let inner: f64 = p
                .iter()
                .enumerate()
                .map(|(c, &pc)| (pc - if c == y { 1.0 } else { 0.0 }) * pc)
                .sum();
            for (c, g) in dz.iter_mut().enumerate() {
                let e = if c == y { 1.0 } else { 0.0 };
                *g = 2.0 * p[c] * ((p[c] - e) - inner);
            }
            square_loss_row(p, y)
        }
    }
}

/// Mean loss over `idx` and its gradient w.r.t. `beta` (no ridge term).
fn loss_and_grad_over(
    stack: &LogitStack,
    beta: &[f64],
    labels: &[u32],
    kind: LossKind,
    idx: impl ExactSizeIterator<Item = usize>,
) -> (f64, Vec<f64>) {
    let (d, k) = (stack.d, stack.k);
    let m = idx.len();
    let mut z = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut dz = vec![0.0; k];
    let mut losses = Vec::with_capacity(m);
    let mut grads = Vec::with_capacity(m * d);
    for i in idx {
        stack.combine_into(i, beta, &mut z);
        losses.push(example_loss_and_dz(&z, labels[i] as usize, kind, &mut p, &mut dz));
        for r in stack.example(i).chunks_exact(k) {
            grads.push(r.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let mut g = pairwise_sum_rows(&grads, d);
    let inv = 1.0 / m as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    (pairwise_mean(&losses), g)
}

/// Exact gradient of the mean loss of `softmax(R(x)β)` w.r.t. `β`.
pub fn aggregator_gradient(stack: &LogitStack, beta: &[f64], labels: &[u32], kind: LossKind) -> Result<Vec<f64>> {
    check_beta(stack, beta)?;
    check_labels(stack.n, stack.k, labels)?;
    Ok(loss_and_grad_over(stack, beta, labels, kind, 0..stack.n).1)
}

/// Mean loss of `softmax(R(x)β)` plus `(ridge/2)‖β‖²`.
///
/// NLL is evaluated through log-sum-exp, so it never needs clipping.
pub fn aggregator_objective(
    stack: &LogitStack,
    beta: &[f64],
    labels: &[u32],
    kind: LossKind,
    ridge: f64,
) -> Result<f64> {
    check_beta(stack, beta)?;
    check_labels(stack.n, stack.k, labels)?;
    let (loss, _) = loss_and_grad_over(stack, beta, labels, kind, 0..stack.n);
    Ok(loss + 0.5 * ridge * beta.iter().map(|b| b * b).sum::<f64>())
}

/// Euclidean projection onto `β ≥ 0`.
pub fn project_nonnegative(beta: &mut [f64]) {
    for b in beta.iter_mut() {
        if *b < 0.0 {
            *b = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` means one full-batch step per epoch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub momentum: f64,
    /// Coefficient `λ` of the `(λ/2)‖β‖²` penalty.
    pub ridge: f64,
    /// Stop after this many epochs without improving the objective.
    pub patience: Option<usize>,
    /// Full-batch projected-gradient steps (with backtracking) run from the
    /// best SGD iterate; skipped when `epochs == 0`.
    pub refine_steps: usize,
}

impl Default for AggTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 50,
            batch_size: Some(DEFAULT_AGG_BATCH),
            seed: 0,
            loss_kind: LossKind::Nll,
            momentum: 0.0,
            ridge: 0.0,
            patience: None,
            refine_steps: 500,
        }
    }
}

pub const DEFAULT_AGG_BATCH: usize = 32;

impl AggTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid_arg!("aggregator learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.ridge < 0.0 {
            return Err(invalid_arg!("momentum must be in [0, 1) and ridge >= 0"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid_arg!("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Fitted LATES weights plus the per-epoch objective on the fitting data.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights {
    pub beta: Vec<f64>,
    pub loss_kind: LossKind,
    pub train_trace: Vec<f64>,
}

impl AggregatorWeights {
    pub fn initial(d: usize, loss_kind: LossKind) -> Self {
        Self {
            beta: initial_beta(d),
            loss_kind,
            train_trace: Vec::new(),
        }
    }

    pub fn predict(&self, stack: &LogitStack) -> Result<Matrix<f64>> {
        lates_predict(stack, &self.beta)
    }
}

/// Projected SGD on the holdout objective, starting from `β₀`.
///
/// After every epoch the full objective is evaluated; the best iterate seen
/// (including `β₀`) is returned, so the result never scores worse than
/// `β₀` on the fitting data.
pub fn fit_lates(stack: &LogitStack, labels: &[u32], config: &AggTrainConfig) -> Result<AggregatorWeights> {
    config.validate()?;
    check_labels(stack.n, stack.k, labels)?;
    if stack.n == 0 {
        return Err(invalid_arg!("cannot fit on an empty stack"));
    }
    let d = stack.d;
    let kind = config.loss_kind;
    let objective = |beta: &[f64]| {
        let (loss, _) = loss_and_grad_over(stack, beta, labels, kind, 0..stack.n);
        loss + 0.5 * config.ridge * beta.iter().map(|b| b * b).sum::<f64>()
    };

    let mut beta = initial_beta(d);
    let mut best_beta = beta.clone();
    let mut best = objective(&beta);
    if !best.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            detail: alloc::format!("objective at the initial weights is {best}"),
        });
    }
    let mut velocity = vec![0.0; d];
    let mut order: Vec<usize> = (0..stack.n).collect();
    let batch = config.batch_size.unwrap_or(stack.n).min(stack.n);
    let mut rng = seeded_rng(config.seed);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut stale = 0;

    for epoch in 0..config.epochs {
        if batch < stack.n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let (_, mut g) = loss_and_grad_over(stack, &beta, labels, kind, chunk.iter().copied());
            for ((gv, v), b) in g.iter_mut().zip(velocity.iter_mut()).zip(&beta) {
                *gv += config.ridge * b;
                *v = config.momentum * *v + *gv;
            }
            for (b, v) in beta.iter_mut().zip(&velocity) {
                *b -= config.learning_rate * v;
            }
            project_nonnegative(&mut beta);
            debug_assert!(beta.iter().all(|&b| b >= 0.0));
        }
        let obj = objective(&beta);
        if !obj.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: alloc::format!("aggregator objective became {obj} at beta {beta:?}"),
            });
        }
        trace.push(obj);
        if obj < best {
            best = obj;
            best_beta.copy_from_slice(&beta);
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    if config.epochs > 0 {
        let full_grad = |beta: &[f64]| {
            let (_, mut g) = loss_and_grad_over(stack, beta, labels, kind, 0..stack.n);
            g.iter_mut().zip(beta).for_each(|(gv, b)| *gv += config.ridge * b);
            g
        };
        refine(&mut best_beta, &mut best, config.refine_steps, objective, full_grad);
    }
    Ok(AggregatorWeights {
        beta: best_beta,
        loss_kind: kind,
        train_trace: trace,
    })
}

/// Projected gradient descent with a backtracking step size. Only accepts
/// steps that satisfy the sufficient-decrease test, so `value` never rises.
fn refine(
    beta: &mut [f64],
    value: &mut f64,
    steps: usize,
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
) {
    let mut step = 1.0;
    let mut cand = vec![0.0; beta.len()];
    for _ in 0..steps {
        let g = gradient(beta);
        loop {
            for ((c, b), gv) in cand.iter_mut().zip(beta.iter()).zip(&g) {
                *c = b - step * gv;
            }
            project_nonnegative(&mut cand);
            let (mut lin, mut sq) = (0.0, 0.0);
            for ((c, b), gv) in cand.iter().zip(beta.iter()).zip(&g) {
                lin += gv * (c - b);
                sq += (c - b) * (c - b);
            }
            if sq < 1e-24 {
                return;
            }
            let v = objective(&cand);
            if v.is_finite() && v <= *value + lin + sq / (2.0 * step) && v <= *value {
                beta.copy_from_slice(&cand);
                *value = v;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return;
            }
        }
    }
}

/// Single temperature `τ > 0`; predictions are `softmax(logits / τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureModel {
    tau: f64,
}

impl TemperatureModel {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(invalid_arg!("temperature must be a positive finite number, got {tau}"));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn predict(&self, logits: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        let mut z = vec![0.0; logits.cols()];
        for i in 0..logits.rows() {
            for (zc, &l) in z.iter_mut().zip(logits.row(i)) {
                *zc = l / self.tau;
            }
            softmax_into(&z, out.row_mut(i));
        }
        out
    }
}

fn temperature_objective(stack: &LogitStack, labels: &[u32], kind: LossKind, inv_tau: f64) -> f64 {
    loss_and_grad_over(stack, &[inv_tau], labels, kind, 0..stack.n).0
}

/// Temperature minimizing holdout NLL over `[TAU_MIN, TAU_MAX]`.
pub fn fit_temperature(logits: &Matrix<f64>, labels: &[u32]) -> Result<TemperatureModel> {
    fit_temperature_with(logits, labels, LossKind::Nll)
}

/// Temperature minimizing the given holdout loss over `[TAU_MIN, TAU_MAX]`.
///
/// The search runs over `u = ln(1/τ)`: a coarse grid brackets the minimum,
/// then golden-section search refines it. NLL is convex in `1/τ`, so for NLL
/// the bracket always contains the global minimum.
pub fn fit_temperature_with(logits: &Matrix<f64>, labels: &[u32], kind: LossKind) -> Result<TemperatureModel> {
    if logits.rows() == 0 {
        return Err(invalid_arg!("temperature fit needs at least one example"));
    }
    check_labels(logits.rows(), logits.cols(), labels)?;
    let stack = LogitStack::from_logits(logits)?;
    let f = |u: f64| temperature_objective(&stack, labels, kind, libm::exp(u));
    let (lo, hi) = (libm::log(1.0 / TAU_MAX), libm::log(1.0 / TAU_MIN));

    const GRID: usize = 120;
    let step = (hi - lo) / GRID as f64;
    let grid: Vec<f64> = (0..=GRID).map(|j| f(lo + step * j as f64)).collect();
    let j = grid
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v <= grid[best] { j } else { best });
    let a = lo + step * j.saturating_sub(1) as f64;
    let b = (lo + step * (j + 1) as f64).min(hi);
    let u_star = golden_section(f, a, b, 1e-12);

    let mut best_u = u_star;
    let mut best_v = f(u_star);
    for cand in [0.0, lo, hi, lo + step * j as f64] {
        let v = f(cand);
        // flat stretches (saturated softmax) resolve toward the confident end
        if v < best_v || (v == best_v && cand > best_u) {
            best_u = cand;
            best_v = v;
        }
    }
    TemperatureModel::new(libm::exp(-best_u))
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (libm::sqrt(5.0) - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `β / Σβ`: each layer's share of the total weight.
pub fn layer_contributions(beta: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = beta.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined(alloc::format!(
            "layer contributions need a positive weight sum, got {total}"
        )));
    }
    Ok(beta.iter().map(|b| b / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack2() -> LogitStack {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        LogitStack::from_slices(&[a, b]).unwrap()
    }

    #[test]
    fn concatenation_layout() {
        let s = stack2();
        assert_eq!((s.n_examples(), s.n_probes(), s.n_classes()), (1, 2, 2));
        assert_eq!(s.example(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.get(0, 1, 0), 3.0);
        assert_eq!(s.final_logits().row(0), &[3.0, 4.0]);
    }

    #[test]
    fn single_probe_stack_is_the_logits() {
        let logits = Matrix::from_rows(&[[0.1, -0.2, 3.0], [1.0, 1.0, 1.0]]).unwrap();
        let s = LogitStack::from_logits(&logits).unwrap();
        assert_eq!(s.n_probes(), 1);
        assert_eq!(s.final_logits(), logits);
    }

    #[test]
    fn initial_beta_predicts_softmax_of_logits() {
        let s = stack2();
        let p = lates_predict(&s, &initial_beta(2)).unwrap();
        let want = crate::numeric::softmax(&[3.0, 4.0]);
        assert_eq!(p.row(0), want.as_slice());
    }

    #[test]
    fn zero_beta_is_uniform() {
        let p = lates_predict(&stack2(), &[0.0, 0.0]).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn beta_length_is_checked() {
        assert!(lates_predict(&stack2(), &[1.0]).is_err());
    }

    #[test]
    fn projection_clamps_negatives() {
        let mut b = vec![-0.2, 0.5];
        project_nonnegative(&mut b);
        assert_eq!(b, vec![0.0, 0.5]);
    }

    #[test]
    fn zero_epochs_returns_initial_beta() {
        let s = stack2();
        let cfg = AggTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let w = fit_lates(&s, &[0], &cfg).unwrap();
        assert_eq!(w.beta, initial_beta(2));
        assert!(w.train_trace.is_empty());
    }

    #[test]
    fn loss_value_examples() {
        let uniform = Matrix::from_vec(1, 100, vec![0.01; 100]).unwrap();
        let v = loss_value(&uniform, &[3], LossKind::Nll).unwrap();
        assert!((v.mean - libm::log(100.0)).abs() < 1e-12);
        let onehot = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(loss_value(&onehot, &[1], LossKind::Square).unwrap().mean, 0.0);
        let p = Matrix::from_rows(&[[0.8, 0.2]]).unwrap();
        assert!((loss_value(&p, &[0], LossKind::Square).unwrap().mean - 0.08).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clipped_and_counted() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let v = loss_value(&p, &[1], LossKind::Nll).unwrap();
        assert_eq!(v.clipped, 1);
        assert!((v.mean - -libm::log(PROB_FLOOR)).abs() < 1e-9);
    }

    #[test]
    fn square_gradient_vanishes_at_confident_correct_predictions() {
        let a = Matrix::from_rows(&[[40.0, 0.0], [0.0, 40.0]]).unwrap();
        let s = LogitStack::from_logits(&a).unwrap();
        let g = aggregator_gradient(&s, &[1.0], &[0, 1], LossKind::Square).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn layer_contribution_examples() {
        assert_eq!(layer_contributions(&[1.0, 1.0, 2.0]).unwrap(), vec![0.25, 0.25, 0.5]);
        assert_eq!(layer_contributions(&initial_beta(3)).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(layer_contributions(&[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert!(layer_contributions(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn single_correct_example_pushes_tau_to_lower_bound() {
        let logits = Matrix::from_rows(&[[2.0, 0.5, -1.0]]).unwrap();
        let t = fit_temperature(&logits, &[0]).unwrap();
        assert!((t.tau() - TAU_MIN).abs() < 1e-9, "tau = {}", t.tau());
    }

    #[test]
    fn temperature_model_rejects_nonpositive_tau() {
        assert!(TemperatureModel::new(0.0).is_err());
        assert!(TemperatureModel::new(f64::NAN).is_err());
        assert!(TemperatureModel::new(2.0).is_ok());
    }
}
