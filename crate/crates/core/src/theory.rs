//! The oracle probability bound for ridge-regularized LATES and a seeded
//! experiment measuring how often LATES matches or beats temperature
//! scaling on synthetic logit stacks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::invalid_arg;
use crate::numeric::{derive_seed, pairwise_mean, seeded_rng, Rng};
use crate::stack::{
    aggregator_objective, fit_lates, fit_temperature_with, temperature_beta, AggTrainConfig, LogitStack,
};
use crate::{Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBoundParams {
    /// Ridge coefficient `λ`.
    pub lambda: f64,
    /// Lipschitz constant `ρ` of the loss in `β`.
    pub rho: f64,
    /// Holdout size.
    pub n: usize,
    /// `‖β*‖²` of the population-optimal weights.
    pub beta_star_norm_sq: f64,
    /// Margin `ε` by which temperature scaling would have to win.
    pub epsilon: f64,
}

/// `min(1, (λ‖β*‖² + 2ρ²/(λn)) / ε)`: the probability that some fixed
/// weights (temperature scaling among them) beat the regularized fit by
/// `ε` in population loss.
pub fn oracle_delta_bound(p: &OracleBoundParams) -> Result<f64> {
    if !(p.epsilon > 0.0) {
        return Err(invalid_arg!("epsilon must be > 0, got {}", p.epsilon));
    }
    if !(p.lambda > 0.0) || !(p.rho > 0.0) || p.n == 0 || !(p.beta_star_norm_sq >= 0.0) {
        return Err(invalid_arg!(
            "bound needs lambda > 0, rho > 0, n >= 1, |beta*|^2 >= 0 (got {p:?})"
        ));
    }
    let raw = (p.lambda * p.beta_star_norm_sq + 2.0 * p.rho * p.rho / (p.lambda * p.n as f64)) / p.epsilon;
    Ok(raw.min(1.0))
}

/// `λ = c / √n`, the rate that drives the bound to zero.
pub fn lambda_schedule(n: usize, c: f64) -> f64 {
    c / libm::sqrt(n as f64)
}

/// One probe of a synthetic stack: its logits are
/// `scale · (signal · u + noise · ε)` for the shared latent `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticProbe {
    pub signal: f64,
    pub noise: f64,
    pub scale: f64,
}

/// Generator of labelled logit stacks.
///
/// Each example draws `y` uniformly, a latent `u = separation · e_y + N(0, I)`
/// and, per probe, independent noise. The last probe plays the model's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStackTask {
    pub n_classes: usize,
    pub separation: f64,
    pub probes: Vec<SyntheticProbe>,
}

impl Default for SyntheticStackTask {
    /// K = 3, d = 3; every probe sees the latent through its own noise and
    /// the final one is over-confident.
    fn default() -> Self {
        Self {
            n_classes: 3,
            separation: 2.0,
            probes: vec![
                SyntheticProbe { signal: 1.0, noise: 1.0, scale: 1.0 },
                SyntheticProbe { signal: 1.0, noise: 0.8, scale: 1.5 },
                SyntheticProbe { signal: 1.0, noise: 0.6, scale: 3.0 },
            ],
        }
    }
}

impl SyntheticStackTask {
    /// The intermediate probe carries no label information.
    pub fn noise_intermediate() -> Self {
        Self {
            probes: vec![
                SyntheticProbe { signal: 0.0, noise: 1.0, scale: 1.0 },
                SyntheticProbe { signal: 1.0, noise: 0.6, scale: 3.0 },
            ],
            ..Self::default()
        }
    }

    /// The intermediate probe sees the latent through noise independent of
    /// the final layer's, so combining them is strictly more informative.
    pub fn informative_intermediate() -> Self {
        Self {
            probes: vec![
                SyntheticProbe { signal: 1.0, noise: 0.7, scale: 1.0 },
                SyntheticProbe { signal: 1.0, noise: 1.2, scale: 2.5 },
            ],
            ..Self::default()
        }
    }

    /// A lone final-logits probe; LATES and temperature scaling coincide.
    pub fn single_probe() -> Self {
        Self {
            probes: vec![SyntheticProbe { signal: 1.0, noise: 0.6, scale: 3.0 }],
            ..Self::default()
        }
    }

    /// The default task restricted to two classes.
    pub fn binary() -> Self {
        Self {
            n_classes: 2,
            ..Self::default()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "noise" => Some(Self::noise_intermediate()),
            "informative" => Some(Self::informative_intermediate()),
            "single" => Some(Self::single_probe()),
            "binary" => Some(Self::binary()),
            _ => None,
        }
    }

    pub fn n_probes(&self) -> usize {
        self.probes.len()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<(LogitStack, Vec<u32>)> {
        let k = self.n_classes;
        if k < 2 || self.probes.is_empty() {
            return Err(invalid_arg!("synthetic task needs K >= 2 and at least one probe"));
        }
        let mut slices: Vec<Matrix<f64>> = self.probes.iter().map(|_| Matrix::zeros(n, k)).collect();
        let mut labels = Vec::with_capacity(n);
        let mut u = vec![0.0; k];
        for i in 0..n {
            let y = rng.random_range(0..k);
            labels.push(y as u32);
            for (c, uc) in u.iter_mut().enumerate() {
                let mean = if c == y { self.separation } else { 0.0 };
                *uc = mean + rng.sample::<f64, _>(StandardNormal);
            }
            for (probe, slice) in self.probes.iter().zip(slices.iter_mut()) {
                for (c, out) in slice.row_mut(i).iter_mut().enumerate() {
                    let eps: f64 = rng.sample(StandardNormal);
                    *out = probe.scale * (probe.signal * u[c] + probe.noise * eps);
                }
            }
        }
        Ok((LogitStack::from_slices(&slices)?, labels))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceConfig {
    pub seeds: usize,
    pub holdout_n: usize,
    /// Fresh sample used as a stand-in for the population loss.
    pub test_n: usize,
    pub master_seed: u64,
    /// `λ = ridge_c / √holdout_n`; `None` fits without a ridge term.
    pub ridge_c: Option<f64>,
    /// Aggregator settings; `ridge` and `seed` are overridden per run.
    pub agg: AggTrainConfig,
    /// LATES "dominates" in a seed when its loss ≤ TS loss + tolerance.
    pub tolerance: f64,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            seeds: 40,
            holdout_n: 1000,
            test_n: 5000,
            master_seed: 0,
            ridge_c: Some(1.0),
            agg: AggTrainConfig::default(),
            tolerance: 0.01,
        }
    }
}

impl DominanceConfig {
    pub fn ridge(&self) -> f64 {
        self.ridge_c.map_or(0.0, |c| lambda_schedule(self.holdout_n, c))
    }
}

/// Unregularized losses of both calibrators for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed_index: usize,
    pub lates_holdout: f64,
    pub ts_holdout: f64,
    pub lates_test: f64,
    pub ts_test: f64,
    pub beta: Vec<f64>,
    pub tau: f64,
}

impl SeedOutcome {
    /// `TS − LATES` on the holdout; positive favours LATES.
    pub fn holdout_gap(&self) -> f64 {
        self.ts_holdout - self.lates_holdout
    }

    pub fn test_gap(&self) -> f64 {
        self.ts_test - self.lates_test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    pub outcomes: Vec<SeedOutcome>,
    pub tolerance: f64,
    pub ridge: f64,
    /// Share of seeds with LATES holdout loss ≤ TS holdout loss + tolerance.
    pub holdout_fraction: f64,
    pub test_fraction: f64,
    pub mean_holdout_gap: f64,
    pub mean_test_gap: f64,
}

/// Fits both calibrators on a fresh holdout sample for one seed.
pub fn run_seed(task: &SyntheticStackTask, config: &DominanceConfig, seed_index: usize) -> Result<SeedOutcome> {
    let seed = derive_seed(config.master_seed, seed_index as u64);
    let mut rng = seeded_rng(seed);
    let (holdout, hold_labels) = task.sample(config.holdout_n, &mut rng)?;
    let (test, test_labels) = task.sample(config.test_n.max(1), &mut rng)?;
    let kind = config.agg.loss_kind;
    let agg = AggTrainConfig {
        ridge: config.ridge(),
        seed: derive_seed(seed, 1),
        ..config.agg.clone()
    };
    let weights = fit_lates(&holdout, &hold_labels, &agg)?;
    let temp = fit_temperature_with(&holdout.final_logits(), &hold_labels, kind)?;
    let ts_beta = temperature_beta(task.n_probes(), temp.tau());
    let loss = |s: &LogitStack, y: &[u32], b: &[f64]| aggregator_objective(s, b, y, kind, 0.0);
    Ok(SeedOutcome {
        seed_index,
        lates_holdout: loss(&holdout, &hold_labels, &weights.beta)?,
        ts_holdout: loss(&holdout, &hold_labels, &ts_beta)?,
        lates_test: loss(&test, &test_labels, &weights.beta)?,
        ts_test: loss(&test, &test_labels, &ts_beta)?,
        beta: weights.beta,
        tau: temp.tau(),
    })
}

/// Aggregates per-seed outcomes (in seed order) into the report.
pub fn summarize(mut outcomes: Vec<SeedOutcome>, config: &DominanceConfig) -> DominanceReport {
    outcomes.sort_by_key(|o| o.seed_index);
    let n = outcomes.len().max(1) as f64;
    let tol = config.tolerance;
    let holdout_wins = outcomes.iter().filter(|o| o.lates_holdout <= o.ts_holdout + tol).count();
    let test_wins = outcomes.iter().filter(|o| o.lates_test <= o.ts_test + tol).count();
    let hg: Vec<f64> = outcomes.iter().map(SeedOutcome::holdout_gap).collect();
    let tg: Vec<f64> = outcomes.iter().map(SeedOutcome::test_gap).collect();
    DominanceReport {
        tolerance: tol,
        ridge: config.ridge(),
        holdout_fraction: holdout_wins as f64 / n,
        test_fraction: test_wins as f64 / n,
        mean_holdout_gap: pairwise_mean(&hg),
        mean_test_gap: pairwise_mean(&tg),
        outcomes,
    }
}

/// Runs every seed sequentially; see [`run_seed`] to drive seeds in parallel.
pub fn dominance_experiment(task: &SyntheticStackTask, config: &DominanceConfig) -> Result<DominanceReport> {
    let outcomes = (0..config.seeds)
        .map(|s| run_seed(task, config, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(outcomes, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> OracleBoundParams {
        OracleBoundParams {
            lambda: 0.1,
            rho: 1.0,
            n: 1000,
            beta_star_norm_sq: 1.0,
            epsilon: 0.5,
        }
    }

    #[test]
    fn bound_direct_arithmetic() {
        assert!((oracle_delta_bound(&params()).unwrap() - 0.24).abs() < 1e-12);
    }

    #[test]
    fn bound_vanishes_with_n_and_epsilon() {
        let big_n = 100_000_000;
        let p = OracleBoundParams {
            lambda: lambda_schedule(big_n, 1.0),
            n: big_n,
            ..params()
        };
        let limit = (1.0 + 2.0) / (0.5 * libm::sqrt(big_n as f64));
        assert!((oracle_delta_bound(&p).unwrap() - limit).abs() < 1e-12);
        let wide = OracleBoundParams { epsilon: 1e9, ..params() };
        assert!(oracle_delta_bound(&wide).unwrap() < 1e-9);
    }

    #[test]
    fn bound_is_clipped_and_validated() {
        let p = OracleBoundParams { epsilon: 0.001, ..params() };
        assert_eq!(oracle_delta_bound(&p).unwrap(), 1.0);
        assert!(oracle_delta_bound(&OracleBoundParams { epsilon: 0.0, ..params() }).is_err());
        assert!(oracle_delta_bound(&OracleBoundParams { lambda: 0.0, ..params() }).is_err());
    }

    #[test]
    fn lambda_schedule_examples() {
        assert!((lambda_schedule(10_000, 1.0) - 0.01).abs() < 1e-15);
        assert_eq!(lambda_schedule(1, 2.0), 2.0);
        assert_eq!(lambda_schedule(4, 1.0), 0.5);
    }

    #[test]
    fn task_sampling_is_seeded() {
        let t = SyntheticStackTask::default();
        let a = t.sample(50, &mut seeded_rng(3)).unwrap();
        let b = t.sample(50, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.n_probes(), 3);
        assert!(SyntheticStackTask::by_name("nope").is_none());
    }
}
