//! Significance tests for comparing calibrators across conditions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::invalid_arg;
use crate::numeric::{normal_cdf, pairwise_mean};
use crate::{Error, Result};

/// Largest effective sample size for which the Wilcoxon p-value is exact.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sided {
    #[default]
    Two,
    /// `P(T ≤ W)` for the smaller signed-rank sum `W`.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroPolicy {
    /// Drop zero differences before ranking.
    #[default]
    Wilcoxon,
    /// Rank zeros with the others, then leave their ranks out of both sums.
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// `min(T+, T−)`.
    pub w_statistic: f64,
    pub t_plus: f64,
    pub t_minus: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Paired differences `metric_A − metric_B`, one per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    deltas: Vec<f64>,
}

impl PairedSample {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(invalid_arg!("paired sample is empty"));
        }
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(invalid_arg!("paired sample contains non-finite differences"));
        }
        Ok(Self { deltas })
    }

    pub fn from_pairs(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                what: "paired sample lengths",
                expected: a.len(),
                found: b.len(),
            });
        }
        Self::new(a.iter().zip(b).map(|(x, y)| x - y).collect())
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

pub fn wilcoxon_signed_rank(sample: &PairedSample, sided: Sided) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(sample, sided, ZeroPolicy::Wilcoxon)
}

/// Wilcoxon signed-rank test. Exact for up to [`EXACT_MAX_N`] non-zero
/// differences, otherwise normal approximation with tie and continuity
/// corrections.
pub fn wilcoxon_signed_rank_with(sample: &PairedSample, sided: Sided, zeros: ZeroPolicy) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_using(sample, sided, zeros, None)
}

/// As [`wilcoxon_signed_rank_with`], optionally forcing the p-value method.
/// Forcing [`WilcoxonMethod::Exact`] above [`EXACT_MAX_N`] is rejected.
pub fn wilcoxon_signed_rank_using(
    sample: &PairedSample,
    sided: Sided,
    zeros: ZeroPolicy,
    method: Option<WilcoxonMethod>,
) -> Result<WilcoxonResult> {
    let d = sample.deltas();
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::Undefined("every paired difference is zero".into()));
    }
    let (abs_vals, signs): (Vec<f64>, Vec<f64>) = match zeros {
        ZeroPolicy::Wilcoxon => d.iter().filter(|&&v| v != 0.0).map(|&v| (v.abs(), v.signum())).unzip(),
        ZeroPolicy::Pratt => d
            .iter()
            .map(|&v| (v.abs(), if v == 0.0 { 0.0 } else { v.signum() }))
            .unzip(),
    };
    let all_ranks = midranks(&abs_vals);
    let ranks: Vec<f64> = all_ranks
        .iter()
        .zip(&signs)
        .filter(|(_, &s)| s != 0.0)
        .map(|(&r, _)| r)
        .collect();
    let n = ranks.len();
    let (mut t_plus, mut t_minus) = (0.0, 0.0);
    for (&r, &s) in all_ranks.iter().zip(&signs) {
        if s > 0.0 {
            t_plus += r;
        } else if s < 0.0 {
            t_minus += r;
        }
    }
    let w = t_plus.min(t_minus);

    let method = method.unwrap_or(if n <= EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    });
    if method == WilcoxonMethod::Exact && n > EXACT_MAX_N {
        return Err(invalid_arg!("exact p-values are limited to n <= {EXACT_MAX_N}, got {n}"));
    }
    let (p_one, method) = if method == WilcoxonMethod::Exact {
        (exact_lower_tail(&ranks, w), WilcoxonMethod::Exact)
    } else {
        let mean = ranks.iter().sum::<f64>() / 2.0;
        let var = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
        let z = ((w - mean + 0.5) / libm::sqrt(var)).min(0.0);
        (normal_cdf(z), WilcoxonMethod::NormalApprox)
    };
    let p_value = match sided {
        Sided::One => p_one,
        Sided::Two => (2.0 * p_one).min(1.0),
    };
    Ok(WilcoxonResult {
        w_statistic: w,
        t_plus,
        t_minus,
        n_effective: n,
        p_value,
        method,
    })
}

/// `P(T+ ≤ w)` under independent fair signs, by counting the sign patterns
/// whose positive rank sum is at most `w`.
///
/// Mid-ranks are multiples of ½, so sums are tracked in half-units and the
/// count distribution over all `2^n` patterns is built by dynamic
/// programming.
fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|&r| libm::round(2.0 * r) as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let limit = libm::round(2.0 * w) as usize;
    let hits: u64 = counts[..=limit.min(total)].iter().sum();
    hits as f64 / libm::ldexp(1.0, ranks.len() as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnovaResult {
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

/// One-way ANOVA F test across groups.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(invalid_arg!("ANOVA needs at least two groups"));
    }
    if let Some(g) = groups.iter().position(|g| g.len() < 2) {
        return Err(invalid_arg!("group {g} has fewer than two values"));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    if all.iter().any(|v| !v.is_finite()) {
        return Err(invalid_arg!("ANOVA input contains non-finite values"));
    }
    let n = all.len();
    let grand = pairwise_mean(&all);
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = pairwise_mean(g);
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        ssw += g.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    // Relative threshold so rescaled inputs classify the same way.
    let scale = all.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let ssb_zero = ssb <= 1e-28 * scale;
    let ssw_zero = ssw <= 1e-28 * scale;
    let (f_statistic, p_value) = match (ssb_zero, ssw_zero) {
        (true, true) => {
            return Err(Error::Undefined(
                "F is 0/0: no variance within or between groups".into(),
            ))
        }
        (false, true) => (f64::INFINITY, 0.0),
        (true, false) => (0.0, 1.0),
        (false, false) => {
            let f = (ssb / df_between as f64) / (ssw / df_within as f64);
            (f, f_survival(f, df_between as f64, df_within as f64))
        }
    };
    Ok(AnovaResult {
        f_statistic,
        df_between,
        df_within,
        p_value,
    })
}

/// `P(F > f)` for an F(d1, d2) variable.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// `I_x(a, b)` by the continued fraction with modified Lentz iteration.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    // The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Holm step-down adjustment; output is in the input order.
pub fn holm_correction(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid_arg!("p-value {p} outside [0, 1]"));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        let candidate = ((m - j) as f64 * p_values[i]).min(1.0);
        running = running.max(candidate);
        adjusted[i] = running;
    }
    Ok(adjusted)
}
