//! Paired comparison of two report sets on one metric.

use anyhow::{bail, Result};
use lates_core::metrics::{relative_gain, Metric};
use lates_core::stats::{anova_oneway, wilcoxon_signed_rank_with, PairedSample, Sided, ZeroPolicy};
use serde::Serialize;

use crate::report::ReportSet;
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Wilcoxon,
    Anova,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub condition: String,
    pub a: f64,
    pub b: f64,
    /// Percent improvement of A over B (positive: A is better).
    pub relative_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub method_a: String,
    pub method_b: String,
    pub rows: Vec<ComparisonRow>,
    pub mean_relative_gain: Option<f64>,
    pub test: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "test", rename_all = "lowercase")]
pub enum TestOutcome {
    Wilcoxon {
        sided: String,
        w_statistic: f64,
        t_plus: f64,
        t_minus: f64,
        n_effective: usize,
        p_value: f64,
        exact: bool,
    },
    Anova {
        f_statistic: f64,
        df_between: usize,
        df_within: usize,
        p_value: f64,
    },
}

pub fn compare(a: &ReportSet, b: &ReportSet, metric: Metric, test: TestKind, sided: Sided, zeros: ZeroPolicy) -> Result<Comparison> {
    let mut rows = Vec::new();
    for ca in &a.conditions {
        let Some(cb) = b.conditions.iter().find(|c| c.condition == ca.condition) else {
            continue;
        };
        let (Some(va), Some(vb)) = (ca.report.metric(metric), cb.report.metric(metric)) else {
            bail!(UsageError::new(format!(
                "metric {} is undefined for condition {:?}",
                metric.name(),
                ca.condition
            )));
        };
        rows.push(ComparisonRow {
            condition: ca.condition.clone(),
            a: va,
            b: vb,
            relative_gain: relative_gain(vb, va, metric.higher_is_better()).ok(),
        });
    }
    if rows.is_empty() {
        bail!(UsageError::new("the two report files share no condition names"));
    }
    let gains: Vec<f64> = rows.iter().filter_map(|r| r.relative_gain).collect();
    let mean_relative_gain = (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64);

    let test = match test {
        TestKind::Wilcoxon => {
            let av: Vec<f64> = rows.iter().map(|r| r.a).collect();
            let bv: Vec<f64> = rows.iter().map(|r| r.b).collect();
            let res = wilcoxon_signed_rank_with(&PairedSample::from_pairs(&av, &bv)?, sided, zeros)?;
            TestOutcome::Wilcoxon {
                sided: match sided {
                    Sided::Two => "two".into(),
                    Sided::One => "one".into(),
                },
                w_statistic: res.w_statistic,
                t_plus: res.t_plus,
                t_minus: res.t_minus,
                n_effective: res.n_effective,
                p_value: res.p_value,
                exact: res.method == lates_core::stats::WilcoxonMethod::Exact,
            }
        }
        TestKind::Anova => {
            let groups = vec![rows.iter().map(|r| r.a).collect(), rows.iter().map(|r| r.b).collect()];
            let res = anova_oneway(&groups)?;
            TestOutcome::Anova {
                f_statistic: res.f_statistic,
                df_between: res.df_between,
                df_within: res.df_within,
                p_value: res.p_value,
            }
        }
    };
    Ok(Comparison {
        metric: metric.name().into(),
        method_a: a.method.clone(),
        method_b: b.method.clone(),
        rows,
        mean_relative_gain,
        test,
    })
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>12} {:>12} {:>10}\n",
            "condition",
            format!("{} {}", self.method_a, self.metric),
            format!("{} {}", self.method_b, self.metric),
            "gain %"
        );
        for r in &self.rows {
            let gain = r.relative_gain.map_or("n/a".to_string(), |g| format!("{g:+.2}"));
            out.push_str(&format!("{:<24} {:>12.6} {:>12.6} {:>10}\n", r.condition, r.a, r.b, gain));
        }
        if let Some(g) = self.mean_relative_gain {
            out.push_str(&format!("mean relative gain: {g:+.2}%\n"));
        }
        match &self.test {
            TestOutcome::Wilcoxon {
                sided, w_statistic, n_effective, p_value, exact, ..
            } => out.push_str(&format!(
                "wilcoxon ({sided}-sided, {}): W = {w_statistic}, n = {n_effective}, p = {p_value:.6}\n",
                if *exact { "exact" } else { "normal approx." }
            )),
            TestOutcome::Anova {
                f_statistic,
                df_between,
                df_within,
                p_value,
            } => out.push_str(&format!(
                "anova: F({df_between}, {df_within}) = {f_statistic:.6}, p = {p_value:.6}\n"
            )),
        }
        out
    }
}
