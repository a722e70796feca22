//! Multi-step workflows: parallel drivers over the core routines, calibrator
//! fitting/application, the end-to-end demo and the holdout-size sweep.

use std::path::Path;

use anyhow::{bail, Context, Result};
use lates_core::dataio::{split_indices, ActivationDump, SplitSpec};
use lates_core::metrics::{evaluate, MetricReport};
use lates_core::numeric::{derive_seed, seeded_rng};
use lates_core::probes::{probe_accuracy_curve, train_layer_probe, LinearProbe, ProbeTrainConfig, TrainedProbe};
use lates_core::refnet::{export_activations, generate_task, train_refnet, Mlp, RefNetSpec, SyntheticTask};
use lates_core::stack::{
    build_logit_stack, fit_lates, fit_temperature_with, lates_predict, layer_contributions, loss_value,
    AggTrainConfig, LogitStack, LossKind, TemperatureModel,
};
use lates_core::theory::{run_seed, summarize, DominanceConfig, DominanceReport, SyntheticStackTask};
use lates_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::io;
use crate::report::{bins_csv, CalibratorFile, NamedReport, ReportRecord, ReportSet};

/// Runs `f` on a pool with `jobs` threads (`None`: available parallelism).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().context("starting the worker pool")?;
    Ok(pool.install(f))
}

/// Layers are independent, so they train concurrently; per-layer seeds
/// make the result identical to the sequential order.
pub fn train_probes_parallel(dump: &ActivationDump, config: &ProbeTrainConfig) -> lates_core::Result<Vec<TrainedProbe>> {
    (0..dump.layers().len())
        .into_par_iter()
        .map(|pos| train_layer_probe(dump, pos, config))
        .collect()
}

pub fn dominance_parallel(task: &SyntheticStackTask, config: &DominanceConfig) -> lates_core::Result<DominanceReport> {
    let outcomes = (0..config.seeds)
        .into_par_iter()
        .map(|s| run_seed(task, config, s))
        .collect::<lates_core::Result<Vec<_>>>()?;
    Ok(summarize(outcomes, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lates,
    Temperature,
}

pub fn fit_calibrator(
    method: Method,
    holdout: &ActivationDump,
    probes: Option<&[LinearProbe]>,
    agg: &AggTrainConfig,
) -> Result<CalibratorFile> {
    let k = holdout.n_classes();
    match method {
        Method::Lates => {
            let probes = probes.context("fitting LATES needs a probe bundle (--probes)")?;
            let stack = build_logit_stack(probes, holdout)?;
            let weights = fit_lates(&stack, holdout.labels(), agg)?;
            Ok(CalibratorFile::lates(&weights, k))
        }
        Method::Temperature => {
            let logits = final_logits(holdout)?;
            let model = fit_temperature_with(&logits, holdout.labels(), agg.loss_kind)?;
            Ok(CalibratorFile::temperature(&model, agg.loss_kind, holdout.layers().len(), k))
        }
    }
}

fn final_logits(dump: &ActivationDump) -> Result<Matrix<f64>> {
    let block = dump
        .final_logits()
        .context("dump has no final-logits block")?;
    Ok(block.data().map(|v| v as f64))
}

/// Calibrated probabilities on every example of `dump`.
pub fn apply_calibrator(cal: &CalibratorFile, dump: &ActivationDump, probes: Option<&[LinearProbe]>) -> Result<Matrix<f64>> {
    cal.validate()?;
    if cal.n_classes() != dump.n_classes() {
        bail!(crate::UsageError::new(format!(
            "calibrator is for K = {} but the dump has K = {}",
            cal.n_classes(),
            dump.n_classes()
        )));
    }
    match cal {
        CalibratorFile::Lates { beta, .. } => {
            let probes = probes.context("applying a LATES calibrator needs the probe bundle (--probes)")?;
            let stack = build_logit_stack(probes, dump)?;
            Ok(lates_predict(&stack, beta)?)
        }
        CalibratorFile::Temperature { tau, .. } => Ok(TemperatureModel::new(*tau)?.predict(&final_logits(dump)?)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub task: SyntheticTask,
    pub net: RefNetSpec,
    pub probes: ProbeTrainConfig,
    pub agg: AggTrainConfig,
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub bins: usize,
    /// Std of the Gaussian input noise for each perturbed test condition.
    pub severities: Vec<f64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTask::default(),
            net: RefNetSpec::default(),
            probes: ProbeTrainConfig::default(),
            agg: AggTrainConfig::default(),
            train_fraction: 0.6,
            holdout_fraction: 0.2,
            bins: 10,
            severities: vec![0.05, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

impl DemoConfig {
    /// Same demo, every component seeded from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.net.seed = derive_seed(seed, 1);
        self.probes.seed = derive_seed(seed, 2);
        self.agg.seed = derive_seed(seed, 4);
        self
    }

    fn split_seed(&self) -> u64 {
        derive_seed(self.task.seed, 3)
    }

    fn noise_seed(&self) -> u64 {
        derive_seed(self.task.seed, 5)
    }
}

/// Network, probes and split dumps shared by the demo and the sweep.
pub struct Prepared {
    pub net: Mlp,
    pub features: Matrix<f64>,
    pub labels: Vec<u32>,
    pub train_accuracy: f64,
    pub train: ActivationDump,
    pub holdout: ActivationDump,
    pub test: ActivationDump,
    pub test_indices: Vec<usize>,
    pub probes: Vec<LinearProbe>,
}

pub fn prepare(config: &DemoConfig) -> Result<Prepared> {
    let (features, labels) = generate_task(&config.task)?;
    let split = split_indices(
        &labels,
        &SplitSpec {
            train_fraction: config.train_fraction,
            holdout_fraction: config.holdout_fraction,
            seed: config.split_seed(),
            stratify: false,
        },
    )?;
    let xt = features.select_rows(&split.train);
    let yt: Vec<u32> = split.train.iter().map(|&i| labels[i]).collect();
    let trained = train_refnet(&config.net, &xt, &yt)?;
    let train_accuracy = trained.net.accuracy(&xt, &yt);
    let dump = export_activations(&trained.net, &features, &labels)?;
    let train = dump.select(&split.train)?;
    let holdout = dump.select(&split.holdout)?;
    let test = dump.select(&split.rest)?;
    let probes = train_probes_parallel(&train, &config.probes)?
        .into_iter()
        .map(|t| t.probe)
        .collect();
    Ok(Prepared {
        net: trained.net,
        features,
        labels,
        train_accuracy,
        train,
        holdout,
        test,
        test_indices: split.rest,
        probes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodPair {
    pub lates: ReportRecord,
    pub temperature: ReportRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub n: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    pub n_test: usize,
    pub network_train_accuracy: f64,
    /// Holdout accuracy of each probe, shallow to deep.
    pub probe_accuracy: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub layer_contributions: Vec<f64>,
    pub holdout: MethodPair,
    pub test: MethodPair,
}

pub struct DemoOutcome {
    pub summary: DemoSummary,
    pub lates_reports: ReportSet,
    pub temperature_reports: ReportSet,
}

fn report(probs: &Matrix<f64>, labels: &[u32], bins: usize) -> Result<ReportRecord> {
    let r: MetricReport = evaluate(probs, labels, bins)?;
    Ok(ReportRecord::new(&r, labels.len()))
}

/// Runs generate → train → export → probes → stack → fit → evaluate and,
/// when `out_dir` is given, writes every artifact there.
pub fn run_demo(config: &DemoConfig, out_dir: Option<&Path>) -> Result<DemoOutcome> {
    let prep = prepare(config)?;
    let hold_stack = build_logit_stack(&prep.probes, &prep.holdout)?;
    let test_stack = build_logit_stack(&prep.probes, &prep.test)?;
    let weights = fit_lates(&hold_stack, prep.holdout.labels(), &config.agg)?;
    let temp = fit_temperature_with(&hold_stack.final_logits(), prep.holdout.labels(), config.agg.loss_kind)?;
    let k = prep.holdout.n_classes();
    let d = hold_stack.n_probes();

    let pair = |stack: &LogitStack, labels: &[u32]| -> Result<MethodPair> {
        Ok(MethodPair {
            lates: report(&lates_predict(stack, &weights.beta)?, labels, config.bins)?,
            temperature: report(&temp.predict(&stack.final_logits()), labels, config.bins)?,
        })
    };
    let holdout = pair(&hold_stack, prep.holdout.labels())?;
    let test = pair(&test_stack, prep.test.labels())?;

    let mut lates_conditions = vec![NamedReport {
        condition: "clean".into(),
        report: test.lates.clone(),
    }];
    let mut temp_conditions = vec![NamedReport {
        condition: "clean".into(),
        report: test.temperature.clone(),
    }];
    let x_test = prep.features.select_rows(&prep.test_indices);
    for (s, &sigma) in config.severities.iter().enumerate() {
        let mut rng = seeded_rng(derive_seed(config.noise_seed(), s as u64));
        let mut noisy = x_test.clone();
        for v in noisy.as_mut_slice() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        let dump = export_activations(&prep.net, &noisy, prep.test.labels())?;
        let stack = build_logit_stack(&prep.probes, &dump)?;
        let p = pair(&stack, dump.labels())?;
        let condition = format!("input_noise_{sigma}");
        lates_conditions.push(NamedReport {
            condition: condition.clone(),
            report: p.lates,
        });
        temp_conditions.push(NamedReport {
            condition,
            report: p.temperature,
        });
    }

    let summary = DemoSummary {
        seed: config.task.seed,
        n: config.task.n,
        n_train: prep.train.n_examples(),
        n_holdout: prep.holdout.n_examples(),
        n_test: prep.test.n_examples(),
        network_train_accuracy: prep.train_accuracy,
        probe_accuracy: probe_accuracy_curve(&prep.probes, &prep.holdout)?,
        beta: weights.beta.clone(),
        tau: temp.tau(),
        layer_contributions: layer_contributions(&weights.beta)?,
        holdout,
        test,
    };
    let outcome = DemoOutcome {
        summary,
        lates_reports: ReportSet {
            method: "lates".into(),
            conditions: lates_conditions,
        },
        temperature_reports: ReportSet {
            method: "temperature".into(),
            conditions: temp_conditions,
        },
    };

    if let Some(dir) = out_dir {
        let model = format!("refnet{:?}", config.net.layer_widths);
        io::write_dump_with_manifest(&dir.join("train.lats"), &prep.train, &model, "train")?;
        io::write_dump_with_manifest(&dir.join("holdout.lats"), &prep.holdout, &model, "holdout")?;
        io::write_dump_with_manifest(&dir.join("test.lats"), &prep.test, &model, "test")?;
        io::write_bundle(&dir.join("probes.lprb"), &prep.probes)?;
        io::write_json(&dir.join("calibrator_lates.json"), &CalibratorFile::lates(&weights, k))?;
        io::write_json(
            &dir.join("calibrator_temperature.json"),
            &CalibratorFile::temperature(&temp, config.agg.loss_kind, d, k),
        )?;
        io::write_json(&dir.join("reports_lates.json"), &outcome.lates_reports)?;
        io::write_json(&dir.join("reports_temperature.json"), &outcome.temperature_reports)?;
        io::write_atomic(&dir.join("bins_lates_test.csv"), &bins_csv(&outcome.summary.test.lates.bins)?)?;
        io::write_atomic(
            &dir.join("bins_temperature_test.csv"),
            &bins_csv(&outcome.summary.test.temperature.bins)?,
        )?;
        io::write_json(&dir.join("summary.json"), &outcome.summary)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendPoint {
    pub holdout_n: usize,
    /// Mean of TS − LATES NLL on the fitting subsample.
    pub mean_holdout_gap: f64,
    /// Mean of TS − LATES NLL on the untouched test split.
    pub mean_test_gap: f64,
    pub holdout_gaps: Vec<f64>,
    pub test_gaps: Vec<f64>,
}

fn nll_of(probs: &Matrix<f64>, labels: &[u32]) -> Result<f64> {
    Ok(loss_value(probs, labels, LossKind::Nll)?.mean)
}

/// Repeats the demo fit with holdout subsamples of each size. The network
/// and probes are trained once per seed; each size draws its own subsample
/// of that seed's holdout pool.
pub fn low_data_trend(config: &DemoConfig, sizes: &[usize], seeds: usize, master_seed: u64) -> Result<Vec<TrendPoint>> {
    let per_seed: Vec<Vec<(f64, f64)>> = (0..seeds)
        .into_par_iter()
        .map(|s| -> Result<Vec<(f64, f64)>> {
            let seed = derive_seed(master_seed, s as u64);
            let cfg = config.clone().with_seed(seed);
            let prep = prepare(&cfg)?;
            let pool = build_logit_stack(&prep.probes, &prep.holdout)?;
            let test = build_logit_stack(&prep.probes, &prep.test)?;
            sizes
                .iter()
                .enumerate()
                .map(|(j, &size)| {
                    if size > pool.n_examples() {
                        bail!("holdout size {size} exceeds the holdout pool of {}", pool.n_examples());
                    }
                    let mut idx: Vec<usize> = (0..pool.n_examples()).collect();
                    idx.shuffle(&mut seeded_rng(derive_seed(seed, 100 + j as u64)));
                    idx.truncate(size);
                    let sub = pool.select(&idx);
                    let labels: Vec<u32> = idx.iter().map(|&i| prep.holdout.labels()[i]).collect();
                    let w = fit_lates(&sub, &labels, &cfg.agg)?;
                    let t = fit_temperature_with(&sub.final_logits(), &labels, LossKind::Nll)?;
                    let hold_gap = nll_of(&t.predict(&sub.final_logits()), &labels)?
                        - nll_of(&lates_predict(&sub, &w.beta)?, &labels)?;
                    let test_gap = nll_of(&t.predict(&test.final_logits()), prep.test.labels())?
                        - nll_of(&lates_predict(&test, &w.beta)?, prep.test.labels())?;
                    Ok((hold_gap, test_gap))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(j, &holdout_n)| {
            let holdout_gaps: Vec<f64> = per_seed.iter().map(|v| v[j].0).collect();
            let test_gaps: Vec<f64> = per_seed.iter().map(|v| v[j].1).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            TrendPoint {
                holdout_n,
                mean_holdout_gap: mean(&holdout_gaps),
                mean_test_gap: mean(&test_gaps),
                holdout_gaps,
                test_gaps,
            }
        })
        .collect())
}
