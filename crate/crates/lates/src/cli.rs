use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lates_core::dataio::{ActivationDump, DUMP_MAGIC};
use lates_core::metrics::{evaluate, Metric, DEFAULT_BINS};
use lates_core::probes::{ProbeTrainConfig, BUNDLE_MAGIC};
use lates_core::refnet::{RefNetSpec, SyntheticTask, TaskKind};
use lates_core::stack::{AggTrainConfig, LossKind, DEFAULT_AGG_BATCH};
use lates_core::stats::{Sided, ZeroPolicy};
use lates_core::theory::{lambda_schedule, oracle_delta_bound, DominanceConfig, OracleBoundParams, SyntheticStackTask};
use serde::Serialize;

use crate::compare::{compare, TestKind};
use crate::pipeline::{self, with_jobs, DemoConfig, Method};
use crate::report::{bins_csv, CalibratorFile, ReportRecord, ReportSet};
use crate::{exit_code_for, io, UsageError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "lates", version, about = "Layer-stack temperature scaling: probes, calibrators, metrics and tests")]
pub struct Cli {
    /// Worker threads for parallel stages [default: available parallelism]
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one linear probe per layer of an activation dump
    TrainProbes(TrainProbesArgs),
    /// Fit a LATES or temperature calibrator on a holdout dump
    Fit(FitArgs),
    /// Compute ECE, NLL, Brier, accuracy and AUROC of calibrated predictions
    Evaluate(EvaluateArgs),
    /// Compare two report files with a paired test
    Compare(CompareArgs),
    /// Run the dominance experiment on a synthetic logit stack and print the oracle bound
    Theory(TheoryArgs),
    /// Run the full pipeline on a synthetic 2-D task with a small reference network
    Demo(DemoArgs),
    /// Print the header of a dump or probe bundle
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lates,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Nll,
    Square,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Nll => LossKind::Nll,
            LossArg::Square => LossKind::Square,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestArg {
    Wilcoxon,
    Anova,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ece,
    Nll,
    Brier,
    Acc,
    Auc,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Ece => Metric::Ece,
            MetricArg::Nll => Metric::Nll,
            MetricArg::Brier => Metric::Brier,
            MetricArg::Acc => Metric::Acc,
            MetricArg::Auc => Metric::Auc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SidedArg {
    Two,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ZerosArg {
    Drop,
    Pratt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Spiral,
    #[value(alias = "gaussian_mixture")]
    GaussianMixture,
}

#[derive(Debug, Args)]
pub struct TrainProbesArgs {
    /// Activation dump of the probe-training split
    #[arg(long)]
    pub dump: PathBuf,
    /// Output probe bundle
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Multiply the learning rate by this factor every --decay-every epochs
    #[arg(long, default_value_t = 0.5)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 10)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Average-pool wider layers down to this many features (0 disables pooling)
    #[arg(long, default_value_t = 512)]
    pub max_pooled_dim: usize,
    /// Train on raw features instead of z-scored ones
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, env = "LATES_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AggArgs {
    #[arg(long, value_enum, default_value_t = LossArg::Nll)]
    pub loss: LossArg,
    /// Aggregator SGD step size
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Aggregator mini-batch size (0 = full batch)
    #[arg(long, default_value_t = DEFAULT_AGG_BATCH)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Ridge coefficient λ on ‖β‖²/2
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Full-batch projected-gradient steps after SGD
    #[arg(long, default_value_t = 500)]
    pub refine_steps: usize,
}

impl AggArgs {
    fn config(&self, seed: u64) -> Result<AggTrainConfig> {
        Ok(AggTrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            seed,
            loss_kind: self.loss.into(),
            momentum: self.momentum,
            ridge: self.ridge,
            patience: None,
            refine_steps: self.refine_steps,
        })
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Lates)]
    pub method: MethodArg,
    /// Holdout activation dump
    #[arg(long)]
    pub holdout: PathBuf,
    /// Probe bundle (required for --method lates)
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Output calibrator JSON
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub agg: AggArgs,
    #[arg(long, env = "LATES_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Calibrator JSON to apply to --dump
    #[arg(long, conflicts_with = "probs", required_unless_present = "probs")]
    pub calibrator: Option<PathBuf>,
    /// Headerless CSV of probabilities (one row per example of --dump)
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Dump supplying labels (and activations for --calibrator)
    #[arg(long)]
    pub dump: PathBuf,
    /// Probe bundle (required for LATES calibrators)
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Number of equal-width confidence bins
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    /// Output report JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the reliability bins as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Reports of method A
    #[arg(long)]
    pub a: PathBuf,
    /// Reports of method B (the baseline for relative gains)
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, value_enum, default_value_t = TestArg::Wilcoxon)]
    pub test: TestArg,
    #[arg(long, value_enum, default_value_t = MetricArg::Ece)]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value_t = SidedArg::Two)]
    pub sided: SidedArg,
    /// Handling of zero differences in the Wilcoxon test
    #[arg(long, value_enum, default_value_t = ZerosArg::Drop)]
    pub zeros: ZerosArg,
    /// Output JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 40)]
    pub seeds: usize,
    /// Holdout sample size per seed
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Fresh test sample size per seed
    #[arg(long, default_value_t = 5000)]
    pub test_n: usize,
    /// default | noise | informative | single | binary
    #[arg(long, default_value = "default")]
    pub task: String,
    /// Ridge λ = c/√n; pass 0 to disable the penalty
    #[arg(long, default_value_t = 1.0)]
    pub ridge_c: f64,
    /// Loss margin for counting a seed as dominated
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
    /// Lipschitz constant ρ for the bound
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    /// ‖β*‖² for the bound
    #[arg(long, default_value_t = 4.0)]
    pub beta_norm_sq: f64,
    /// Margin ε for the bound
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, env = "LATES_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Spiral)]
    pub task: TaskArg,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Angular jitter (spiral) or cluster std (gaussian mixture)
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Hidden layer widths of the reference network
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    pub net_epochs: usize,
    #[arg(long, env = "LATES_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "runs/demo")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Dump (.lats) or probe bundle (.lprb)
    pub file: PathBuf,
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let jobs = cli.jobs.map(|j| j as usize);
    match with_jobs(jobs, || dispatch(cli.command)).and_then(|r| r) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainProbes(a) => train_probes(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Theory(a) => theory(a),
        Command::Demo(a) => demo(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_probes(a: TrainProbesArgs) -> Result<()> {
    let dump = io::read_dump(&a.dump)?;
    let config = ProbeTrainConfig {
        learning_rate: a.lr,
        momentum: a.momentum,
        epochs: a.epochs,
        decay_factor: a.decay_factor,
        decay_every: a.decay_every,
        batch_size: a.batch_size,
        seed: a.seed,
        weight_decay: a.weight_decay,
        max_pooled_dim: (a.max_pooled_dim > 0).then_some(a.max_pooled_dim),
        standardize: !a.no_standardize,
    };
    config.validate().map_err(|e| UsageError::new(e.to_string()))?;
    let trained = pipeline::train_probes_parallel(&dump, &config)?;
    for t in &trained {
        let last = t.trace.epoch_loss.last().copied();
        match last {
            Some(l) => println!("layer {:>3}: final training loss {l:.6}", t.probe.layer_index()),
            None => println!("layer {:>3}: identity (model logits)", t.probe.layer_index()),
        }
        if t.trace.single_class {
            eprintln!("warning: layer {} saw a single class; its probe predicts the prior", t.probe.layer_index());
        }
    }
    let probes: Vec<_> = trained.into_iter().map(|t| t.probe).collect();
    io::write_bundle(&a.out, &probes)?;
    println!("wrote {} probes to {}", probes.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let holdout = io::read_dump(&a.holdout)?;
    let probes = a.probes.as_deref().map(io::read_bundle).transpose()?;
    let method = match a.method {
        MethodArg::Lates => Method::Lates,
        MethodArg::Temperature => Method::Temperature,
    };
    if method == Method::Lates && probes.is_none() {
        return Err(UsageError::new("--method lates needs --probes").into());
    }
    let agg = a.agg.config(a.seed)?;
    let cal = pipeline::fit_calibrator(method, &holdout, probes.as_deref(), &agg)?;
    io::write_json(&a.out, &cal)?;
    print_json(&cal)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(UsageError::new("--bins must be at least 1").into());
    }
    let dump = io::read_dump(&a.dump)?;
    let probs = match (&a.calibrator, &a.probs) {
        (Some(c), _) => {
            let cal: CalibratorFile = serde_json::from_str(&io::read_text(c)?)
                .with_context(|| format!("parsing calibrator {}", c.display()))?;
            let probes = a.probes.as_deref().map(io::read_bundle).transpose()?;
            pipeline::apply_calibrator(&cal, &dump, probes.as_deref())?
        }
        (None, Some(p)) => io::read_probs_csv(p)?,
        (None, None) => return Err(UsageError::new("pass --calibrator or --probs").into()),
    };
    let report = ReportRecord::new(&evaluate(&probs, dump.labels(), a.bins)?, dump.n_examples());
    if let Some(out) = &a.out {
        io::write_json(out, &report)?;
    }
    if let Some(csv) = &a.csv {
        io::write_atomic(csv, &bins_csv(&report.bins)?)?;
    }
    print_json(&report)
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let load = |p: &PathBuf, fallback: &str| -> Result<ReportSet> {
        ReportSet::from_json(&io::read_text(p)?, fallback).with_context(|| format!("parsing reports {}", p.display()))
    };
    let ra = load(&a.a, "A")?;
    let rb = load(&a.b, "B")?;
    let test = match a.test {
        TestArg::Wilcoxon => TestKind::Wilcoxon,
        TestArg::Anova => TestKind::Anova,
    };
    let sided = match a.sided {
        SidedArg::Two => Sided::Two,
        SidedArg::One => Sided::One,
    };
    let zeros = match a.zeros {
        ZerosArg::Drop => ZeroPolicy::Wilcoxon,
        ZerosArg::Pratt => ZeroPolicy::Pratt,
    };
    let result = compare(&ra, &rb, a.metric.into(), test, sided, zeros)?;
    print!("{}", result.table());
    if let Some(out) = &a.out {
        io::write_json(out, &result)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TheoryReport {
    task: String,
    seeds: usize,
    holdout_n: usize,
    ridge: f64,
    tolerance: f64,
    dominance_fraction_holdout: f64,
    dominance_fraction_test: f64,
    mean_holdout_gap: f64,
    mean_test_gap: f64,
    oracle_bound: f64,
    bound_lambda: f64,
    rho: f64,
    beta_norm_sq: f64,
    epsilon: f64,
}

fn theory(a: TheoryArgs) -> Result<()> {
    let task = SyntheticStackTask::by_name(&a.task)
        .ok_or_else(|| UsageError::new(format!("unknown task {:?} (default, noise, informative, single, binary)", a.task)))?;
    if a.seeds == 0 || a.n == 0 {
        return Err(UsageError::new("--seeds and --n must be positive").into());
    }
    let config = DominanceConfig {
        seeds: a.seeds,
        holdout_n: a.n,
        test_n: a.test_n,
        master_seed: a.seed,
        ridge_c: (a.ridge_c > 0.0).then_some(a.ridge_c),
        tolerance: a.tolerance,
        ..DominanceConfig::default()
    };
    let report = pipeline::dominance_parallel(&task, &config)?;
    let bound_lambda = if config.ridge() > 0.0 { config.ridge() } else { lambda_schedule(a.n, 1.0) };
    let bound = oracle_delta_bound(&OracleBoundParams {
        lambda: bound_lambda,
        rho: a.rho,
        n: a.n,
        beta_star_norm_sq: a.beta_norm_sq,
        epsilon: a.epsilon,
    })
    .map_err(|e| UsageError::new(e.to_string()))?;
    let out = TheoryReport {
        task: a.task,
        seeds: a.seeds,
        holdout_n: a.n,
        ridge: report.ridge,
        tolerance: report.tolerance,
        dominance_fraction_holdout: report.holdout_fraction,
        dominance_fraction_test: report.test_fraction,
        mean_holdout_gap: report.mean_holdout_gap,
        mean_test_gap: report.mean_test_gap,
        oracle_bound: bound,
        bound_lambda,
        rho: a.rho,
        beta_norm_sq: a.beta_norm_sq,
        epsilon: a.epsilon,
    };
    println!(
        "dominance (LATES <= TS + {}): holdout {:.3}, test {:.3} over {} seeds",
        out.tolerance, out.dominance_fraction_holdout, out.dominance_fraction_test, out.seeds
    );
    println!(
        "mean loss gap TS - LATES: holdout {:+.6}, test {:+.6}",
        out.mean_holdout_gap, out.mean_test_gap
    );
    println!(
        "oracle bound  min(1, (λ‖β*‖² + 2ρ²/(λn))/ε) = {:.6}  at λ={:.6}, ρ={}, ‖β*‖²={}, n={}, ε={}",
        out.oracle_bound, out.bound_lambda, out.rho, out.beta_norm_sq, out.holdout_n, out.epsilon
    );
    if let Some(path) = &a.out {
        io::write_json(path, &out)?;
    }
    Ok(())
}

fn demo(a: DemoArgs) -> Result<()> {
    let mut widths = vec![2];
    widths.extend(&a.hidden);
    widths.push(a.classes);
    let base = DemoConfig {
        task: SyntheticTask {
            kind: match a.task {
                TaskArg::Spiral => TaskKind::Spiral,
                TaskArg::GaussianMixture => TaskKind::GaussianMixture,
            },
            n: a.n,
            n_classes: a.classes,
            noise: a.noise,
            seed: 0,
        },
        net: RefNetSpec {
            layer_widths: widths,
            epochs: a.net_epochs,
            ..RefNetSpec::default()
        },
        ..DemoConfig::default()
    };
    base.net.validate().map_err(|e| UsageError::new(e.to_string()))?;
    let config = base.with_seed(a.seed);
    let start = Instant::now();
    let outcome = pipeline::run_demo(&config, Some(&a.out_dir))?;
    let s = &outcome.summary;
    println!("network training accuracy {:.4}", s.network_train_accuracy);
    println!("probe holdout accuracy by depth {:?}", s.probe_accuracy);
    println!("beta {:?}  tau {:.6}", s.beta, s.tau);
    println!("layer contributions {:?}", s.layer_contributions);
    for (split, pair) in [("holdout", &s.holdout), ("test", &s.test)] {
        println!(
            "{split:<8} LATES  nll {:.5} ece {:.5} brier {:.5} acc {:.4}",
            pair.lates.nll, pair.lates.ece, pair.lates.brier, pair.lates.acc
        );
        println!(
            "{split:<8} TS     nll {:.5} ece {:.5} brier {:.5} acc {:.4}",
            pair.temperature.nll, pair.temperature.ece, pair.temperature.brier, pair.temperature.acc
        );
    }
    println!("artifacts in {} ({:.1}s)", a.out_dir.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = io::read_bytes(&a.file)?;
    let magic: [u8; 4] = bytes
        .get(..4)
        .and_then(|m| m.try_into().ok())
        .with_context(|| format!("{} is shorter than a magic number", a.file.display()))?;
    if magic == DUMP_MAGIC {
        let dump = ActivationDump::decode(&bytes).with_context(|| format!("decoding {}", a.file.display()))?;
        println!("activation dump {}", a.file.display());
        println!("  version      {}", u32::from_le_bytes(bytes[4..8].try_into()?));
        println!("  n_layers     {}", dump.layers().len());
        println!("  n_examples   {}", dump.n_examples());
        println!("  n_classes    {}", dump.n_classes());
        for l in dump.layers() {
            println!(
                "  layer {:>3}    dim {:>5}{}",
                l.layer_index(),
                l.feature_dim(),
                if l.is_final_logits() { "  (final logits)" } else { "" }
            );
        }
        println!("  crc32        {:08x} (ok)", u32::from_le_bytes(bytes[bytes.len() - 4..].try_into()?));
    } else if magic == BUNDLE_MAGIC {
        let probes = lates_core::probes::decode_bundle(&bytes).with_context(|| format!("decoding {}", a.file.display()))?;
        println!("probe bundle {}", a.file.display());
        for p in &probes {
            let pool = p.pool().map_or("none".to_string(), |s| format!("avg -> {}", s.output_dim));
            println!(
                "  layer {:>3}    input {:>5}  K {}  pool {pool}{}",
                p.layer_index(),
                p.input_dim(),
                p.n_classes(),
                if p.is_identity() { "  (identity)" } else { "" }
            );
        }
    } else {
        anyhow::bail!(lates_core::FormatError::BadMagic {
            expected: DUMP_MAGIC,
            found: magic
        });
    }
    Ok(())
}
