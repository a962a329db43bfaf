//! Command-line runner for the loss laboratory.
//!
//! Every subcommand reads an [`config::ExperimentConfig`] (JSON, optional),
//! writes its artifacts under the configured output directory and records
//! them in a `manifest_<command>.json`.

pub mod checks;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;
use serde::Serialize;
use simloss_core::batching::sample_pk;
use simloss_core::embedding::{similarity_matrix, EmbeddingBatch, SimKind};
use simloss_core::evaluation::{block_means, geometry_report, rank1, GalleryProbeSplit, GeometryReport, Metric};
use simloss_core::gradcheck::LossKind;
use simloss_core::rng;
use simloss_core::synth::gen_dataset;
use simloss_core::training::{model_forward, train, ModelParams};
use simloss_core::{BatchSpec, Error};

use crate::config::ExperimentConfig;
use crate::output::RunDir;

/// Exit status for a numerical check that ran and found a violation.
pub const EXIT_CHECK_FAILED: u8 = 2;
/// Exit status for invalid input of any kind.
pub const EXIT_INVALID: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "simloss", version, about = "Similarity-loss laboratory: checks, synthetic data, training and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON). Missing keys take the reference values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` and `robustness.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analytic vs central-difference gradients on random batches.
    Gradcheck {
        /// Loss to check (`triplet`, `s-triplet`, `simce`, `m-simce`, `ce`,
        /// `L_s`, `L_m`); repeatable. Defaults to all of them.
        #[arg(long = "loss")]
        losses: Vec<String>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// SimCE Hessian trace bound and the triplet trace closed form.
    HessianCheck {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Monte-Carlo local expectation gap against its second-order prediction.
    RobustnessCheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Exponential replacement error and dynamic margins.
    MarginCheck {
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Writes the synthetic dataset as CSV.
    GenData,
    /// Trains the configured model and writes curves, evals and snapshots.
    Train,
    /// Scores a trained model on the held-out rows.
    Eval {
        /// Model JSON written by `train`; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Similarity matrix of one PK batch of training rows.
    ExportSim {
        #[arg(long, default_value = "cosine")]
        kind: String,
        /// Embed with this model; raw features otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Runs every numerical check at full size.
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::HessianCheck { .. } => "hessian-check",
            Command::RobustnessCheck { .. } => "robustness-check",
            Command::MarginCheck { .. } => "margin-check",
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::ExportSim { .. } => "export-sim",
            Command::Selftest => "selftest",
        }
    }
}

/// Raised when a check ran to completion and failed.
#[derive(Debug)]
struct CheckFailed(&'static str);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed; see the report for details", self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK_FAILED;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NonFiniteEvaluation { .. }) => EXIT_CHECK_FAILED,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.robustness.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_outcome(run: RunDir, cfg: &ExperimentConfig, command: &'static str, passed: bool) -> anyhow::Result<()> {
    run.finish(command, cfg.hash(), cfg.seed, Some(passed))?;
    if passed {
        eprintln!("{command}: PASS");
        Ok(())
    } else {
        Err(CheckFailed(command).into())
    }
}

pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli.common)?;
    let command = cli.command.name();
    let mut run = RunDir::create(&cfg.out)?;
    match &cli.command {
        Command::Gradcheck { losses, trials } => {
            let kinds = if losses.is_empty() {
                LossKind::ALL.to_vec()
            } else {
                losses.iter().map(|s| s.parse()).collect::<Result<Vec<LossKind>, _>>()?
            };
            let suite = checks::gradcheck_suite(&kinds, *trials, cfg.seed, &cfg.loss)?;
            for r in &suite.reports {
                eprintln!("{:>9}: max relative error {:.3e}", r.loss.as_str(), r.max_rel_error);
            }
            run.write_json("gradcheck.json", &suite)?;
            check_outcome(run, &cfg, command, suite.passed)
        }
        Command::HessianCheck { cases } => {
            let report = checks::hessian_check(*cases, cfg.seed)?;
            run.write_json("hessian.json", &report)?;
            check_outcome(run, &cfg, command, report.passed)
        }
        Command::RobustnessCheck { points } => {
            let report = checks::robustness_check(*points, &cfg.robustness)?;
            run.write_json("robustness.json", &report)?;
            check_outcome(run, &cfg, command, report.passed)
        }
        Command::MarginCheck { samples } => {
            let report = checks::margin_check(*samples, cfg.loss.temperature, cfg.seed)?;
            run.write_json("margin.json", &report)?;
            check_outcome(run, &cfg, command, report.passed)
        }
        Command::GenData => {
            let data = gen_dataset(&cfg.dataset)?;
            run.write("dataset.csv", &data.to_csv())?;
            run.finish(command, cfg.hash(), cfg.seed, None)
        }
        Command::Train => cmd_train(&cfg, run),
        Command::Eval { model } => cmd_eval(&cfg, run, model.as_ref()),
        Command::ExportSim { kind, model } => cmd_export_sim(&cfg, run, kind, model.as_ref()),
        Command::Selftest => cmd_selftest(&cfg, run),
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    variant: &'static str,
    total_iters: usize,
    model_sha256: String,
    final_loss: Option<f64>,
    /// Mean active-triplet count over iterations [100, 200).
    n_non_early: f64,
    /// Mean active-triplet count over the last 100 iterations.
    n_non_final: f64,
    final_rank1: f64,
    final_uniformity: f64,
    snapshot_block_means: Vec<SnapshotMeans>,
}

#[derive(Debug, Serialize)]
struct SnapshotMeans {
    iter: usize,
    same_class: f64,
    different_class: f64,
}

fn cmd_train(cfg: &ExperimentConfig, mut run: RunDir) -> anyhow::Result<()> {
    let tc = cfg.train_config();
    let report = train(&tc)?;
    run.write("curves.csv", &report.curves_csv())?;
    run.write("eval.csv", &report.eval_csv())?;
    let mut means = Vec::new();
    for snap in &report.snapshots {
        run.write(&format!("sim_iter_{}.csv", snap.iter), &snap.sim.to_csv())?;
        let (same, diff) = block_means(&snap.sim, &snap.labels);
        means.push(SnapshotMeans {
            iter: snap.iter,
            same_class: same,
            different_class: diff,
        });
    }
    run.write_json("model.json", &report.model)?;
    let n = tc.total_iters;
    let last = report.evals.last().expect("at least the iteration-0 evaluation");
    let summary = TrainSummary {
        variant: tc.variant.as_str(),
        total_iters: n,
        model_sha256: report.digest.clone(),
        final_loss: report.iterations.last().map(|r| r.loss),
        n_non_early: report.mean_n_non(100, 200),
        n_non_final: report.mean_n_non(n.saturating_sub(100), n),
        final_rank1: last.rank1,
        final_uniformity: last.uniformity,
        snapshot_block_means: means,
    };
    run.write_json("train.json", &summary)?;
    run.finish("train", cfg.hash(), cfg.seed, None)
}

fn load_model(path: &PathBuf) -> anyhow::Result<ModelParams> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?)
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    metric: Metric,
    gallery_rows: usize,
    probe_rows: usize,
    rank1: f64,
    geometry: GeometryReport,
}

fn cmd_eval(cfg: &ExperimentConfig, mut run: RunDir, model: Option<&PathBuf>) -> anyhow::Result<()> {
    let path = model.cloned().unwrap_or_else(|| run.root().join("model.json"));
    let model = load_model(&path)?;
    let tc = cfg.train_config();
    let data = gen_dataset(&tc.dataset)?;
    let split = tc.split(&data);
    let gallery = model.forward(&split.gallery.features)?.embeddings;
    let probe = model.forward(&split.probe.features)?.embeddings;
    let metric = tc.eval.metric;
    let r1 = rank1(&GalleryProbeSplit {
        gallery: gallery.clone(),
        gallery_labels: split.gallery.labels.clone(),
        probe: probe.clone(),
        probe_labels: split.probe.labels.clone(),
        metric,
    })?;
    let all = ndarray::concatenate(Axis(0), &[gallery.view(), probe.view()])?;
    let labels: Vec<usize> = split.gallery.labels.iter().chain(&split.probe.labels).copied().collect();
    let out = EvalOutput {
        metric,
        gallery_rows: gallery.nrows(),
        probe_rows: probe.nrows(),
        rank1: r1,
        geometry: geometry_report(&all, &labels)?,
    };
    run.write_json("geometry.json", &out)?;
    run.finish("eval", cfg.hash(), cfg.seed, None)
}

fn cmd_export_sim(cfg: &ExperimentConfig, mut run: RunDir, kind: &str, model: Option<&PathBuf>) -> anyhow::Result<()> {
    let kind: SimKind = kind.parse()?;
    let tc = cfg.train_config();
    let data = gen_dataset(&tc.dataset)?;
    let split = tc.split(&data);
    let mut rng = rng::derive(cfg.seed, 3);
    let idx = sample_pk(&split.train.labels, cfg.batch, &mut rng)?;
    let rows = split.train.select(&idx);
    let batch = match model {
        Some(path) => model_forward(&load_model(path)?, &rows.features, &rows.labels)?.0,
        None => EmbeddingBatch::labeled(rows.features.clone(), rows.labels.clone())?,
    };
    let sim = similarity_matrix(&batch.class_block_order(), kind)?;
    run.write(&format!("sim_{}.csv", kind.as_str()), &sim.to_csv())?;
    run.finish("export-sim", cfg.hash(), cfg.seed, None)
}

#[derive(Debug, Serialize)]
struct Selftest {
    gradcheck: checks::GradcheckSuite,
    hessian: checks::HessianCheck,
    robustness: checks::RobustnessCheck,
    margin: checks::MarginCheck,
    combinatorics: checks::CombinatoricsCheck,
    vmf: checks::VmfCheck,
    uniform_density: bool,
    hessian_probe: bool,
    passed: bool,
}

fn cmd_selftest(cfg: &ExperimentConfig, mut run: RunDir) -> anyhow::Result<()> {
    let gradcheck = checks::gradcheck_suite(&LossKind::ALL, 100, cfg.seed, &simloss_core::LossConfig::default())?;
    let hessian = checks::hessian_check(1000, cfg.seed)?;
    let robustness = checks::robustness_check(20, &cfg.robustness)?;
    let margin = checks::margin_check(10, 1.0, cfg.seed)?;
    let combinatorics = checks::combinatorics_check(BatchSpec::new(8, 8)?)?;
    let vmf = checks::vmf_check(10_000, cfg.seed)?;
    let uniform_density = checks::uniform_density_matches_area()?;
    let hessian_probe = checks::hessian_probe_sanity()?;
    let parts = [
        ("gradcheck", gradcheck.passed),
        ("hessian", hessian.passed),
        ("robustness", robustness.passed),
        ("margin", margin.passed),
        ("combinatorics", combinatorics.passed),
        ("vmf", vmf.passed),
        ("uniform-density", uniform_density),
        ("hessian-probe", hessian_probe),
    ];
    for (name, ok) in parts {
        eprintln!("{name:>15}: {}", if ok { "PASS" } else { "FAIL" });
    }
    let passed = parts.iter().all(|p| p.1);
    let report = Selftest {
        gradcheck,
        hessian,
        robustness,
        margin,
        combinatorics,
        vmf,
        uniform_density,
        hessian_probe,
        passed,
    };
    run.write_json("selftest.json", &report)?;
    check_outcome(run, cfg, "selftest", passed)
}
