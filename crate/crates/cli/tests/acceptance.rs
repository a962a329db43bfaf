//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use simloss_cli::checks;
use simloss_core::analysis::RobustnessProbe;
use simloss_core::gradcheck::LossKind;
use simloss_core::training::{train, LossVariant, TrainConfig, TrainReport};
use simloss_core::{BatchSpec, LossConfig};

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suite = checks::gradcheck_suite(&LossKind::ALL, 100, 0, &LossConfig::default()).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = suite.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        suite.passed && secs <= 60.0,
        format!("7 losses x 100 batches, max rel error {worst:.2e}, {secs:.1} s"),
    )
}

fn simce_bound() -> Outcome {
    let h = checks::hessian_check(1000, 0).expect("hessian check runs");
    let s = &h.simce;
    outcome(
        s.bound_violations == 0 && s.max_numeric_trace <= 0.5 + 1e-6 && s.max_rel_error_vs_closed_form <= 1e-3,
        format!(
            "{} cases, max trace {:.6}, max rel error vs closed form {:.2e}",
            s.cases, s.max_numeric_trace, s.max_rel_error_vs_closed_form
        ),
    )
}

fn triplet_trace() -> Outcome {
    let h = checks::hessian_check(1, 0).expect("hessian check runs");
    let worst = h.triplet.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let smallest = h
        .triplet
        .iter()
        .filter(|c| c.v_norm == 0.01)
        .map(|c| c.numeric_trace)
        .fold(f64::INFINITY, f64::min);
    outcome(
        h.triplet.len() == 6 && worst <= 1e-3,
        format!("6 cases, max rel error {worst:.2e}, trace at ||v||=0.01 is {smallest:.1}"),
    )
}

fn robustness() -> Outcome {
    let r = checks::robustness_check(20, &RobustnessProbe::default()).expect("robustness check runs");
    let worst = r.simce.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let q = &r.quadratic_control;
    outcome(
        r.passed && r.simce.len() == 20 && r.n_samples == 100_000,
        format!(
            "20 points, max rel error {worst:.4}; quadratic control {:.4e} vs {:.4e} (se {:.1e})",
            q.mc_estimate, q.second_order_prediction, q.mc_std_error
        ),
    )
}

fn residual() -> Outcome {
    let m = checks::margin_check(10, 1.0, 0).expect("margin check runs");
    let example = m.samples.first().map_or(f64::NAN, |s| s.equivalent_margin);
    outcome(
        m.passed && m.grid_points == 201,
        format!(
            "{} grid points, {} violations, max residual/bound {:.4}, sample dynamic margin {example:.4}",
            m.grid_points,
            m.grid_violations.len(),
            m.max_residual_over_bound
        ),
    )
}

struct Run {
    ratio: f64,
    final_n_non: f64,
    rank1: f64,
    uniformity: f64,
}

fn run(variant: LossVariant, seed: u64) -> Run {
    let mut cfg = TrainConfig::reference();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.dataset.seed = seed;
    let report: TrainReport = train(&cfg).expect("training succeeds");
    let total = cfg.total_iters;
    let early = report.mean_n_non(100, 200);
    let last = report.mean_n_non(total - 100, total);
    let eval = report.evals.last().expect("final evaluation");
    Run {
        ratio: last / early.max(1.0),
        final_n_non: last,
        rank1: eval.rank1,
        uniformity: eval.uniformity,
    }
}

fn runs(variant: LossVariant) -> (Vec<Run>, f64) {
    let start = Instant::now();
    let out = (0..SEEDS).map(|s| run(variant, s)).collect();
    (out, start.elapsed().as_secs_f64())
}

fn n_non_dynamics(triplet: &[Run], ls: &[Run], secs: (f64, f64)) -> Outcome {
    let ratio = median(triplet.iter().map(|r| r.ratio).collect());
    let t_final = median(triplet.iter().map(|r| r.final_n_non).collect());
    let s_final = median(ls.iter().map(|r| r.final_n_non).collect());
    outcome(
        ratio < 0.1 && s_final > t_final && secs.0 <= 600.0 && secs.1 <= 600.0,
        format!(
            "triplet final/early ratio {ratio:.3}, final N_non L_s {s_final:.1} vs triplet {t_final:.1}, {:.0} s + {:.0} s",
            secs.0, secs.1
        ),
    )
}

fn inter_class(triplet: &[Run], ls: &[Run]) -> Outcome {
    let (t_r1, s_r1) = (
        median(triplet.iter().map(|r| r.rank1).collect()),
        median(ls.iter().map(|r| r.rank1).collect()),
    );
    let (t_u, s_u) = (
        median(triplet.iter().map(|r| r.uniformity).collect()),
        median(ls.iter().map(|r| r.uniformity).collect()),
    );
    outcome(
        s_r1 >= t_r1 && s_u <= t_u,
        format!("rank-1 L_s {s_r1:.3} vs triplet {t_r1:.3}, uniformity L_s {s_u:.3} vs triplet {t_u:.3}"),
    )
}

fn combinatorics() -> Outcome {
    let c = checks::combinatorics_check(BatchSpec::new(8, 8).unwrap()).expect("combinatorics check runs");
    outcome(
        c.passed && c.triplets == 25088 && c.pos_pairs == 448 && c.negatives_per_pair == vec![56],
        format!(
            "{} triplets, {} positive pairs, negatives per pair {:?}",
            c.triplets, c.pos_pairs, c.negatives_per_pair
        ),
    )
}

fn vmf() -> Outcome {
    let v = checks::vmf_check(10_000, 0).expect("vmf check runs");
    let worst = v.kappa_round_trip.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let off = v.density_integrals.iter().map(|c| (c.integral - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        v.passed && worst <= 0.15 && off <= 1e-3,
        format!("max kappa rel error {worst:.3}, max integral error {off:.1e}"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"train": {"variant": "L_s", "total_iters": 600, "eval_interval": 200}}"#).unwrap();
    let files = ["curves.csv", "eval.csv", "sim_iter_0.csv", "sim_iter_300.csv", "sim_iter_600.csv"];
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_simloss"))
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("3")
            .arg("--out")
            .arg(&out)
            .arg("train")
            .stderr(std::process::Stdio::null())
            .status()
            .expect("binary runs");
        if !status.success() {
            return outcome(false, format!("train exited with {status}"));
        }
        let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(out.join(f)).unwrap_or_default()).collect();
        outputs.push(bytes);
    }
    let identical = outputs[0] == outputs[1] && outputs[0].iter().all(|b| !b.is_empty());
    outcome(identical, format!("{} report CSVs compared across two runs", files.len()))
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, o: Outcome| {
        all &= o.passed;
        println!("criterion {n}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, gradients());
    report(2, simce_bound());
    report(3, triplet_trace());
    report(4, robustness());
    report(5, residual());
    let (triplet, t_secs) = runs(LossVariant::TripletOnly);
    let (ls, s_secs) = runs(LossVariant::Ls);
    report(6, n_non_dynamics(&triplet, &ls, (t_secs, s_secs)));
    report(7, inter_class(&triplet, &ls));
    report(8, combinatorics());
    report(9, vmf());
    report(10, reproducibility());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
