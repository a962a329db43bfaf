//! Numerical invariant checks behind the `*-check` subcommands and
//! `selftest`. Every report carries a `passed` flag.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::Serialize;
use simloss_core::analysis::{
    dynamic_margin, exp_residual, exp_residual_bound, numeric_hessian_trace, robustness_gap, simce_trace_closed,
    triplet_trace_closed, triplet_trace_numeric, RobustnessProbe, HESSIAN_STEP, SIMCE_TRACE_BOUND,
};
use simloss_core::batching::{enumerate_pos_pairs, enumerate_triplets};
use simloss_core::embedding::{dot, norm};
use simloss_core::gradcheck::{gradcheck, GradcheckReport, LossKind};
use simloss_core::losses::softplus;
use simloss_core::rng::{self, Rng};
use simloss_core::synth::{estimate_kappa, sample_vmf, sphere_area, vmf_density, VmfParams};
use simloss_core::{BatchSpec, LossConfig, Result};

use rand::Rng as _;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim, 1.0);
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSuite {
    pub reports: Vec<GradcheckReport>,
    pub passed: bool,
}

pub fn gradcheck_suite(kinds: &[LossKind], trials: usize, seed: u64, cfg: &LossConfig) -> Result<GradcheckSuite> {
    let reports = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| gradcheck(k, trials, seed.wrapping_add(i as u64), cfg))
        .collect::<Result<Vec<_>>>()?;
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckSuite { reports, passed })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimceTraceSummary {
    pub cases: usize,
    pub max_numeric_trace: f64,
    pub bound: f64,
    pub bound_violations: usize,
    pub max_rel_error_vs_closed_form: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TripletTraceCase {
    pub dim: usize,
    pub v_norm: f64,
    pub numeric_trace: f64,
    pub closed_form_trace: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianCheck {
    pub simce: SimceTraceSummary,
    pub triplet: Vec<TripletTraceCase>,
    pub tolerance: f64,
    pub passed: bool,
}

/// SimCE trace against its bound and closed form on `cases` random triplets
/// with a unit anchor at `T = 1`, and the triplet trace against `(d − 1)/||v||`.
pub fn hessian_check(cases: usize, seed: u64) -> Result<HessianCheck> {
    const TOL: f64 = 1e-3;
    let mut rng = rng::seeded(seed);
    let mut max_numeric = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut max_rel = 0.0f64;
    for i in 0..cases {
        let dim = [3, 8, 16][i % 3];
        let a = unit(&mut rng, dim);
        let scale = 1.0 / (dim as f64).sqrt();
        let p = gaussian(&mut rng, dim, scale);
        let n = gaussian(&mut rng, dim, scale);
        let r = simce_trace_closed(&a, &p, &n, 1.0)?;
        max_numeric = max_numeric.max(r.numeric_trace);
        if !r.bound_satisfied {
            violations += 1;
        }
        max_rel = max_rel.max(rel(r.numeric_trace, r.closed_form_trace));
    }

    let mut triplet = Vec::new();
    for dim in [3, 8] {
        for v_norm in [1.0, 0.1, 0.01] {
            let v: Vec<f64> = unit(&mut rng, dim).into_iter().map(|x| x * v_norm).collect();
            // ||u|| = ||v|| keeps the hinge active at margin 0.2.
            let u: Vec<f64> = unit(&mut rng, dim).into_iter().map(|x| x * v_norm).collect();
            let numeric = triplet_trace_numeric(&u, &v, 0.2, HESSIAN_STEP)?;
            let closed = triplet_trace_closed(&v)?;
            triplet.push(TripletTraceCase {
                dim,
                v_norm,
                numeric_trace: numeric,
                closed_form_trace: closed,
                rel_error: rel(numeric, closed),
            });
        }
    }
    let passed = violations == 0 && max_rel <= TOL && triplet.iter().all(|c| c.rel_error <= TOL);
    Ok(HessianCheck {
        simce: SimceTraceSummary {
            cases,
            max_numeric_trace: max_numeric,
            bound: SIMCE_TRACE_BOUND,
            bound_violations: violations,
            max_rel_error_vs_closed_form: max_rel,
        },
        triplet,
        tolerance: TOL,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessCase {
    pub dim: usize,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
    pub second_order_prediction: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessCheck {
    pub epsilon: f64,
    pub n_samples: usize,
    pub simce: Vec<RobustnessCase>,
    /// Quadratic `½ vᵀAv`, where the second-order prediction is exact.
    pub quadratic_control: RobustnessCase,
    pub tolerance: f64,
    pub passed: bool,
}

/// Monte-Carlo local expectation gap of SimCE against `ε²/6 · Tr H` at
/// `points` random points, plus a quadratic control.
pub fn robustness_check(points: usize, probe: &RobustnessProbe) -> Result<RobustnessCheck> {
    const TOL: f64 = 0.05;
    probe.validate()?;
    let mut rng = rng::seeded(probe.seed);
    let mut simce = Vec::with_capacity(points);
    for i in 0..points {
        let dim = [3, 8, 16][i % 3];
        let scale = 1.0 / (dim as f64).sqrt();
        let a = gaussian(&mut rng, dim, 1.5 * scale);
        let p = gaussian(&mut rng, dim, scale);
        let v = gaussian(&mut rng, dim, scale);
        let (aa, ap) = (dot(&a, &a), dot(&a, &p));
        let f = |v: &[f64]| softplus(aa - dot(&a, v) - ap);
        let probe = RobustnessProbe {
            seed: probe.seed.wrapping_add(1 + i as u64),
            ..*probe
        };
        let g = robustness_gap(f, &v, &probe)?;
        simce.push(RobustnessCase {
            dim,
            mc_estimate: g.mc_estimate,
            mc_std_error: g.mc_std_error,
            second_order_prediction: g.second_order_prediction,
            rel_error: rel(g.mc_estimate, g.second_order_prediction),
        });
    }

    let dim = 8;
    let diag: Vec<f64> = (0..dim).map(|i| 0.5 + i as f64).collect();
    let v = gaussian(&mut rng, dim, 1.0);
    let quad = |x: &[f64]| 0.5 * x.iter().zip(&diag).map(|(x, a)| a * x * x).sum::<f64>();
    let g = robustness_gap(quad, &v, probe)?;
    let exact = probe.epsilon * probe.epsilon / 6.0 * diag.iter().sum::<f64>();
    let quadratic_control = RobustnessCase {
        dim,
        mc_estimate: g.mc_estimate,
        mc_std_error: g.mc_std_error,
        second_order_prediction: exact,
        rel_error: rel(g.mc_estimate, exact),
    };
    let control_ok = (g.mc_estimate - exact).abs() <= 4.0 * g.mc_std_error + 1e-15
        && rel(g.second_order_prediction, exact) < 1e-3;
    let passed = control_ok && simce.iter().all(|c| c.rel_error <= TOL);
    Ok(RobustnessCheck {
        epsilon: probe.epsilon,
        n_samples: probe.n_samples,
        simce,
        quadratic_control,
        tolerance: TOL,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginSample {
    pub z: f64,
    pub equivalent_margin: f64,
    pub taylor_residual: f64,
    pub residual_bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginCheck {
    pub grid_points: usize,
    pub grid_violations: Vec<f64>,
    pub max_residual_over_bound: f64,
    /// Random triplets at the configured temperature.
    pub samples: Vec<MarginSample>,
    pub passed: bool,
}

/// The `e^z` replacement error on `z ∈ [−20, 0]` (step 0.1) and dynamic
/// margins of random triplets.
pub fn margin_check(samples: usize, temperature: f64, seed: u64) -> Result<MarginCheck> {
    let mut violations = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..=200 {
        let z = -20.0 + 0.1 * i as f64;
        let (r, b) = (exp_residual(z), exp_residual_bound(z));
        worst = worst.max(r / b);
        if r > b {
            violations.push(z);
        }
    }
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a = gaussian(&mut rng, 8, 0.5);
        let p = gaussian(&mut rng, 8, 0.5);
        let n = gaussian(&mut rng, 8, 0.5);
        let m = dynamic_margin(&a, &p, &n, temperature)?;
        out.push(MarginSample {
            z: m.z,
            equivalent_margin: m.equivalent_margin,
            taylor_residual: m.taylor_residual,
            residual_bound: exp_residual_bound(m.z),
        });
    }
    Ok(MarginCheck {
        grid_points: 201,
        passed: violations.is_empty(),
        grid_violations: violations,
        max_residual_over_bound: worst,
        samples: out,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CombinatoricsCheck {
    pub batch: String,
    pub triplets: usize,
    pub brute_force_triplets: usize,
    pub expected_triplets: usize,
    pub pos_pairs: usize,
    pub brute_force_pos_pairs: usize,
    pub negatives_per_pair: Vec<usize>,
    pub passed: bool,
}

/// Enumeration counts on a `[N, K]` batch against plain nested loops.
pub fn combinatorics_check(spec: BatchSpec) -> Result<CombinatoricsCheck> {
    let labels = spec.block_labels();
    let triplets = enumerate_triplets(&labels)?;
    let pairs = enumerate_pos_pairs(&labels)?;
    let b = labels.len();
    let mut brute_t = 0;
    let mut brute_p = 0;
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            brute_p += 1;
            brute_t += (0..b).filter(|&n| labels[n] != labels[a]).count();
        }
    }
    let negatives: Vec<usize> = {
        let mut v: Vec<usize> = pairs.iter().map(|p| p.negatives.len()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let expected_neg = (spec.classes - 1) * spec.per_class;
    let passed = triplets.len() == brute_t
        && triplets.len() == spec.triplet_count()
        && pairs.len() == brute_p
        && negatives == vec![expected_neg];
    Ok(CombinatoricsCheck {
        batch: spec.to_string(),
        triplets: triplets.len(),
        brute_force_triplets: brute_t,
        expected_triplets: spec.triplet_count(),
        pos_pairs: pairs.len(),
        brute_force_pos_pairs: brute_p,
        negatives_per_pair: negatives,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KappaCase {
    pub dim: usize,
    pub kappa: f64,
    pub kappa_hat: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegralCase {
    pub kappa: f64,
    pub integral: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VmfCheck {
    pub samples: usize,
    pub kappa_round_trip: Vec<KappaCase>,
    pub kappa_tolerance: f64,
    pub density_integrals: Vec<IntegralCase>,
    pub integral_tolerance: f64,
    pub passed: bool,
}

/// Midpoint rule in (polar angle, azimuth) over S², with μ = e₃.
pub fn integrate_on_sphere(kappa: f64, n_theta: usize, n_phi: usize) -> Result<f64> {
    let params = VmfParams::new(vec![0.0, 0.0, 1.0], kappa)?;
    let (dt, dp) = (PI / n_theta as f64, 2.0 * PI / n_phi as f64);
    let mut total = 0.0;
    for i in 0..n_theta {
        let theta = (i as f64 + 0.5) * dt;
        let (s, c) = theta.sin_cos();
        let mut ring = 0.0;
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dp;
            ring += vmf_density(&[s * phi.cos(), s * phi.sin(), c], &params)?;
        }
        total += ring * s * dt * dp;
    }
    Ok(total)
}

/// κ̂ round trip for κ ∈ {5, 20, 80} and d ∈ {3, 8, 16}, and the density
/// integral on S².
pub fn vmf_check(samples: usize, seed: u64) -> Result<VmfCheck> {
    const KAPPA_TOL: f64 = 0.15;
    const INTEGRAL_TOL: f64 = 1e-3;
    let mut round_trip = Vec::new();
    for (i, dim) in [3usize, 8, 16].into_iter().enumerate() {
        for (j, kappa) in [5.0, 20.0, 80.0].into_iter().enumerate() {
            let mut rng = rng::derive(seed, (3 * i + j) as u64);
            let mu = unit(&mut rng, dim);
            let params = VmfParams::new(mu, kappa)?;
            let mut draws = Array2::zeros((samples, dim));
            for mut row in draws.rows_mut() {
                let x = sample_vmf(&params, &mut rng);
                row.iter_mut().zip(x).for_each(|(r, x)| *r = x);
            }
            let kappa_hat = estimate_kappa(&draws)?;
            round_trip.push(KappaCase {
                dim,
                kappa,
                kappa_hat,
                rel_error: rel(kappa_hat, kappa),
            });
        }
    }
    let integrals = [0.0, 1.0, 20.0, 80.0]
        .into_iter()
        .map(|kappa| Ok(IntegralCase { kappa, integral: integrate_on_sphere(kappa, 1000, 400)? }))
        .collect::<Result<Vec<_>>>()?;
    let passed = round_trip.iter().all(|c| c.rel_error <= KAPPA_TOL)
        && integrals.iter().all(|c| (c.integral - 1.0).abs() <= INTEGRAL_TOL);
    Ok(VmfCheck {
        samples,
        kappa_round_trip: round_trip,
        kappa_tolerance: KAPPA_TOL,
        density_integrals: integrals,
        integral_tolerance: INTEGRAL_TOL,
        passed,
    })
}

/// Uniform-sphere density sanity value used by `selftest`.
pub fn uniform_density_matches_area() -> Result<bool> {
    let p = VmfParams::new(vec![1.0, 0.0, 0.0], 0.0)?;
    Ok((vmf_density(&[0.0, 1.0, 0.0], &p)? - 1.0 / sphere_area(3)).abs() < 1e-15)
}

/// `numeric_hessian_trace` on `||x||²`, whose trace is `2d` everywhere.
pub fn hessian_probe_sanity() -> Result<bool> {
    let t = numeric_hessian_trace(|x| dot(x, x), &[0.3, -1.2, 2.0, 0.1], HESSIAN_STEP)?;
    Ok((t - 8.0).abs() < 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(gradcheck_suite(&LossKind::ALL, 3, 0, &LossConfig::default()).unwrap().passed);
        assert!(hessian_check(60, 0).unwrap().passed);
        assert!(margin_check(5, 1.0, 0).unwrap().passed);
        assert!(combinatorics_check(BatchSpec::new(8, 8).unwrap()).unwrap().passed);
        assert!(uniform_density_matches_area().unwrap());
        assert!(hessian_probe_sanity().unwrap());
    }

    #[test]
    fn robustness_small() {
        let probe = RobustnessProbe {
            n_samples: 20_000,
            ..RobustnessProbe::default()
        };
        let r = robustness_check(3, &probe).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn combinatorics_reference_counts() {
        let c = combinatorics_check(BatchSpec::new(8, 8).unwrap()).unwrap();
        assert_eq!(c.triplets, 25088);
        assert_eq!(c.pos_pairs, 448);
        assert_eq!(c.negatives_per_pair, vec![56]);
    }
}
