//! Numerical oracles: finite-difference gradients, Hessian traces, the
//! second-order robustness expansion and the dynamic-margin expansion of
//! SimCE.
//!
//! Everything here works on plain `Fn(&[f64]) -> f64` closures and never
//! touches the analytic gradients in [`crate::losses`], so it can be used to
//! check them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, softplus};

/// Step used for second differences.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Upper bound asserted for the SimCE Hessian trace in the unit-anchor,
/// unit-temperature regime.
pub const SIMCE_TRACE_BOUND: f64 = 0.5;

fn eval(f: &impl Fn(&[f64]) -> f64, x: &[f64], coordinate: usize) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteEvaluation { coordinate })
    }
}

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step must be positive, got {h}")))
    }
}

/// Central-difference gradient `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = eval(&f, &x, i)?;
        x[i] = point[i] - h;
        let minus = eval(&f, &x, i)?;
        x[i] = point[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Trace of the Hessian from second differences along each axis.
pub fn numeric_hessian_trace(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Result<f64> {
    check_step(h)?;
    let mut x = point.to_vec();
    let center = eval(&f, &x, 0)?;
    let mut trace = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = eval(&f, &x, i)?;
        x[i] = point[i] - h;
        let minus = eval(&f, &x, i)?;
        x[i] = point[i];
        trace += (plus - 2.0 * center + minus) / (h * h);
    }
    Ok(trace)
}

/// `(d − 1) / ||v||₂`: the Hessian trace magnitude of the active triplet hinge
/// as a function of `v = a − n`.
pub fn triplet_trace_closed(v: &[f64]) -> Result<f64> {
    let r = norm(v);
    if r == 0.0 {
        return Err(Error::Singularity("triplet Hessian trace at v = 0".into()));
    }
    Ok((v.len() as f64 - 1.0) / r)
}

/// Numeric Hessian trace of `v ↦ −max(0, m + ||u|| − ||v||)`.
///
/// On the active branch this is the trace of `||v||`, the quantity
/// [`triplet_trace_closed`] describes.
pub fn triplet_trace_numeric(u: &[f64], v: &[f64], margin: f64, h: f64) -> Result<f64> {
    let du = norm(u);
    if margin + du - norm(v) <= 0.0 {
        return Err(Error::InvalidArgument("triplet hinge is inactive at v".into()));
    }
    numeric_hessian_trace(|v| -(margin + du - norm(v)).max(0.0), v, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub numeric_trace: f64,
    pub closed_form_trace: f64,
    pub bound: f64,
    pub bound_satisfied: bool,
    /// `||a||²`; the bound presumes a unit anchor.
    pub anchor_norm_sq: f64,
    /// `(a·n − a·p) / T`.
    pub z: f64,
}

/// Hessian trace of the SimCE triplet value in `v = a − n`, closed form and
/// numeric.
///
/// The closed form is `σ(z)·σ(−z)·||a||² / T²`.
pub fn simce_trace_closed(a: &[f64], p: &[f64], n: &[f64], temperature: f64) -> Result<HessianReport> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig {
            field: "loss.temperature",
            reason: format!("temperature must be > 0, got {temperature}"),
        });
    }
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: if a.len() != p.len() { p.len() } else { n.len() },
        });
    }
    let z = (dot(a, n) - dot(a, p)) / temperature;
    let anchor_norm_sq = dot(a, a);
    let closed_form_trace = sigmoid(z) * sigmoid(-z) * anchor_norm_sq / (temperature * temperature);
    let ap = dot(a, p);
    let v: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    // a·n = a·(a − v) = ||a||² − a·v
    let numeric_trace = numeric_hessian_trace(
        |v| softplus((anchor_norm_sq - dot(a, v) - ap) / temperature),
        &v,
        HESSIAN_STEP,
    )?;
    Ok(HessianReport {
        numeric_trace,
        closed_form_trace,
        bound: SIMCE_TRACE_BOUND,
        bound_satisfied: numeric_trace <= SIMCE_TRACE_BOUND + 1e-6,
        anchor_norm_sq,
        z,
    })
}

/// Monte-Carlo probe of `E[f(v + δ)] − f(v)` with `δ ~ U[−ε, ε]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessProbe {
    pub epsilon: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for RobustnessProbe {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            n_samples: 100_000,
            seed: 0,
        }
    }
}

impl RobustnessProbe {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig {
                field: "robustness.epsilon",
                reason: format!("epsilon must be > 0, got {}", self.epsilon),
            });
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig {
                field: "robustness.n_samples",
                reason: "need at least one sample".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessGap {
    pub mc_estimate: f64,
    /// Standard error of `mc_estimate`.
    pub mc_std_error: f64,
    /// `ε²/6 · Tr ∇²f(v)`.
    pub second_order_prediction: f64,
}

/// Compares the Monte-Carlo local expectation gap against its second-order
/// prediction.
///
/// Each draw `δ` is paired with `−δ` (both are uniform on the box), which
/// removes the first-order term from every sample without changing the
/// expectation. Without it the linear term's variance swamps the `O(ε²)`
/// signal at any practical sample count.
pub fn robustness_gap(
    f: impl Fn(&[f64]) -> f64,
    v: &[f64],
    probe: &RobustnessProbe,
) -> Result<RobustnessGap> {
    probe.validate()?;
    let base = eval(&f, v, 0)?;
    let trace = numeric_hessian_trace(&f, v, HESSIAN_STEP)?;
    let mut rng = crate::rng::seeded(probe.seed);
    let eps = probe.epsilon;
    let mut plus = v.to_vec();
    let mut minus = v.to_vec();
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..probe.n_samples {
        for i in 0..v.len() {
            let delta = rng.random_range(-eps..=eps);
            plus[i] = v[i] + delta;
            minus[i] = v[i] - delta;
        }
        let sample = 0.5 * (eval(&f, &plus, 0)? + eval(&f, &minus, 0)?) - base;
        // Welford update.
        let delta = sample - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (sample - mean);
    }
    let n = probe.n_samples as f64;
    let var = if probe.n_samples > 1 { m2 / (n - 1.0) } else { 0.0 };
    Ok(RobustnessGap {
        mc_estimate: mean,
        mc_std_error: (var / n).sqrt(),
        second_order_prediction: eps * eps / 6.0 * trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicMargin {
    /// `(a·n − a·p)² / T + 2T`.
    pub equivalent_margin: f64,
    /// `|softplus(z) − e^z|`.
    pub taylor_residual: f64,
    pub z: f64,
}

/// Triplet-equivalent margin of a SimCE triplet and the error of replacing
/// `softplus(z)` by `e^z`.
pub fn dynamic_margin(a: &[f64], p: &[f64], n: &[f64], temperature: f64) -> Result<DynamicMargin> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig {
            field: "loss.temperature",
            reason: format!("temperature must be > 0, got {temperature}"),
        });
    }
    let gap = dot(a, n) - dot(a, p);
    let z = gap / temperature;
    Ok(DynamicMargin {
        equivalent_margin: gap * gap / temperature + 2.0 * temperature,
        taylor_residual: exp_residual(z),
        z,
    })
}

/// `|softplus(z) − e^z|`.
pub fn exp_residual(z: f64) -> f64 {
    let x = z.exp();
    if x >= 0.1 {
        return (softplus(z) - x).abs();
    }
    // ln(1 + x) − x summed as a series; the direct difference cancels badly.
    let (mut term, mut sum, mut k) = (-x * x / 2.0, 0.0f64, 2.0);
    while term.abs() > f64::EPSILON * sum.abs() {
        sum += term;
        term *= -x * k / (k + 1.0);
        k += 1.0;
    }
    sum.abs()
}

/// `e^{2z} / 2`, the bound on [`exp_residual`] for `z ≤ 0`.
pub fn exp_residual_bound(z: f64) -> f64 {
    0.5 * (2.0 * z).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    #[test]
    fn fd_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[1.0], 1e-3).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 5.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        let err = finite_diff_grad(|x| if x[1] > 0.5 { f64::NAN } else { 0.0 }, &[0.0, 0.5], 1e-3);
        assert_eq!(err, Err(Error::NonFiniteEvaluation { coordinate: 1 }));
    }

    #[test]
    fn fd_matches_simce_gradient_in_negative() {
        let (a, p, n) = ([0.3, -0.8, 0.5], [0.9, 0.1, -0.4], [-0.2, 0.6, 0.7]);
        let t = 0.8;
        let g = finite_diff_grad(|n| softplus((dot(&a, n) - dot(&a, &p)) / t), &n, 1e-5).unwrap();
        let s = sigmoid((dot(&a, &n) - dot(&a, &p)) / t);
        for i in 0..3 {
            let analytic = s * a[i] / t;
            assert!((g[i] - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3));
        }
    }

    #[test]
    fn hessian_trace_examples() {
        for d in [1, 3, 7] {
            let x: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 - 1.0).collect();
            let t = numeric_hessian_trace(|v| dot(v, v), &x, HESSIAN_STEP).unwrap();
            assert!((t - 2.0 * d as f64).abs() < 1e-4);
            let t = numeric_hessian_trace(|v| 3.0 * v[0] - v[d - 1], &x, HESSIAN_STEP).unwrap();
            assert!(t.abs() < 1e-4);
        }
        let v = [2.0 / 3f64.sqrt(); 3];
        let t = numeric_hessian_trace(norm, &v, HESSIAN_STEP).unwrap();
        assert!((t - 1.0).abs() < 1e-3);
    }

    #[test]
    fn triplet_trace_examples() {
        let v = [0.0, 2.0, 0.0];
        assert!((triplet_trace_closed(&v).unwrap() - 1.0).abs() < 1e-15);
        assert!((triplet_trace_closed(&[0.001, 0.0]).unwrap() - 1000.0).abs() < 1e-9);
        assert!(matches!(triplet_trace_closed(&[0.0, 0.0]), Err(Error::Singularity(_))));

        let u = [1.0, 1.0, 0.0];
        for r in [1.0, 0.1, 0.01] {
            let v = [r * 0.6, 0.0, r * 0.8];
            let numeric = triplet_trace_numeric(&u, &v, 0.2, HESSIAN_STEP).unwrap();
            let closed = triplet_trace_closed(&v).unwrap();
            assert!((numeric - closed).abs() <= 1e-3 * closed, "{numeric} vs {closed}");
        }
        assert!(triplet_trace_numeric(&[0.0; 3], &[5.0, 0.0, 0.0], 0.2, 1e-4).is_err());
    }

    #[test]
    fn simce_trace_examples() {
        // z = 0 with a unit anchor: σ(0)σ(0) = 1/4.
        let a = [1.0, 0.0, 0.0];
        let r = simce_trace_closed(&a, &[0.3, 0.4, 0.0], &[0.3, -0.9, 0.1], 1.0).unwrap();
        assert_eq!(r.z, 0.0);
        assert!((r.closed_form_trace - 0.25).abs() < 1e-15);
        assert!((r.numeric_trace - 0.25).abs() < 1e-3 * 0.25);
        assert!(r.bound_satisfied);

        let r = simce_trace_closed(&a, &[0.0; 3], &[40.0, 0.0, 0.0], 1.0).unwrap();
        assert!(r.closed_form_trace < 1e-15);
        let r = simce_trace_closed(&a, &[40.0, 0.0, 0.0], &[0.0; 3], 1.0).unwrap();
        assert!(r.closed_form_trace < 1e-15);

        let r = simce_trace_closed(&[2.0, 0.0], &[0.0, 1.0], &[0.0, -1.0], 1.0).unwrap();
        assert!((r.closed_form_trace - 1.0).abs() < 1e-15);
        assert!(!r.bound_satisfied);

        assert!(matches!(
            simce_trace_closed(&a, &a, &a, 0.0),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn robustness_quadratic_and_linear_controls() {
        let probe = RobustnessProbe {
            epsilon: 0.01,
            n_samples: 20_000,
            seed: 4,
        };
        let v = [0.3, -1.2, 2.0, 0.7];
        let r = robustness_gap(|x| dot(x, x), &v, &probe).unwrap();
        let exact = 4.0 * 0.01f64.powi(2) / 3.0;
        assert!((r.second_order_prediction - exact).abs() < 1e-3 * exact);
        assert!((r.mc_estimate - exact).abs() < 4.0 * r.mc_std_error + 1e-12);

        let r = robustness_gap(|x| 2.0 * x[0] - x[3], &v, &probe).unwrap();
        assert!(r.mc_estimate.abs() < 1e-12);
        assert!(r.second_order_prediction.abs() < 1e-8);
    }

    #[test]
    fn robustness_simce_agrees_with_prediction() {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(1);
        let mut draw = || -> Vec<f64> { (0..6).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect() };
        let (a, p, v) = (draw(), draw(), draw());
        let ap = dot(&a, &p);
        let aa = dot(&a, &a);
        let f = |v: &[f64]| softplus(aa - dot(&a, v) - ap);
        let r = robustness_gap(f, &v, &RobustnessProbe::default()).unwrap();
        let rel = (r.mc_estimate - r.second_order_prediction).abs() / r.second_order_prediction;
        assert!(rel < 0.05, "relative gap {rel}");
    }

    #[test]
    fn robustness_probe_validation() {
        let bad = RobustnessProbe {
            epsilon: 0.0,
            ..RobustnessProbe::default()
        };
        assert!(robustness_gap(|x| x[0], &[1.0], &bad).is_err());
    }

    #[test]
    fn dynamic_margin_examples() {
        let a = [1.0, 0.0];
        let r = dynamic_margin(&a, &[0.5, 1.0], &[0.5, -2.0], 1.0).unwrap();
        assert_eq!(r.equivalent_margin, 2.0);
        assert!((r.taylor_residual - (1.0 - std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((r.taylor_residual - 0.3069).abs() < 1e-4);

        assert!(exp_residual(-5.0) <= (-10f64).exp() / 2.0);
        assert!(exp_residual(-2.0) <= (-4f64).exp() / 2.0);
        assert!(dynamic_margin(&a, &a, &a, -1.0).is_err());

        let r = dynamic_margin(&[2.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(r.z, -4.0);
        assert_eq!(r.equivalent_margin, 4.0 / 0.5 + 1.0);
    }

    #[test]
    fn residual_bound_on_grid() {
        for i in 0..=200 {
            let z = -20.0 + 0.1 * i as f64;
            assert!(exp_residual(z) <= exp_residual_bound(z), "z = {z}");
        }
    }
}
