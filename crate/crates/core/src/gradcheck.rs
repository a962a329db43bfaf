//! Randomized finite-difference checks of the analytic loss gradients.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::finite_diff_grad;
use crate::batching::{enumerate_triplets, BatchSpec};
use crate::embedding::{cosine_sim, euclidean_dist, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, combined_loss, m_simce_loss, s_triplet_loss, simce_loss, triplet_loss, ClassifierHead, Combined,
    LossConfig,
};
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Batches with any hinge argument closer than this to zero are redrawn.
pub const KINK_GUARD: f64 = 1e-4;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "triplet")]
    Triplet,
    #[serde(rename = "s-triplet")]
    STriplet,
    #[serde(rename = "simce")]
    SimCe,
    #[serde(rename = "m-simce")]
    MSimCe,
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "L_s")]
    Ls,
    #[serde(rename = "L_m")]
    Lm,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Triplet,
        LossKind::STriplet,
        LossKind::SimCe,
        LossKind::MSimCe,
        LossKind::Ce,
        LossKind::Ls,
        LossKind::Lm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::STriplet => "s-triplet",
            LossKind::SimCe => "simce",
            LossKind::MSimCe => "m-simce",
            LossKind::Ce => "ce",
            LossKind::Ls => "L_s",
            LossKind::Lm => "L_m",
        }
    }

    fn uses_head(self) -> bool {
        matches!(self, LossKind::Ce | LossKind::Ls | LossKind::Lm)
    }

    /// Which hinge (plain or similarity-weighted) the loss contains, if any.
    fn hinge(self) -> Option<bool> {
        match self {
            LossKind::Triplet => Some(false),
            LossKind::STriplet | LossKind::Ls | LossKind::Lm => Some(true),
            _ => None,
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = LossKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::InvalidArgument(format!("unknown loss {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub value: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub trials: Vec<TrialResult>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `max|a − n| / max(max|a|, max|n|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(1e-12f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

fn near_kink(batch: &EmbeddingBatch, margin: f64, weighted: bool) -> Result<bool> {
    for t in enumerate_triplets(batch.labels())? {
        let (a, p, n) = (batch.row(t.anchor), batch.row(t.pos), batch.row(t.neg));
        let (d_ap, d_an) = (euclidean_dist(a, p)?, euclidean_dist(a, n)?);
        let arg = if weighted {
            let (s_ap, s_an) = (cosine_sim(a, p)?, cosine_sim(a, n)?);
            margin + (1.0 - s_ap) / 2.0 * d_ap - (1.0 - s_an) / 2.0 * d_an
        } else {
            margin + d_ap - d_an
        };
        if arg.abs() < KINK_GUARD {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Loss value and flattened gradient over `[embeddings, head weight, head bias]`.
fn evaluate(kind: LossKind, batch: &EmbeddingBatch, head: &ClassifierHead, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let flat = |grad: &Array2<f64>, extra: Option<(&Array2<f64>, &Array1<f64>)>| {
        let mut out: Vec<f64> = grad.iter().copied().collect();
        if let Some((w, b)) = extra {
            out.extend(w.iter().chain(b.iter()));
        }
        out
    };
    Ok(match kind {
        LossKind::Triplet => {
            let r = triplet_loss(batch, cfg)?;
            (r.value, flat(&r.grad, None))
        }
        LossKind::STriplet => {
            let r = s_triplet_loss(batch, cfg)?;
            (r.value, flat(&r.grad, None))
        }
        LossKind::SimCe => {
            let r = simce_loss(batch, cfg)?;
            (r.value, flat(&r.grad, None))
        }
        LossKind::MSimCe => {
            let r = m_simce_loss(batch, cfg)?;
            (r.value, flat(&r.grad, None))
        }
        LossKind::Ce => {
            let (r, g) = ce_loss(batch, head)?;
            (r.value, flat(&r.grad, Some((&g.weight, &g.bias))))
        }
        LossKind::Ls | LossKind::Lm => {
            let which = if kind == LossKind::Ls { Combined::Ls } else { Combined::Lm };
            let c = combined_loss(batch, head, cfg, which)?;
            (c.result.value, flat(&c.result.grad, Some((&c.head_grad.weight, &c.head_grad.bias))))
        }
    })
}

/// Compares analytic and central-difference gradients on `trials` random
/// batches with `N, K ∈ {2, 4}` and `D ∈ {3, 8, 16}`.
pub fn gradcheck(kind: LossKind, trials: usize, seed: u64, cfg: &LossConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut results = Vec::with_capacity(trials);
    while results.len() < trials {
        let classes = [2, 4][rng.random_range(0..2)];
        let per_class = [2, 4][rng.random_range(0..2)];
        let dim = [3, 8, 16][rng.random_range(0..3)];
        let spec = BatchSpec::new(classes, per_class)?;
        let data = Array2::from_shape_fn((spec.batch_size(), dim), |_| rng.sample::<f64, _>(StandardNormal));
        let head = ClassifierHead::new(
            Array2::from_shape_fn((classes, dim), |_| 0.5 * rng.sample::<f64, _>(StandardNormal)),
            Array1::from_shape_fn(classes, |_| 0.1 * rng.sample::<f64, _>(StandardNormal)),
        )?;
        let batch = EmbeddingBatch::pk(data, spec.block_labels(), spec)?;
        if let Some(weighted) = kind.hinge() {
            if near_kink(&batch, cfg.margin, weighted)? {
                continue;
            }
        }

        let (value, analytic) = evaluate(kind, &batch, &head, cfg)?;
        let n_emb = batch.data().len();
        let mut point: Vec<f64> = batch.data().iter().copied().collect();
        if kind.uses_head() {
            point.extend(head.weight.iter().chain(head.bias.iter()));
        }
        let labels = batch.labels().to_vec();
        let numeric = finite_diff_grad(
            |p| {
                let data = Array2::from_shape_vec((spec.batch_size(), dim), p[..n_emb].to_vec())
                    .expect("shape fixed above");
                let head = if kind.uses_head() {
                    let w = Array2::from_shape_vec((classes, dim), p[n_emb..n_emb + classes * dim].to_vec())
                        .expect("shape fixed above");
                    let b = Array1::from(p[n_emb + classes * dim..].to_vec());
                    ClassifierHead { weight: w, bias: b }
                } else {
                    head.clone()
                };
                match EmbeddingBatch::pk(data, labels.clone(), spec) {
                    Ok(b) => evaluate(kind, &b, &head, cfg).map_or(f64::NAN, |r| r.0),
                    Err(_) => f64::NAN,
                }
            },
            &point,
            FD_STEP,
        )?;
        results.push(TrialResult {
            classes,
            per_class,
            dim,
            value,
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    let max_rel_error = results.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        loss: kind,
        trials: results,
        max_rel_error,
        tolerance: TOLERANCE,
        passed: max_rel_error < TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes() {
        for kind in LossKind::ALL {
            let report = gradcheck(kind, 5, 3, &LossConfig::default()).unwrap();
            assert!(report.passed, "{}: {}", kind.as_str(), report.max_rel_error);
            assert_eq!(report.trials.len(), 5);
        }
    }

    #[test]
    fn parses_names() {
        for kind in LossKind::ALL {
            assert_eq!(kind.as_str().parse::<LossKind>().unwrap(), kind);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e1 = relative_error(&[1.0, 2.0], &[1.0, 2.1]);
        let e2 = relative_error(&[10.0, 20.0], &[10.0, 21.0]);
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_trials() {
        assert!(gradcheck(LossKind::Ce, 0, 0, &LossConfig::default()).is_err());
    }
}
