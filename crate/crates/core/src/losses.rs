//! Forward values and hand-derived gradients for the loss family.
//!
//! Batch losses enumerate every valid triplet (or positive pair) of the batch
//! in lexicographic order and accumulate per-pair coefficients: the gradient
//! of the reduced loss with respect to each pairwise distance, similarity or
//! inner product. Those coefficients are then pushed back onto the rows. Both
//! passes run sequentially in a fixed order, so results are bit-reproducible.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::batching::{enumerate_pos_pairs, enumerate_triplets};
use crate::embedding::{dot, row_norms, similarity_matrix, EmbeddingBatch, SimKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average over triplets whose hinge is strictly positive.
    #[default]
    MeanOverNonzero,
    MeanOverAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Hinge margin of the triplet family.
    pub margin: f64,
    /// Softmax temperature of the SimCE family.
    pub temperature: f64,
    pub reduction: Reduction,
    /// Evaluate SimCE and m-SimCE on L2-normalized rows.
    pub normalize_for_simce: bool,
    /// Treat the similarity weights of the s-triplet loss as constants.
    pub detach_similarity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            temperature: 1.0,
            reduction: Reduction::MeanOverNonzero,
            normalize_for_simce: false,
            detach_similarity: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::InvalidConfig {
                field: "loss.margin",
                reason: format!("margin must be a finite value >= 0, got {}", self.margin),
            });
        }
        self.validate_temperature()
    }

    fn validate_temperature(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig {
                field: "loss.temperature",
                reason: format!("temperature must be > 0, got {}", self.temperature),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Gradient of `value` with respect to every embedding row.
    pub grad: Array2<f64>,
    /// Terms with a strictly positive hinge (all terms for hinge-free losses).
    pub n_non: usize,
    pub n_total: usize,
}

impl LossResult {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros((rows, cols)),
            n_non: 0,
            n_total: 0,
        }
    }
}

/// Affine map from embeddings to class logits: `logits = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `C × D`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weight.nrows(),
                actual: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, embeddings: &Array2<f64>) -> Array2<f64> {
        embeddings.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadGrad {
    pub fn zeros_like(head: &ClassifierHead) -> Self {
        Self {
            weight: Array2::zeros(head.weight.raw_dim()),
            bias: Array1::zeros(head.bias.len()),
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Linear similarity weight `f(s) = (1 − s) / 2`.
pub fn weight_from_sim(s: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "similarity {s} outside [-1, 1]"
        )));
    }
    Ok((1.0 - s) / 2.0)
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Single-triplet hinge `max(0, m + ||a−p|| − ||a−n||)`.
pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (margin + dist(a, p) - dist(a, n)).max(0.0)
}

/// Single-triplet s-triplet value from its similarity and distance parts.
pub fn s_triplet_from_parts(margin: f64, s_ap: f64, d_ap: f64, s_an: f64, d_an: f64) -> f64 {
    (margin + (1.0 - s_ap) / 2.0 * d_ap - (1.0 - s_an) / 2.0 * d_an).max(0.0)
}

/// Single-triplet s-triplet value with cosine similarities.
pub fn s_triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    let s_ap = crate::embedding::cosine_sim(a, p)?;
    let s_an = crate::embedding::cosine_sim(a, n)?;
    Ok(s_triplet_from_parts(margin, s_ap, dist(a, p), s_an, dist(a, n)))
}

/// Single-triplet SimCE value `softplus((a·n − a·p) / T)`.
pub fn simce_term(a: &[f64], p: &[f64], n: &[f64], temperature: f64) -> f64 {
    softplus((dot(a, n) - dot(a, p)) / temperature)
}

/// m-SimCE value for one positive pair against a set of negatives.
pub fn m_simce_term(a: &[f64], p: &[f64], negatives: &[&[f64]], temperature: f64) -> f64 {
    let s_p = dot(a, p) / temperature;
    let scores: Vec<f64> = negatives.iter().map(|n| dot(a, n) / temperature).collect();
    log_sum_exp(s_p, &scores) - s_p
}

fn log_sum_exp(first: f64, rest: &[f64]) -> f64 {
    let max = rest.iter().copied().fold(first, f64::max);
    let sum: f64 = (first - max).exp() + rest.iter().map(|s| (s - max).exp()).sum::<f64>();
    max + sum.ln()
}

fn pairwise_distances(batch: &EmbeddingBatch) -> Array2<f64> {
    let b = batch.len();
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in (i + 1)..b {
            let v = dist(batch.row(i), batch.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn reduction_scale(reduction: Reduction, n_non: usize, n_total: usize) -> f64 {
    let denom = match reduction {
        Reduction::MeanOverNonzero => n_non,
        Reduction::MeanOverAll => n_total,
    };
    if denom == 0 {
        0.0
    } else {
        1.0 / denom as f64
    }
}

/// Pushes `coef[i][j] · ∂d_ij` back onto rows `i` and `j`. Coincident rows
/// contribute nothing.
fn backprop_distances(batch: &EmbeddingBatch, d: &Array2<f64>, coef: &Array2<f64>, scale: f64, grad: &mut Array2<f64>) {
    let (b, dim) = (batch.len(), batch.dim());
    let mut dir = vec![0.0; dim];
    for i in 0..b {
        for j in 0..b {
            let c = coef[[i, j]];
            if c == 0.0 || d[[i, j]] == 0.0 {
                continue;
            }
            let k = c * scale / d[[i, j]];
            for (t, (xi, xj)) in dir.iter_mut().zip(batch.row(i).iter().zip(batch.row(j))) {
                *t = k * (xi - xj);
            }
            for t in 0..dim {
                grad[[i, t]] += dir[t];
                grad[[j, t]] -= dir[t];
            }
        }
    }
}

/// Pushes `coef[i][j] · ∂S_ij` back onto rows `i` and `j` for cosine `S`.
fn backprop_cosines(
    batch: &EmbeddingBatch,
    sim: &Array2<f64>,
    norms: &[f64],
    coef: &Array2<f64>,
    scale: f64,
    grad: &mut Array2<f64>,
) {
    let (b, dim) = (batch.len(), batch.dim());
    for i in 0..b {
        for j in 0..b {
            let c = coef[[i, j]];
            if c == 0.0 {
                continue;
            }
            let c = c * scale;
            let s = sim[[i, j]];
            let inv = 1.0 / (norms[i] * norms[j]);
            let (xi, xj) = (batch.row(i), batch.row(j));
            let si = s / (norms[i] * norms[i]);
            let sj = s / (norms[j] * norms[j]);
            for t in 0..dim {
                grad[[i, t]] += c * (xj[t] * inv - si * xi[t]);
                grad[[j, t]] += c * (xi[t] * inv - sj * xj[t]);
            }
        }
    }
}

/// Batch-all triplet loss on Euclidean distances.
pub fn triplet_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    let triplets = enumerate_triplets(batch.labels())?;
    let b = batch.len();
    let d = pairwise_distances(batch);
    let mut coef = Array2::<f64>::zeros((b, b));
    let mut sum = 0.0;
    let mut n_non = 0;
    for t in &triplets {
        let arg = cfg.margin + d[[t.anchor, t.pos]] - d[[t.anchor, t.neg]];
        if arg > 0.0 {
            n_non += 1;
            sum += arg;
            coef[[t.anchor, t.pos]] += 1.0;
            coef[[t.anchor, t.neg]] -= 1.0;
        }
    }
    let scale = reduction_scale(cfg.reduction, n_non, triplets.len());
    let mut out = LossResult::zero(b, batch.dim());
    backprop_distances(batch, &d, &coef, scale, &mut out.grad);
    out.value = sum * scale;
    out.n_non = n_non;
    out.n_total = triplets.len();
    Ok(out)
}

/// Similarity-weighted triplet loss.
///
/// Each hinge is `m + f(S_ap)·d_ap − f(S_an)·d_an` with cosine `S` and
/// `f(s) = (1 − s)/2`. The gradient flows through the weights as well unless
/// `detach_similarity` is set.
pub fn s_triplet_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    let triplets = enumerate_triplets(batch.labels())?;
    let b = batch.len();
    let norms = row_norms(batch)?;
    let sim = similarity_matrix(batch, SimKind::Cosine)?.values;
    let d = pairwise_distances(batch);
    let w = sim.mapv(|s| (1.0 - s) / 2.0);
    let mut coef_d = Array2::<f64>::zeros((b, b));
    let mut coef_s = Array2::<f64>::zeros((b, b));
    let mut sum = 0.0;
    let mut n_non = 0;
    for t in &triplets {
        let (ap, an) = ([t.anchor, t.pos], [t.anchor, t.neg]);
        let arg = cfg.margin + w[ap] * d[ap] - w[an] * d[an];
        if arg > 0.0 {
            n_non += 1;
            sum += arg;
            coef_d[ap] += w[ap];
            coef_d[an] -= w[an];
            coef_s[ap] -= 0.5 * d[ap];
            coef_s[an] += 0.5 * d[an];
        }
    }
    let scale = reduction_scale(cfg.reduction, n_non, triplets.len());
    let mut out = LossResult::zero(b, batch.dim());
    backprop_distances(batch, &d, &coef_d, scale, &mut out.grad);
    if !cfg.detach_similarity {
        backprop_cosines(batch, &sim, &norms, &coef_s, scale, &mut out.grad);
    }
    out.value = sum * scale;
    out.n_non = n_non;
    out.n_total = triplets.len();
    Ok(out)
}

/// Rows the SimCE family takes inner products of: raw, or unit-normalized
/// together with the norms needed to pull gradients back.
struct DotRows {
    rows: Array2<f64>,
    norms: Option<Vec<f64>>,
}

impl DotRows {
    fn new(batch: &EmbeddingBatch, normalize: bool) -> Result<Self> {
        if !normalize {
            return Ok(Self {
                rows: batch.data().clone(),
                norms: None,
            });
        }
        let norms = row_norms(batch)?;
        let mut rows = batch.data().clone();
        for (mut row, n) in rows.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        Ok(Self {
            rows,
            norms: Some(norms),
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        let d = self.rows.ncols();
        &self.rows.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    fn gram(&self) -> Array2<f64> {
        self.rows.dot(&self.rows.t())
    }

    /// Gradient with respect to the original rows given `coef[i][j] = ∂L/∂G_ij`.
    fn backprop(&self, coef: &Array2<f64>, scale: f64) -> Array2<f64> {
        let (b, dim) = self.rows.dim();
        let mut grad = Array2::<f64>::zeros((b, dim));
        for i in 0..b {
            for j in 0..b {
                let c = coef[[i, j]];
                if c == 0.0 {
                    continue;
                }
                let c = c * scale;
                let (yi, yj) = (self.row(i), self.row(j));
                for t in 0..dim {
                    grad[[i, t]] += c * yj[t];
                    grad[[j, t]] += c * yi[t];
                }
            }
        }
        if let Some(norms) = &self.norms {
            for (i, mut g) in grad.rows_mut().into_iter().enumerate() {
                let y = self.row(i);
                let radial: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for (gt, yt) in g.iter_mut().zip(y) {
                    *gt = (*gt - radial * yt) / norms[i];
                }
            }
        }
        grad
    }
}

/// SimCE averaged over every batch triplet.
pub fn simce_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate_temperature()?;
    let triplets = enumerate_triplets(batch.labels())?;
    let b = batch.len();
    let rows = DotRows::new(batch, cfg.normalize_for_simce)?;
    let gram = rows.gram();
    let inv_t = 1.0 / cfg.temperature;
    let mut coef = Array2::<f64>::zeros((b, b));
    let mut sum = 0.0;
    for t in &triplets {
        let z = (gram[[t.anchor, t.neg]] - gram[[t.anchor, t.pos]]) * inv_t;
        sum += softplus(z);
        let g = sigmoid(z) * inv_t;
        coef[[t.anchor, t.neg]] += g;
        coef[[t.anchor, t.pos]] -= g;
    }
    let n = triplets.len();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    Ok(LossResult {
        value: sum * scale,
        grad: rows.backprop(&coef, scale),
        n_non: n,
        n_total: n,
    })
}

/// m-SimCE: one softmax per positive pair over the positive and all of the
/// anchor's negatives, averaged over pairs.
pub fn m_simce_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate_temperature()?;
    let pairs = enumerate_pos_pairs(batch.labels())?;
    let b = batch.len();
    let rows = DotRows::new(batch, cfg.normalize_for_simce)?;
    let gram = rows.gram();
    let inv_t = 1.0 / cfg.temperature;
    let mut coef = Array2::<f64>::zeros((b, b));
    let mut sum = 0.0;
    let mut scores = Vec::new();
    for pair in &pairs {
        if pair.negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        let a = pair.anchor;
        let s_p = gram[[a, pair.pos]] * inv_t;
        scores.clear();
        scores.extend(pair.negatives.iter().map(|&n| gram[[a, n]] * inv_t));
        let lse = log_sum_exp(s_p, &scores);
        sum += lse - s_p;
        coef[[a, pair.pos]] += ((s_p - lse).exp() - 1.0) * inv_t;
        for (&n, &s) in pair.negatives.iter().zip(&scores) {
            coef[[a, n]] += (s - lse).exp() * inv_t;
        }
    }
    let n = pairs.len();
    let scale = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    Ok(LossResult {
        value: sum * scale,
        grad: rows.backprop(&coef, scale),
        n_non: n,
        n_total: n,
    })
}

/// Mean softmax cross-entropy of the head's logits against the batch labels.
pub fn ce_loss(batch: &EmbeddingBatch, head: &ClassifierHead) -> Result<(LossResult, HeadGrad)> {
    if head.dim() != batch.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            actual: batch.dim(),
        });
    }
    let classes = head.classes();
    if let Some(&label) = batch.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let b = batch.len();
    let mut logits = head.logits(batch.data());
    let scale = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    let mut sum = 0.0;
    for (mut row, &y) in logits.rows_mut().into_iter().zip(batch.labels()) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        sum += lse - row[y];
        // Row becomes (softmax − onehot) / B.
        row.mapv_inplace(|v| (v - lse).exp() * scale);
        row[y] -= scale;
    }
    let g = logits;
    let grad = g.dot(&head.weight);
    let head_grad = HeadGrad {
        weight: g.t().dot(batch.data()),
        bias: g.sum_axis(ndarray::Axis(0)),
    };
    Ok((
        LossResult {
            value: sum * scale,
            grad,
            n_non: b,
            n_total: b,
        },
        head_grad,
    ))
}

/// The two combined objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Combined {
    /// s-triplet + CE + SimCE.
    #[serde(rename = "L_s")]
    Ls,
    /// s-triplet + CE + m-SimCE.
    #[serde(rename = "L_m")]
    Lm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedParts {
    pub s_triplet: f64,
    pub ce: f64,
    /// SimCE or m-SimCE depending on the variant.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    /// Sum of the three terms; `n_non`/`n_total` come from the s-triplet term.
    pub result: LossResult,
    pub head_grad: HeadGrad,
    pub parts: CombinedParts,
}

/// Unit-weight sum `s-triplet + CE + (m-)SimCE`, gradients summed in that order.
pub fn combined_loss(
    batch: &EmbeddingBatch,
    head: &ClassifierHead,
    cfg: &LossConfig,
    variant: Combined,
) -> Result<CombinedLoss> {
    let s_tri = s_triplet_loss(batch, cfg)?;
    let (ce, head_grad) = ce_loss(batch, head)?;
    let sim = match variant {
        Combined::Ls => simce_loss(batch, cfg)?,
        Combined::Lm => m_simce_loss(batch, cfg)?,
    };
    let parts = CombinedParts {
        s_triplet: s_tri.value,
        ce: ce.value,
        similarity: sim.value,
    };
    let grad = s_tri.grad + &ce.grad + &sim.grad;
    Ok(CombinedLoss {
        result: LossResult {
            value: parts.s_triplet + parts.ce + parts.similarity,
            grad,
            n_non: s_tri.n_non,
            n_total: s_tri.n_total,
        },
        head_grad,
        parts,
    })
}
