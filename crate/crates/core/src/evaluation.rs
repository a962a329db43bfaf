//! Retrieval and geometry metrics over embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, norm, similarity_matrix, EmbeddingBatch, SimKind, SimMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryProbeSplit {
    pub gallery: Array2<f64>,
    pub gallery_labels: Vec<usize>,
    pub probe: Array2<f64>,
    pub probe_labels: Vec<usize>,
    pub metric: Metric,
}

impl GalleryProbeSplit {
    pub fn validate(&self) -> Result<()> {
        if self.gallery.nrows() == 0 || self.probe.nrows() == 0 {
            return Err(Error::InvalidArgument("gallery and probe must be non-empty".into()));
        }
        if self.gallery.ncols() != self.probe.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.gallery.ncols(),
                actual: self.probe.ncols(),
            });
        }
        if self.gallery.nrows() != self.gallery_labels.len() || self.probe.nrows() != self.probe_labels.len() {
            return Err(Error::InvalidArgument("label count does not match row count".into()));
        }
        Ok(())
    }
}

/// Index of the gallery row closest to `query`; the first one wins ties.
pub fn nearest(gallery: &Array2<f64>, query: &[f64], metric: Metric) -> usize {
    let mut best = (0, f64::INFINITY);
    let qn = norm(query);
    for (i, row) in gallery.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("standard layout");
        let score = match metric {
            Metric::Euclidean => row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Metric::Cosine => -dot(row, query) / (norm(row) * qn),
        };
        if score < best.1 {
            best = (i, score);
        }
    }
    best.0
}

/// Fraction of probes whose nearest gallery row carries the probe's label.
pub fn rank1(split: &GalleryProbeSplit) -> Result<f64> {
    split.validate()?;
    let gallery = split.gallery.as_standard_layout();
    if split.metric == Metric::Cosine {
        for (i, r) in gallery.rows().into_iter().enumerate() {
            if r.dot(&r) == 0.0 {
                return Err(Error::DegenerateVector { row: i });
            }
        }
    }
    let gallery = gallery.into_owned();
    let probe = split.probe.as_standard_layout();
    let hits = probe
        .rows()
        .into_iter()
        .zip(&split.probe_labels)
        .filter(|(q, &label)| {
            let q = q.as_slice().expect("standard layout");
            split.gallery_labels[nearest(&gallery, q, split.metric)] == label
        })
        .count();
    Ok(hits as f64 / split.probe_labels.len() as f64)
}

fn normalized_rows(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let mut z = embeddings.as_standard_layout().into_owned();
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateVector { row: i });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(z)
}

/// `log mean_{i≠j} exp(−t·||z_i − z_j||²)` over L2-normalized rows.
pub fn uniformity(embeddings: &Array2<f64>, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("t must be > 0, got {t}")));
    }
    let m = embeddings.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("uniformity needs >= 2 rows, got {m}")));
    }
    let z = normalized_rows(embeddings)?;
    let d = z.ncols();
    let flat = z.as_slice().expect("standard layout");
    let mut sum = 0.0;
    for i in 0..m {
        let zi = &flat[i * d..(i + 1) * d];
        let mut row_sum = 0.0;
        for j in (i + 1)..m {
            let zj = &flat[j * d..(j + 1) * d];
            let sq: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
            row_sum += (-t * sq).exp();
        }
        sum += row_sum;
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok((sum / pairs).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    /// Mean Euclidean distance over same-class pairs.
    pub intra: f64,
    /// Mean Euclidean distance over different-class pairs.
    pub inter: f64,
    /// `inter / intra`; `None` when `intra` is zero.
    pub ratio: Option<f64>,
    /// Classes with at least two members that all coincide.
    pub degenerate_classes: Vec<usize>,
}

pub fn variance_ratio(embeddings: &Array2<f64>, labels: &[usize]) -> Result<VarianceStats> {
    let m = embeddings.nrows();
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: labels.len(),
        });
    }
    let mut spread: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &l in labels {
        spread.entry(l).or_insert((0, 0.0)).0 += 1;
    }
    if spread.len() < 2 {
        return Err(Error::InvalidArgument("variance ratio needs at least 2 classes".into()));
    }
    let x = embeddings.as_standard_layout();
    let (mut intra, mut inter, mut n_intra, mut n_inter) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
                spread.get_mut(&labels[i]).expect("counted").1 += d;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = if n_intra == 0 { 0.0 } else { intra / n_intra as f64 };
    let inter = inter / n_inter as f64;
    let degenerate_classes = spread
        .into_iter()
        .filter(|(_, (count, total))| *count >= 2 && *total == 0.0)
        .map(|(label, _)| label)
        .collect();
    Ok(VarianceStats {
        intra,
        inter,
        ratio: (intra > 0.0).then(|| inter / intra),
        degenerate_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub uniformity: f64,
    pub kappa_hat: f64,
    pub intra: f64,
    pub inter: f64,
    pub inter_intra_ratio: Option<f64>,
    pub degenerate_classes: Vec<usize>,
}

/// Uniformity temperature used throughout the reports.
pub const UNIFORMITY_T: f64 = 2.0;

pub fn geometry_report(embeddings: &Array2<f64>, labels: &[usize]) -> Result<GeometryReport> {
    let stats = variance_ratio(embeddings, labels)?;
    let z = normalized_rows(embeddings)?;
    let kappa_hat = crate::synth::estimate_kappa(&z)?;
    Ok(GeometryReport {
        uniformity: uniformity(embeddings, UNIFORMITY_T)?,
        kappa_hat,
        intra: stats.intra,
        inter: stats.inter,
        inter_intra_ratio: stats.ratio,
        degenerate_classes: stats.degenerate_classes,
    })
}

/// Writes the batch's cosine similarity matrix with rows grouped by class.
pub fn snapshot_sim_matrix(batch: &EmbeddingBatch, path: &Path) -> Result<SimMatrix> {
    let ordered = batch.class_block_order();
    let sim = similarity_matrix(&ordered, SimKind::Cosine)?;
    sim.write_csv(path)?;
    Ok(sim)
}

/// Mean of same-class off-diagonal entries and of different-class entries.
pub fn block_means(sim: &SimMatrix, labels: &[usize]) -> (f64, f64) {
    let b = sim.size();
    let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                same += sim.values[[i, j]];
                ns += 1;
            } else {
                diff += sim.values[[i, j]];
                nd += 1;
            }
        }
    }
    (same / ns.max(1) as f64, diff / nd.max(1) as f64)
}
