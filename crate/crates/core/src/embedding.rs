//! Embedding containers plus the distance and similarity kernels the losses
//! are built on.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::batching::BatchSpec;
use crate::error::{Error, Result};

/// A matrix of embedding rows with one class label per row.
///
/// Batches built with [`EmbeddingBatch::pk`] carry the `[N, K]` layout and
/// are checked against it. [`EmbeddingBatch::labeled`] accepts any labeled
/// set, which the losses handle just as well since they only look at labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    labels: Vec<usize>,
    spec: Option<BatchSpec>,
}

impl EmbeddingBatch {
    /// A full PK batch: `N·K` rows, `N` distinct labels, each exactly `K` times.
    pub fn pk(data: Array2<f64>, labels: Vec<usize>, spec: BatchSpec) -> Result<Self> {
        spec.validate()?;
        let batch = Self::labeled(data, labels)?;
        if batch.len() != spec.batch_size() {
            return Err(Error::InvalidBatch(format!(
                "expected {} rows for spec {spec}, got {}",
                spec.batch_size(),
                batch.len()
            )));
        }
        let counts = label_counts(&batch.labels);
        if counts.len() != spec.classes {
            return Err(Error::InvalidBatch(format!(
                "expected {} classes, found {}",
                spec.classes,
                counts.len()
            )));
        }
        if let Some((label, count)) = counts.iter().find(|(_, &c)| c != spec.per_class) {
            return Err(Error::InvalidBatch(format!(
                "label {label} appears {count} times, expected {}",
                spec.per_class
            )));
        }
        Ok(Self {
            spec: Some(spec),
            ..batch
        })
    }

    /// An arbitrary labeled set of rows.
    pub fn labeled(data: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if data.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: data.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidBatch(format!(
                "non-finite entry at row {}",
                pos / data.ncols().max(1)
            )));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            labels,
            spec: None,
        })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn spec(&self) -> Option<BatchSpec> {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Rows reordered so equal labels are contiguous (stable in label value).
    pub fn class_block_order(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.labels[i]);
        let data = self.data.select(ndarray::Axis(0), &order);
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Self {
            data,
            labels,
            spec: self.spec,
        }
    }
}

fn label_counts(labels: &[usize]) -> std::collections::BTreeMap<usize, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(())
}

/// Euclidean distance `||x - y||₂`.
pub fn euclidean_dist(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite entry".into()));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let nx = norm(x);
    if nx == 0.0 {
        return Err(Error::DegenerateVector { row: 0 });
    }
    let ny = norm(y);
    if ny == 0.0 {
        return Err(Error::DegenerateVector { row: 1 });
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimKind {
    #[default]
    Cosine,
    /// Cosine divided by the largest off-diagonal entry.
    CosineOverMax,
}

impl SimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::Cosine => "cosine",
            SimKind::CosineOverMax => "cosine_over_max",
        }
    }
}

impl std::str::FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimKind::Cosine),
            "cosine_over_max" => Ok(SimKind::CosineOverMax),
            other => Err(Error::InvalidArgument(format!("unknown similarity kind `{other}`"))),
        }
    }
}

/// Square pairwise-similarity matrix over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub values: Array2<f64>,
    pub kind: SimKind,
}

/// Pairwise cosine similarities of all rows.
///
/// Only the upper triangle is computed; the lower one is a mirror, so the
/// result is exactly symmetric. The diagonal is set to 1.
pub fn similarity_matrix(batch: &EmbeddingBatch, kind: SimKind) -> Result<SimMatrix> {
    let b = batch.len();
    let norms = row_norms(batch)?;
    let mut values = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        values[[i, i]] = 1.0;
        for j in (i + 1)..b {
            let s = (dot(batch.row(i), batch.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    if kind == SimKind::CosineOverMax {
        let max = (0..b)
            .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| values[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cosine_over_max needs a positive off-diagonal maximum, got {max}"
            )));
        }
        values.mapv_inplace(|v| v / max);
    }
    Ok(SimMatrix { values, kind })
}

pub(crate) fn row_norms(batch: &EmbeddingBatch) -> Result<Vec<f64>> {
    (0..batch.len())
        .map(|i| {
            let n = norm(batch.row(i));
            if n == 0.0 {
                Err(Error::DegenerateVector { row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

impl SimMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// CSV text: a `# kind=<kind> B=<n>` line, then one row per line with
    /// 17 significant digits per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# kind={} B={}", self.kind.as_str(), self.size());
        for row in self.values.rows() {
            write_row(&mut out, row);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty similarity CSV".into()))?;
        let mut kind = None;
        let mut size = None;
        for token in header.trim_start_matches('#').split_whitespace() {
            if let Some(k) = token.strip_prefix("kind=") {
                kind = Some(k.parse::<SimKind>()?);
            } else if let Some(n) = token.strip_prefix("B=") {
                size = Some(n.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
        let (kind, size) = kind
            .zip(size)
            .ok_or_else(|| Error::Parse(format!("malformed header `{header}`")))?;
        let mut values = Array2::zeros((size, size));
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if i >= size {
                return Err(Error::Parse("too many rows".into()));
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != size {
                return Err(Error::Parse(format!("row {i} has {} cells", cells.len())));
            }
            for (j, cell) in cells.iter().enumerate() {
                values[[i, j]] = cell
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {i}: {e}")))?;
            }
            rows += 1;
        }
        if rows != size {
            return Err(Error::Parse(format!("expected {size} rows, got {rows}")));
        }
        Ok(Self { values, kind })
    }
}

fn write_row(out: &mut String, row: ArrayView1<f64>) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}
