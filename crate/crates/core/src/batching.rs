//! PK batch sampling and batch-all enumeration of triplets and positive pairs.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// `[N, K]`: `N` classes per batch, `K` samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub classes: usize,
    pub per_class: usize,
}

impl BatchSpec {
    pub fn new(classes: usize, per_class: usize) -> Result<Self> {
        let spec = Self { classes, per_class };
        spec.validate()?;
        Ok(spec)
    }

    /// Both `N` and `K` must be at least 2 for a triplet to exist.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig {
                field: "batch.classes",
                reason: format!("N must be >= 2, got {}", self.classes),
            });
        }
        if self.per_class < 2 {
            return Err(Error::InvalidConfig {
                field: "batch.per_class",
                reason: format!("K must be >= 2, got {}", self.per_class),
            });
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes * self.per_class
    }

    /// `N·K·(K−1)·(N−1)·K`.
    pub fn triplet_count(&self) -> usize {
        let (n, k) = (self.classes, self.per_class);
        n * k * (k - 1) * (n - 1) * k
    }

    /// Sequential labels `0,0,..,1,1,..` for a class-contiguous batch.
    pub fn block_labels(&self) -> Vec<usize> {
        (0..self.batch_size()).map(|i| i / self.per_class).collect()
    }
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 8,
        }
    }
}

impl fmt::Display for BatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.classes, self.per_class)
    }
}

/// Draws `N` distinct classes and `K` distinct samples from each.
///
/// Returned indices are grouped by class, in the order the classes were drawn.
/// Classes are drawn among those holding at least `K` samples.
pub fn sample_pk(labels: &[usize], spec: BatchSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_class
        .values()
        .filter(|members| members.len() >= spec.per_class)
        .collect();
    if eligible.len() < spec.classes {
        return Err(Error::Capacity(format!(
            "need {} classes with at least {} samples, only {} qualify ({} short)",
            spec.classes,
            spec.per_class,
            eligible.len(),
            spec.classes - eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(spec.batch_size());
    for c in index::sample(rng, eligible.len(), spec.classes) {
        let members = eligible[c];
        out.extend(
            index::sample(rng, members.len(), spec.per_class)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    Ok(out)
}

/// Row indices of an (anchor, positive, negative) triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub pos: usize,
    pub neg: usize,
}

pub type TripletIndexSet = Vec<Triplet>;

fn ensure_two_classes(labels: &[usize]) -> Result<()> {
    match labels.first() {
        Some(&first) if labels.iter().any(|&l| l != first) => Ok(()),
        _ => Err(Error::NoNegatives),
    }
}

/// Every valid triplet of the batch, in lexicographic `(a, p, n)` order.
pub fn enumerate_triplets(labels: &[usize]) -> Result<TripletIndexSet> {
    ensure_two_classes(labels)?;
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            out.extend(
                (0..b)
                    .filter(|&n| labels[n] != labels[a])
                    .map(|n| Triplet {
                        anchor: a,
                        pos: p,
                        neg: n,
                    }),
            );
        }
    }
    Ok(out)
}

/// An ordered same-class pair with all of the anchor's other-class rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosPair {
    pub anchor: usize,
    pub pos: usize,
    pub negatives: Vec<usize>,
}

/// Every ordered positive pair `(a, p)`, `a ≠ p`, in lexicographic order.
pub fn enumerate_pos_pairs(labels: &[usize]) -> Result<Vec<PosPair>> {
    ensure_two_classes(labels)?;
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        let negatives: Vec<usize> = (0..b).filter(|&n| labels[n] != labels[a]).collect();
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            out.push(PosPair {
                anchor: a,
                pos: p,
                negatives: negatives.clone(),
            });
        }
    }
    Ok(out)
}
