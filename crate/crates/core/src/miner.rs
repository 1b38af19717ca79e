//! Pairwise distances over normalized embeddings and margin-based mining of
//! informative pairs, plus triplet formation for the loss.
//!
//! The selection rules are stated in similarity terms; similarity here is
//! the negative Euclidean distance, which makes the similarity- and
//! distance-form conditions coincide: a negative pair `(a, n)` is kept iff
//! `d(a, n) < hardest_positive(a) + epsilon`, a positive pair `(a, p)` iff
//! `d(a, p) > hardest_negative(a) - epsilon`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{record, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct MinerConfig {
    pub epsilon: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig { epsilon: 0.1 }
    }
}

/// Snapshot of batch pairwise Euclidean distances plus labels, the miner's
/// input. Values live outside the autodiff graph.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub n: usize,
    d: Vec<f64>,
    pub labels: Vec<u8>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if d.len() != n * n || labels.len() != n {
            return Err(Error::shape(format!(
                "distance matrix: n = {n} vs {} entries and {} labels",
                d.len(),
                labels.len()
            )));
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::shape(format!("distance matrix: d[{i}][{i}] != 0")));
            }
            for j in 0..i {
                if (d[i * n + j] - d[j * n + i]).abs() > 1e-9 {
                    return Err(Error::shape(format!(
                        "distance matrix: asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { n, d, labels })
    }

    /// Snapshot from a `[n, n]` distance tensor (see [`pairwise_distances`]).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, labels: &[u8]) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape(format!(
                "distance tensor must be square, got {s:?}"
            )));
        }
        DistanceMatrix::new(
            s[0],
            t.data().iter().map(|v| v.as_f64()).collect(),
            labels.to_vec(),
        )
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Differentiable [n, n] matrix of Euclidean distances between embedding
/// rows. Entries with distance below 1e-12 (the diagonal in particular)
/// receive zero gradient.
pub fn pairwise_distances<T: Scalar>(e: &Tensor<T>) -> Result<Tensor<T>> {
    let s = e.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!(
            "pairwise_distances expects [n, d] embeddings, got {s:?}"
        )));
    }
    let (n, dim) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::config(format!(
            "pairwise_distances: batch of {n} embeddings is insufficient"
        )));
    }
    let data = e.data();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        let ei = &data[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let ej = &data[j * dim..(j + 1) * dim];
            let sq: T = ei
                .iter()
                .zip(ej)
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum();
            let dist = sq.max(T::zero()).sqrt();
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    }

    let ec = e.clone();
    let dists = out.clone();
    let tiny = T::from_float(1e-12);
    Ok(record("pairwise_distances", &[e], vec![n, n], out, move |g| {
        let data = ec.data();
        let mut de = vec![T::zero(); n * dim];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let gv = g[i * n + j];
                if gv == T::zero() {
                    continue;
                }
                let dist = dists[i * n + j];
                if dist < tiny {
                    continue; // subgradient 0 at coincident embeddings
                }
                let scale = gv / dist;
                let ei = &data[i * dim..(i + 1) * dim];
                let ej = &data[j * dim..(j + 1) * dim];
                for k in 0..dim {
                    let diff = (ei[k] - ej[k]) * scale;
                    de[i * dim + k] = de[i * dim + k] + diff;
                    de[j * dim + k] = de[j * dim + k] - diff;
                }
            }
        }
        vec![Some(de)]
    }))
}

/// Mined (anchor, positive) and (anchor, negative) index pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Per-anchor margin rule. Anchors lacking a same-class partner or an
/// other-class candidate contribute no pairs; an empty result is valid.
pub fn mine_pairs(dm: &DistanceMatrix, cfg: &MinerConfig) -> PairSet {
    let n = dm.n;
    let mut out = PairSet::default();
    for a in 0..n {
        let mut hardest_pos: Option<f64> = None; // max same-class distance
        let mut hardest_neg: Option<f64> = None; // min cross-class distance
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = dm.get(a, j);
            if dm.labels[j] == dm.labels[a] {
                hardest_pos = Some(hardest_pos.map_or(dist, |h| h.max(dist)));
            } else {
                hardest_neg = Some(hardest_neg.map_or(dist, |h| h.min(dist)));
            }
        }
        let (Some(hp), Some(hn)) = (hardest_pos, hardest_neg) else {
            continue;
        };
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = dm.get(a, j);
            if dm.labels[j] == dm.labels[a] {
                if dist > hn - cfg.epsilon {
                    out.positives.push((a, j));
                }
            } else if dist < hp + cfg.epsilon {
                out.negatives.push((a, j));
            }
        }
    }
    out
}

pub type Triplet = (usize, usize, usize);

/// Every `(a, p, n)` whose positive and negative pairs share the anchor,
/// deduplicated, in ascending order.
pub fn pairs_to_triplets(ps: &PairSet) -> Vec<Triplet> {
    let mut pos_by_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (a, p) in &ps.positives {
        pos_by_anchor.entry(*a).or_default().push(*p);
    }
    let mut neg_by_anchor: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (a, n) in &ps.negatives {
        neg_by_anchor.entry(*a).or_default().push(*n);
    }
    let mut triplets = Vec::new();
    for (a, positives) in &pos_by_anchor {
        let Some(negatives) = neg_by_anchor.get(a) else {
            continue;
        };
        for p in positives {
            for n in negatives {
                triplets.push((*a, *p, *n));
            }
        }
    }
    triplets.sort_unstable();
    triplets.dedup();
    triplets
}
