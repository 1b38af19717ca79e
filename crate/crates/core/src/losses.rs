//! Triplet margin loss with anchor-positive swap and binary cross-entropy
//! for the classifier phase.

use crate::error::{Error, Result};
use crate::miner::Triplet;
use crate::tensor::{record, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    MeanOverActive,
    MeanOverAll,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletLossConfig {
    pub margin: f64,
    pub swap: bool,
    pub reduction: Reduction,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig {
            margin: 0.2,
            swap: true,
            reduction: Reduction::MeanOverActive,
        }
    }
}

/// Hinge loss over mined triplets, computed on the pairwise distance matrix:
/// `max(0, d(a, p) - d' + margin)` where `d'` is `d(a, n)`, or
/// `min(d(a, n), d(p, n))` with the swap variant. An empty triplet set
/// yields a zero loss that contributes no gradient.
///
/// The mean-over-active denominator is treated as a constant in the
/// backward rule (the usual subgradient convention).
pub fn triplet_margin_loss<T: Scalar>(
    distances: &Tensor<T>,
    triplets: &[Triplet],
    cfg: &TripletLossConfig,
) -> Result<Tensor<T>> {
    let s = distances.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(format!(
            "triplet loss expects a square distance matrix, got {s:?}"
        )));
    }
    if cfg.margin < 0.0 {
        return Err(Error::config(format!(
            "triplet margin must be >= 0, got {}",
            cfg.margin
        )));
    }
    let n = s[0];
    for (a, p, ng) in triplets {
        if *a >= n || *p >= n || *ng >= n {
            return Err(Error::shape(format!(
                "triplet ({a}, {p}, {ng}) out of bounds for batch of {n}"
            )));
        }
    }

    if triplets.is_empty() {
        let len = distances.len();
        return Ok(record("triplet_loss", &[distances], vec![], vec![T::zero()], move |_| {
            vec![Some(vec![T::zero(); len])]
        }));
    }

    let margin = T::from_float(cfg.margin);
    let d = distances.data();
    // (d_ap index, chosen negative-distance index, hinge value)
    let mut terms: Vec<(usize, usize, T)> = Vec::with_capacity(triplets.len());
    let mut active = 0usize;
    let mut total = T::zero();
    for (a, p, ng) in triplets {
        let ap = a * n + p;
        let an = a * n + ng;
        let neg_idx = if cfg.swap {
            let pn = p * n + ng;
            if d[pn] < d[an] {
                pn
            } else {
                an
            }
        } else {
            an
        };
        let hinge = d[ap] - d[neg_idx] + margin;
        if hinge > T::zero() {
            active += 1;
            total = total + hinge;
        }
        terms.push((ap, neg_idx, hinge));
    }

    let denom = match cfg.reduction {
        Reduction::MeanOverActive => active,
        Reduction::MeanOverAll => triplets.len(),
    };
    let loss = if denom == 0 {
        T::zero()
    } else {
        total / T::from_float(denom as f64)
    };

    let len = distances.len();
    Ok(record(
        "triplet_loss",
        &[distances],
        vec![],
        vec![loss],
        move |g| {
            let mut dd = vec![T::zero(); len];
            if denom > 0 {
                let scale = g[0] / T::from_float(denom as f64);
                for (ap, neg_idx, hinge) in &terms {
                    if *hinge > T::zero() {
                        dd[*ap] = dd[*ap] + scale;
                        dd[*neg_idx] = dd[*neg_idx] - scale;
                    }
                }
            }
            vec![Some(dd)]
        },
    ))
}

const BCE_EPS: f64 = 1e-7;

/// `-mean(y log p + (1 - y) log(1 - p))` with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. The gradient is evaluated at the clamped value and
/// passed through, so saturated predictions keep a finite, correctly signed
/// gradient.
pub fn binary_cross_entropy<T: Scalar>(p_hat: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let b = p_hat.len();
    if b == 0 || labels.len() != b {
        return Err(Error::shape(format!(
            "binary_cross_entropy: {b} predictions vs {} labels",
            labels.len()
        )));
    }
    let lo = T::from_float(BCE_EPS);
    let hi = T::from_float(1.0 - BCE_EPS);
    let clamped: Vec<T> = p_hat
        .data()
        .iter()
        .map(|p| (*p).max(lo).min(hi))
        .collect();
    let mut total = T::zero();
    for (p, y) in clamped.iter().zip(labels) {
        let term = if *y == 1 {
            p.ln()
        } else {
            (T::one() - *p).ln()
        };
        total = total - term;
    }
    let inv_b = T::from_float(1.0 / b as f64);
    let loss = total * inv_b;

    let y: Vec<T> = labels
        .iter()
        .map(|l| if *l == 1 { T::one() } else { T::zero() })
        .collect();
    Ok(record("bce", &[p_hat], vec![], vec![loss], move |g| {
        let scale = g[0] * inv_b;
        let dp = clamped
            .iter()
            .zip(&y)
            .map(|(p, y)| scale * (*p - *y) / (*p * (T::one() - *p)))
            .collect();
        vec![Some(dp)]
    }))
}
