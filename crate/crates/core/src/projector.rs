//! Exact O(n^2) t-SNE projection of embeddings to 2D, plus CSV and SVG
//! scatter emitters.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed_mix;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            n_iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// Joint affinities P plus the perplexity each point's bandwidth achieved.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub n: usize,
    /// Row-major n x n joint probabilities: symmetric, zero diagonal,
    /// entries sum to 1.
    pub p: Vec<f64>,
    pub point_perplexity: Vec<f64>,
}

const BISECTION_TOL: f64 = 1e-5;
const BISECTION_MAX_ITER: usize = 50;

/// Entropy (nats) and conditional row for one point at precision `beta`.
fn row_entropy(d2: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let n = row.len();
    let mut sum_p = 0.0;
    let mut sum_dp = 0.0;
    for j in 0..n {
        if j == i {
            row[j] = 0.0;
            continue;
        }
        let p = (-beta * d2[i * n + j]).exp();
        row[j] = p;
        sum_p += p;
        sum_dp += d2[i * n + j] * p;
    }
    if sum_p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let inv = 1.0 / sum_p;
    for v in row.iter_mut() {
        *v *= inv;
    }
    sum_p.ln() + beta * sum_dp * inv
}

/// Conditional Gaussian affinities with per-point bandwidth found by
/// bisection against `ln(perplexity)` (tolerance 1e-5, at most 50 steps),
/// then symmetrized and normalized. Duplicate rows are jittered by 1e-9
/// before distances are computed. Bisection reports an error only on
/// numerical failure (non-finite entropy); rows whose entropy cannot reach
/// the target within the iteration budget keep the best bandwidth found.
pub fn joint_affinities(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<Affinities> {
    let n = x.len();
    if n < 8 {
        return Err(Error::config(format!("t-SNE needs n >= 8 points, got {n}")));
    }
    if !(cfg.perplexity > 1.0 && cfg.perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(Error::config(format!(
            "perplexity {} must lie in (1, (n - 1) / 3) = (1, {})",
            cfg.perplexity,
            (n as f64 - 1.0) / 3.0
        )));
    }
    let dim = x[0].len();
    if x.iter().any(|row| row.len() != dim) {
        return Err(Error::shape("t-SNE rows have mixed dimensions"));
    }

    // jitter exact duplicates so conditional distributions stay defined
    let mut points: Vec<Vec<f64>> = x.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 0x7517));
    for i in 1..n {
        let duplicate = (0..i).any(|j| {
            points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                < 1e-18
        });
        if duplicate {
            for v in points[i].iter_mut() {
                *v += rng.gen_range(-1e-9..1e-9);
            }
        }
    }

    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }

    let target = cfg.perplexity.ln();
    let mut conditional = vec![0.0f64; n * n];
    let mut point_perplexity = vec![0.0f64; n];
    let mut row = vec![0.0f64; n];
    for i in 0..n {
        let mut beta = 1.0f64;
        // bracket: lo has entropy above target, hi below (or underflowed)
        let mut lo: Option<f64> = None;
        let mut hi: Option<f64> = None;
        let mut entropy = f64::NAN;
        for _ in 0..BISECTION_MAX_ITER {
            entropy = row_entropy(&d2, i, beta, &mut row);
            if entropy.is_nan() || !beta.is_finite() || beta <= 0.0 {
                return Err(Error::numeric(format!(
                    "t-SNE bandwidth search failed at point {i} (beta = {beta})"
                )));
            }
            if entropy.is_finite() && (entropy - target).abs() < BISECTION_TOL {
                break;
            }
            if entropy > target {
                lo = Some(beta);
                beta = match hi {
                    Some(h) => 0.5 * (beta + h),
                    None => beta * 2.0,
                };
            } else {
                // too concentrated (underflow collapses here as entropy
                // -inf): widen by shrinking beta
                hi = Some(beta);
                beta = match lo {
                    Some(l) => 0.5 * (beta + l),
                    None => beta * 0.5,
                };
            }
        }
        if !entropy.is_finite() {
            // the target entropy can be unreachable (all distances equal);
            // fall back to the widest bandwidth that stayed finite
            let fallback = lo.ok_or_else(|| {
                Error::numeric(format!("t-SNE bandwidth search failed at point {i}"))
            })?;
            entropy = row_entropy(&d2, i, fallback, &mut row);
            if !entropy.is_finite() {
                return Err(Error::numeric(format!(
                    "t-SNE bandwidth search failed at point {i} (beta = {fallback})"
                )));
            }
        }
        point_perplexity[i] = entropy.exp();
        conditional[i * n..(i + 1) * n].copy_from_slice(&row);
    }

    // symmetrize and normalize: entries sum to one
    let mut p = vec![0.0f64; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) * scale;
        }
    }
    Ok(Affinities {
        n,
        p,
        point_perplexity,
    })
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) after every iteration, always against the plain
    /// (unexaggerated) P.
    pub kl_trace: Vec<f64>,
}

/// Gradient descent on the KL divergence between input and output
/// neighbor distributions: early exaggeration for the configured warmup,
/// momentum 0.5 switching to 0.8 at iteration 250, Student-t output
/// affinities.
pub fn tsne_embed(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    if cfg.n_iterations < 1 {
        return Err(Error::config("t-SNE needs at least one iteration"));
    }
    let affinities = joint_affinities(x, cfg)?;
    let n = affinities.n;
    let p = &affinities.p;

    // gaussian init, sigma 1e-2
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(cfg.seed, 0x7513));
    let mut y = vec![[0.0f64; 2]; n];
    for point in y.iter_mut() {
        for coord in point.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *coord = 1e-2 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.n_iterations);
    let mut q_num = vec![0.0f64; n * n];

    for iteration in 0..cfg.n_iterations {
        let exaggeration = if iteration < cfg.exaggeration_iters {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iteration < 250 { 0.5 } else { 0.8 };

        let mut q_sum = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let num = 1.0 / (1.0 + dx * dx + dy * dy);
                q_num[i * n + j] = num;
                q_num[j * n + i] = num;
                q_sum += 2.0 * num;
            }
        }

        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let num = q_num[i * n + j];
                let q = (num / q_sum).max(1e-12);
                let coef = (exaggeration * p[i * n + j] - q) * num;
                grad[0] += coef * (y[i][0] - y[j][0]);
                grad[1] += coef * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                velocity[i][c] = momentum * velocity[i][c] - 4.0 * cfg.learning_rate * grad[c];
            }
        }
        let mut mean = [0.0f64; 2];
        for (point, vel) in y.iter_mut().zip(&velocity) {
            for c in 0..2 {
                point[c] += vel[c];
                mean[c] += point[c];
            }
        }
        for c in 0..2 {
            mean[c] /= n as f64;
        }
        for point in y.iter_mut() {
            for c in 0..2 {
                point[c] -= mean[c];
            }
        }

        // KL against the true P
        let mut kl = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let pij = p[i * n + j];
                if pij > 1e-12 {
                    let q = (q_num[i * n + j] / q_sum).max(1e-12);
                    kl += pij * (pij / q).ln();
                }
            }
        }
        if !kl.is_finite() {
            return Err(Error::numeric(format!(
                "t-SNE diverged at iteration {iteration}"
            )));
        }
        kl_trace.push(kl);
    }
    Ok(TsneResult {
        coords: y,
        kl_trace,
    })
}

/// `index,x,y,label` CSV.
pub fn write_coords_csv(coords: &[[f64; 2]], labels: &[u8], path: &Path) -> Result<()> {
    if coords.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} coordinates vs {} labels",
            coords.len(),
            labels.len()
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "index,x,y,label")?;
    for (i, (c, l)) in coords.iter().zip(labels).enumerate() {
        writeln!(w, "{i},{},{},{l}", c[0], c[1])?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Standalone SVG scatter: one circle per point colored by label, a legend
/// entry per distinct label, axes autoscaled with 5% padding.
pub fn scatter_svg(coords: &[[f64; 2]], labels: &[u8], path: &Path) -> Result<()> {
    if coords.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} coordinates vs {} labels",
            coords.len(),
            labels.len()
        )));
    }
    if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::numeric("scatter plot requires finite coordinates"));
    }
    let (width, height, margin) = (640.0f64, 480.0f64, 40.0f64);
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for c in coords {
        for a in 0..2 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    for a in 0..2 {
        let span = max[a] - min[a];
        let pad = if span == 0.0 { 1.0 } else { 0.05 * span };
        min[a] -= pad;
        max[a] += pad;
    }
    let sx = (width - 2.0 * margin) / (max[0] - min[0]);
    let sy = (height - 2.0 * margin) / (max[1] - min[1]);
    let px = |c: &[f64; 2]| {
        (
            margin + (c[0] - min[0]) * sx,
            height - margin - (c[1] - min[1]) * sy,
        )
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#888\"/>\n",
        width - 2.0 * margin,
        height - 2.0 * margin
    ));
    for (c, l) in coords.iter().zip(labels) {
        let (x, y) = px(c);
        let color = PALETTE[(*l as usize) % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n"
        ));
    }
    let mut distinct: Vec<u8> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for (row, l) in distinct.iter().enumerate() {
        let y = margin + 14.0 + 18.0 * row as f64;
        let color = PALETTE[(*l as usize) % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{y:.2}\" r=\"4\" fill=\"{color}\" class=\"legend\"/>\n",
            width - margin - 70.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
             class=\"legend\">class {l}</text>\n",
            width - margin - 60.0,
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
