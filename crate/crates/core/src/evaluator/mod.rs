//! Confusion metrics, stratified k-fold cross-validation, confidence
//! intervals, one-sided Welch t-test, silhouette score, and the k-fold
//! evaluation harness with its report formats.

mod student_t;

pub use student_t::{reg_inc_beta, t_cdf, t_quantile};

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::seed_mix;
use crate::tensor::Tensor;
use crate::trainer::{embed_entries, train_rcnn, train_rtcnn, TrainConfig, TrainLog, VolumeStore};
use crate::volume::DatasetManifest;

// -- confusion metrics --------------------------------------------------------

/// Per-fold confusion counts with derived rates. Rates with a zero
/// denominator are absent rather than zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Thresholds probabilities at `threshold` (prediction = 1 iff p >= t) and
/// tallies the confusion counts.
pub fn confusion_metrics(
    probabilities: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<FoldReport> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::stats(format!(
            "confusion_metrics: {} probabilities vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let (mut tp, mut tn, mut fp, mut fal_n) = (0usize, 0usize, 0usize, 0usize);
    for (p, y) in probabilities.iter().zip(labels) {
        if !(0.0..=1.0).contains(p) {
            return Err(Error::stats(format!("probability {p} outside [0, 1]")));
        }
        let predicted = *p >= threshold;
        match (predicted, *y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fal_n += 1,
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(FoldReport {
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
        false_negatives: fal_n,
        accuracy: rate(tp + tn, tp + tn + fp + fal_n),
        sensitivity: rate(tp, tp + fal_n),
        specificity: rate(tn, tn + fp),
    })
}

// -- k-fold splitting ---------------------------------------------------------

/// Stratified-by-label, grouped-by-subject fold assignment: subjects never
/// straddle folds, per-class fold sizes differ by at most one whenever the
/// subject structure allows it, deterministic under `seed`. Returns one
/// fold index per manifest entry.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::stats(format!("k-fold split needs k >= 2, got {k}")));
    }
    for label in 0..2u8 {
        let count = manifest.entries.iter().filter(|e| e.label == label).count();
        if count < k {
            return Err(Error::stats(format!(
                "class {label} has {count} members, fewer than k = {k}"
            )));
        }
    }

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.subject.as_str()).or_default().push(i);
    }
    let mut order: Vec<&str> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    // larger subjects placed first; stable, so equal sizes keep shuffled order
    order.sort_by_key(|s| std::cmp::Reverse(groups[s].len()));

    let mut class_counts = vec![[0usize; 2]; k];
    let mut totals = vec![0usize; k];
    let mut assignment = vec![0usize; manifest.entries.len()];
    for subject in order {
        let members = &groups[subject];
        let mut group_labels = [0usize; 2];
        for &i in members {
            group_labels[manifest.entries[i].label as usize] += 1;
        }
        // fold that keeps this group's classes least loaded, then smallest
        let best = (0..k)
            .min_by_key(|&f| {
                let class_load: usize = (0..2)
                    .map(|c| group_labels[c] * class_counts[f][c])
                    .sum();
                (class_load, totals[f], f)
            })
            .expect("k >= 2");
        for &i in members {
            assignment[i] = best;
            class_counts[best][manifest.entries[i].label as usize] += 1;
            totals[best] += 1;
        }
    }
    Ok(assignment)
}

// -- fold summaries ------------------------------------------------------------

/// Mean, sample standard deviation and 95% CI half-width over fold values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub ci_half_width: f64,
    pub n: usize,
}

impl SummaryStat {
    /// "94.3 ± 4.0" style: percent at one decimal.
    pub fn format_percent(&self) -> String {
        format!(
            "{:.1} \u{00b1} {:.1}",
            self.mean * 100.0,
            self.ci_half_width * 100.0
        )
    }
}

/// Half-width is `t_{0.975, n-1} * std / sqrt(n)`.
pub fn summarize_folds(values: &[f64]) -> Result<SummaryStat> {
    let n = values.len();
    if n < 2 {
        return Err(Error::stats(format!(
            "summary needs at least 2 fold values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = t_quantile(0.975, (n - 1) as f64);
    Ok(SummaryStat {
        mean,
        std,
        ci_half_width: t * std / (n as f64).sqrt(),
        n,
    })
}

/// One-sided Welch t-test of H1: mean(a) > mean(b). Returns the p-value;
/// zero pooled variance resolves by mean comparison (p = 0.5 on exact
/// equality).
pub fn one_sided_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::stats(format!(
            "t-test needs >= 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / (na - 1.0);
    let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (nb - 1.0);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma > mb {
            0.0
        } else if ma < mb {
            1.0
        } else {
            0.5
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    Ok(1.0 - t_cdf(t, df))
}

// -- silhouette ----------------------------------------------------------------

/// Mean silhouette score `(b - a) / max(a, b)` with the 0/0 -> 0 convention
/// for coincident points. Errors on singleton classes.
pub fn silhouette(points: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n == 0 {
        return Err(Error::stats(format!(
            "silhouette: {n} points vs {} labels",
            labels.len()
        )));
    }
    let mut class_sizes: BTreeMap<u8, usize> = BTreeMap::new();
    for l in labels {
        *class_sizes.entry(*l).or_default() += 1;
    }
    if class_sizes.len() < 2 {
        return Err(Error::stats("silhouette needs at least two classes"));
    }
    for (label, size) in &class_sizes {
        if *size < 2 {
            return Err(Error::stats(format!("silhouette: class {label} is a singleton")));
        }
    }

    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i == j {
                continue;
            }
            let slot = sums.entry(labels[j]).or_insert((0.0, 0));
            slot.0 += dist(i, j);
            slot.1 += 1;
        }
        let own = sums
            .get(&labels[i])
            .map(|(s, c)| s / *c as f64)
            .expect("class size >= 2");
        let nearest_other = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = own.max(nearest_other);
        total += if denom == 0.0 {
            0.0
        } else {
            (nearest_other - own) / denom
        };
    }
    Ok(total / n as f64)
}

// -- k-fold evaluation harness ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub report: FoldReport,
    /// Held-out silhouette under the freshly initialized embedder.
    pub silhouette_pre: Option<f64>,
    /// Held-out silhouette after the triplet phase.
    pub silhouette_post: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub against: String,
    /// One-sided p-values for H1: this model's metric exceeds the other's.
    pub p_accuracy: f64,
    pub p_sensitivity: f64,
    pub p_specificity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldOutcome>,
    pub accuracy: SummaryStat,
    pub sensitivity: SummaryStat,
    pub specificity: SummaryStat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonReport>,
}

impl EvalReport {
    pub fn fold_values(&self, metric: &str) -> Result<Vec<f64>> {
        self.folds
            .iter()
            .map(|f| {
                let v = match metric {
                    "accuracy" => f.report.accuracy,
                    "sensitivity" => f.report.sensitivity,
                    "specificity" => f.report.specificity,
                    other => return Err(Error::stats(format!("unknown metric {other}"))),
                };
                v.ok_or_else(|| {
                    Error::stats(format!("fold {} has no defined {metric}", f.fold))
                })
            })
            .collect()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format("metrics report", e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format("metrics report", e.to_string()))
    }
}

/// One-sided p-values for `a`'s fold metrics exceeding `b`'s.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ComparisonReport> {
    Ok(ComparisonReport {
        against: b.variant.clone(),
        p_accuracy: one_sided_t_test(&a.fold_values("accuracy")?, &b.fold_values("accuracy")?)?,
        p_sensitivity: one_sided_t_test(
            &a.fold_values("sensitivity")?,
            &b.fold_values("sensitivity")?,
        )?,
        p_specificity: one_sided_t_test(
            &a.fold_values("specificity")?,
            &b.fold_values("specificity")?,
        )?,
    })
}

/// Fixed-width text table mirroring the "mu ± alpha in %" layout.
pub fn render_table(reports: &[&EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16}{:<26}{:<26}{:<26}\n",
        "Model",
        "Accuracy (\u{03bc} \u{00b1} \u{03b1} in %)",
        "Sensitivity (\u{03bc} \u{00b1} \u{03b1} in %)",
        "Specificity (\u{03bc} \u{00b1} \u{03b1} in %)"
    ));
    for r in reports {
        let acc = match &r.comparison {
            Some(c) => format!("{} (p = {:.3})", r.accuracy.format_percent(), c.p_accuracy),
            None => r.accuracy.format_percent(),
        };
        out.push_str(&format!(
            "{:<16}{:<26}{:<26}{:<26}\n",
            r.variant,
            acc,
            r.sensitivity.format_percent(),
            r.specificity.format_percent()
        ));
    }
    out
}

/// Specs used by [`evaluate_kfold`] for the variant under evaluation.
#[derive(Debug, Clone)]
pub enum EvalModel {
    Rtcnn {
        embedder: ModelSpec,
        classifier: ModelSpec,
    },
    RcnnBaseline(ModelSpec),
}

impl EvalModel {
    pub fn variant_name(&self) -> &'static str {
        match self {
            EvalModel::Rtcnn { .. } => "RTCNN",
            EvalModel::RcnnBaseline(_) => "RCNN",
        }
    }
}

/// Trains and tests the model on every fold. Per-fold training uses a seed
/// derived from `cfg.seed` and the fold index; fold assignment itself is
/// derived from `split_seed`.
pub fn evaluate_kfold(
    manifest: &DatasetManifest,
    model: &EvalModel,
    cfg: &TrainConfig,
    k: usize,
    split_seed: u64,
) -> Result<(EvalReport, Vec<TrainLog>)> {
    let assignment = kfold_split(manifest, k, split_seed)?;
    let mut store = VolumeStore::new(manifest, cfg.cache_bytes);
    let mut folds = Vec::with_capacity(k);
    let mut logs = Vec::with_capacity(k);

    for fold in 0..k {
        let train_subset: Vec<usize> = (0..manifest.entries.len())
            .filter(|i| assignment[*i] != fold)
            .collect();
        let test_subset: Vec<usize> = (0..manifest.entries.len())
            .filter(|i| assignment[*i] == fold)
            .collect();
        let test_labels: Vec<u8> = test_subset
            .iter()
            .map(|&i| manifest.entries[i].label)
            .collect();
        let fold_cfg = TrainConfig {
            seed: seed_mix(cfg.seed, 0xF0_1D_00 + fold as u64),
            ..cfg.clone()
        };

        let outcome = match model {
            EvalModel::Rtcnn {
                embedder: emb_spec,
                classifier: cls_spec,
            } => {
                let fresh = crate::model::build_embedder::<f32>(
                    emb_spec,
                    seed_mix(fold_cfg.seed, 0x1),
                )?;
                let pre_emb = embed_entries(&fresh, &test_subset, &mut store, cfg.batch_size)?;
                let pre = silhouette(&to_f64(&pre_emb), &test_labels)?;

                let (embedder, classifier, log) = train_rtcnn(
                    manifest,
                    &train_subset,
                    emb_spec,
                    cls_spec,
                    &fold_cfg,
                    &mut store,
                    None,
                )?;
                logs.push(log);

                let post_emb =
                    embed_entries(&embedder, &test_subset, &mut store, cfg.batch_size)?;
                let post = silhouette(&to_f64(&post_emb), &test_labels)?;

                let mut probs = Vec::with_capacity(test_subset.len());
                for rows in post_emb.chunks(cfg.batch_size.max(1)) {
                    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
                    let e = Tensor::from_vec(vec![rows.len(), emb_spec.embedding_dim], flat)?;
                    let p = classifier.forward(&e)?;
                    probs.extend(p.data().iter().map(|v| *v as f64));
                }
                FoldOutcome {
                    fold,
                    report: confusion_metrics(&probs, &test_labels, 0.5)?,
                    silhouette_pre: Some(pre),
                    silhouette_post: Some(post),
                }
            }
            EvalModel::RcnnBaseline(spec) => {
                let (net, log) =
                    train_rcnn(manifest, &train_subset, spec, &fold_cfg, &mut store, None)?;
                logs.push(log);
                let mut probs = Vec::with_capacity(test_subset.len());
                for chunk in test_subset.chunks(cfg.batch_size.max(1)) {
                    let x = store.batch_tensor(chunk, spec.input_dims)?;
                    let p = net.forward(&x)?;
                    probs.extend(p.data().iter().map(|v| *v as f64));
                }
                FoldOutcome {
                    fold,
                    report: confusion_metrics(&probs, &test_labels, 0.5)?,
                    silhouette_pre: None,
                    silhouette_post: None,
                }
            }
        };
        folds.push(outcome);
    }

    let metric = |pick: fn(&FoldReport) -> Option<f64>| -> Result<SummaryStat> {
        let values: Result<Vec<f64>> = folds
            .iter()
            .map(|f| {
                pick(&f.report)
                    .ok_or_else(|| Error::stats(format!("fold {} rate undefined", f.fold)))
            })
            .collect();
        summarize_folds(&values?)
    };

    let report = EvalReport {
        variant: model.variant_name().to_string(),
        k,
        seed: split_seed,
        accuracy: metric(|r| r.accuracy)?,
        sensitivity: metric(|r| r.sensitivity)?,
        specificity: metric(|r| r.specificity)?,
        folds,
        comparison: None,
    };
    Ok((report, logs))
}

fn to_f64(rows: &[Vec<f32>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|v| *v as f64).collect())
        .collect()
}
