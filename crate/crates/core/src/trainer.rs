//! Two-phase training: the embedder learns from mined triplet loss, then is
//! frozen while the classifier trains with cross-entropy on its embeddings.
//! Includes the adaptive-moment optimizer and the lazily loading volume
//! store.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{binary_cross_entropy, triplet_margin_loss, TripletLossConfig};
use crate::miner::{mine_pairs, pairs_to_triplets, pairwise_distances, DistanceMatrix, MinerConfig, Triplet};
use crate::model::{
    build_classifier, build_embedder, build_rcnn_baseline, save_checkpoint, Classifier, Embedder,
    ModelSpec, RcnnBaseline,
};
use crate::nn::ParamCollect;
use crate::sampler::{epoch_plan, SamplerConfig};
use crate::seed_mix;
use crate::tensor::{backward, reshape, Gradients, Scalar, Tensor};
use crate::volume::{read_vvol, DatasetManifest, Volume};

const SALT_INIT_EMBEDDER: u64 = 0x1;
const SALT_INIT_CLASSIFIER: u64 = 0x2;
const SALT_INIT_BASELINE: u64 = 0x3;
const SALT_PHASE1: u64 = 0x100;
const SALT_PHASE2: u64 = 0x200;
const SALT_BASELINE: u64 = 0x300;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("optimizer: learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer: betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("optimizer: eps must be positive"));
        }
        Ok(())
    }
}

/// Adaptive moment estimation:
/// `m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    slots: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over named parameters. Frozen parameters and parameters
    /// the backward pass never reached are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &Gradients<T>,
        frozen: &dyn Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let b1 = T::from_float(self.cfg.beta1);
        let b2 = T::from_float(self.cfg.beta2);
        let lr = T::from_float(self.cfg.lr);
        let eps = T::from_float(self.cfg.eps);
        let corr1 = T::from_float(1.0 - self.cfg.beta1.powi(t as i32));
        let corr2 = T::from_float(1.0 - self.cfg.beta2.powi(t as i32));

        for (name, slot) in params.iter_mut() {
            if frozen(name) {
                continue;
            }
            let Some(grad) = grads.get(slot) else {
                continue;
            };
            if !grad.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for {name} at optimizer step {t}"
                )));
            }
            let n = slot.len();
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let mut data = slot.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            **slot = Tensor::new_leaf(slot.shape().to_vec(), data, true);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub m_per_class: usize,
    pub miner_epsilon: f64,
    pub triplet: TripletLossConfig,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Checkpoint every N epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Volume cache budget in bytes.
    pub cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_phase1: 30,
            epochs_phase2: 20,
            batch_size: 32,
            m_per_class: 4,
            miner_epsilon: 0.1,
            triplet: TripletLossConfig::default(),
            optimizer: AdamConfig::default(),
            seed: 7,
            checkpoint_every: 0,
            cache_bytes: 256 << 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % (2 * self.m_per_class) != 0 {
            return Err(Error::config(format!(
                "batch size {} must be a positive multiple of 2m = {}",
                self.batch_size,
                2 * self.m_per_class
            )));
        }
        if self.miner_epsilon < 0.0 {
            return Err(Error::config("miner epsilon must be >= 0"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: u8,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub mined_positives: usize,
    pub mined_negatives: usize,
    pub active_triplets: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    fn push(&mut self, record: StepRecord) -> Result<()> {
        if !record.loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at phase {} epoch {} step {}",
                record.phase, record.epoch, record.step
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    /// Mean loss over one epoch of one phase.
    pub fn epoch_mean_loss(&self, phase: u8, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.phase == phase && r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    pub fn last_epoch(&self, phase: u8) -> Option<usize> {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.epoch)
            .max()
    }

    /// One JSON object per line, one line per step.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::format("train log", e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Lazily loads volumes behind a byte-budgeted LRU cache.
pub struct VolumeStore {
    paths: Vec<std::path::PathBuf>,
    cache: HashMap<usize, (Arc<Volume>, u64)>,
    used_bytes: usize,
    budget_bytes: usize,
    tick: u64,
}

impl VolumeStore {
    pub fn new(manifest: &DatasetManifest, budget_bytes: usize) -> Self {
        VolumeStore {
            paths: manifest
                .entries
                .iter()
                .map(|e| manifest.resolve(e))
                .collect(),
            cache: HashMap::new(),
            used_bytes: 0,
            budget_bytes,
            tick: 0,
        }
    }

    pub fn get(&mut self, index: usize) -> Result<Arc<Volume>> {
        self.tick += 1;
        if let Some((vol, stamp)) = self.cache.get_mut(&index) {
            *stamp = self.tick;
            return Ok(Arc::clone(vol));
        }
        let path = self
            .paths
            .get(index)
            .ok_or_else(|| Error::config(format!("volume index {index} out of range")))?;
        let vol = Arc::new(read_vvol(path)?);
        let bytes = vol.len() * 4;
        while self.used_bytes + bytes > self.budget_bytes && !self.cache.is_empty() {
            let oldest = *self
                .cache
                .iter()
                .min_by_key(|(idx, (_, stamp))| (*stamp, **idx))
                .map(|(idx, _)| idx)
                .expect("cache not empty");
            if let Some((evicted, _)) = self.cache.remove(&oldest) {
                self.used_bytes -= evicted.len() * 4;
            }
        }
        self.used_bytes += bytes;
        self.cache.insert(index, (Arc::clone(&vol), self.tick));
        Ok(vol)
    }

    /// Stacks manifest entries into a `[b, 1, D, H, W]` tensor, verifying
    /// every volume against the expected tensor-order dims.
    pub fn batch_tensor(&mut self, indices: &[usize], dims: [usize; 3]) -> Result<Tensor<f32>> {
        let spatial = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(indices.len() * spatial);
        for &idx in indices {
            let vol = self.get(idx)?;
            let vd = ModelSpec::tensor_dims(vol.dims);
            if vd != dims {
                return Err(Error::shape(format!(
                    "volume {idx} has dims {vd:?} (tensor order), expected {dims:?}"
                )));
            }
            data.extend_from_slice(&vol.voxels);
        }
        Tensor::from_vec(vec![indices.len(), 1, dims[0], dims[1], dims[2]], data)
    }
}

fn class_indices(manifest: &DatasetManifest, subset: &[usize]) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for &idx in subset {
        classes[manifest.entries[idx].label as usize].push(idx);
    }
    classes
}

fn subset_sampler(
    manifest: &DatasetManifest,
    subset: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SamplerConfig, usize)> {
    let n_batches = subset.len() / cfg.batch_size;
    if n_batches == 0 {
        return Err(Error::config(format!(
            "training subset of {} entries is smaller than one batch of {}",
            subset.len(),
            cfg.batch_size
        )));
    }
    Ok((
        SamplerConfig {
            m: cfg.m_per_class,
            batch_size: cfg.batch_size,
            class_indices: class_indices(manifest, subset),
            seed,
        },
        n_batches,
    ))
}

fn hinge_active_count(dm: &DistanceMatrix, triplets: &[Triplet], cfg: &TripletLossConfig) -> usize {
    triplets
        .iter()
        .filter(|(a, p, n)| {
            let d_an = if cfg.swap {
                dm.get(*a, *n).min(dm.get(*p, *n))
            } else {
                dm.get(*a, *n)
            };
            dm.get(*a, *p) - d_an + cfg.margin > 0.0
        })
        .count()
}

const STALL_LIMIT: usize = 100;

/// Phase 1: balanced batches -> embeddings -> pairwise distances -> mined
/// pairs -> triplets -> hinge loss -> optimizer step. Batches that mine no
/// triplets log a zero loss and skip the update.
pub fn train_embedder(
    manifest: &DatasetManifest,
    subset: &[usize],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    store: &mut VolumeStore,
    ckpt_dir: Option<&Path>,
) -> Result<(Embedder<f32>, TrainLog)> {
    cfg.validate()?;
    let mut embedder = build_embedder::<f32>(spec, seed_mix(cfg.seed, SALT_INIT_EMBEDDER))?;
    let mut adam = Adam::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let miner_cfg = MinerConfig {
        epsilon: cfg.miner_epsilon,
    };
    let mut zero_streak = 0usize;

    for epoch in 0..cfg.epochs_phase1 {
        let (sampler_cfg, n_batches) =
            subset_sampler(manifest, subset, cfg, seed_mix(cfg.seed, SALT_PHASE1 + epoch as u64))?;
        let mut plan = epoch_plan(&sampler_cfg, n_batches)?;
        let mut step = 0usize;
        while let Some(batch) = plan.next_batch() {
            let indices: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
            let labels: Vec<u8> = batch.iter().map(|(_, l)| *l).collect();
            let x = store.batch_tensor(&indices, spec.input_dims)?;
            let e = embedder.forward(&x)?;
            let distances = pairwise_distances(&e)?;
            let snapshot = DistanceMatrix::from_tensor(&distances, &labels)?;
            let pairs = mine_pairs(&snapshot, &miner_cfg);
            let triplets = pairs_to_triplets(&pairs);
            let active = hinge_active_count(&snapshot, &triplets, &cfg.triplet);

            let loss_value = if triplets.is_empty() {
                zero_streak += 1;
                if zero_streak == STALL_LIMIT {
                    log::warn!(
                        "mining stalled: {STALL_LIMIT} consecutive batches without triplets"
                    );
                }
                0.0
            } else {
                zero_streak = 0;
                let loss = triplet_margin_loss(&distances, &triplets, &cfg.triplet)?;
                let value = loss.item()?.as_f64();
                if !value.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite triplet loss at epoch {epoch} step {step}"
                    )));
                }
                let grads = backward(&loss)?;
                let mut params = Vec::new();
                embedder.collect_mut("embedder", &mut params);
                adam.step(&mut params, &grads, &|_| false)?;
                value
            };

            log.push(StepRecord {
                phase: 1,
                epoch,
                step,
                loss: loss_value,
                mined_positives: pairs.positives.len(),
                mined_negatives: pairs.negatives.len(),
                active_triplets: active,
            })?;
            step += 1;
        }
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(spec, &embedder, &dir.join(format!("embedder_epoch{epoch}.ckpt")))?;
            }
        }
    }
    Ok((embedder, log))
}

/// Embeddings for a list of manifest entries under a fixed embedder,
/// detached from the graph, row order following `subset`.
pub fn embed_entries(
    embedder: &Embedder<f32>,
    subset: &[usize],
    store: &mut VolumeStore,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let dims = embedder.spec.input_dims;
    let dim = embedder.spec.embedding_dim;
    let mut out = Vec::with_capacity(subset.len());
    for chunk in subset.chunks(batch_size.max(1)) {
        let x = store.batch_tensor(chunk, dims)?;
        let e = embedder.forward(&x)?;
        for row in e.data().chunks(dim) {
            out.push(row.to_vec());
        }
    }
    Ok(out)
}

/// Phase 2: the embedder is frozen; the classifier trains with binary
/// cross-entropy over cached embeddings drawn by the same sampler.
pub fn train_classifier(
    embedder: &Embedder<f32>,
    manifest: &DatasetManifest,
    subset: &[usize],
    classifier_spec: &ModelSpec,
    cfg: &TrainConfig,
    store: &mut VolumeStore,
) -> Result<(Classifier<f32>, TrainLog)> {
    cfg.validate()?;
    if classifier_spec.embedding_dim != embedder.spec.embedding_dim {
        return Err(Error::config(format!(
            "classifier expects {} embedding dims, embedder emits {}",
            classifier_spec.embedding_dim, embedder.spec.embedding_dim
        )));
    }
    let mut classifier =
        build_classifier::<f32>(classifier_spec, seed_mix(cfg.seed, SALT_INIT_CLASSIFIER))?;
    let mut adam = Adam::new(cfg.optimizer);
    let mut log = TrainLog::default();

    // the embedder is frozen, so every entry's embedding is computed once
    let cached = embed_entries(embedder, subset, store, cfg.batch_size)?;
    let lookup: HashMap<usize, usize> =
        subset.iter().enumerate().map(|(row, idx)| (*idx, row)).collect();
    let dim = embedder.spec.embedding_dim;

    for epoch in 0..cfg.epochs_phase2 {
        let (sampler_cfg, n_batches) =
            subset_sampler(manifest, subset, cfg, seed_mix(cfg.seed, SALT_PHASE2 + epoch as u64))?;
        let mut plan = epoch_plan(&sampler_cfg, n_batches)?;
        let mut step = 0usize;
        while let Some(batch) = plan.next_batch() {
            let labels: Vec<u8> = batch.iter().map(|(_, l)| *l).collect();
            let mut data = Vec::with_capacity(batch.len() * dim);
            for (idx, _) in batch {
                data.extend_from_slice(&cached[lookup[idx]]);
            }
            let e = Tensor::from_vec(vec![batch.len(), dim], data)?;
            let p = reshape(&classifier.forward(&e)?, vec![batch.len()])?;
            let loss = binary_cross_entropy(&p, &labels)?;
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite classifier loss at epoch {epoch} step {step}"
                )));
            }
            let grads = backward(&loss)?;
            let mut params = Vec::new();
            classifier.collect_mut("classifier", &mut params);
            adam.step(&mut params, &grads, &|_| false)?;

            log.push(StepRecord {
                phase: 2,
                epoch,
                step,
                loss: value,
                mined_positives: 0,
                mined_negatives: 0,
                active_triplets: 0,
            })?;
            step += 1;
        }
    }
    Ok((classifier, log))
}

/// Both phases in sequence; returns the frozen embedder, the classifier and
/// the concatenated log.
pub fn train_rtcnn(
    manifest: &DatasetManifest,
    subset: &[usize],
    embedder_spec: &ModelSpec,
    classifier_spec: &ModelSpec,
    cfg: &TrainConfig,
    store: &mut VolumeStore,
    ckpt_dir: Option<&Path>,
) -> Result<(Embedder<f32>, Classifier<f32>, TrainLog)> {
    let (embedder, mut log) =
        train_embedder(manifest, subset, embedder_spec, cfg, store, ckpt_dir)?;
    let (classifier, log2) =
        train_classifier(&embedder, manifest, subset, classifier_spec, cfg, store)?;
    log.extend(log2);
    Ok((embedder, classifier, log))
}

/// Single-phase baseline: end-to-end cross-entropy training over the same
/// balanced sampler, run for the combined phase-1 + phase-2 epoch budget.
pub fn train_rcnn(
    manifest: &DatasetManifest,
    subset: &[usize],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    store: &mut VolumeStore,
    ckpt_dir: Option<&Path>,
) -> Result<(RcnnBaseline<f32>, TrainLog)> {
    cfg.validate()?;
    let mut net = build_rcnn_baseline::<f32>(spec, seed_mix(cfg.seed, SALT_INIT_BASELINE))?;
    let mut adam = Adam::new(cfg.optimizer);
    let mut log = TrainLog::default();
    let epochs = cfg.epochs_phase1 + cfg.epochs_phase2;

    for epoch in 0..epochs {
        let (sampler_cfg, n_batches) =
            subset_sampler(manifest, subset, cfg, seed_mix(cfg.seed, SALT_BASELINE + epoch as u64))?;
        let mut plan = epoch_plan(&sampler_cfg, n_batches)?;
        let mut step = 0usize;
        while let Some(batch) = plan.next_batch() {
            let indices: Vec<usize> = batch.iter().map(|(i, _)| *i).collect();
            let labels: Vec<u8> = batch.iter().map(|(_, l)| *l).collect();
            let x = store.batch_tensor(&indices, spec.input_dims)?;
            let p = reshape(&net.forward(&x)?, vec![batch.len()])?;
            let loss = binary_cross_entropy(&p, &labels)?;
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite baseline loss at epoch {epoch} step {step}"
                )));
            }
            let grads = backward(&loss)?;
            let mut params = Vec::new();
            net.collect_mut("rcnn", &mut params);
            adam.step(&mut params, &grads, &|_| false)?;

            log.push(StepRecord {
                phase: 1,
                epoch,
                step,
                loss: value,
                mined_positives: 0,
                mined_negatives: 0,
                active_triplets: 0,
            })?;
            step += 1;
        }
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(spec, &net, &dir.join(format!("rcnn_epoch{epoch}.ckpt")))?;
            }
        }
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests;
