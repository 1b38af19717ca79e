//! Checkpoint file: a u32 little-endian header length, a JSON header with
//! the model spec plus parameter names, shapes and byte offsets, then the
//! little-endian f32 payload. Write-then-read restores forwards bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamCollect;
use crate::tensor::Tensor;

use super::{
    build_classifier, build_embedder, build_rcnn_baseline, Classifier, Embedder, ModelSpec,
    RcnnBaseline, Variant,
};

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    params: Vec<ParamRecord>,
}

pub fn save_checkpoint<N: ParamCollect<f32>>(
    spec: &ModelSpec,
    net: &N,
    path: &Path,
) -> Result<()> {
    let mut collected = Vec::new();
    net.collect("net", &mut collected);

    let mut records = Vec::with_capacity(collected.len());
    let mut offset = 0usize;
    for (name, t) in &collected {
        records.push(ParamRecord {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len() * 4;
    }
    let header = Header {
        spec: spec.clone(),
        params: records,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::format("checkpoint header", e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in &collected {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A checkpointed network rebuilt from its spec with parameters restored.
pub enum LoadedNetwork {
    Embedder(Embedder<f32>),
    Classifier(Classifier<f32>),
    Baseline(RcnnBaseline<f32>),
}

impl LoadedNetwork {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            LoadedNetwork::Embedder(n) => &n.spec,
            LoadedNetwork::Classifier(n) => &n.spec,
            LoadedNetwork::Baseline(n) => &n.spec,
        }
    }

    pub fn into_embedder(self) -> Result<Embedder<f32>> {
        match self {
            LoadedNetwork::Embedder(n) => Ok(n),
            other => Err(Error::format(
                "checkpoint",
                format!("expected rtcnn-embedder, found {:?}", other.spec().variant),
            )),
        }
    }

    pub fn into_classifier(self) -> Result<Classifier<f32>> {
        match self {
            LoadedNetwork::Classifier(n) => Ok(n),
            other => Err(Error::format(
                "checkpoint",
                format!("expected rtcnn-classifier, found {:?}", other.spec().variant),
            )),
        }
    }

    pub fn into_baseline(self) -> Result<RcnnBaseline<f32>> {
        match self {
            LoadedNetwork::Baseline(n) => Ok(n),
            other => Err(Error::format(
                "checkpoint",
                format!("expected rcnn-baseline, found {:?}", other.spec().variant),
            )),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedNetwork> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::format("checkpoint header", "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::format("checkpoint header", "truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format("checkpoint header", e.to_string()))?;

    let total: usize = header.params.iter().map(|p| p.len * 4).sum();
    let mut payload = vec![0u8; total];
    r.read_exact(&mut payload).map_err(|_| {
        Error::format("checkpoint payload", format!("truncated payload, expected {total} bytes"))
    })?;

    let mut net = match header.spec.variant {
        Variant::RtcnnEmbedder => LoadedNetwork::Embedder(build_embedder(&header.spec, 0)?),
        Variant::RtcnnClassifier => LoadedNetwork::Classifier(build_classifier(&header.spec, 0)?),
        Variant::RcnnBaseline => LoadedNetwork::Baseline(build_rcnn_baseline(&header.spec, 0)?),
    };

    let mut slots = Vec::new();
    match &mut net {
        LoadedNetwork::Embedder(n) => n.collect_mut("net", &mut slots),
        LoadedNetwork::Classifier(n) => n.collect_mut("net", &mut slots),
        LoadedNetwork::Baseline(n) => n.collect_mut("net", &mut slots),
    }
    if slots.len() != header.params.len() {
        return Err(Error::format(
            "checkpoint params",
            format!(
                "spec rebuilds {} parameters, header lists {}",
                slots.len(),
                header.params.len()
            ),
        ));
    }
    for ((name, slot), record) in slots.into_iter().zip(&header.params) {
        if name != record.name {
            return Err(Error::format(
                "checkpoint params",
                format!("parameter order mismatch: {name} vs {}", record.name),
            ));
        }
        if slot.shape() != record.shape.as_slice() {
            return Err(Error::format(
                "checkpoint params",
                format!(
                    "{name}: shape {:?} vs stored {:?}",
                    slot.shape(),
                    record.shape
                ),
            ));
        }
        let bytes = &payload[record.offset..record.offset + record.len * 4];
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *slot = Tensor::new_leaf(record.shape.clone(), data, true);
    }
    Ok(net)
}
