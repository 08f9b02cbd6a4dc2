//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `CDZCKPT1`, a little-endian `u32` header length,
//! a JSON header (kind, model config, vocabulary version and hash, tensor
//! names and shapes, optimizer step), then every tensor as little-endian
//! `f32` in header order. Optimizer moments, when present, follow as two more
//! tensor lists in the same order.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GenreClassifier, ModelConfig, ModelError, Refiner, RefinerTrainConfig, RefinerTrainer};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::tokenizer::{vocab_hash, VOCAB_VERSION};

const MAGIC: &[u8; 8] = b"CDZCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Refiner,
    Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: usize,
    pub m: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState>,
    /// Training configuration, kept so a run can resume.
    pub train_config: Option<RefinerTrainConfig>,
    pub losses: Vec<(usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    vocab_version: String,
    vocab_hash: String,
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    optimizer: Option<(AdamWConfig, usize)>,
    train_config: Option<RefinerTrainConfig>,
    losses: Vec<(usize, f64)>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_refiner(r: &Refiner) -> Self {
        Self {
            kind: CheckpointKind::Refiner,
            config: r.net.config.clone(),
            params: r.net.params.clone(),
            optimizer: None,
            train_config: None,
            losses: Vec::new(),
        }
    }

    pub fn from_trainer(t: &RefinerTrainer) -> Self {
        Self {
            optimizer: Some(OptimizerState {
                config: t.optimizer.config,
                step: t.optimizer.step,
                m: t.optimizer.m.clone(),
                v: t.optimizer.v.clone(),
            }),
            train_config: Some(t.config.clone()),
            losses: t.losses.clone(),
            ..Self::from_refiner(&t.refiner)
        }
    }

    pub fn from_classifier(c: &GenreClassifier<f32>) -> Self {
        Self {
            kind: CheckpointKind::Classifier,
            config: c.config.clone(),
            params: c.params.clone(),
            optimizer: None,
            train_config: None,
            losses: Vec::new(),
        }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<(), ModelError> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Copies stored tensors into a freshly built parameter store, checking
    /// that names and shapes agree.
    fn load_into(&self, target: &mut ParamStore<f32>) -> Result<(), ModelError> {
        if target.len() != self.params.len() {
            return Err(bad(format!("expected {} tensors, found {}", target.len(), self.params.len())));
        }
        for (name, value) in self.params.iter() {
            let id = target.id(name).ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            let slot = target.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {:?}", value.dim(), slot.dim())));
            }
            slot.assign(value);
        }
        Ok(())
    }

    pub fn into_refiner(self) -> Result<Refiner, ModelError> {
        self.expect_kind(CheckpointKind::Refiner)?;
        let mut r = Refiner::new(self.config.clone(), 0);
        self.load_into(&mut r.net.params)?;
        Ok(r)
    }

    /// Rebuilds the trainer, including optimizer moments, for resuming.
    pub fn into_trainer(self) -> Result<RefinerTrainer, ModelError> {
        let train_config = self.train_config.clone().ok_or_else(|| bad("checkpoint carries no training state"))?;
        let opt = self.optimizer.clone().ok_or_else(|| bad("checkpoint carries no optimizer state"))?;
        let losses = self.losses.clone();
        let refiner = self.into_refiner()?;
        let mut t = RefinerTrainer::new(refiner, train_config);
        let mut optimizer = AdamW::new(&t.refiner.net.params, opt.config);
        optimizer.m = opt.m;
        optimizer.v = opt.v;
        optimizer.step = opt.step;
        t.optimizer = optimizer;
        t.losses = losses;
        Ok(t)
    }

    pub fn into_classifier(self) -> Result<GenreClassifier<f32>, ModelError> {
        self.expect_kind(CheckpointKind::Classifier)?;
        let mut c = GenreClassifier::new(self.config.clone(), 0);
        self.load_into(&mut c.params)?;
        Ok(c)
    }
}

fn write_tensor<W: Write>(w: &mut W, t: &Array2<f32>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &x in t.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_tensor<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f32>, ModelError> {
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf).map_err(|_| bad("truncated tensor data"))?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, mut w: W) -> Result<(), ModelError> {
    let header = Header {
        kind: ck.kind,
        vocab_version: VOCAB_VERSION.to_string(),
        vocab_hash: format!("{:016x}", vocab_hash()),
        config: ck.config.clone(),
        tensors: ck
            .params
            .iter()
            .map(|(name, v)| TensorInfo { name: name.to_string(), rows: v.nrows(), cols: v.ncols() })
            .collect(),
        optimizer: ck.optimizer.as_ref().map(|o| (o.config, o.step)),
        train_config: ck.train_config.clone(),
        losses: ck.losses.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, v) in ck.params.iter() {
        write_tensor(&mut w, v)?;
    }
    if let Some(o) = &ck.optimizer {
        for t in o.m.iter().chain(&o.v) {
            write_tensor(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.vocab_version != VOCAB_VERSION || header.vocab_hash != format!("{:016x}", vocab_hash()) {
        return Err(ModelError::VocabMismatch { found: header.vocab_version });
    }
    let mut params = ParamStore::new();
    for t in &header.tensors {
        params.add(t.name.clone(), read_tensor(&mut r, t.rows, t.cols)?);
    }
    let optimizer = match header.optimizer {
        Some((config, step)) => {
            let read_all = |r: &mut R| -> Result<Vec<_>, ModelError> {
                header.tensors.iter().map(|t| read_tensor(r, t.rows, t.cols)).collect()
            };
            let m = read_all(&mut r)?;
            let v = read_all(&mut r)?;
            Some(OptimizerState { config, step, m, v })
        }
        None => None,
    };
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
        optimizer,
        train_config: header.train_config,
        losses: header.losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn refiner_round_trips() {
        let r = Refiner::new(Preset::Micro.refiner(), 7);
        let mut buf = Vec::new();
        write_checkpoint(&Checkpoint::from_refiner(&r), &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap().into_refiner().unwrap();
        assert_eq!(back.net.config, r.net.config);
        for ((n1, a), (n2, b)) in r.net.params.iter().zip(back.net.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_damaged_files() {
        assert!(read_checkpoint(&b"nope"[..]).is_err());
        let c = GenreClassifier::<f32>::new(Preset::Micro.classifier(), 1);
        let mut buf = Vec::new();
        write_checkpoint(&Checkpoint::from_classifier(&c), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        assert!(read_checkpoint(&buf[..]).unwrap().into_refiner().is_err());
        assert!(read_checkpoint(&buf[..]).unwrap().into_classifier().is_ok());
    }
}
