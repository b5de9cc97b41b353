//! Binary checkpoints: magic, version, a JSON header holding the configs
//! and the tensor manifest, little-endian f64 payloads, and a SHA-256 of
//! all preceding bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::trainer::{Stage, TrainConfig, Trainer};
use crate::config::ModelConfig;
use crate::diffusion::ParkDiffusion;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PKDF";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    stage: Stage,
    iteration: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    frozen: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    /// Scalar type of the model that wrote the file.
    scalar: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    optimizer: Option<OptimizerHeader>,
    manifest: Vec<ManifestEntry>,
}

/// A model, plus the training state when saved mid-run.
pub struct Checkpoint<S> {
    pub model: ParkDiffusion<S>,
    pub train: Option<(TrainConfig, Stage, usize, Adam<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn into_trainer(self, fallback: TrainConfig) -> Result<Trainer<S>> {
        match self.train {
            Some((cfg, stage, it, adam)) => Trainer::resume(self.model, cfg, stage, it, adam),
            None => Trainer::new(self.model, fallback),
        }
    }
}

fn put_tensor<S: Scalar>(buf: &mut Vec<u8>, t: &Tensor<S>) {
    for &x in t.data() {
        buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
}

pub fn write_model<S: Scalar, W: Write>(model: &ParkDiffusion<S>, train: Option<&Trainer<S>>, mut w: W) -> Result<()> {
    let manifest = model
        .store
        .iter()
        .map(|(_, name, t)| ManifestEntry {
            name: name.to_string(),
            dtype: "f64".into(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let header = Header {
        scalar: S::DTYPE.into(),
        model: model.config.clone(),
        train: train.map(|t| t.config.clone()),
        optimizer: train.map(|t| OptimizerHeader {
            stage: t.stage,
            iteration: t.iteration,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            step: t.adam.step,
            frozen: t.adam.frozen.clone(),
        }),
        manifest,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in model.store.iter() {
        put_tensor(&mut buf, t);
    }
    if let Some(t) = train {
        for m in t.adam.m.iter().chain(&t.adam.v) {
            put_tensor(&mut buf, m);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let io = |e| Error::io("checkpoint", e);
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

pub fn save_checkpoint<S: Scalar>(model: &ParkDiffusion<S>, train: Option<&Trainer<S>>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, train, std::io::BufWriter::new(f))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor<S: Scalar>(&mut self, shape: &[usize], what: &str) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("checkpoint", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    if bytes.len() < c.pos + DIGEST_LEN {
        return Err(Error::Checkpoint("truncated while reading checksum".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Checkpoint("checksum mismatch: file is truncated or corrupted".into()));
    }
    let mut c = Cursor { bytes: body, pos: c.pos };
    let len = u64::from_le_bytes(c.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(c.take(len, "header")?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut model = ParkDiffusion::<S>::new(header.model.clone(), 0)?;
    let mut loaded: Vec<Option<Tensor<S>>> = vec![None; model.store.len()];
    for entry in &header.manifest {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let t = c.tensor::<S>(&entry.shape, &entry.name)?;
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", entry.name)))?;
        if model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                model.store.get(id).shape()
            )));
        }
        loaded[id.index()] = Some(t);
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in &ids {
        let t = loaded[id.index()]
            .take()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", model.store.name(*id))))?;
        model.store.set(*id, t)?;
    }

    let train = match (header.train, header.optimizer) {
        (Some(cfg), Some(o)) => {
            let mut adam = Adam::new(&model.store, o.lr);
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.eps = o.eps;
            adam.step = o.step;
            if o.frozen.len() != model.store.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            adam.frozen = o.frozen;
            adam.m = read_moments(&mut c, &model.store, "first moments")?;
            adam.v = read_moments(&mut c, &model.store, "second moments")?;
            Some((cfg, o.stage, o.iteration, adam))
        }
        (None, None) => None,
        _ => return Err(Error::Checkpoint("incomplete training state".into())),
    };
    if c.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(Checkpoint { model, train })
}

fn read_moments<S: Scalar>(c: &mut Cursor<'_>, store: &ParamStore<S>, what: &str) -> Result<Vec<Tensor<S>>> {
    store.iter().map(|(_, _, t)| c.tensor(t.shape(), what)).collect()
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
