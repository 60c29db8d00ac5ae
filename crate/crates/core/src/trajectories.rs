//! Expert parameter trajectories trained on the full dataset.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f64s_from_le, read_array, read_payload, read_u32, read_u64};
use crate::models::{self, Dataset, ModelSpec};
use crate::rng::{self, streams};

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"BPCT";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Standard deviation of the Gaussian initialization of expert runs.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minibatch size; `0` means full batch.
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub dataset_id: String,
    /// Full-data training loss at each snapshot.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBuffer {
    pub model_id: String,
    pub dim: usize,
    pub snapshots: Vec<Vec<f64>>,
    pub meta: TrainingMeta,
}

impl TrajectoryBuffer {
    pub fn new(model_id: String, dim: usize, snapshots: Vec<Vec<f64>>, meta: TrainingMeta) -> Result<Self> {
        let buf = Self {
            model_id,
            dim,
            snapshots,
            meta,
        };
        buf.validate()?;
        Ok(buf)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.snapshots.iter().position(|s| s.len() != self.dim) {
            return Err(Error::shape(
                "trajectory",
                format!("snapshot {i} has length {} for dimension {}", self.snapshots[i].len(), self.dim),
            ));
        }
        if let Some(i) = self.snapshots.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::non_finite(format!("trajectory snapshot {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TRAJECTORY_MAGIC)?;
        w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
        let id = self.model_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.snapshots.len() as u64).to_le_bytes())?;
        for s in &self.snapshots {
            for v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the binary part; metadata is left at its default.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let magic: [u8; 4] = read_array(&mut r, "magic")?;
        if &magic != TRAJECTORY_MAGIC {
            return Err(Error::Format(format!("bad trajectory magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != TRAJECTORY_VERSION {
            return Err(Error::Format(format!("unsupported trajectory version {version}")));
        }
        let id_len = read_u32(&mut r, "model id length")? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|_| Error::Format("truncated file while reading model id".into()))?;
        let model_id = String::from_utf8(id).map_err(|e| Error::Format(format!("model id: {e}")))?;
        let dim = read_u64(&mut r, "dimension")?;
        let count = read_u64(&mut r, "snapshot count")?;
        let expected = dim
            .checked_mul(count)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Integrity("snapshot payload size overflows".into()))?;
        let payload = read_payload(&mut r, expected)?;
        let flat = f64s_from_le(&payload);
        let snapshots = if dim == 0 {
            vec![Vec::new(); count as usize]
        } else {
            flat.chunks_exact(dim as usize).map(<[f64]>::to_vec).collect()
        };
        Self::new(model_id, dim as usize, snapshots, TrainingMeta::default())
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Writes the buffer and its `<file>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(crate::io::create(path)?))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(Self::sidecar_path(path), meta + "\n")?;
        Ok(())
    }

    /// Loads a buffer; the sidecar is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Self::read_from(BufReader::new(crate::io::open(path)?))?;
        let side = Self::sidecar_path(path);
        if side.exists() {
            buf.meta = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        }
        Ok(buf)
    }
}

/// Minibatch SGD on the training loss from a seeded `N(0, 0.1²)` start,
/// recording the parameters at every epoch boundary.
pub fn train_expert(spec: &ModelSpec, data: &Dataset, cfg: &ExpertConfig, dataset_id: &str) -> Result<TrajectoryBuffer> {
    if cfg.epochs == 0 {
        return Err(Error::Config("expert training needs at least one epoch".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("expert training on an empty dataset".into()));
    }
    data.check(spec)?;
    let n = data.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut init_rng = rng::stream(cfg.seed, streams::INIT);
    let mut batch_rng = rng::stream(cfg.seed, streams::MINIBATCH);

    let mut theta: Vec<f64> = rng::normal_vec(&mut init_rng, spec.param_dim())
        .into_iter()
        .map(|v| INIT_SCALE * v)
        .collect();
    let mut snapshots = vec![theta.clone()];
    let mut losses = vec![models::training_loss(spec, data, &theta)?];
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        if batch < n {
            order.shuffle(&mut batch_rng);
        }
        for chunk in order.chunks(batch) {
            let mb = if batch < n { data.subset(chunk) } else { data.clone() };
            let scale = n as f64 / chunk.len() as f64;
            let (_, grad) = models::training_loss_grad(spec, &mb, &theta, scale)
                .map_err(|e| diverged(epoch, e))?;
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= cfg.lr * g;
            }
        }
        let loss = models::training_loss(spec, data, &theta).map_err(|e| diverged(epoch, e))?;
        if !loss.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(diverged(epoch, Error::non_finite("training loss")));
        }
        log::debug!("expert seed {} epoch {epoch}: loss {loss:.6}", cfg.seed);
        snapshots.push(theta.clone());
        losses.push(loss);
    }

    let meta = TrainingMeta {
        lr: cfg.lr,
        epochs: cfg.epochs,
        seed: cfg.seed,
        batch_size: batch,
        dataset_id: dataset_id.to_string(),
        losses,
    };
    TrajectoryBuffer::new(spec.model_id(), spec.param_dim(), snapshots, meta)
}

fn diverged(epoch: usize, cause: Error) -> Error {
    match cause {
        Error::NonFinite { context } => Error::non_finite(format!("expert training epoch {epoch}: {context}")),
        other => other,
    }
}

/// A window of an expert trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub start: Vec<f64>,
    pub target: Vec<f64>,
    pub start_epoch: usize,
    pub buffer: usize,
}

/// Picks a buffer uniformly and a start epoch uniformly in `0..=max_start`,
/// and returns the snapshots at the start and `span` epochs later.
pub fn sample_segment<R: Rng + ?Sized>(
    buffers: &[TrajectoryBuffer],
    max_start: usize,
    span: usize,
    rng: &mut R,
) -> Result<TrajectorySegment> {
    if buffers.is_empty() {
        return Err(Error::Bounds("no expert trajectories supplied".into()));
    }
    let need = max_start + span + 1;
    if let Some((i, b)) = buffers.iter().enumerate().find(|(_, b)| b.len() < need) {
        return Err(Error::Bounds(format!(
            "buffer {i} ({}) has {} snapshots, need {need} for max start {max_start} and span {span}",
            b.model_id,
            b.len()
        )));
    }
    let buffer = rng.random_range(0..buffers.len());
    let r = rng.random_range(0..=max_start);
    let b = &buffers[buffer];
    Ok(TrajectorySegment {
        start: b.snapshots[r].clone(),
        target: b.snapshots[r + span].clone(),
        start_epoch: r,
        buffer,
    })
}
