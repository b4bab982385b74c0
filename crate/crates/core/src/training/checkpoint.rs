//! Binary checkpoints: `MMCC`, a u32 version, a length-prefixed JSON metadata
//! block, named little-endian f32 tensor records, and a trailing SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{MmccNet, ModelConfig};
use crate::tensor::Tensor;

use super::{Optimizer, OptimizerConfig, Result, Snapshot, TrainPlan, TrainState, Trainer, TrainingError};

const MAGIC: &[u8; 4] = b"MMCC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    manifest_hash: String,
    plan: TrainPlan,
    optimizer: OptimizerConfig,
    optimizer_step: u64,
    state: TrainState,
    /// Shuffling is seeded by `(plan.seed, epoch)`, so this is the whole RNG state.
    rng_seed: u64,
    rng_next_epoch: usize,
}

/// SHA-256 (hex) of the architecture rows of the manifest, independent of the
/// init seed and input size.
pub fn manifest_hash<T: crate::tensor::Real>(model: &MmccNet<T>) -> String {
    let mut h = Sha256::new();
    for line in model.manifest().lines().filter(|l| !l.starts_with('#')) {
        h.update(line.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Record<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn snapshot_records<'a>(prefix: &str, s: &'a Snapshot, out: &mut Vec<Record<'a>>) {
    for p in &s.params {
        out.push(Record {
            name: format!("{prefix}param/{}", p.name),
            shape: p.value.shape().to_vec(),
            data: p.value.data(),
        });
    }
    for b in &s.bn {
        let c = b.stats.mean.len();
        out.push(Record {
            name: format!("{prefix}bn_mean/{}", b.name),
            shape: vec![c],
            data: &b.stats.mean,
        });
        out.push(Record {
            name: format!("{prefix}bn_var/{}", b.name),
            shape: vec![c],
            data: &b.stats.var,
        });
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let model = &trainer.model;
    let meta = Metadata {
        model: model.config().clone(),
        manifest_hash: manifest_hash(model),
        plan: trainer.plan.clone(),
        optimizer: trainer.optimizer.config,
        optimizer_step: trainer.optimizer.step,
        state: trainer.state.clone(),
        rng_seed: trainer.plan.seed,
        rng_next_epoch: trainer.state.epoch,
    };
    let current = Snapshot {
        params: model.params().to_vec(),
        bn: model.bn_stats().to_vec(),
    };
    let mut records = Vec::new();
    snapshot_records("", &current, &mut records);
    for (k, p) in model.params().iter().enumerate() {
        if let (Some(m), Some(v)) = (
            trainer.optimizer.first_moment.get(k),
            trainer.optimizer.second_moment.get(k),
        ) {
            for (kind, data) in [("adam_m", m), ("adam_v", v)] {
                records.push(Record {
                    name: format!("{kind}/{}", p.name),
                    shape: p.value.shape().to_vec(),
                    data,
                });
            }
        }
    }
    if let Some(best) = &trainer.best {
        snapshot_records("best/", best, &mut records);
    }

    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_u32(&mut out, records.len() as u32);
    for r in &records {
        push_u32(&mut out, r.name.len() as u32);
        out.extend_from_slice(r.name.as_bytes());
        push_u32(&mut out, r.shape.len() as u32);
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out).map_err(|e| TrainingError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainingError::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

type Records = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn fill(records: &mut Records, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let (s, data) = records
        .remove(name)
        .ok_or_else(|| TrainingError::Corrupt(format!("missing record `{name}`")))?;
    if s != shape {
        return Err(TrainingError::Corrupt(format!(
            "record `{name}` has shape {s:?}, expected {shape:?}"
        )));
    }
    Ok(data)
}

fn restore_snapshot(prefix: &str, template: &MmccNet<f32>, records: &mut Records) -> Result<Snapshot> {
    let mut snap = Snapshot {
        params: template.params().to_vec(),
        bn: template.bn_stats().to_vec(),
    };
    for p in &mut snap.params {
        let shape = p.value.shape().to_vec();
        let data = fill(records, &format!("{prefix}param/{}", p.name), &shape)?;
        p.value = Tensor::new(shape, data)?;
    }
    for b in &mut snap.bn {
        let c = [b.stats.mean.len()];
        b.stats.mean = fill(records, &format!("{prefix}bn_mean/{}", b.name), &c)?;
        b.stats.var = fill(records, &format!("{prefix}bn_var/{}", b.name), &c)?;
    }
    Ok(snap)
}

/// Read a checkpoint back into a trainer that continues exactly where the
/// saved one stopped. With `expected`, the stored architecture must match it.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TrainingError::io(path, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(TrainingError::BadMagic);
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(TrainingError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TrainingError::Checksum);
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainingError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u64()? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let mut model = MmccNet::<f32>::new(&meta.model)?;
    let rebuilt = manifest_hash(&model);
    if rebuilt != meta.manifest_hash {
        return Err(TrainingError::ManifestMismatch {
            expected: rebuilt,
            found: meta.manifest_hash,
        });
    }
    if let Some(cfg) = expected {
        let want = manifest_hash(&MmccNet::<f32>::new(cfg)?);
        if want != meta.manifest_hash {
            return Err(TrainingError::ManifestMismatch {
                expected: want,
                found: meta.manifest_hash,
            });
        }
    }

    let count = r.u32()? as usize;
    let mut records = Records::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| TrainingError::Corrupt("record name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product::<usize>();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| TrainingError::Corrupt("record too large".into()))?,
        )?;
        let data = raw
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.insert(name, (shape, data));
    }
    if r.pos != body.len() {
        return Err(TrainingError::Corrupt("trailing bytes after records".into()));
    }

    let current = restore_snapshot("", &model, &mut records)?;
    current.restore(&mut model);
    let mut optimizer = Optimizer::new(meta.optimizer);
    optimizer.step = meta.optimizer_step;
    if records.keys().any(|k| k.starts_with("adam_")) {
        for p in model.params() {
            optimizer
                .first_moment
                .push(fill(&mut records, &format!("adam_m/{}", p.name), p.value.shape())?);
            optimizer
                .second_moment
                .push(fill(&mut records, &format!("adam_v/{}", p.name), p.value.shape())?);
        }
    }
    let best = if records.keys().any(|k| k.starts_with("best/")) {
        Some(restore_snapshot("best/", &model, &mut records)?)
    } else {
        None
    };
    if let Some(name) = records.keys().next() {
        return Err(TrainingError::Corrupt(format!("unexpected record `{name}`")));
    }
    if meta.rng_seed != meta.plan.seed || meta.rng_next_epoch != meta.state.epoch {
        return Err(TrainingError::Corrupt(
            "RNG state disagrees with the training state".into(),
        ));
    }
    let mut trainer = Trainer::new(model, meta.optimizer, meta.plan)?;
    trainer.optimizer = optimizer;
    trainer.state = meta.state;
    trainer.best = best;
    Ok(trainer)
}
