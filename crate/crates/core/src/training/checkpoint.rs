//! Binary checkpoint files.
//!
//! Layout (little-endian): `"DEMP"`, u32 version, u32 header length, JSON
//! header, u32 record count, records, u32 CRC32 of everything before it.
//! A record is u32 name length, name bytes, u32 rank, u32 dims, f64 values
//! and a u32 CRC32 over the record's preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use demp_tensor::ParamStore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use super::trainer::TrainPlan;
use crate::config::ModelConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::DualEmp;
use crate::objectives::Baselines;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEMP";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo));
        rng
    }
}

/// Loop state needed to continue training from an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub baselines: Baselines,
    pub gumbel_temperature: f64,
    pub best_valid_ppl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_without_improvement: usize,
    pub adam: AdamConfig,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub vocab: Vocabulary,
    pub labels: Vec<String>,
    pub state: TrainerState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Snapshot of the model parameters and, if given, the Adam moments.
    pub fn capture(header: CheckpointHeader, model: &DualEmp, adam: Option<&Adam>) -> Self {
        let mut tensors: Vec<TensorRecord> = model
            .store
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.value.clone(),
            })
            .collect();
        if let Some(adam) = adam {
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for (p, m) in model.store.iter().zip(moments) {
                    tensors.push(TensorRecord {
                        name: format!("{prefix}{}", p.name),
                        shape: p.shape.clone(),
                        values: m.clone(),
                    });
                }
            }
        }
        Checkpoint { header, tensors }
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn model(&self) -> Result<DualEmp> {
        let mut model = DualEmp::new(self.header.model.clone(), 0)?;
        self.load_params(&mut model.store)?;
        Ok(model)
    }

    fn find(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        let n_params = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with(ADAM_M) && !t.name.starts_with(ADAM_V))
            .count();
        if n_params != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n_params} parameters, model has {}",
                store.len()
            )));
        }
        let mut updates = Vec::with_capacity(store.len());
        for p in store.iter() {
            let t = self
                .find(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape != p.shape {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in the checkpoint, {:?} in the model",
                    p.name, t.shape, p.shape
                )));
            }
            updates.push(t.values.clone());
        }
        for (p, v) in store.iter_mut().zip(updates) {
            p.value = v;
        }
        Ok(())
    }

    /// Adam state with the stored moments, if the checkpoint carries them.
    pub fn adam(&self, store: &ParamStore) -> Result<Option<Adam>> {
        let mut adam = Adam::new(store, self.header.state.adam.clone());
        adam.step = self.header.state.adam_step;
        for (i, p) in store.iter().enumerate() {
            let (Some(m), Some(v)) = (self.find(&format!("{ADAM_M}{}", p.name)), self.find(&format!("{ADAM_V}{}", p.name))) else {
                return Ok(None);
            };
            if m.values.len() != p.value.len() || v.values.len() != p.value.len() {
                return Err(Error::Format(format!("moment size mismatch for {}", p.name)));
            }
            adam.m[i] = m.values.clone();
            adam.v[i] = v.values.clone();
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(&header);
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Format(format!("record {} has inconsistent shape", t.name)));
            }
            let start = out.len();
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                put_u32(&mut out, d)?;
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Checksum("file is truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Checksum("file checksum mismatch (truncated or corrupt)".into()));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let crc = crc32fast::hash(&body[start..r.pos]);
            if r.u32()? != crc {
                return Err(Error::Checksum(format!("record {name} checksum mismatch")));
            }
            tensors.push(TensorRecord { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Checkpoint { header, tensors })
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checksum("record runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes through a temporary sibling file so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            vocab_size: 9,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ff: 6,
            k_latent: 2,
            n_labels: 2,
            max_positions: 12,
            dropout: 0.0,
        };
        let model = DualEmp::new(config.clone(), 3).unwrap();
        let mut adam = Adam::new(&model.store, AdamConfig::default());
        adam.m[0][0] = 0.5;
        adam.v[1][0] = f64::MIN_POSITIVE;
        adam.step = 4;
        let header = CheckpointHeader {
            model: config,
            plan: TrainPlan::default(),
            vocab: Vocabulary::build([vec!["a".to_string(), "b".to_string()]].iter().map(|v| v.as_slice()), 1).unwrap(),
            labels: vec!["joy".into(), "sad".into()],
            state: TrainerState {
                epoch: 2,
                step: 4,
                rng: RngState::capture(&ChaCha8Rng::seed_from_u64(1)),
                baselines: Baselines::new(0.95),
                gumbel_temperature: 0.81,
                best_valid_ppl: Some(3.5),
                best_epoch: Some(1),
                epochs_without_improvement: 1,
                adam: AdamConfig::default(),
                adam_step: 4,
            },
        };
        Checkpoint::capture(header, &model, Some(&adam))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.tensors.iter().zip(&ckpt.tensors) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.values), bits(&b.values));
        }
        let model = back.model().unwrap();
        let adam = back.adam(&model.store).unwrap().unwrap();
        assert_eq!(adam.m[0][0], 0.5);
        assert_eq!(adam.step, 4);
    }

    #[test]
    fn header_floats_keep_every_bit() {
        let mut ckpt = sample();
        // These need exact decimal parsing to come back unchanged.
        let awkward = [0.010555155337192207, 0.1 + 0.2, 1.0 / 3.0, 2.2250738585072014e-308];
        for &x in &awkward {
            ckpt.header.state.gumbel_temperature = x;
            ckpt.header.state.best_valid_ppl = Some(x * 7.0);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            assert_eq!(back.header.state.gumbel_temperature.to_bits(), x.to_bits());
            assert_eq!(back.header.state.best_valid_ppl.unwrap().to_bits(), (x * 7.0).to_bits());
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checksum(_))));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_is_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Version { found, expected }) => assert_eq!((found, expected), (7, CHECKPOINT_VERSION)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Checkpoint::from_bytes(b"NOPE\x01\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_and_failed_load_keeps_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            a.next_u64();
        }
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
