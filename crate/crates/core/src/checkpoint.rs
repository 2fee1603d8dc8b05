// SPDX-License-Identifier: Apache-2.0

//! Model checkpoints.
//!
//! Little-endian layout: magic `SSDPCKPT`, u32 version, u32 header length,
//! UTF-8 `key=value` header (model configuration, iteration, optimiser state),
//! u32 blob count, then per blob: u32 name length, name, u32 rank, u32 dims,
//! f32 data, and finally a CRC-32 of every preceding byte. Blobs are the model
//! parameters in store order followed, when present, by the Adam moments
//! (`adam.m.<name>`, `adam.v.<name>`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoseModel};
use crate::motion::Reader;
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"SSDPCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PoseModel<f32>,
    /// Completed training iterations.
    pub iteration: u64,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_header(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse {
                    line: i + 1,
                    msg: format!("expected key=value, got '{l}'"),
                })
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line: 0,
        msg: format!("bad value '{v}' for '{key}'"),
    })
}

impl Checkpoint {
    pub fn new(model: PoseModel<f32>, iteration: u64, optimizer: Option<AdamState<f32>>) -> Self {
        Self {
            model,
            iteration,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.model.config.to_text();
        let _ = writeln!(header, "iteration={}", self.iteration);
        if let Some(opt) = &self.optimizer {
            let c = &opt.config;
            let _ = writeln!(header, "adam.step={}", opt.step);
            // `{:?}` on f64 prints the shortest string that round-trips.
            for (k, v) in [
                ("learning_rate", c.learning_rate),
                ("beta1", c.beta1),
                ("beta2", c.beta2),
                ("eps", c.eps),
                ("weight_decay", c.weight_decay),
            ] {
                let _ = writeln!(header, "adam.{k}={v:?}");
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());

        let params = &self.model.params;
        let blobs = params.len() * if self.optimizer.is_some() { 3 } else { 1 };
        put_u32(&mut out, blobs);
        for (name, t) in params.iter() {
            put_blob(&mut out, name, t);
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), m) in params.iter().zip(&opt.first_moment) {
                put_blob(&mut out, &format!("adam.m.{name}"), m);
            }
            for ((name, _), v) in params.iter().zip(&opt.second_moment) {
                put_blob(&mut out, &format!("adam.v.{name}"), v);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic = r.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Parse {
            line: 0,
            msg: "checkpoint header is not UTF-8".into(),
        })?;

        let mut config = ModelConfig::with_latent(1, 1);
        let mut iteration = None;
        let mut adam_step = None;
        let mut adam = AdamConfig::default();
        for (k, v) in parse_header(header)? {
            match k.as_str() {
                "iteration" => iteration = Some(parse_num(&k, &v)?),
                "adam.step" => adam_step = Some(parse_num(&k, &v)?),
                "adam.learning_rate" => adam.learning_rate = parse_num(&k, &v)?,
                "adam.beta1" => adam.beta1 = parse_num(&k, &v)?,
                "adam.beta2" => adam.beta2 = parse_num(&k, &v)?,
                "adam.eps" => adam.eps = parse_num(&k, &v)?,
                "adam.weight_decay" => adam.weight_decay = parse_num(&k, &v)?,
                _ => {
                    if !config.set(&k, parse_num(&k, &v)?) {
                        return Err(Error::Parse {
                            line: 0,
                            msg: format!("unknown checkpoint key '{k}'"),
                        });
                    }
                }
            }
        }
        config.validate()?;
        let iteration = iteration.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "checkpoint header lacks 'iteration'".into(),
        })?;

        let count = r.u32()? as usize;
        let mut blobs = ParameterStore::<f32>::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Parse {
                line: 0,
                msg: "blob name is not UTF-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(Error::Truncated {
                    needed: usize::MAX,
                    available: buf.len(),
                })?;
            let data = r.f32s(n)?;
            blobs.insert(name, Tensor::new(&dims, data)?)?;
        }
        let body = r.position();
        let stored = r.u32()?;
        r.finish()?;
        let actual = crc32fast::hash(&buf[..body]);
        if stored != actual {
            return Err(Error::Corrupt(format!(
                "checkpoint checksum {stored:08x} does not match contents ({actual:08x})"
            )));
        }

        // Rebuild against the expected layout so names and shapes are checked.
        let reference = PoseModel::<f32>::init(config, 0)?;
        let mut params = ParameterStore::new();
        for (name, t) in reference.params.iter() {
            let found = blobs
                .get(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing parameter '{name}'")))?;
            if found.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
            params.insert(name, found.clone())?;
        }
        let optimizer = match adam_step {
            None => None,
            Some(step) => {
                let take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                    reference
                        .params
                        .iter()
                        .map(|(name, t)| {
                            let key = format!("{prefix}{name}");
                            let m = blobs
                                .get(&key)
                                .ok_or_else(|| Error::CheckpointMismatch(format!("missing '{key}'")))?;
                            if m.shape() != t.shape() {
                                return Err(Error::CheckpointMismatch(format!("'{key}' has wrong shape")));
                            }
                            Ok(m.clone())
                        })
                        .collect()
                };
                Some(AdamState {
                    config: adam,
                    step,
                    first_moment: take("adam.m.")?,
                    second_moment: take("adam.v.")?,
                })
            }
        };
        let expected = params.len() * if optimizer.is_some() { 3 } else { 1 };
        if count != expected {
            return Err(Error::CheckpointMismatch(format!("{count} blobs, expected {expected}")));
        }
        Ok(Self {
            model: PoseModel { config, params },
            iteration,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads and checks that the stored configuration equals `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.model.config != expected {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint configuration differs:\n{}expected:\n{}",
                ck.model.config.to_text(),
                expected.to_text()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            window: 4,
            ffn_hidden: 8,
            state_dim: 2,
            ..ModelConfig::with_latent(4, 1)
        }
    }

    #[test]
    fn round_trip_with_and_without_optimizer() {
        let model = PoseModel::<f32>::init(tiny(), 2).unwrap();
        let plain = Checkpoint::new(model.clone(), 0, None);
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes()).unwrap(), plain);

        let mut opt = AdamState::new(&model.params, AdamConfig::default());
        opt.step = 17;
        opt.first_moment[0].data_mut()[0] = 0.125;
        opt.second_moment[1].data_mut()[0] = f32::MIN_POSITIVE;
        let full = Checkpoint::new(model, 17, Some(opt));
        let bytes = full.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, full);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let ck = Checkpoint::new(PoseModel::<f32>::init(tiny(), 2).unwrap(), 3, None);
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { .. })
        ));
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Truncated { .. })
            ));
        }
        let mut long = bytes.clone();
        long.extend([0, 0]);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::TrailingBytes(2))));
        let mut flipped = bytes;
        let last_blob = flipped.len() - 6;
        flipped[last_blob] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::new(PoseModel::<f32>::init(tiny(), 2).unwrap(), 0, None)
            .save(&path)
            .unwrap();
        assert!(Checkpoint::load_matching(&path, &tiny()).is_ok());
        let other = ModelConfig { blocks: 2, ..tiny() };
        assert!(matches!(
            Checkpoint::load_matching(&path, &other),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
