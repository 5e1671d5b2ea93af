//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FASVITCK" | u32 version
//! u64 len | JSON header (model config, normalization statistics)
//! u32 count | per parameter: u32 name len, name, u8 group, u32 rank, u64 dims…, f64 data…
//! u8 has_state | [u64 epoch, u64 best_epoch, f64 best_auc, f64 best_loss,
//!                 u64 bad_epochs, u64 adam step, f64 m…, f64 v… per parameter]
//! ```
//!
//! Encoding is a pure function of the contents, so equal checkpoints are
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainState};
use crate::vit::ModelConfig;

pub const MAGIC: &[u8; 8] = b"FASVITCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub stats: Option<ChannelStats>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    stats: Option<ChannelStats>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            stats: self.stats.clone(),
        })
        .expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(match p.group {
                ParamGroup::Encoder => 0,
                ParamGroup::Head => 1,
            });
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut out, &p.value);
        }

        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.epoch as u64).to_le_bytes());
                out.extend_from_slice(&(s.best_epoch as u64).to_le_bytes());
                out.extend_from_slice(&s.best_val_auc.to_le_bytes());
                out.extend_from_slice(&s.best_val_loss.to_le_bytes());
                out.extend_from_slice(&(s.bad_epochs as u64).to_le_bytes());
                out.extend_from_slice(&s.adam.step.to_le_bytes());
                for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], origin: &Path) -> Result<Self> {
        Self::decode(buf).map_err(|msg| Error::Parse {
            path: origin.to_path_buf(),
            msg,
        })
    }

    fn decode(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
        header.model.validate().map_err(|e| e.to_string())?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| e.to_string())?;
            let group = match r.u8()? {
                0 => ParamGroup::Encoder,
                1 => ParamGroup::Head,
                g => return Err(format!("parameter {name}: unknown group {g}")),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or("size overflow")?;
            let value = Tensor::new(shape, r.f64s(numel)?).map_err(|e| format!("parameter {name}: {e}"))?;
            params.push(name, group, value).map_err(|e| e.to_string())?;
        }

        let state = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u64()? as usize;
                let best_epoch = r.u64()? as usize;
                let best_val_auc = r.f64()?;
                let best_val_loss = r.f64()?;
                let bad_epochs = r.u64()? as usize;
                let step = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for p in params.iter() {
                    let shape = p.value.shape().to_vec();
                    let n = p.value.numel();
                    m.push(Tensor::new(shape.clone(), r.f64s(n)?).map_err(|e| e.to_string())?);
                    v.push(Tensor::new(shape, r.f64s(n)?).map_err(|e| e.to_string())?);
                }
                Some(TrainState {
                    epoch,
                    best_epoch,
                    best_val_auc,
                    best_val_loss,
                    bad_epochs,
                    adam: AdamState { step, m, v },
                })
            }
            f => return Err(format!("bad state flag {f}")),
        };
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Checkpoint {
            model: header.model,
            params,
            stats: header.stats,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{Backbone, VitReg};

    #[test]
    fn roundtrip_is_byte_stable() {
        let cfg = ModelConfig::tiny();
        let model = VitReg::new(cfg.clone(), 3).unwrap();
        let ck = Checkpoint {
            model: cfg,
            params: model.params().clone(),
            stats: None,
            state: Some(TrainState {
                epoch: 4,
                best_epoch: 2,
                best_val_auc: f64::NEG_INFINITY,
                best_val_loss: 0.25,
                bad_epochs: 2,
                adam: AdamState::new(model.params()),
            }),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_is_a_parse_error() {
        let ck = Checkpoint {
            model: ModelConfig::tiny(),
            params: VitReg::new(ModelConfig::tiny(), 0).unwrap().params().clone(),
            stats: None,
            state: None,
        };
        let bytes = ck.to_bytes();
        for bad in [&bytes[..bytes.len() - 3], &bytes[1..], b"FASVITCK\x09\0\0\0".as_slice()] {
            assert!(matches!(
                Checkpoint::from_bytes(bad, Path::new("x")),
                Err(Error::Parse { .. })
            ));
        }
    }
}
