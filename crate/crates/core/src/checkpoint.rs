//! `TDNC` checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TDNC" | version u16 | architecture digest [32]
//! config_len u32 | config JSON
//! n_tensors u32 | per tensor: name_len u32 | name | rank u32 | dims u64[rank] | f64 data
//! lr f64 | ramping u8 | has_prev u8 | prev f64 | has_best u8 | best f64 | finished u8 | epoch u64
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::ArchitectureConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Parameterized;
use crate::tdnn::{build_tdnn, TdnnModel};
use crate::training::{SchedulerState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDNC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ArchitectureConfig,
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(config: &ArchitectureConfig, model: &TdnnModel, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            digest: config.architecture_digest(),
            tensors: model
                .param_refs()
                .into_iter()
                .map(|p| (p.name, p.tensor.clone()))
                .collect(),
            state: *state,
        }
    }

    /// Rebuilds the model described by the stored config and fills in the
    /// stored tensors.
    pub fn model(&self) -> Result<TdnnModel> {
        let mut m = build_tdnn(&self.config.tdnn_spec(), 0)?;
        let mut slots = m.params_mut();
        if slots.len() != self.tensors.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!("checkpoint holds {} tensors, model needs {}", self.tensors.len(), slots.len()),
            });
        }
        for (slot, (name, t)) in slots.iter_mut().zip(&self.tensors) {
            if &slot.name != name || slot.tensor.shape() != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "tensor {name} {:?} does not match model block {} {:?}",
                        t.shape(),
                        slot.name,
                        slot.tensor.shape()
                    ),
                });
            }
            *slot.tensor = t.clone();
        }
        drop(slots);
        Ok(m)
    }

    /// Refuses to continue under a different architecture.
    pub fn check_resume(&self, config: &ArchitectureConfig) -> Result<()> {
        if self.digest != config.architecture_digest() {
            return Err(Error::Config(format!(
                "checkpoint architecture digest {} does not match the requested configuration {}",
                hex(&self.digest),
                hex(&config.architecture_digest())
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let s = &self.state.scheduler;
        out.extend_from_slice(&s.lr.to_le_bytes());
        out.push(s.ramping as u8);
        for v in [s.previous, s.best] {
            out.push(v.is_some() as u8);
            out.extend_from_slice(&v.unwrap_or(0.0).to_le_bytes());
        }
        out.push(self.state.finished as u8);
        out.extend_from_slice(&(self.state.epoch as u64).to_le_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut c = Reader { buf, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, not a TDNC checkpoint"));
        }
        let version = u16::from_le_bytes(c.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = c.array()?;
        let at = c.pos;
        let len = c.u32()? as usize;
        let json = c.take(len)?;
        let text = std::str::from_utf8(json).map_err(|_| Error::format(at as u64, "config is not UTF-8"))?;
        let config: ArchitectureConfig =
            serde_json::from_str(text).map_err(|e| Error::format(at as u64, format!("config: {e}")))?;
        if config.architecture_digest() != digest {
            return Err(Error::format(6, "architecture digest does not match the stored config"));
        }
        let n = c.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let at = c.pos;
            let name_len = c.u32()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| Error::format(at as u64, "tensor name is not UTF-8"))?;
            let rank = c.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(c.array()?) as usize);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = count
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(at as u64, format!("tensor {name} shape {shape:?} overflows")))?;
            let data = c
                .take(bytes)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data).map_err(|e| Error::format(at as u64, e.to_string()))?));
        }
        let lr = f64::from_le_bytes(c.array()?);
        let ramping = c.flag()?;
        let previous = c.opt_f64()?;
        let best = c.opt_f64()?;
        let finished = c.flag()?;
        let epoch = u64::from_le_bytes(c.array()?) as usize;
        if c.pos != buf.len() {
            return Err(Error::format(c.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            config,
            digest,
            tensors,
            state: TrainState { epoch, scheduler: SchedulerState { lr, ramping, previous, best }, finished },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated checkpoint: need {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(at as u64, format!("invalid flag byte {v}"))),
        }
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let present = self.flag()?;
        let v = f64::from_le_bytes(self.array()?);
        Ok(present.then_some(v))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&ckpt.encode())?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, Scale};

    fn sample() -> (ArchitectureConfig, TdnnModel, TrainState) {
        let cfg = preset("bd-fd-grid-rnn-resnet-tdnn").unwrap().config.scaled(Scale::Tiny);
        let m = build_tdnn(&cfg.tdnn_spec(), 3).unwrap();
        let mut st = TrainState::new(&cfg.training);
        st.epoch = 4;
        st.scheduler.previous = Some(0.25);
        st.scheduler.ramping = true;
        (cfg, m, st)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, m, st) = sample();
        let ck = Checkpoint::capture(&cfg, &m, &st);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), m);
        assert_eq!(back.state, st);
    }

    #[test]
    fn defects_are_reported() {
        let (cfg, m, st) = sample();
        let bytes = Checkpoint::capture(&cfg, &m, &st).encode();
        for cut in [0, 5, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 6, .. })));
    }

    #[test]
    fn resume_refuses_other_architecture() {
        let (cfg, m, st) = sample();
        let ck = Checkpoint::capture(&cfg, &m, &st);
        ck.check_resume(&cfg).unwrap();
        let mut other = cfg.clone();
        other.training.initial_lr = 1.0;
        ck.check_resume(&other).unwrap();
        other.tdnn.width += 1;
        assert!(matches!(ck.check_resume(&other), Err(Error::Config(_))));
    }
}
