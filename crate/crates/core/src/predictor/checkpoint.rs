// SPDX-License-Identifier: Apache-2.0

//! Binary model checkpoints. All integers and floats little-endian:
//!
//! ```text
//! magic          8 bytes  "AFLSTM\0\0"
//! version        u32
//! hidden (H)     u32
//! inputs (m)     u32
//! seed           u64
//! learning_rate  f64
//! epochs         u64
//! gradient_clip  f64
//! window_hours   u64
//! batch_size     u64
//! sequence_hours u64
//! stride_hours   u64
//! param_count    u64
//! params         param_count x f64, flat layout of LstmParams
//! crc32          u32 over every preceding byte
//! ```

use super::{LstmParams, PredictorError, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"AFLSTM\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: LstmParams,
    /// `hidden_size` always mirrors the parameters on read.
    pub config: TrainConfig,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let c = &ckpt.config;
    let mut out = Vec::with_capacity(96 + 8 * p.values().len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.hidden_size() as u32).to_le_bytes());
    out.extend_from_slice(&(p.input_size() as u32).to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.learning_rate.to_le_bytes());
    out.extend_from_slice(&(c.epochs as u64).to_le_bytes());
    out.extend_from_slice(&c.gradient_clip.to_le_bytes());
    for n in [c.window_hours, c.batch_size, c.sequence_hours, c.stride_hours] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&(p.values().len() as u64).to_le_bytes());
    for v in p.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PredictorError> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| PredictorError::Checkpoint("truncated".into()))?;
        self.pos += N;
        Ok(bytes.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32, PredictorError> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, PredictorError> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, PredictorError> {
        self.take().map(f64::from_le_bytes)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PredictorError> {
    let fail = |msg: &str| PredictorError::Checkpoint(msg.to_owned());
    if bytes.len() < 12 {
        return Err(fail("truncated"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(fail("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take::<8>()? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(PredictorError::Checkpoint(format!("unsupported version {version}")));
    }
    let hidden = r.u32()? as usize;
    let inputs = r.u32()? as usize;
    let seed = r.u64()?;
    let learning_rate = r.f64()?;
    let epochs = r.u64()? as usize;
    let gradient_clip = r.f64()?;
    let window_hours = r.u64()? as usize;
    let batch_size = r.u64()? as usize;
    let sequence_hours = r.u64()? as usize;
    let stride_hours = r.u64()? as usize;
    let count = r.u64()? as usize;
    if body.len() - r.pos != count.saturating_mul(8) {
        return Err(fail("parameter count does not match payload"));
    }
    let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let params = LstmParams::from_values(hidden, inputs, values)?;
    Ok(Checkpoint {
        params,
        config: TrainConfig {
            learning_rate,
            epochs,
            seed,
            gradient_clip,
            window_hours,
            hidden_size: hidden,
            batch_size,
            sequence_hours,
            stride_hours,
        },
    })
}
