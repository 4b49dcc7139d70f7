// SPDX-License-Identifier: Apache-2.0

//! Log file encoding.
//!
//! ```text
//! header : MAGIC (8) | format version u16 LE | reserved u16
//! frame  : payload_len u32 LE | crc32(payload) u32 LE | payload
//! payload: op_count u32 | op*
//! op     : namespace u8 | kind u8 (1 = put, 2 = delete) | version u64
//!          | key_len u32 | key | [value_len u32 | value]   (put only)
//! ```

use std::io::{self, Read, Seek, SeekFrom, Write};

use crate::{Namespace, StoreError};

pub const MAGIC: [u8; 8] = *b"AFKVLOG\0";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: u64 = 12;
const FRAME_HEAD: usize = 8;

const KIND_PUT: u8 = 1;
const KIND_DELETE: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct FrameOp {
    pub namespace: Namespace,
    pub key: Vec<u8>,
    pub value: Option<Vec<u8>>,
    pub version: u64,
}

pub(crate) struct Replay {
    pub valid_len: u64,
    pub torn_tail: bool,
}

pub(crate) fn header() -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(&MAGIC);
    h[8..10].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h
}

pub(crate) fn encode_frame(ops: &[FrameOp]) -> Vec<u8> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(ops.len() as u32).to_le_bytes());
    for op in ops {
        payload.push(op.namespace.tag());
        payload.push(if op.value.is_some() { KIND_PUT } else { KIND_DELETE });
        payload.extend_from_slice(&op.version.to_le_bytes());
        payload.extend_from_slice(&(op.key.len() as u32).to_le_bytes());
        payload.extend_from_slice(&op.key);
        if let Some(value) = &op.value {
            payload.extend_from_slice(&(value.len() as u32).to_le_bytes());
            payload.extend_from_slice(value);
        }
    }
    let mut frame = Vec::with_capacity(FRAME_HEAD + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_payload(payload: &[u8]) -> Option<Vec<FrameOp>> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    let count = cur.u32()? as usize;
    let mut ops = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let namespace = Namespace::from_tag(cur.u8()?)?;
        let kind = cur.u8()?;
        let version = cur.u64()?;
        let key_len = cur.u32()? as usize;
        let key = cur.take(key_len)?.to_vec();
        let value = match kind {
            KIND_PUT => {
                let len = cur.u32()? as usize;
                Some(cur.take(len)?.to_vec())
            }
            KIND_DELETE => None,
            _ => return None,
        };
        ops.push(FrameOp {
            namespace,
            key,
            value,
            version,
        });
    }
    (cur.pos == payload.len()).then_some(ops)
}

/// Reads the header and every intact frame, handing each to `apply`.
/// Stops at the first short or checksum-failing frame.
pub(crate) fn replay<F>(file: &mut std::fs::File, mut apply: F) -> Result<Replay, StoreError>
where
    F: FnMut(Vec<FrameOp>),
{
    file.seek(SeekFrom::Start(0))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.is_empty() {
        file.write_all(&header())?;
        file.sync_all()?;
        return Ok(Replay {
            valid_len: HEADER_LEN,
            torn_tail: false,
        });
    }
    if bytes.len() < HEADER_LEN as usize || bytes[..8] != MAGIC {
        return Err(StoreError::Corrupt("missing store header".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(StoreError::Corrupt(format!(
            "unsupported format version {version}"
        )));
    }

    let mut pos = HEADER_LEN as usize;
    while pos < bytes.len() {
        let Some(head) = bytes.get(pos..pos + FRAME_HEAD) else {
            break;
        };
        let len = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(head[4..].try_into().unwrap());
        let Some(payload) = bytes.get(pos + FRAME_HEAD..pos + FRAME_HEAD + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Some(ops) = decode_payload(payload) else {
            break;
        };
        apply(ops);
        pos += FRAME_HEAD + len;
    }
    Ok(Replay {
        valid_len: pos as u64,
        torn_tail: pos < bytes.len(),
    })
}

pub(crate) fn seek_end(file: &mut std::fs::File) -> io::Result<()> {
    file.seek(SeekFrom::End(0)).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ns() -> impl Strategy<Value = Namespace> {
        (0u8..9).prop_map(|t| Namespace::from_tag(t).unwrap())
    }

    fn op() -> impl Strategy<Value = FrameOp> {
        (
            ns(),
            prop::collection::vec(any::<u8>(), 0..40),
            prop::option::of(prop::collection::vec(any::<u8>(), 0..200)),
            1u64..u64::MAX,
        )
            .prop_map(|(namespace, key, value, version)| FrameOp {
                namespace,
                key,
                value,
                version,
            })
    }

    proptest! {
        #[test]
        fn frames_decode_to_what_was_encoded(ops in prop::collection::vec(op(), 1..8)) {
            let frame = encode_frame(&ops);
            let decoded = decode_payload(&frame[FRAME_HEAD..]).unwrap();
            prop_assert_eq!(decoded, ops);
        }

        #[test]
        fn any_strict_prefix_fails_to_decode(ops in prop::collection::vec(op(), 1..4), cut in 0usize..1000) {
            let frame = encode_frame(&ops);
            let payload = &frame[FRAME_HEAD..];
            let cut = cut % payload.len();
            prop_assert!(decode_payload(&payload[..cut]).is_none());
        }
    }
}
