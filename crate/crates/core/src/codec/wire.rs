//! Binary frame format for deltas and full models.
//!
//! All integers are little-endian.
//!
//! ```text
//! frame   = "RPN1" version:u8 round:u32 count:u16 entry* crc32:u32
//! entry   = name_len:u8 name role:u8 rank:u8 dim:u32*rank
//!           has_mask:u8 [mask_bits:u32 mask_bytes] payload_len:u32 f32*
//! ```
//!
//! Mask bits are packed LSB-first. Filters whose bit is clear are left out of
//! the payload and decode as zeros. The CRC-32 covers every preceding byte.

use thiserror::Error;

use super::{DeltaEntry, FilterMask, PooledDelta};
use crate::params::{ModelParams, ParamEntry, ParamsError, Role};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"RPN1";
pub const VERSION: u8 = 1;
/// Header (magic, version, round, count) plus trailing checksum.
pub const FRAME_OVERHEAD: usize = 4 + 1 + 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("frame truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("entry `{name}`: payload is {actual} bytes, shape and mask require {expected}")]
    PayloadLengthMismatch { name: String, expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("entry {index}: invalid role byte {byte}")]
    InvalidRole { index: usize, byte: u8 },
    #[error("entry {index}: name is not valid UTF-8")]
    InvalidUtf8 { index: usize },
    #[error("entry `{name}`: mask has {bits} bits but the last axis has {filters}")]
    MaskLengthMismatch { name: String, bits: usize, filters: usize },
    #[error("entry `{name}`: invalid shape {dims:?}")]
    InvalidShape { name: String, dims: Vec<usize> },
    #[error("invalid mask flag {flag} in entry `{name}`")]
    InvalidMaskFlag { name: String, flag: u8 },
    #[error("{0} unexpected bytes after the last entry")]
    TrailingBytes(usize),
    #[error("cannot encode: {0}")]
    Unencodable(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub round: u32,
    pub entries: Vec<DeltaEntry>,
}

impl Frame {
    pub fn into_delta(self) -> PooledDelta {
        PooledDelta { entries: self.entries }
    }

    pub fn into_params(self) -> Result<ModelParams, WireError> {
        let entries =
            self.entries.into_iter().map(|e| ParamEntry { name: e.name, role: e.role, tensor: e.tensor }).collect();
        Ok(ModelParams::new(entries)?)
    }
}

fn mask_bytes(bits: usize) -> usize {
    bits.div_ceil(8)
}

fn entry_bytes(name: &str, rank: usize, mask: Option<&FilterMask>, payload_elems: usize) -> usize {
    1 + name.len() + 1 + 1 + 4 * rank + 1 + mask.map_or(0, |m| 4 + mask_bytes(m.len())) + 4 + 4 * payload_elems
}

/// Exact encoded size of a delta frame.
pub fn count_bytes(d: &PooledDelta) -> usize {
    FRAME_OVERHEAD
        + d.entries
            .iter()
            .map(|e| entry_bytes(&e.name, e.tensor.dims().len(), e.mask.as_ref(), e.payload_len()))
            .sum::<usize>()
}

/// Exact encoded size of a full-model frame.
pub fn count_bytes_full(p: &ModelParams) -> usize {
    FRAME_OVERHEAD
        + p.entries().iter().map(|e| entry_bytes(&e.name, e.tensor.dims().len(), None, e.tensor.numel())).sum::<usize>()
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), WireError> {
    let v = u32::try_from(v).map_err(|_| WireError::Unencodable(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_entry(
    out: &mut Vec<u8>,
    name: &str,
    role: Role,
    t: &Tensor,
    mask: Option<&FilterMask>,
) -> Result<(), WireError> {
    let name_len =
        u8::try_from(name.len()).map_err(|_| WireError::Unencodable(format!("name `{name}` longer than 255 bytes")))?;
    out.push(name_len);
    out.extend_from_slice(name.as_bytes());
    out.push(role.to_byte());
    let dims = t.dims();
    let rank =
        u8::try_from(dims.len()).map_err(|_| WireError::Unencodable(format!("rank {} of `{name}`", dims.len())))?;
    out.push(rank);
    for &d in dims {
        put_u32(out, d, "dimension")?;
    }
    let filters = *dims.last().expect("shapes have rank >= 1");
    match mask {
        None => {
            out.push(0);
            put_u32(out, 4 * t.numel(), "payload length")?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Some(m) => {
            if m.len() != filters {
                return Err(WireError::MaskLengthMismatch { name: name.to_string(), bits: m.len(), filters });
            }
            out.push(1);
            put_u32(out, m.len(), "mask length")?;
            let mut packed = vec![0u8; mask_bytes(m.len())];
            for (j, &b) in m.bits().iter().enumerate() {
                if b {
                    packed[j / 8] |= 1 << (j % 8);
                }
            }
            out.extend_from_slice(&packed);
            let kept = t.numel() / filters * m.kept();
            put_u32(out, 4 * kept, "payload length")?;
            for (i, v) in t.data().iter().enumerate() {
                if m.is_set(i % filters) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(())
}

fn frame<'a, I>(round: u32, count: usize, entries: I) -> Result<Vec<u8>, WireError>
where
    I: Iterator<Item = (&'a str, Role, &'a Tensor, Option<&'a FilterMask>)>,
{
    let count = u16::try_from(count).map_err(|_| WireError::Unencodable(format!("{count} entries exceed u16")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, role, t, mask) in entries {
        put_entry(&mut out, name, role, t, mask)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serialises a delta, omitting masked-out filters from the payload.
pub fn encode(round: u32, d: &PooledDelta) -> Result<Vec<u8>, WireError> {
    frame(round, d.entries.len(), d.entries.iter().map(|e| (e.name.as_str(), e.role, &e.tensor, e.mask.as_ref())))
}

/// Serialises a full model with no masks.
pub fn encode_full(round: u32, p: &ModelParams) -> Result<Vec<u8>, WireError> {
    frame(round, p.len(), p.entries().iter().map(|e| (e.name.as_str(), e.role, &e.tensor, None)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Bytes past this offset belong to the checksum.
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.end.saturating_sub(self.pos);
        if n > available {
            return Err(WireError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn read_entry(r: &mut Reader<'_>, index: usize) -> Result<DeltaEntry, WireError> {
    let name_len = r.u8()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| WireError::InvalidUtf8 { index })?.to_string();
    let byte = r.u8()?;
    let role = Role::from_byte(byte).ok_or(WireError::InvalidRole { index, byte })?;
    let rank = r.u8()? as usize;
    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let invalid_shape = || WireError::InvalidShape { name: name.clone(), dims: dims.clone() };
    let shape = Shape::new(dims.clone()).map_err(|_| invalid_shape())?;
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(invalid_shape)?;
    let filters = *dims.last().ok_or_else(invalid_shape)?;
    let mask = match r.u8()? {
        0 => None,
        1 => {
            let bits = r.u32()?;
            if bits != filters {
                return Err(WireError::MaskLengthMismatch { name, bits, filters });
            }
            let packed = r.take(mask_bytes(bits))?;
            Some(FilterMask::from_bits((0..bits).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect()))
        }
        flag => return Err(WireError::InvalidMaskFlag { name, flag }),
    };
    let kept = mask.as_ref().map_or(numel, |m| numel / filters * m.kept());
    let len = r.u32()?;
    if len != 4 * kept {
        return Err(WireError::PayloadLengthMismatch { name, expected: 4 * kept, actual: len });
    }
    let raw = r.take(len)?;
    let mut values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let data: Vec<f32> = match &mask {
        None => values.collect(),
        Some(m) => (0..numel)
            .map(|i| if m.is_set(i % filters) { values.next().expect("length checked") } else { 0.0 })
            .collect(),
    };
    Ok(DeltaEntry { name, role, tensor: Tensor::new(shape, data).expect("length checked"), mask })
}

/// Parses and verifies a frame produced by [`encode`] or [`encode_full`].
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let truncated = |needed| WireError::Truncated { offset: 0, needed, available: bytes.len() };
    if bytes.len() < 5 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(WireError::BadMagic(bytes[..4].try_into().expect("4 bytes")));
        }
        return Err(truncated(FRAME_OVERHEAD));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < FRAME_OVERHEAD {
        return Err(truncated(FRAME_OVERHEAD));
    }
    let end = bytes.len() - 4;
    let mut r = Reader { buf: bytes, pos: 5, end };
    let round = r.u32()? as u32;
    let count = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
    let entries = (0..count).map(|i| read_entry(&mut r, i)).collect::<Result<Vec<_>, _>>()?;
    if r.pos != end {
        return Err(WireError::TrailingBytes(end - r.pos));
    }
    let stored = u32::from_le_bytes(bytes[end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..end]);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    Ok(Frame { round, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta() -> PooledDelta {
        PooledDelta {
            entries: vec![
                DeltaEntry {
                    name: "k".into(),
                    role: Role::Kernel,
                    tensor: Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, -2.5]).unwrap(),
                    mask: Some(FilterMask::from_bits(vec![true, false, true])),
                },
                DeltaEntry {
                    name: "b".into(),
                    role: Role::Bias,
                    tensor: Tensor::from_vec(&[2], vec![0.25, 4.0]).unwrap(),
                    mask: None,
                },
            ],
        }
    }

    #[test]
    fn roundtrip_and_exact_size() {
        let d = delta();
        let bytes = encode(7, &d).unwrap();
        assert_eq!(bytes.len(), count_bytes(&d));
        // Hand count: header 11, "k" 1+1+1+1+16+1+4+1+4+8 = 38, "b" 1+1+1+1+4+1+4+8 = 21, crc 4.
        assert_eq!(bytes.len(), 11 + 38 + 21 + 4);
        let f = decode(&bytes).unwrap();
        assert_eq!(f.round, 7);
        assert_eq!(f.into_delta(), d);
    }

    #[test]
    fn masked_payload_is_omitted() {
        let mut d = delta();
        let full = count_bytes(&d);
        d.entries[0].mask = Some(FilterMask::none(3));
        d.entries[0].tensor = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0; 3]).unwrap();
        assert_eq!(count_bytes(&d), full - 8);
        assert_eq!(decode(&encode(0, &d).unwrap()).unwrap().into_delta(), d);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(1, &delta()).unwrap();
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(WireError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(decode(&b), Err(WireError::UnsupportedVersion(2)));
        assert!(matches!(decode(&good[..good.len() - 6]), Err(WireError::Truncated { .. })));
        assert!(matches!(decode(&good[..3]), Err(WireError::Truncated { .. })));
        let mut b = good.clone();
        let n = b.len();
        b[n - 5] ^= 0x40;
        assert!(matches!(decode(&b), Err(WireError::ChecksumMismatch { .. })));
        let mut b = good.clone();
        b.splice(b.len() - 4..b.len() - 4, [0u8; 3]);
        assert_eq!(decode(&b), Err(WireError::TrailingBytes(3)));
    }

    fn reseal(mut b: Vec<u8>) -> Vec<u8> {
        let n = b.len() - 4;
        let crc = crc32fast::hash(&b[..n]);
        b[n..].copy_from_slice(&crc.to_le_bytes());
        b
    }

    #[test]
    fn structural_errors_with_valid_checksum() {
        let good = encode(1, &delta()).unwrap();
        // Byte 11 is the first name length, 12 the name, 13 the role.
        let mut b = good.clone();
        b[13] = 9;
        assert_eq!(decode(&reseal(b)), Err(WireError::InvalidRole { index: 0, byte: 9 }));
        let mut b = good.clone();
        b[12] = 0xff;
        assert_eq!(decode(&reseal(b)), Err(WireError::InvalidUtf8 { index: 0 }));
        // Mask bit count lives after rank (14), four dims (15..31) and the flag (31).
        let mut b = good.clone();
        b[32] = 4;
        assert!(matches!(decode(&reseal(b)), Err(WireError::MaskLengthMismatch { .. })));
        // Payload length follows the one packed mask byte at 36.
        let mut b = good.clone();
        b[37] = 4;
        assert!(matches!(decode(&reseal(b)), Err(WireError::PayloadLengthMismatch { .. })));
    }

    #[test]
    fn full_model_frames() {
        let p = ModelParams::new(vec![ParamEntry {
            name: "w".into(),
            role: Role::WeightMatrix,
            tensor: Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap(),
        }])
        .unwrap();
        let bytes = encode_full(0, &p).unwrap();
        assert_eq!(bytes.len(), count_bytes_full(&p));
        assert_eq!(decode(&bytes).unwrap().into_params().unwrap(), p);
    }

    #[test]
    fn rejects_unencodable_and_bad_masks() {
        let mut d = delta();
        d.entries[0].name = "x".repeat(300);
        assert!(matches!(encode(0, &d), Err(WireError::Unencodable(_))));
        let mut d = delta();
        d.entries[0].mask = Some(FilterMask::all(2));
        assert!(matches!(encode(0, &d), Err(WireError::MaskLengthMismatch { .. })));
    }
}
