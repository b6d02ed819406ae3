//! Binary tensor container used for checkpoints, control images, latents,
//! grids and bodies.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "APTC0001"
//! count      u32
//! per tensor:
//!   name_len u32, name (UTF-8), dtype u8 {0: f32, 1: f64, 2: u8},
//!   rank u32, extents u64 x rank, offset u64 (absolute, 64-byte aligned)
//! payload    tensors in header order, each starting on a 64-byte boundary
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APTC0001";
const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

/// A named entry of a container: extents plus typed row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

pub type TensorMap = BTreeMap<String, Tensor>;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Param(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics if the extents disagree with the data length.
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(shape, TensorData::F32(data)).expect("tensor shape")
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::new(shape, TensorData::F64(data)).expect("tensor shape")
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self::new(shape, TensorData::U8(data)).expect("tensor shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Serialize to bytes.
pub fn encode(tensors: &TensorMap) -> Vec<u8> {
    let mut header_len = MAGIC.len() + 4;
    for (name, t) in tensors {
        header_len += 4 + name.len() + 1 + 4 + 8 * t.shape.len() + 8;
    }
    let mut offsets = Vec::with_capacity(tensors.len());
    let mut cursor = align_up(header_len);
    for t in tensors.values() {
        offsets.push(cursor);
        cursor = align_up(cursor + t.data.len() * dtype_size(t.data.dtype()));
    }
    let mut out = Vec::with_capacity(cursor);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, t), off) in tensors.iter().zip(&offsets) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.data.dtype());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&(*off as u64).to_le_bytes());
    }
    for (t, off) in tensors.values().zip(&offsets) {
        out.resize(*off, 0);
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    out.resize(cursor.max(align_up(header_len)), 0);
    out
}

fn dtype_size(dtype: u8) -> usize {
    match dtype {
        0 => 4,
        1 => 8,
        _ => 1,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse bytes; any inconsistency is a format error carrying the byte offset.
pub fn decode(buf: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let count = r.u32("tensor count")? as usize;
    struct Entry {
        name: String,
        dtype: u8,
        shape: Vec<usize>,
        offset: usize,
        at: usize,
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "name is not UTF-8".into(),
            })?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("duplicate tensor name {name:?}"),
            });
        }
        let dtype_at = r.pos;
        let dtype = r.take(1, "dtype")?[0];
        if dtype > 2 {
            return Err(Error::Format {
                offset: dtype_at as u64,
                msg: format!("unknown dtype {dtype}"),
            });
        }
        let rank = r.u32("rank")? as usize;
        if rank > 16 {
            return Err(Error::Format {
                offset: (r.pos - 4) as u64,
                msg: format!("rank {rank} too large"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let offset = r.u64("offset")? as usize;
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
            at,
        });
    }
    let header_end = r.pos;
    let mut out = TensorMap::new();
    for e in entries {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &x| a.checked_mul(x))
            .and_then(|n| n.checked_mul(dtype_size(e.dtype)));
        let fits = n
            .and_then(|bytes| e.offset.checked_add(bytes))
            .is_some_and(|end| end <= buf.len());
        if e.offset < header_end || !fits {
            return Err(Error::Format {
                offset: e.at as u64,
                msg: format!("payload of {:?} lies outside the file", e.name),
            });
        }
        let count: usize = e.shape.iter().product();
        let bytes = &buf[e.offset..e.offset + count * dtype_size(e.dtype)];
        let data = match e.dtype {
            0 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(bytes.to_vec()),
        };
        out.insert(e.name, Tensor { shape: e.shape, data });
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_container_is_valid() {
        let bytes = encode(&TensorMap::new());
        assert_eq!(&bytes[..8], MAGIC);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncated_file_fails_closed() {
        let mut m = TensorMap::new();
        m.insert("w".into(), Tensor::f32(vec![4, 4], (0..16).map(|x| x as f32).collect()));
        let bytes = encode(&m);
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn corrupt_magic_reports_offset_zero() {
        let mut bytes = encode(&TensorMap::new());
        bytes[0] = b'X';
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn payloads_are_aligned() {
        let mut m = TensorMap::new();
        m.insert("a".into(), Tensor::u8(vec![3], vec![1, 2, 3]));
        m.insert("b".into(), Tensor::f64(vec![2], vec![1.5, -2.0]));
        let bytes = encode(&m);
        assert_eq!(bytes.len() % 64, 0);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in prop::collection::vec(any::<f32>(), 0..40),
            b in prop::collection::vec(any::<f64>(), 0..40),
            c in prop::collection::vec(any::<u8>(), 0..40),
        ) {
            let mut m = TensorMap::new();
            m.insert("layer.weight".into(), Tensor::f32(vec![a.len()], a));
            m.insert("x".into(), Tensor::f64(vec![1, b.len()], b));
            m.insert("mask".into(), Tensor::u8(vec![c.len(), 1], c));
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.len(), 3);
            for (k, t) in &m {
                let u = &back[k];
                prop_assert_eq!(u.shape(), t.shape());
                let bits = |t: &Tensor| -> Vec<u64> {
                    match t.data() {
                        TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
                        TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
                        TensorData::U8(v) => v.iter().map(|&x| x as u64).collect(),
                    }
                };
                prop_assert_eq!(bits(u), bits(t));
            }
        }
    }
}
