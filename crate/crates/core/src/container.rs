//! Per-sample binary container holding named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SMPL"
//! u32     version (1)
//! u32     array count
//! repeated:
//!   u16   name length, then UTF-8 name
//!   u8    dtype (1 = f32, 2 = u32)
//!   u8    rank
//!   u32   dims[rank]
//!   data  product(dims) * 4 bytes
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMPL";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::F32(data),
        });
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], data: Vec<u32>) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::U32(data),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            debug_assert_eq!(a.shape.iter().product::<usize>(), a.data.len());
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(match a.data {
                ArrayData::F32(_) => 1,
                ArrayData::U32(_) => 2,
            });
            out.push(a.shape.len() as u8);
            for d in &a.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Container("array name is not UTF-8".into()))?
                .to_string();
            if arrays.iter().any(|a: &NamedArray| a.name == name) {
                return Err(Error::Container(format!("duplicate array `{name}`")));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Container(format!("array `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Container(format!("array `{name}` is too large")))?;
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Container(format!("array `{name}` is too large")))?;
            let raw = r.take(nbytes)?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match dtype {
                1 => ArrayData::F32(words.map(f32::from_le_bytes).collect()),
                2 => ArrayData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(Error::Container(format!("unknown dtype tag {other}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
