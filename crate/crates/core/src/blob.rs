//! Weight blobs: little-endian `f32` values concatenated in tensor-table order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_F32: &str = "f32";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

pub fn encode(tensors: &[(String, &Tensor)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F32.to_string(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    (entries, bytes)
}

/// Decodes every table entry. Any disagreement between the table and the
/// blob length is a [`Error::CheckpointShape`].
pub fn decode(entries: &[TensorEntry], bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut expected_offset = 0u64;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != DTYPE_F32 {
            return Err(Error::Manifest(format!("tensor `{}` has dtype `{}`", e.name, e.dtype)));
        }
        if e.offset != expected_offset {
            return Err(Error::CheckpointShape(format!(
                "tensor `{}` at offset {} but table order implies {expected_offset}",
                e.name, e.offset
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointShape(format!("tensor `{}` shape overflows", e.name)))?;
        let len = (numel as u64)
            .checked_mul(4)
            .ok_or_else(|| Error::CheckpointShape(format!("tensor `{}` is too large", e.name)))?;
        let end = e.offset.checked_add(len).filter(|&end| end <= bytes.len() as u64).ok_or_else(|| {
            Error::CheckpointShape(format!(
                "tensor `{}` needs bytes {}..{} but blob has {}",
                e.name,
                e.offset,
                e.offset.saturating_add(len),
                bytes.len()
            ))
        })?;
        let data = bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        out.push(Tensor::new(e.shape.clone(), data)?);
        expected_offset = end;
    }
    if expected_offset != bytes.len() as u64 {
        return Err(Error::CheckpointShape(format!(
            "blob has {} bytes, table covers {expected_offset}",
            bytes.len()
        )));
    }
    Ok(out)
}

/// Decodes into existing tensors, requiring each entry to match the
/// destination's name and shape.
pub fn decode_into(entries: &[TensorEntry], bytes: &[u8], dest: Vec<(String, &mut Tensor)>) -> Result<()> {
    if entries.len() != dest.len() {
        return Err(Error::CheckpointShape(format!(
            "table lists {} tensors, model has {}",
            entries.len(),
            dest.len()
        )));
    }
    let decoded = decode(entries, bytes)?;
    for ((entry, t), (name, slot)) in entries.iter().zip(decoded).zip(dest) {
        if entry.name != name || t.shape() != slot.shape() {
            return Err(Error::CheckpointShape(format!(
                "table entry `{}` {:?} does not match model tensor `{name}` {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5);
        let b = Tensor::scalar(-1.25);
        let (entries, bytes) = encode(&[("a".into(), &a), ("b".into(), &b)]);
        assert_eq!(bytes.len(), 28);
        assert_eq!(entries[1].offset, 24);
        assert_eq!(decode(&entries, &bytes).unwrap(), vec![a, b]);
        assert!(matches!(decode(&entries, &bytes[..20]), Err(Error::CheckpointShape(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&entries, &longer), Err(Error::CheckpointShape(_))));
    }

    #[test]
    fn huge_shapes_do_not_allocate() {
        let entries = vec![TensorEntry {
            name: "x".into(),
            shape: vec![usize::MAX, 4],
            dtype: "f32".into(),
            offset: 0,
        }];
        assert!(decode(&entries, &[0; 8]).is_err());
    }
}
