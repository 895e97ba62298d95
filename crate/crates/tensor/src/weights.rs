//! `GGWT` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "GGWT"
//! version      u32
//! count        u32      number of records
//! record*      layer_index u32, kind u8, role u8, ndim u32, dims u32*ndim,
//!              payload f32*prod(dims)
//! crc32        u32      over every preceding byte
//! ```
//!
//! Records appear in network traversal order; nested block tensors carry the
//! index of their top-level layer.

use std::path::Path;

use thiserror::Error;

use crate::layers::{LayerKind, StateRole};
use crate::network::Sequential;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GGWT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("not a GGWT weight file")]
    BadMagic,
    #[error("unsupported weight file version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("weight file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("weight file truncated")]
    Truncated,
    #[error("malformed weight record {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("weight file does not match the model: {0}")]
    ModelMismatch(String),
    #[error("weight file io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRecord {
    pub layer_index: u32,
    pub kind: LayerKind,
    pub role: StateRole,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub records: Vec<WeightRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).ok_or(WeightFileError::Truncated)?;
        if end > self.buf.len() {
            return Err(WeightFileError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }
}

impl WeightFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.layer_index.to_le_bytes());
            out.push(r.kind as u8);
            out.push(r.role as u8);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for d in &r.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WeightFileError> {
        if bytes.len() < 4 {
            return Err(WeightFileError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(WeightFileError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(WeightFileError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(WeightFileError::VersionMismatch { found: version });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let parsed = Self::parse_records(bytes);
        if stored != computed {
            // A body that cannot hold its own declared records was cut short;
            // anything else with a bad checksum is corruption.
            return Err(match parsed {
                Err(WeightFileError::Truncated) => WeightFileError::Truncated,
                _ => WeightFileError::Checksum { stored, computed },
            });
        }
        let (file, end) = parsed?;
        if end != body.len() {
            return Err(WeightFileError::Malformed {
                index: file.records.len(),
                reason: format!("{} trailing bytes", body.len() - end),
            });
        }
        Ok(file)
    }

    /// Parses records from the full byte buffer (including the trailer),
    /// returning the offset where the records end.
    fn parse_records(bytes: &[u8]) -> Result<(Self, usize), WeightFileError> {
        let mut r = Reader { buf: bytes, pos: 8 };
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let layer_index = r.u32()?;
            let kind_tag = r.u8()?;
            let role_tag = r.u8()?;
            let kind = LayerKind::from_tag(kind_tag).ok_or_else(|| WeightFileError::Malformed {
                index,
                reason: format!("unknown layer kind tag {kind_tag}"),
            })?;
            let role = StateRole::from_tag(role_tag).ok_or_else(|| WeightFileError::Malformed {
                index,
                reason: format!("unknown tensor role tag {role_tag}"),
            })?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(WeightFileError::Malformed {
                    index,
                    reason: format!("{ndim} dimensions"),
                });
            }
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .ok_or(WeightFileError::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(WeightFileError::Truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(WeightRecord {
                layer_index,
                kind,
                role,
                shape,
                data,
            });
        }
        if r.pos + 4 > bytes.len() {
            return Err(WeightFileError::Truncated);
        }
        Ok((Self { records }, r.pos))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightFileError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightFileError> {
        Self::decode(&std::fs::read(path)?)
    }
}

impl Sequential<f32> {
    /// Snapshot of every parameter and running statistic.
    pub fn to_weight_file(&self) -> WeightFile {
        let mut records = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_state(&mut |kind, role, t| {
                records.push(WeightRecord {
                    layer_index: i as u32,
                    kind,
                    role,
                    shape: t.shape().iter().map(|&d| d as u32).collect(),
                    data: t.data().to_vec(),
                })
            });
        }
        WeightFile { records }
    }

    /// Overwrites this network's state from `file`. The architecture must
    /// match record for record; on mismatch the network is left unchanged.
    pub fn load_weight_file(&mut self, file: &WeightFile) -> Result<(), WeightFileError> {
        let mut expected = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_state(&mut |kind, role, t| {
                expected.push((i as u32, kind, role, t.shape().to_vec()));
            });
        }
        if expected.len() != file.records.len() {
            return Err(WeightFileError::ModelMismatch(format!(
                "model has {} tensors, file has {}",
                expected.len(),
                file.records.len()
            )));
        }
        for (k, ((li, kind, role, shape), rec)) in expected.iter().zip(&file.records).enumerate() {
            let rec_shape: Vec<usize> = rec.shape.iter().map(|&d| d as usize).collect();
            if *li != rec.layer_index || *kind != rec.kind || *role != rec.role || *shape != rec_shape {
                return Err(WeightFileError::ModelMismatch(format!(
                    "tensor {k}: model expects layer {li} {kind:?}/{role:?} {shape:?}, file has layer {} {:?}/{:?} {rec_shape:?}",
                    rec.layer_index, rec.kind, rec.role
                )));
            }
        }
        let mut records = file.records.iter();
        for l in &mut self.layers {
            l.visit_state_mut(&mut |_, _, t| {
                let rec = records.next().expect("record count checked");
                *t = Tensor::new(t.shape().to_vec(), rec.data.clone()).expect("shape checked");
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> WeightFile {
        WeightFile {
            records: vec![WeightRecord {
                layer_index: 0,
                kind: LayerKind::Conv,
                role: StateRole::Weight,
                shape: vec![1, 1, 1, 2],
                data: vec![1.5, -2.25],
            }],
        }
    }

    #[test]
    fn empty_file_round_trips() {
        let bytes = WeightFile::default().encode();
        assert_eq!(bytes.len(), 16);
        assert_eq!(WeightFile::decode(&bytes).unwrap(), WeightFile::default());
        let mut empty = Sequential::<f32>::default();
        empty.load_weight_file(&WeightFile::decode(&bytes).unwrap()).unwrap();
        assert!(empty.layers.is_empty());
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = sample_file().encode();
        let payload_at = bytes.len() - 4 - 2;
        bytes[payload_at] ^= 0x40;
        assert!(matches!(WeightFile::decode(&bytes), Err(WeightFileError::Checksum { .. })));
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let bytes = sample_file().encode();
        assert!(matches!(
            WeightFile::decode(&bytes[..bytes.len() - 6]),
            Err(WeightFileError::Truncated)
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            WeightFile::decode(&v2),
            Err(WeightFileError::VersionMismatch { found: 2 })
        ));
        assert!(matches!(WeightFile::decode(b"NOPE...."), Err(WeightFileError::BadMagic)));
    }
}
