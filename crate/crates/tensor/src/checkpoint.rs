//! Binary checkpoint of a [`ParamStore`].
//!
//! ```text
//! "BEVR1"
//! P parameter records, then P first-moment records, then P second-moment
//! records, each: name_len u32 | name utf-8 | rank u32 | extents u32×rank |
//!                elements f32×len (row-major)
//! step u64
//! ```
//! All integers and floats are little-endian. Records are sorted by name and
//! the three blocks list the same names in the same order. The record count
//! is implied by the file length (the step counter occupies the last 8 bytes).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::{ParamEntry, ParamStore, Precision};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"BEVR1";

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(TensorError::Corrupt {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.corrupt(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.u32("name length")? as usize;
        let start = self.pos;
        let name = std::str::from_utf8(self.take(name_len, "name")?).map_err(|_| {
            TensorError::Corrupt {
                offset: start,
                reason: "name is not UTF-8".into(),
            }
        })?;
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return self.corrupt(format!("implausible rank {rank}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("extent")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()));
        let Some(len) = len else {
            return self.corrupt(format!("extents {shape:?} exceed the file size"));
        };
        let bytes = self.take(len * 4, "elements")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((name.to_owned(), shape, data))
    }
}

impl ParamStore {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, e) in &self.entries {
            put_record(&mut out, name, e.value.shape(), e.value.data());
        }
        for (name, e) in &self.entries {
            put_record(&mut out, name, e.value.shape(), &e.m);
        }
        for (name, e) in &self.entries {
            put_record(&mut out, name, e.value.shape(), &e.v);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    /// Parse a checkpoint. The result has `f32` storage precision.
    pub fn from_checkpoint_bytes(buf: &[u8]) -> Result<ParamStore> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(TensorError::Corrupt {
                offset: 0,
                reason: "bad magic (expected BEVR1)".into(),
            });
        }
        if buf.len() < 13 {
            return r.corrupt("missing step counter");
        }
        let body_end = buf.len() - 8;
        let mut records = Vec::new();
        while r.pos < body_end {
            let at = r.pos;
            let rec = r.record()?;
            if r.pos > body_end {
                return Err(TensorError::Corrupt {
                    offset: at,
                    reason: "record overlaps the step counter".into(),
                });
            }
            records.push((at, rec));
        }
        if records.len() % 3 != 0 {
            return r.corrupt(format!(
                "{} records is not parameters + two moment blocks",
                records.len()
            ));
        }
        let p = records.len() / 3;
        let mut entries = BTreeMap::new();
        for i in 0..p {
            let (at_m, (name_m, shape_m, m)) = &records[p + i];
            let (at_v, (name_v, shape_v, v)) = &records[2 * p + i];
            let (_, (name, shape, data)) = &records[i];
            for (at, n, s) in [(at_m, name_m, shape_m), (at_v, name_v, shape_v)] {
                if n != name || s != shape {
                    return Err(TensorError::Corrupt {
                        offset: *at,
                        reason: format!("moment record {n:?} does not match parameter {name:?}"),
                    });
                }
            }
            let value = Tensor::new(shape, data.clone())?;
            let entry = ParamEntry {
                value,
                m: m.clone(),
                v: v.clone(),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(TensorError::Corrupt {
                    offset: records[i].0,
                    reason: format!("duplicate parameter {name:?}"),
                });
            }
        }
        let step = u64::from_le_bytes(buf[body_end..].try_into().expect("8 bytes"));
        Ok(ParamStore {
            entries,
            step,
            ..ParamStore::new(Precision::F32)
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(Precision::F32);
        s.insert("b.bias", Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap())
            .unwrap();
        s.insert("a.weight", Tensor::from_fn(&[2, 2], |i| i as f64 / 3.0))
            .unwrap();
        s.insert("c#mean", Tensor::scalar(1.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = store();
        let g = BTreeMap::from([
            ("a.weight".to_owned(), Tensor::from_fn(&[2, 2], |i| i as f64 - 1.3)),
            ("b.bias".to_owned(), Tensor::ones(&[3])),
        ]);
        s.adamw_step(&g, &crate::AdamW::default()).unwrap();
        let bytes = s.to_checkpoint_bytes();
        let t = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(t.step(), 1);
        assert_eq!(t.to_checkpoint_bytes(), bytes);
        for (name, v) in s.iter() {
            let w = t.get(name).unwrap();
            assert_eq!(v.shape(), w.shape());
            for (x, y) in v.data().iter().zip(w.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(s.moments(name).unwrap(), t.moments(name).unwrap());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = store().to_checkpoint_bytes();
        assert_eq!(&bytes[..5], b"BEVR1");
        // first record is "a.weight" (sorted)
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 8);
        assert_eq!(&bytes[9..17], b"a.weight");
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 2);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = store().to_checkpoint_bytes();
        bytes[0] = b'X';
        let err = ParamStore::from_checkpoint_bytes(&bytes).unwrap_err();
        assert!(matches!(err, TensorError::Corrupt { offset: 0, .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = store().to_checkpoint_bytes();
        let cut = &bytes[..bytes.len() - 20];
        match ParamStore::from_checkpoint_bytes(cut) {
            Err(TensorError::Corrupt { offset, .. }) => assert!(offset > 5),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
