//! The `BEVD1` dataset file.
//!
//! ```text
//! "BEVD1" | count u32
//! per sample:
//!   n_cams u32, per camera: H u32 | W u32 | f32 × H·W·3 (row-major RGB)
//!   n_classes u32, per class: id u8 | X u32 | Y u32 | X rows of ⌈Y/8⌉ bytes
//!   meta_len u32 | UTF-8 JSON metadata
//! ```
//! Integers and floats are little-endian; map bits are packed MSB-first.

use std::fs;
use std::path::Path;

use crate::class::Class;
use crate::error::{CoreError, Result};
use crate::synthscene::{BevMap, Image, SceneMeta, SceneSample};

pub const DATASET_MAGIC: &[u8; 5] = b"BEVD1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn pack_rows(map: &BevMap) -> Vec<u8> {
    let stride = map.cols.div_ceil(8);
    let mut out = vec![0u8; map.rows * stride];
    for r in 0..map.rows {
        for c in 0..map.cols {
            if map.get(r, c) {
                out[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    out
}

pub fn to_bytes(samples: &[SceneSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, samples.len());
    for s in samples {
        put_u32(&mut out, s.images.len());
        for img in &s.images {
            put_u32(&mut out, img.height);
            put_u32(&mut out, img.width);
            for v in &img.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, s.maps.len());
        for (class, map) in &s.maps {
            out.push(class.id());
            put_u32(&mut out, map.rows);
            put_u32(&mut out, map.cols);
            out.extend_from_slice(&pack_rows(map));
        }
        let meta = serde_json::to_vec(&s.meta)?;
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self, at: usize, reason: impl Into<String>) -> Result<T> {
        Err(CoreError::Corrupt {
            offset: at,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.corrupt(self.pos, format!("truncated {what} ({n} bytes wanted, {} left)", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    /// `n` items of `size` bytes, refusing counts the file cannot hold.
    fn sized(&mut self, n: usize, size: usize, what: &str) -> Result<&'a [u8]> {
        match n.checked_mul(size) {
            Some(bytes) => self.take(bytes, what),
            None => self.corrupt(self.pos, format!("{what} size overflows")),
        }
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<SceneSample>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(5, "magic")? != DATASET_MAGIC {
        return r.corrupt(0, "bad magic (expected BEVD1)");
    }
    let count = r.u32("sample count")?;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let n_cams = r.u32("camera count")?;
        let mut images = Vec::with_capacity(n_cams.min(64));
        for _ in 0..n_cams {
            let height = r.u32("image height")?;
            let width = r.u32("image width")?;
            let Some(n) = height.checked_mul(width).and_then(|n| n.checked_mul(3)) else {
                return r.corrupt(r.pos, "image extents overflow");
            };
            let data = r
                .sized(n, 4, "image data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            images.push(Image { height, width, data });
        }
        let n_classes = r.u32("class count")?;
        let mut maps = Vec::with_capacity(n_classes.min(Class::ALL.len()));
        for _ in 0..n_classes {
            let at = r.pos;
            let id = r.take(1, "class id")?[0];
            let Some(class) = Class::from_id(id) else {
                return r.corrupt(at, format!("unknown class id {id}"));
            };
            let rows = r.u32("map rows")?;
            let cols = r.u32("map cols")?;
            let stride = cols.div_ceil(8);
            let bits = r.sized(rows, stride, "map bits")?;
            let data = (0..rows * cols)
                .map(|i| bits[(i / cols) * stride + (i % cols) / 8] & (0x80 >> (i % cols % 8)) != 0)
                .collect();
            maps.push((class, BevMap { rows, cols, data }));
        }
        let len = r.u32("metadata length")?;
        let at = r.pos;
        let meta: SceneMeta = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| CoreError::Corrupt {
                offset: at,
                reason: format!("sample {k} metadata: {e}"),
            })?;
        samples.push(SceneSample { images, maps, meta });
    }
    if r.pos != buf.len() {
        return r.corrupt(r.pos, format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(samples)
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[SceneSample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(samples)?).map_err(|e| CoreError::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    from_bytes(&buf)
}
