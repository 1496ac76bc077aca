//! Versioned binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   "GEMSCKPT" (checkpoints) or "GEMSCODE" (codebooks)
//! version        u32       FORMAT_VERSION
//! precision      u8        4 = f32 payloads, 8 = f64 payloads
//! manifest_len   u32
//! manifest       bytes     UTF-8 run manifest (see `crate::manifest`)
//! entry_count    u32
//! entry*:
//!   name_len     u32
//!   name         bytes     UTF-8
//!   rank         u32
//!   extents      rank × u64
//!   payload      product(extents) × (4 | 8) bytes
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::{Precision, Tensor};
use crate::error::{GemsError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GEMSCKPT";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"GEMSCODE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub precision: Precision,
    pub manifest: String,
    pub entries: Vec<(String, Tensor)>,
}

/// Writes to `<path>.tmp` and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode(magic: &[u8; 8], file: &TensorFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(file.precision.code());
    out.extend_from_slice(&(file.manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(file.manifest.as_bytes());
    out.extend_from_slice(&(file.entries.len() as u32).to_le_bytes());
    for (name, t) in &file.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match file.precision {
            Precision::F32 => {
                for &x in t.data() {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GemsError::format(
                self.path,
                format!("truncated at byte offset {}", self.buf.len()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| GemsError::format(self.path, "invalid UTF-8 string"))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8], path: &str) -> Result<TensorFile> {
    let mut c = Cursor { buf: bytes, pos: 0, path };
    if c.take(8)? != magic {
        return Err(GemsError::format(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(GemsError::format(path, format!("unsupported version {version}")));
    }
    let precision = Precision::from_code(c.take(1)?[0])
        .ok_or_else(|| GemsError::format(path, "unknown precision code"))?;
    let manifest = c.string()?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match precision {
            Precision::F32 => c
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64)
                .collect(),
            Precision::F64 => c
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                .collect(),
        };
        entries.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(GemsError::format(path, "trailing bytes"));
    }
    Ok(TensorFile {
        precision,
        manifest,
        entries,
    })
}

pub fn write_file(path: &Path, magic: &[u8; 8], file: &TensorFile) -> Result<()> {
    write_atomic(path, &encode(magic, file))
}

pub fn read_file(path: &Path, magic: &[u8; 8]) -> Result<TensorFile> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(magic, &bytes, &path.display().to_string())
}

pub fn save_params(path: &Path, store: &ParamStore, precision: Precision, manifest: &str) -> Result<()> {
    let file = TensorFile {
        precision,
        manifest: manifest.to_string(),
        entries: store
            .iter_sorted()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect(),
    };
    write_file(path, CHECKPOINT_MAGIC, &file)
}

/// Loads a checkpoint into a store that already holds every named parameter.
pub fn load_params(path: &Path, store: &mut ParamStore) -> Result<TensorFile> {
    let file = read_file(path, CHECKPOINT_MAGIC)?;
    let mut loaded = ParamStore::new(store.seed());
    for (n, t) in &file.entries {
        loaded.insert(n.clone(), t.clone());
    }
    store.load_from(&loaded)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f64_is_exact_and_f32_rounds() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.25, 1e-9, 7.0, -0.3]).unwrap();
        let file = TensorFile {
            precision: Precision::F64,
            manifest: "# test".into(),
            entries: vec![("a.b".into(), t.clone())],
        };
        let bytes = encode(CHECKPOINT_MAGIC, &file);
        assert_eq!(decode(CHECKPOINT_MAGIC, &bytes, "mem").unwrap(), file);

        let f32file = TensorFile {
            precision: Precision::F32,
            ..file.clone()
        };
        let back = decode(CHECKPOINT_MAGIC, &encode(CHECKPOINT_MAGIC, &f32file), "mem").unwrap();
        assert_eq!(back.entries[0].1.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_truncation_and_wrong_magic() {
        let file = TensorFile {
            precision: Precision::F64,
            manifest: String::new(),
            entries: vec![("x".into(), Tensor::scalar(1.0))],
        };
        let bytes = encode(CHECKPOINT_MAGIC, &file);
        assert!(decode(CHECKPOINT_MAGIC, &bytes[..bytes.len() - 3], "mem").is_err());
        assert!(decode(CODEBOOK_MAGIC, &bytes, "mem").is_err());
    }
}
