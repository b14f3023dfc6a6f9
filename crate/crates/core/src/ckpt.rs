//! Binary parameter checkpoints.
//!
//! Layout: magic `"FMCK"`, version `u32` little-endian, then one record per
//! tensor — name length (`u32`), UTF-8 name bytes, rank (`u32`), extents
//! (`u64` each), and the raw little-endian `f64` values — until end of file.
//! Model parameters are stored under their qualified names
//! (`"flow.l0.w"`), so several models plus loose tensors share one file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetworkModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FMCK";
const VERSION: u32 = 1;

/// An ordered set of named tensors bound for (or read from) disk.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("checkpoint already holds '{name}'")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    /// Adds every parameter of `model` under its qualified name.
    pub fn add_model(&mut self, model: &NetworkModel) -> Result<()> {
        for (pname, tensor) in model.params() {
            self.insert(&model.qualified(pname), tensor.clone())?;
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Required-tensor lookup with a descriptive error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Restores every parameter of `model` from this checkpoint; all of them
    /// must be present with matching shapes.
    pub fn apply_to(&self, model: &mut NetworkModel) -> Result<()> {
        let pnames: Vec<String> = model.params().map(|(n, _)| n.to_string()).collect();
        for pname in pnames {
            let stored = self.require(&model.qualified(&pname))?.clone();
            model.set_param(&pname, stored)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &e in tensor.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than its magic".to_string()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                magic, MAGIC
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let mut ckpt = Checkpoint::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read(&mut len_buf)? {
                0 => break,
                4 => {}
                n => {
                    // a partial header may still be completable from the stream
                    r.read_exact(&mut len_buf[n..])
                        .map_err(|_| Error::Format("truncated tensor record".to_string()))?;
                }
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Format("truncated tensor name".to_string()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("tensor name is not UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated values for '{name}'")))?;
                data.push(f64::from_le_bytes(buf));
            }
            ckpt.insert(&name, Tensor::new(&shape, data)?)?;
        }
        Ok(ckpt)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint field".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated checkpoint field".to_string()))?;
    Ok(u64::from_le_bytes(buf))
}
