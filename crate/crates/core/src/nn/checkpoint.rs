//! Versioned binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "TEECKPT\0"
//! version   u32       1
//! manifest  u64 length followed by UTF-8 JSON
//!           { "meta": any, "tensors": [ { "name", "kind", "shape", "offset" } ] }
//! data      f64 values of every tensor in manifest order, row-major
//! ```
//!
//! `offset` counts f64 elements from the start of the data section. Values are
//! stored as raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Module, Tensor, TensorKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TEECKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: manifest plus tensors keyed by name.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<TensorEntry>,
    tensors: BTreeMap<String, Tensor>,
    path: std::path::PathBuf,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fills every tensor of `module` (under `prefix`) from the checkpoint.
    /// Missing names and shape disagreements are errors.
    pub fn load_into(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, _, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                Some(src) if src.shape() == t.shape() => t.assign(src),
                Some(src) => {
                    err = Some(format!("tensor {name}: stored shape {:?}, expected {:?}", src.shape(), t.shape()))
                }
                None => err = Some(format!("tensor {name} missing")),
            }
        });
        match err {
            Some(message) => Err(Error::Checkpoint {
                path: self.path.clone(),
                message,
            }),
            None => Ok(()),
        }
    }
}

/// Writes the named modules into one checkpoint file.
pub fn write_checkpoint(path: &Path, modules: &[(&str, &dyn Module)], meta: serde_json::Value) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (prefix, m) in modules {
        m.visit(prefix, &mut |name, kind, t| {
            entries.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for v in t.iter() {
                data.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        });
    }
    let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: "duplicate tensor names".into(),
        });
    }
    let manifest = serde_json::to_vec(&Manifest { meta, tensors: entries })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |message: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mend = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..mend])?;
    let data = &bytes[mend..];
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > data.len() {
            return Err(bad(&format!("tensor {} runs past end of file", e.name)));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::from_shape_vec(e.shape.clone(), values).map_err(|err| bad(&err.to_string()))?;
        tensors.insert(e.name.clone(), t);
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        entries: manifest.tensors,
        tensors,
        path: path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{state_digest, BatchNorm2d, Conv2d};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = Conv2d::new(3, 4, 3, 1, 1, true, 1.0, &mut rng);
        let mut bn = BatchNorm2d::new(4);
        bn.running_var[[2]] = 0.123456789012345;
        write_checkpoint(&path, &[("conv", &conv), ("bn", &bn)], serde_json::json!({"v": 1})).unwrap();

        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.meta["v"], 1);
        assert_eq!(ck.entries.len(), 6);
        assert_eq!(ck.entries[0].name, "conv.weight");
        assert_eq!(ck.entries[0].shape, vec![4, 3, 3, 3]);
        let mut conv2 = Conv2d::zeros(3, 4, 3, 1, 1, true);
        let mut bn2 = BatchNorm2d::new(4);
        ck.load_into("conv", &mut conv2).unwrap();
        ck.load_into("bn", &mut bn2).unwrap();
        assert_eq!(state_digest(&conv), state_digest(&conv2));
        assert_eq!(state_digest(&bn), state_digest(&bn2));

        let mut wrong = Conv2d::zeros(3, 5, 3, 1, 1, true);
        assert!(ck.load_into("conv", &mut wrong).is_err());
        assert!(ck.load_into("other", &mut conv2).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
