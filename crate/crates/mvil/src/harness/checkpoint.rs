//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "MVIL" | u32 version | u32 config length + config bytes |
//!   u64 step | u32 rng length + rng seed bytes |
//!   per tensor until EOF: u32 name length + name | u32 rank |
//!   rank x u64 dims | numel x f32 values
//!
//! Serialization is canonical: save(load(save(x))) is byte-identical.
//! Parameters are stored in single precision; the training master copy
//! stays in double precision.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::VlModel;
use crate::tensor::ParamStore;

pub const MAGIC: [u8; 4] = *b"MVIL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_kv: String,
    pub step: u64,
    pub rng_seed: Vec<u8>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(
        config_kv: String,
        step: u64,
        rng_seed: Vec<u8>,
        store: &ParamStore,
    ) -> Self {
        let tensors = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    t.shape.clone(),
                    t.values.iter().map(|&v| v as f32).collect(),
                )
            })
            .collect();
        Checkpoint {
            version: VERSION,
            config_kv,
            step,
            rng_seed,
            tensors,
        }
    }

    /// Rebuilds the model from the echoed config and loads the stored
    /// parameter values over it.
    pub fn restore_model(&self) -> Result<VlModel> {
        let run = RunConfig::parse_kv(&self.config_kv)?;
        let mut model = VlModel::new(run.model_config(), 0)?;
        self.apply_to_store(&mut model.store)?;
        Ok(model)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_kv(&self.config_kv)
    }

    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, shape, values) in &self.tensors {
            let t = store.by_name_mut(name)?;
            if &t.shape != shape {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                    t.shape
                )));
            }
            t.values = values.iter().map(|&v| v as f64).collect();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config_kv.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.rng_seed.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        for (name, shape, values) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4, "magic bytes")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                what: format!("unsupported version {version}, expected {VERSION}"),
            });
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg = r.take(cfg_len, "config echo")?;
        let config_kv = String::from_utf8(cfg.to_vec()).map_err(|e| Error::Format {
            offset: 12,
            what: format!("config echo is not utf-8: {e}"),
        })?;
        let step = r.u64("step counter")?;
        let rng_len = r.u32("rng state length")? as usize;
        let rng_seed = r.take(rng_len, "rng state")?.to_vec();
        let mut tensors = Vec::new();
        while !r.at_end() {
            let name_len = r.u32("tensor name length")? as usize;
            let name_off = r.pos;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(
                |e| Error::Format {
                    offset: name_off as u64,
                    what: format!("tensor name is not utf-8: {e}"),
                },
            )?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel, "tensor values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, values));
        }
        Ok(Checkpoint {
            version,
            config_kv,
            step,
            rng_seed,
            tensors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                what: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    Checkpoint::from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_checkpoint() -> Checkpoint {
        let mut store = ParamStore::new();
        store
            .add(
                "w",
                Tensor::from_values(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -2.0])
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        store
            .add("b", Tensor::from_values(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        Checkpoint::from_store("model.d=4\n".into(), 17, vec![9u8; 32], &store)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = toy_checkpoint();
        let bytes = ckpt.to_bytes();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded.to_bytes(), bytes);
        assert_eq!(reloaded, ckpt);
    }

    #[test]
    fn file_size_matches_arithmetic() {
        let ckpt = toy_checkpoint();
        let bytes = ckpt.to_bytes();
        // header: 4 magic + 4 version + (4 + cfg) + 8 step + (4 + rng)
        let header = 4 + 4 + 4 + ckpt.config_kv.len() + 8 + 4 + ckpt.rng_seed.len();
        // tensors: (4 + len(name) + 4 + 8*rank + 4*numel) each
        let w = 4 + 1 + 4 + 8 * 2 + 4 * 6;
        let b = 4 + 1 + 4 + 8 + 4 * 3;
        assert_eq!(bytes.len(), header + w + b);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = toy_checkpoint().to_bytes();
        let cut = bytes.len() - 5;
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        match err {
            Error::Format { offset, what } => {
                assert!(offset > 0, "offset {offset}");
                assert!(what.contains("truncated"), "{what}");
            }
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_and_version_fail() {
        let mut bytes = toy_checkpoint().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
        let mut bytes = toy_checkpoint().to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            Error::Format { offset: 4, .. }
        ));
    }

    #[test]
    fn values_round_trip_at_stored_precision() {
        let ckpt = toy_checkpoint();
        let reloaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        for ((_, _, a), (_, _, b)) in ckpt.tensors.iter().zip(&reloaded.tensors) {
            assert_eq!(a, b);
        }
    }
}
