//! Versioned checkpoint container.
//!
//! Layout: magic `DMCP`, `u32` version, `u32` header length, a TOML header
//! (config, PCA hash, iteration, seed), `u32` array count, then per array:
//! `u32` name length, name, `u32` rank, `u32` dims, `f32` LE data. When the
//! header says so, the Adam first and second moments follow in the same
//! order and with the same shapes as the parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::read_u32;
use crate::error::{Error, Result};
use crate::model::{parameter_layout, ModelConfig};
use crate::params::{Init, ParameterSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DMCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub pca_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub has_moments: bool,
    pub config: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterSet<f32>,
    /// `(first, second)` Adam moments, keyed like `params`.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_array(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.shape().len())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_array(r: &mut impl Read, path: &Path) -> Result<(String, Tensor<f32>)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(bad(format!("array name of {n} bytes")));
    }
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(bad(format!("`{name}` has rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
    let mut bytes = vec![0u8; dims.iter().product::<usize>() * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((name, Tensor::from_vec(&dims, data)))
}

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = toml::to_string(&self.header).map_err(|e| Error::Config(e.to_string()))?;
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            put_u32(&mut w, header.len())?;
            w.write_all(header.as_bytes())?;
            put_u32(&mut w, self.params.len())?;
            for (name, e) in self.params.iter() {
                put_array(&mut w, name, &e.tensor)?;
            }
            if let Some((m, v)) = &self.moments {
                for (name, t) in self.params.names().zip(m.iter()).chain(self.params.names().zip(v.iter())) {
                    put_array(&mut w, name, t)?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint and checks it against the layout its own config implies.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)?;
        let header: CheckpointHeader = std::str::from_utf8(&hbytes)
            .map_err(|e| bad(e.to_string()))
            .and_then(|s| toml::from_str(s).map_err(|e| bad(e.to_string())))?;

        let layout = parameter_layout(&header.config);
        let count = read_u32(&mut r)? as usize;
        let mut params = ParameterSet::new();
        for i in 0..count {
            let (name, t) = get_array(&mut r, path)?;
            let init = layout.get(i).map(|l| l.2.clone()).unwrap_or(Init::Zeros);
            params.insert(name, t, init);
        }
        let moments = if header.has_moments {
            let mut read_all = || -> Result<Vec<Tensor<f32>>> {
                params
                    .iter()
                    .map(|(name, e)| {
                        let (n, t) = get_array(&mut r, path)?;
                        if n != name || t.shape() != e.tensor.shape() {
                            return Err(Error::CheckpointMismatch {
                                name: n,
                                reason: "moment does not mirror its parameter".into(),
                            });
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let m = read_all()?;
            let v = read_all()?;
            Some((m, v))
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let ck = Self { header, params, moments };
        ck.check_config(&ck.header.config)?;
        Ok(ck)
    }

    /// Errors on the first array whose name or shape differs from what `cfg` expects.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = parameter_layout(cfg);
        let mut stored = self.params.iter();
        for (name, shape, _) in &layout {
            match stored.next() {
                None => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        reason: "missing from checkpoint".into(),
                    })
                }
                Some((n, _)) if n != name => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        reason: format!("checkpoint has `{n}` in its place"),
                    })
                }
                Some((_, e)) if e.tensor.shape() != shape.as_slice() => {
                    return Err(Error::CheckpointMismatch {
                        name: name.clone(),
                        reason: format!("shape {:?}, expected {:?}", e.tensor.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some((n, _)) = stored.next() {
            return Err(Error::CheckpointMismatch {
                name: n.to_string(),
                reason: "not part of the expected model".into(),
            });
        }
        Ok(())
    }
}
