//! Checkpoint container.
//!
//! Two files: `<path>` holds the raw little-endian `f64` data of every
//! tensor back to back, `<path>.manifest` is UTF-8 text:
//!
//! ```text
//! seqrelax-checkpoint 1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>... <byte offset> <element count>
//! ```
//!
//! A rank-0 tensor has shape `-`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::mock::StepRng;

use super::control_variate::{ControlVariateConfig, ControlVariateParams};
use super::discriminator::{DiscriminatorConfig, DiscriminatorParams};
use super::generator::{GeneratorConfig, GeneratorParams};
use super::ParamSet;
use crate::error::{Error, Result};
use crate::ndgraph::Tensor;

const MAGIC: &str = "seqrelax-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn add_params<P: ParamSet + ?Sized>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.params() {
            self.tensors.push((format!("{}.{}", prefix, name), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `prefix.*` tensors into `params`; names and shapes must match.
    pub fn load_into<P: ParamSet + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let names: Vec<&'static str> = params.params().iter().map(|(n, _)| *n).collect();
        for (name, slot) in names.into_iter().zip(params.params_mut()) {
            let key = format!("{}.{}", prefix, name);
            let t = self.get(&key).ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", key)))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    key,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    fn dim(&self, name: &str, axis: usize) -> Result<usize> {
        self.get(name)
            .and_then(|t| t.shape().get(axis).copied())
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {}", name)))
    }

    pub fn generator(&self, prefix: &str) -> Result<GeneratorParams> {
        let cfg = GeneratorConfig {
            vocab: self.dim(&format!("{prefix}.embedding"), 0)?,
            embed: self.dim(&format!("{prefix}.embedding"), 1)?,
            hidden: self.dim(&format!("{prefix}.lstm.w_hidden"), 0)?,
        };
        let mut p = GeneratorParams::init(cfg, &mut StepRng::new(0, 0));
        self.load_into(prefix, &mut p)?;
        Ok(p)
    }

    pub fn discriminator(&self, prefix: &str) -> Result<DiscriminatorParams> {
        let cfg = DiscriminatorConfig {
            vocab: self.dim(&format!("{prefix}.embedding"), 0)?,
            embed: self.dim(&format!("{prefix}.embedding"), 1)?,
            hidden: self.dim(&format!("{prefix}.lstm.w_hidden"), 0)?,
        };
        let mut p = DiscriminatorParams::init(cfg, &mut StepRng::new(0, 0));
        self.load_into(prefix, &mut p)?;
        Ok(p)
    }

    pub fn control_variate(&self, prefix: &str) -> Result<ControlVariateParams> {
        let k = format!("{prefix}.kernel");
        let cfg = ControlVariateConfig { kernel: self.dim(&k, 0)?, vocab: self.dim(&k, 1)?, channels: self.dim(&k, 2)? };
        let mut p = ControlVariateParams::init(cfg, &mut StepRng::new(0, 0));
        self.load_into(prefix, &mut p)?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = format!("{}\n", MAGIC);
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Config(format!("unsupported checkpoint meta entry {:?}", k)));
            }
            manifest.push_str(&format!("meta {} {}\n", k, v));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!("tensor {} {} {} {}\n", name, shape, blob.len(), t.len()));
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, &blob).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let mpath = manifest_path(path);
        fs::write(&mpath, manifest).map_err(|e| Error::io(format!("writing {}", mpath.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let manifest =
            fs::read_to_string(&mpath).map_err(|e| Error::io(format!("reading {}", mpath.display()), e))?;
        let blob = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |line: usize, reason: &str| Error::Malformed { path: mpath.clone(), line, reason: reason.into() };

        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(bad(1, "missing checkpoint header")),
        }
        let mut ckpt = Checkpoint::new();
        for (i, line) in lines {
            let n = i + 1;
            let fields: Vec<&str> = line.splitn(3, ' ').collect();
            match fields.as_slice() {
                ["meta", key, value] => {
                    ckpt.meta.insert(key.to_string(), value.to_string());
                }
                ["tensor", name, rest] => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [shape, offset, count] = parts.as_slice() else {
                        return Err(bad(n, "tensor line needs name, shape, offset, count"));
                    };
                    let shape: Vec<usize> = if *shape == "-" {
                        vec![]
                    } else {
                        shape.split('x').map(str::parse).collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(n, "bad shape"))?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(n, "bad offset"))?;
                    let count: usize = count.parse().map_err(|_| bad(n, "bad count"))?;
                    let end = offset + 8 * count;
                    if end > blob.len() {
                        return Err(bad(n, "tensor extends past end of data file"));
                    }
                    let data = blob[offset..end]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|_| bad(n, "shape does not match count"))?;
                    ckpt.tensors.push((name.to_string(), t));
                }
                [""] => {}
                _ => return Err(bad(n, "unrecognised manifest line")),
            }
        }
        Ok(ckpt)
    }
}
