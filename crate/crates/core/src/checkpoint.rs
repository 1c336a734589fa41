//! Checkpoint files: `RANC`, a version byte, then named tensor records.
//!
//! Each record is a little-endian `u16` name length, the UTF-8 name and an
//! embedded 64-bit tensor container. Record names are `param/<name>`,
//! `adam.m/<name>`, `adam.v/<name>` and `meta/<field>`.

use std::path::Path;

use crate::config::RunConfig;
use crate::container::{self, DType};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RANC";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Completed epochs. The shuffle stream of the next epoch is derived from
    /// `(config.model.seed, epoch)`, so this is the whole RNG state.
    pub epoch: u64,
}

fn counter(v: u64) -> Result<Tensor> {
    Tensor::vector(vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
}

fn read_counter(t: &Tensor, name: &str) -> Result<u64> {
    match t.data() {
        [hi, lo] if *hi >= 0.0 && *lo >= 0.0 && hi.fract() == 0.0 && lo.fract() == 0.0 => {
            Ok(((*hi as u64) << 32) | (*lo as u64))
        }
        _ => Err(Error::invalid(format!("malformed checkpoint field {name}"))),
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: &Model, optimizer: Adam, epoch: u64) -> Self {
        Self {
            config,
            params: model.params().clone(),
            optimizer,
            epoch,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        let mut record = |name: &str, t: &Tensor| -> Result<()> {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("record name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend(container::encode(t, DType::F64));
            Ok(())
        };
        for (name, t) in self.params.iter() {
            record(&format!("param/{name}"), t)?;
        }
        for (name, t) in self.optimizer.m.iter() {
            record(&format!("adam.m/{name}"), t)?;
        }
        for (name, t) in self.optimizer.v.iter() {
            record(&format!("adam.v/{name}"), t)?;
        }
        let c = &self.optimizer.config;
        record("meta/adam", &Tensor::vector(vec![c.lr, c.beta1, c.beta2, c.eps])?)?;
        record("meta/epoch", &counter(self.epoch)?)?;
        record("meta/step", &counter(self.optimizer.step)?)?;
        record("meta/seed", &counter(self.config.model.seed)?)?;
        let echo: Vec<f64> = self.config.echo().bytes().map(f64::from).collect();
        record("meta/config", &Tensor::vector(echo)?)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported checkpoint version {}", bytes[4]));
        }
        let mut pos = 5;
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        let mut meta = std::collections::BTreeMap::new();
        while pos < bytes.len() {
            if pos + 2 > bytes.len() {
                return Err("truncated record header".into());
            }
            let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
            pos += 2;
            let name = bytes
                .get(pos..pos + len)
                .ok_or("truncated record name")
                .and_then(|b| std::str::from_utf8(b).map_err(|_| "record name is not UTF-8"))?
                .to_string();
            pos += len;
            let (t, used) = container::decode_prefix(&bytes[pos..]).map_err(|e| format!("record {name}: {e}"))?;
            pos += used;
            let (kind, key) = name.split_once('/').ok_or_else(|| format!("bad record name {name}"))?;
            let target = match kind {
                "param" => &mut params,
                "adam.m" => &mut m,
                "adam.v" => &mut v,
                "meta" => {
                    meta.insert(key.to_string(), t);
                    continue;
                }
                _ => return Err(format!("unknown record kind {kind}")),
            };
            target.insert(key, t).map_err(|e| e.to_string())?;
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| format!("missing meta/{k}"));
        let text: String = get("config")?
            .data()
            .iter()
            .map(|&b| char::from(b as u8))
            .collect();
        let config = RunConfig::parse(&text).map_err(|e| format!("embedded config: {e}"))?;
        let adam = get("adam")?.data().to_vec();
        let [lr, beta1, beta2, eps] = adam[..] else {
            return Err("malformed meta/adam".into());
        };
        let epoch = read_counter(get("epoch")?, "epoch").map_err(|e| e.to_string())?;
        let step = read_counter(get("step")?, "step").map_err(|e| e.to_string())?;
        Ok(Self {
            config,
            params,
            optimizer: Adam {
                config: AdamConfig { lr, beta1, beta2, eps },
                m,
                v,
                step,
            },
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::decode(&bytes).map_err(|reason| Error::Decode {
            path: path.to_path_buf(),
            reason,
        })?;
        ck.model()?;
        Ok(ck)
    }
}
