//! JSON checkpoint of every encoder tensor, named and shaped.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, NUM_OPTIONS};
use super::model::{AdaptedEncoder, Adapter, Backbone, Block, Head, LayerNorm};
use crate::error::{Error, Result};
use crate::types::TypeList;

pub const CHECKPOINT_FORMAT: &str = "smart-kit-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub types: TypeList,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_encoder(enc: &AdaptedEncoder) -> Self {
        let mut tensors: Vec<Tensor> = enc
            .backbone_tensors()
            .into_iter()
            .map(|(name, shape, data)| Tensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        for l in 0..enc.config().layers {
            for (t, name) in enc.types().names().enumerate() {
                let a = enc.adapter(l, t);
                tensors.push(tensor(format!("adapters.{l}.{name}.down"), &a.down));
                tensors.push(vector(format!("adapters.{l}.{name}.down_b"), &a.down_b));
                tensors.push(tensor(format!("adapters.{l}.{name}.up"), &a.up));
                tensors.push(vector(format!("adapters.{l}.{name}.up_b"), &a.up_b));
            }
        }
        tensors.push(tensor("head.w".into(), &enc.head().w));
        tensors.push(vector("head.b".into(), &enc.head().b));
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: enc.config().clone(),
            types: enc.types().clone(),
            tensors,
        }
    }

    /// Rebuilds the encoder; every expected tensor must be present exactly
    /// once with the expected shape.
    pub fn into_encoder(self) -> Result<AdaptedEncoder> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "checkpoint",
                format!("unsupported format {} v{}", self.format, self.version),
            ));
        }
        let cfg = self.config;
        cfg.validate()?;
        let (d, f, n, p, r) = (
            cfg.width,
            cfg.hidden(),
            cfg.num_tokens(),
            cfg.patch_dim(),
            cfg.bottleneck,
        );
        let mut store = Store::new(self.tensors)?;

        let blocks = (0..cfg.layers)
            .map(|l| {
                let k = |s: &str| format!("blocks.{l}.{s}");
                Ok(Block {
                    ln1: LayerNorm {
                        gamma: store.vector(&k("ln1.gamma"), d)?,
                        beta: store.vector(&k("ln1.beta"), d)?,
                    },
                    wq: store.matrix(&k("wq"), d, d)?,
                    bq: store.vector(&k("bq"), d)?,
                    wk: store.matrix(&k("wk"), d, d)?,
                    bk: store.vector(&k("bk"), d)?,
                    wv: store.matrix(&k("wv"), d, d)?,
                    bv: store.vector(&k("bv"), d)?,
                    wo: store.matrix(&k("wo"), d, d)?,
                    bo: store.vector(&k("bo"), d)?,
                    ln2: LayerNorm {
                        gamma: store.vector(&k("ln2.gamma"), d)?,
                        beta: store.vector(&k("ln2.beta"), d)?,
                    },
                    w1: store.matrix(&k("w1"), d, f)?,
                    b1: store.vector(&k("b1"), f)?,
                    w2: store.matrix(&k("w2"), f, d)?,
                    b2: store.vector(&k("b2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let backbone = Backbone {
            patch_w: store.matrix("patch_w", p, d)?,
            patch_b: store.vector("patch_b", d)?,
            pos: store.matrix("pos", n, d)?,
            blocks,
            ln_final: LayerNorm {
                gamma: store.vector("ln_final.gamma", d)?,
                beta: store.vector("ln_final.beta", d)?,
            },
        };
        let adapters = (0..cfg.layers)
            .map(|l| {
                self.types
                    .names()
                    .map(|name| {
                        let k = |s: &str| format!("adapters.{l}.{name}.{s}");
                        Ok(Adapter {
                            down: store.matrix(&k("down"), r, d)?,
                            down_b: store.vector(&k("down_b"), r)?,
                            up: store.matrix(&k("up"), d, r)?,
                            up_b: store.vector(&k("up_b"), d)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head {
            w: store.matrix("head.w", NUM_OPTIONS, d)?,
            b: store.vector("head.b", NUM_OPTIONS)?,
        };
        store.finish()?;
        Ok(AdaptedEncoder::from_parts(
            cfg, self.types, backbone, adapters, head,
        ))
    }
}

fn tensor(name: String, a: &Array2<f64>) -> Tensor {
    Tensor {
        name,
        shape: a.shape().to_vec(),
        data: a.iter().copied().collect(),
    }
}

fn vector(name: String, a: &Array1<f64>) -> Tensor {
    Tensor {
        name,
        shape: vec![a.len()],
        data: a.to_vec(),
    }
}

struct Store(std::collections::BTreeMap<String, Tensor>);

impl Store {
    fn new(tensors: Vec<Tensor>) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for t in tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::invalid(
                    "checkpoint",
                    format!(
                        "tensor `{}`: shape {:?} does not match {} values",
                        t.name,
                        t.shape,
                        t.data.len()
                    ),
                ));
            }
            if let Some(dup) = map.insert(t.name.clone(), t) {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("duplicate tensor `{}`", dup.name),
                ));
            }
        }
        Ok(Self(map))
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::invalid(
                "checkpoint",
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape),
            ));
        }
        Ok(t.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let data = self.take(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.take(name, &[len])?))
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(extra) => Err(Error::invalid(
                "checkpoint",
                format!("unexpected tensor `{extra}`"),
            )),
            None => Ok(()),
        }
    }
}

pub fn save_checkpoint(enc: &AdaptedEncoder, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_encoder(enc))
        .map_err(|e| Error::json("serializing checkpoint", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AdaptedEncoder> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    ckpt.into_encoder()
}
