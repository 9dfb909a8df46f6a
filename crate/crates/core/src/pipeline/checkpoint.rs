//! Little-endian binary checkpoints.
//!
//! Layout: magic `SPXF`, format version `u32`, then records of
//! `name_len: u32`, UTF-8 name, `rank: u32`, `rank` extents as `u64`, and the
//! `f32` payload. Optimizer state lives under `opt.`, scalar metadata under
//! `meta.`; everything else is a model parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::AdamW;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"SPXF";
pub const VERSION: u32 = 1;

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const OPT_STEP: &str = "opt.step";
const OPT_SKIPPED: &str = "opt.skipped";
const META: &str = "meta.";
/// Largest counter stored exactly in an `f32` record.
const MAX_EXACT: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
    /// Scalar metadata, without the `meta.` prefix.
    pub meta: BTreeMap<String, f32>,
}

impl Checkpoint {
    pub fn new(params: ParamStore<f32>) -> Self {
        Checkpoint { params, optimizer: None, meta: BTreeMap::new() }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in self.params.iter() {
            if name.starts_with("opt.") || name.starts_with(META) {
                return Err(Error::InvalidArgument(format!("parameter name `{name}` uses a reserved prefix")));
            }
            write_record(&mut out, name, t.shape(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, state) in [(OPT_M, &opt.m), (OPT_V, &opt.v)] {
                for (name, data) in state {
                    write_record(&mut out, &format!("{prefix}{name}"), &[data.len()], data);
                }
            }
            for (name, value) in [(OPT_STEP, opt.step), (OPT_SKIPPED, opt.skipped)] {
                if value >= MAX_EXACT {
                    return Err(Error::InvalidArgument(format!("{name} = {value} is too large to store")));
                }
                write_record(&mut out, name, &[], &[value as f32]);
            }
        }
        for (key, &v) in &self.meta {
            write_record(&mut out, &format!("{META}{key}"), &[], &[v]);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(&bad)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&bad)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut params = ParamStore::new();
        let mut opt: Option<AdamW> = None;
        let mut meta = BTreeMap::new();
        while r.pos < bytes.len() {
            let name_len = r.u32().map_err(&bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(&bad)?)
                .map_err(|_| bad("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32().map_err(&bad)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64().map_err(&bad)?).map_err(|_| bad("extent overflow".into()))?);
            }
            let n =
                shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| bad("size overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("size overflow".into()))?).map_err(&bad)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

            if let Some(key) = name.strip_prefix(META) {
                meta.insert(key.to_string(), scalar(&data).ok_or_else(|| bad(format!("`{name}` is not a scalar")))?);
            } else if let Some(rest) = name.strip_prefix("opt.") {
                let o = opt.get_or_insert_with(AdamW::default);
                if let Some(p) = name.strip_prefix(OPT_M) {
                    o.m.insert(p.to_string(), data);
                } else if let Some(p) = name.strip_prefix(OPT_V) {
                    o.v.insert(p.to_string(), data);
                } else {
                    let v = scalar(&data).ok_or_else(|| bad(format!("`{name}` is not a scalar")))? as u64;
                    match rest {
                        "step" => o.step = v,
                        "skipped" => o.skipped = v,
                        _ => return Err(bad(format!("unknown optimizer record `{name}`"))),
                    }
                }
            } else {
                params.insert(name, Tensor::new(shape, data)?);
            }
        }
        Ok(Checkpoint { params, optimizer: opt, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Records the architecture so the checkpoint can be used on its own.
    pub fn set_model_config(&mut self, cfg: &ModelConfig) {
        for (k, v) in model_config_fields(cfg) {
            self.meta.insert(format!("model.{k}"), v as f32);
        }
    }

    /// Architecture stored by [`Checkpoint::set_model_config`], if any.
    pub fn model_config(&self) -> Option<ModelConfig> {
        let get = |k: &str| self.meta.get(&format!("model.{k}")).map(|&v| v as usize);
        let flag = |k: &str| get(k).map(|v| v != 0);
        Some(ModelConfig {
            image_h: get("image_h")?,
            image_w: get("image_w")?,
            enc_channels: [get("enc0")?, get("enc1")?, get("enc2")?, get("enc3")?, get("enc4")?],
            channels: get("channels")?,
            grid_h: get("grid_h")?,
            grid_w: get("grid_w")?,
            tok_layers: get("tok_layers")?,
            tok_heads: get("tok_heads")?,
            cls_layers: get("cls_layers")?,
            cls_heads: get("cls_heads")?,
            n_classes: get("n_classes")?,
            attn_scale: flag("attn_scale")?,
            pos_every_layer: flag("pos_every_layer")?,
            pre_norm: flag("pre_norm")?,
            cls_ffn: flag("cls_ffn")?,
        })
    }
}

fn model_config_fields(c: &ModelConfig) -> Vec<(&'static str, usize)> {
    vec![
        ("image_h", c.image_h),
        ("image_w", c.image_w),
        ("enc0", c.enc_channels[0]),
        ("enc1", c.enc_channels[1]),
        ("enc2", c.enc_channels[2]),
        ("enc3", c.enc_channels[3]),
        ("enc4", c.enc_channels[4]),
        ("channels", c.channels),
        ("grid_h", c.grid_h),
        ("grid_w", c.grid_w),
        ("tok_layers", c.tok_layers),
        ("tok_heads", c.tok_heads),
        ("cls_layers", c.cls_layers),
        ("cls_heads", c.cls_heads),
        ("n_classes", c.n_classes),
        ("attn_scale", usize::from(c.attn_scale)),
        ("pos_every_layer", usize::from(c.pos_every_layer)),
        ("pre_norm", usize::from(c.pre_norm)),
        ("cls_ffn", usize::from(c.cls_ffn)),
    ]
}

fn scalar(data: &[f32]) -> Option<f32> {
    (data.len() == 1).then(|| data[0])
}

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
