//! `key=value` run configuration with a fixed schema.

use std::fmt::Write as _;
use std::path::Path;

use spx_core::model::ModelConfig;
use spx_core::pipeline::TrainConfig;
use spx_core::ssn::DEFAULT_COMPACTNESS;
use spx_core::{Error, Result};

/// Everything a run needs, built from defaults, a config file and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub compactness: f64,
    pub ssn_iters: usize,
    /// Synthetic data sizes used when no dataset directory is given.
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            compactness: DEFAULT_COMPACTNESS,
            ssn_iters: 10,
            train_count: 512,
            val_count: 128,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "image_h",
    "image_w",
    "enc_channels",
    "channels",
    "grid_h",
    "grid_w",
    "tok_layers",
    "tok_heads",
    "cls_layers",
    "cls_heads",
    "n_classes",
    "attn_scale",
    "pos_every_layer",
    "pre_norm",
    "cls_ffn",
    "compactness",
    "ssn_iters",
    "base_lr",
    "warmup_steps",
    "total_steps",
    "weight_decay",
    "backbone_lr_mult",
    "topk_frac",
    "batch_size",
    "seed",
    "poly_power",
    "eval_interval",
    "train_count",
    "val_count",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("`{value}` is not a boolean"))),
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse(key, value)?;
    if !v.is_finite() {
        return Err(Error::config(key, format!("`{value}` is not finite")));
    }
    Ok(v)
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_h" => m.image_h = parse(key, value)?,
            "image_w" => m.image_w = parse(key, value)?,
            "enc_channels" => {
                let parts: Vec<usize> = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                m.enc_channels =
                    parts.try_into().map_err(|_| Error::config(key, "expected five comma-separated widths"))?;
            }
            "channels" => m.channels = parse(key, value)?,
            "grid_h" => m.grid_h = parse(key, value)?,
            "grid_w" => m.grid_w = parse(key, value)?,
            "tok_layers" => m.tok_layers = parse(key, value)?,
            "tok_heads" => m.tok_heads = parse(key, value)?,
            "cls_layers" => m.cls_layers = parse(key, value)?,
            "cls_heads" => m.cls_heads = parse(key, value)?,
            "n_classes" => m.n_classes = parse(key, value)?,
            "attn_scale" => m.attn_scale = parse_bool(key, value)?,
            "pos_every_layer" => m.pos_every_layer = parse_bool(key, value)?,
            "pre_norm" => m.pre_norm = parse_bool(key, value)?,
            "cls_ffn" => m.cls_ffn = parse_bool(key, value)?,
            "compactness" => self.compactness = parse_f64(key, value)?,
            "ssn_iters" => self.ssn_iters = parse(key, value)?,
            "base_lr" => t.base_lr = parse_f64(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse_f64(key, value)?,
            "backbone_lr_mult" => t.backbone_lr_mult = parse_f64(key, value)?,
            "topk_frac" => t.topk_frac = parse_f64(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "poly_power" => t.poly_power = parse_f64(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)?;
        }
        Ok(())
    }

    /// Applies one `key=value` string (as given to `--set`).
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) =
            assignment.split_once('=').ok_or_else(|| Error::config(assignment.trim(), "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.compactness >= 0.0) {
            return Err(Error::config("compactness", "must be non-negative"));
        }
        if self.ssn_iters == 0 {
            return Err(Error::config("ssn_iters", "must be positive"));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "image_h" => m.image_h.to_string(),
            "image_w" => m.image_w.to_string(),
            "enc_channels" => m.enc_channels.map(|c| c.to_string()).join(","),
            "channels" => m.channels.to_string(),
            "grid_h" => m.grid_h.to_string(),
            "grid_w" => m.grid_w.to_string(),
            "tok_layers" => m.tok_layers.to_string(),
            "tok_heads" => m.tok_heads.to_string(),
            "cls_layers" => m.cls_layers.to_string(),
            "cls_heads" => m.cls_heads.to_string(),
            "n_classes" => m.n_classes.to_string(),
            "attn_scale" => m.attn_scale.to_string(),
            "pos_every_layer" => m.pos_every_layer.to_string(),
            "pre_norm" => m.pre_norm.to_string(),
            "cls_ffn" => m.cls_ffn.to_string(),
            "compactness" => self.compactness.to_string(),
            "ssn_iters" => self.ssn_iters.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "warmup_steps" => t.warmup_steps.to_string(),
            "total_steps" => t.total_steps.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "backbone_lr_mult" => t.backbone_lr_mult.to_string(),
            "topk_frac" => t.topk_frac.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "poly_power" => t.poly_power.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "train_count" => self.train_count.to_string(),
            "val_count" => self.val_count.to_string(),
            _ => return None,
        })
    }

    /// Full config as `key=value` lines; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("every schema key has a value"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("channels = 32 # narrow\n\nenc_channels=8,8,16,16,16\npre_norm=true\nbase_lr=0.002\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.model.enc_channels, [8, 8, 16, 16, 16]);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let mut cfg = RunConfig::default();
        for (line, key) in [
            ("grid_size=3", "grid_size"),
            ("grid_h=x", "grid_h"),
            ("pre_norm=maybe", "pre_norm"),
            ("enc_channels=1,2", "enc_channels"),
        ] {
            match cfg.apply_assignment(line) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{line}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_key_is_gettable() {
        let cfg = RunConfig::default();
        for k in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }
}
