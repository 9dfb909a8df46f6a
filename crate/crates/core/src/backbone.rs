//! Stand-in convolutional encoder and hypercolumn fusion.
//!
//! Five stride-2 blocks (conv 3x3, layer norm, GELU). Features are tapped after
//! blocks 1, 3 and 5 (strides 2, 8, 32), projected to the model width, resized
//! to stride 8 and summed.

use crate::autodiff::{Scalar, Var};
use crate::error::{Error, Result};
use crate::params::{layer_norm, linear, BoundParams, Init, ParamStore};

pub const N_BLOCKS: usize = 5;
/// Block indices (0-based) whose outputs feed the hypercolumn.
pub const TAPS: [usize; 3] = [0, 2, 4];
pub const TAP_STRIDES: [usize; 3] = [2, 8, 32];
pub const HYPERCOLUMN_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output width of each of the five blocks.
    pub channels: [usize; N_BLOCKS],
    /// Hypercolumn width, shared by every downstream module.
    pub model_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 3, channels: [16, 32, 64, 128, 256], model_channels: 256 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("enc_channels", "every block needs at least one channel"));
        }
        if self.model_channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        TAPS.map(|b| self.channels[b])
    }
}

/// Checks that an image extent is usable: a positive multiple of 32.
pub fn check_image_dims(height: usize, width: usize) -> Result<()> {
    for (key, v) in [("image_h", height), ("image_w", width)] {
        if v < 32 || v % 32 != 0 {
            return Err(Error::config(key, format!("{v} is not a positive multiple of 32")));
        }
    }
    Ok(())
}

/// Encoder outputs at strides 2, 8 and 32, each `[H/s, W/s, C_s]`.
pub struct EncoderFeatures<'t, T> {
    pub stages: [Var<'t, T>; 3],
}

pub fn init_params(cfg: &BackboneConfig, store: &mut ParamStore<f32>, init: &mut Init<'_>) {
    let mut cin = cfg.in_channels;
    for (b, &cout) in cfg.channels.iter().enumerate() {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        store.insert(format!("backbone.block{b}.conv.w"), init.normal(vec![3, 3, cin, cout], std));
        store.insert(format!("backbone.block{b}.conv.b"), crate::autodiff::Tensor::zeros(vec![cout]));
        init.norm(store, &format!("backbone.block{b}.norm"), cout);
        cin = cout;
    }
    for (j, &c) in cfg.tap_channels().iter().enumerate() {
        init.linear(store, &format!("hypercolumn.proj{j}"), c, cfg.model_channels);
    }
}

/// Runs the encoder on an `[H, W, 3]` image.
pub fn encode<'t, T: Scalar>(
    image: Var<'t, T>,
    p: &BoundParams<'t, T>,
    cfg: &BackboneConfig,
) -> Result<EncoderFeatures<'t, T>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != cfg.in_channels {
        return Err(Error::config(
            "in_channels",
            format!("image of shape {shape:?} does not have {} channels", cfg.in_channels),
        ));
    }
    check_image_dims(shape[0], shape[1])?;
    let mut x = image;
    let mut taps = Vec::with_capacity(3);
    for b in 0..N_BLOCKS {
        x = x
            .conv2d(p.get(&format!("backbone.block{b}.conv.w"))?, 2, 1)?
            .add_bias(p.get(&format!("backbone.block{b}.conv.b"))?)?;
        x = layer_norm(p, &format!("backbone.block{b}.norm"), x)?.gelu()?;
        if TAPS.contains(&b) {
            taps.push(x);
        }
    }
    Ok(EncoderFeatures { stages: [taps[0], taps[1], taps[2]] })
}

/// Projects each stage to the model width, resizes to stride 8 and sums.
pub fn build_hypercolumn<'t, T: Scalar>(
    feats: &EncoderFeatures<'t, T>,
    p: &BoundParams<'t, T>,
    cfg: &BackboneConfig,
) -> Result<Var<'t, T>> {
    let s8 = feats.stages[1].shape();
    let (h8, w8) = (s8[0], s8[1]);
    let mut sum: Option<Var<'t, T>> = None;
    for (j, stage) in feats.stages.iter().enumerate() {
        let name = format!("hypercolumn.proj{j}");
        let w = p.get(&format!("{name}.w"))?;
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        if cin != stage.shape()[2] || cout != cfg.model_channels {
            return Err(Error::config(
                name,
                format!("projection {cin}->{cout} for stage of {} channels", stage.shape()[2]),
            ));
        }
        let branch = hypercolumn_branch(*stage, p, &name, h8, w8)?;
        sum = Some(match sum {
            Some(acc) => acc.add(branch)?,
            None => branch,
        });
    }
    sum.ok_or_else(|| Error::Internal("no encoder stages".into()))
}

/// One branch of the hypercolumn: pointwise projection then resize to `(h8, w8)`.
pub fn hypercolumn_branch<'t, T: Scalar>(
    stage: Var<'t, T>,
    p: &BoundParams<'t, T>,
    name: &str,
    h8: usize,
    w8: usize,
) -> Result<Var<'t, T>> {
    let projected = linear(p, name, stage)?;
    let shape = projected.shape();
    if shape[0] == h8 && shape[1] == w8 {
        Ok(projected)
    } else {
        projected.bilinear_resize(h8, w8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig { in_channels: 3, channels: [4, 4, 6, 6, 8], model_channels: 8 }
    }

    fn params(cfg: &BackboneConfig, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed, rng::stream::PARAM_INIT);
        init_params(cfg, &mut store, &mut Init { rng: &mut r });
        store
    }

    #[test]
    fn stage_sizes_follow_strides() {
        let cfg = small_cfg();
        let store = params(&cfg, 1);
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let img = tape.constant(Tensor::full(vec![64, 128, 3], 0.5));
        let f = encode(img, &p, &cfg).unwrap();
        assert_eq!(f.stages[0].shape(), vec![32, 64, 4]);
        assert_eq!(f.stages[1].shape(), vec![8, 16, 6]);
        assert_eq!(f.stages[2].shape(), vec![2, 4, 8]);
        let hc = build_hypercolumn(&f, &p, &cfg).unwrap();
        assert_eq!(hc.shape(), vec![8, 16, 8]);
    }

    #[test]
    fn rejects_dims_not_divisible_by_32() {
        let cfg = small_cfg();
        let store = params(&cfg, 1);
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let img = tape.constant(Tensor::zeros(vec![48, 64, 3]));
        match encode(img, &p, &cfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "image_h"),
            other => panic!("expected config error, got {:?}", other.err()),
        }
        assert!(matches!(check_image_dims(64, 16), Err(Error::Config { key, .. }) if key == "image_w"));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_stages() {
        let cfg = small_cfg();
        let mut store = params(&cfg, 2);
        // Layer-norm shifts are zero at init; gelu(0) == 0.
        for (name, t) in store.iter_mut() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let img = tape.constant(Tensor::zeros(vec![32, 32, 3]));
        let f = encode(img, &p, &cfg).unwrap();
        for s in &f.stages {
            assert!(s.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_projections_give_zero_hypercolumn() {
        let cfg = small_cfg();
        let mut store = params(&cfg, 3);
        for (name, t) in store.iter_mut() {
            if name.starts_with("hypercolumn.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let img = tape.constant(Tensor::from_fn(vec![32, 32, 3], |i| (i % 7) as f32 / 7.0));
        let f = encode(img, &p, &cfg).unwrap();
        let hc = build_hypercolumn(&f, &p, &cfg).unwrap();
        assert!(hc.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_stride8_branch_passes_stage_through() {
        let cfg = BackboneConfig { in_channels: 3, channels: [4, 4, 8, 6, 5], model_channels: 8 };
        let mut store = params(&cfg, 4);
        for (name, t) in store.iter_mut() {
            if name.starts_with("hypercolumn.") {
                let eye = name == "hypercolumn.proj1.w";
                let cols = t.last_dim();
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                    *v = if eye && i / cols == i % cols { 1.0 } else { 0.0 };
                });
            }
        }
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let img = tape.constant(Tensor::from_fn(vec![64, 64, 3], |i| ((i * 31) % 17) as f32 / 17.0));
        let f = encode(img, &p, &cfg).unwrap();
        let hc = build_hypercolumn(&f, &p, &cfg).unwrap();
        assert_eq!(hc.value().data(), f.stages[1].value().data());
    }
}
