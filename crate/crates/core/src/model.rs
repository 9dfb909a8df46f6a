//! The full segmentation model: encoder, hypercolumn, tokenizer, classifier
//! and association, composed over one parameter store.

use crate::assoc::{association_logits, hard_assign, unfold, Associator, DensePrediction};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::backbone::{self, BackboneConfig, EncoderFeatures, HYPERCOLUMN_STRIDE, N_BLOCKS};
use crate::classifier::{self, Classification, ClassifierConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Init, ParamStore};
use crate::rng;
use crate::tokenizer::{self, DualState, GridConfig, NeighborhoodIndex, TokenizerOptions};

/// Every architectural knob, flat, in run-config vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub enc_channels: [usize; N_BLOCKS],
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub tok_layers: usize,
    pub tok_heads: usize,
    pub cls_layers: usize,
    pub cls_heads: usize,
    pub n_classes: usize,
    pub attn_scale: bool,
    pub pos_every_layer: bool,
    pub pre_norm: bool,
    pub cls_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            enc_channels: [16, 32, 64, 128, 256],
            channels: 256,
            grid_h: 4,
            grid_w: 4,
            tok_layers: 2,
            tok_heads: 2,
            cls_layers: 4,
            cls_heads: 4,
            n_classes: 4,
            attn_scale: true,
            pos_every_layer: true,
            pre_norm: false,
            cls_ffn: false,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig { in_channels: 3, channels: self.enc_channels, model_channels: self.channels }
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            n_layers: self.tok_layers,
            n_heads: self.tok_heads,
            channels: self.channels,
        }
    }

    pub fn tokenizer_options(&self) -> TokenizerOptions {
        TokenizerOptions {
            scale_logits: self.attn_scale,
            pos_every_layer: self.pos_every_layer,
            pre_norm: self.pre_norm,
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            n_layers: self.cls_layers,
            n_heads: self.cls_heads,
            channels: self.channels,
            n_classes: self.n_classes,
            scale_logits: self.attn_scale,
            pre_norm: self.pre_norm,
            ffn: self.cls_ffn,
        }
    }

    /// Stride-8 feature size.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_h / HYPERCOLUMN_STRIDE, self.image_w / HYPERCOLUMN_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        backbone::check_image_dims(self.image_h, self.image_w)?;
        self.backbone().validate()?;
        let grid = self.grid();
        grid.validate()?;
        if self.tok_layers == 0 {
            return Err(Error::config("tok_layers", "at least one tokenizer layer is required"));
        }
        let (fh, fw) = self.feature_size();
        grid.patch_size(fh, fw)?;
        self.classifier().validate()?;
        if self.n_classes > 255 {
            return Err(Error::config("n_classes", "at most 255 classes (255 is the ignore id)"));
        }
        Ok(())
    }

    /// Fresh parameters drawn from the parameter-init stream of `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed, rng::stream::PARAM_INIT);
        let mut init = Init { rng: &mut r };
        let (fh, fw) = self.feature_size();
        backbone::init_params(&self.backbone(), &mut store, &mut init);
        tokenizer::init_params(&self.grid(), &self.tokenizer_options(), fh, fw, &mut store, &mut init);
        classifier::init_params(&self.classifier(), &mut store, &mut init);
        Ok(store)
    }
}

/// Every intermediate of one forward pass.
pub struct Forward<'t, T> {
    pub encoder: EncoderFeatures<'t, T>,
    pub hypercolumn: Var<'t, T>,
    pub tokens: DualState<'t, T>,
    pub classification: Classification<'t, T>,
    /// Soft association `[H * W, 9]` at input resolution.
    pub association: Var<'t, T>,
    /// Dense logits `[H * W, K]`.
    pub logits: Var<'t, T>,
}

/// A validated configuration with its precomputed neighborhood tables.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub index: NeighborhoodIndex,
    pub associator: Associator,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (fh, fw) = cfg.feature_size();
        let index = NeighborhoodIndex::build(fh, fw, &cfg.grid())?;
        let associator = Associator::new(&index, cfg.image_h, cfg.image_w)?;
        Ok(Model { cfg, index, associator })
    }

    pub fn encode<'t, T: Scalar>(&self, image: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<EncoderFeatures<'t, T>> {
        let shape = image.shape();
        if shape != [self.cfg.image_h, self.cfg.image_w, 3] {
            return Err(Error::shape(
                "model",
                format!("image {shape:?} for a {}x{} model", self.cfg.image_h, self.cfg.image_w),
            ));
        }
        backbone::encode(image, p, &self.cfg.backbone())
    }

    pub fn hypercolumn<'t, T: Scalar>(
        &self,
        feats: &EncoderFeatures<'t, T>,
        p: &BoundParams<'t, T>,
    ) -> Result<Var<'t, T>> {
        backbone::build_hypercolumn(feats, p, &self.cfg.backbone())
    }

    pub fn tokenize<'t, T: Scalar>(&self, hypercolumn: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<DualState<'t, T>> {
        tokenizer::tokenize(hypercolumn, &self.index, p, &self.cfg.grid(), &self.cfg.tokenizer_options())
    }

    pub fn classify<'t, T: Scalar>(
        &self,
        tokens: DualState<'t, T>,
        p: &BoundParams<'t, T>,
    ) -> Result<Classification<'t, T>> {
        classifier::classify(tokens.superpixels, p, &self.cfg.classifier())
    }

    /// Soft association `[H * W, 9]` and dense logits `[H * W, K]`.
    pub fn associate<'t, T: Scalar>(
        &self,
        tokens: DualState<'t, T>,
        class_logits: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let logits = association_logits(tokens.pixels, tokens.superpixels, &self.index)?;
        let q = self.associator.associate(logits)?;
        let y = unfold(q, class_logits, &self.associator.layout)?;
        Ok((q, y))
    }

    pub fn forward<'t, T: Scalar>(&self, image: Var<'t, T>, p: &BoundParams<'t, T>) -> Result<Forward<'t, T>> {
        let encoder = self.encode(image, p)?;
        let hypercolumn = self.hypercolumn(&encoder, p)?;
        let tokens = self.tokenize(hypercolumn, p)?;
        let classification = self.classify(tokens, p)?;
        let (association, logits) = self.associate(tokens, classification.logits)?;
        Ok(Forward { encoder, hypercolumn, tokens, classification, association, logits })
    }

    /// Inference on an `[H, W, 3]` image: dense prediction and hard superpixel map.
    pub fn predict(&self, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<(DensePrediction<f32>, Vec<u32>)> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.forward(tape.constant(image.clone()), &p)?;
        let dense = DensePrediction::from_logits(
            self.cfg.image_h,
            self.cfg.image_w,
            self.cfg.n_classes,
            out.logits.value().data().to_vec(),
        )?;
        let superpixels = hard_assign(&self.associator.to_map(out.association)?);
        Ok((dense, superpixels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_h: 32,
            image_w: 64,
            enc_channels: [4, 4, 8, 8, 8],
            channels: 8,
            grid_h: 2,
            grid_w: 4,
            tok_layers: 1,
            tok_heads: 2,
            cls_layers: 1,
            cls_heads: 2,
            n_classes: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let params = cfg.init_params(1).unwrap();
        let img = Tensor::from_fn(vec![32, 64, 3], |i| (i % 11) as f32 / 11.0);
        let (dense, sp) = model.predict(&params, &img).unwrap();
        assert_eq!(dense.logits.len(), 32 * 64 * 3);
        assert_eq!(sp.len(), 32 * 64);
        assert!(sp.iter().all(|&s| s < 8));
        assert!(dense.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        assert_eq!(cfg.init_params(5).unwrap(), cfg.init_params(5).unwrap());
        assert_ne!(cfg.init_params(5).unwrap(), cfg.init_params(6).unwrap());
    }

    #[test]
    fn config_errors_name_their_key() {
        let cases = [
            (ModelConfig { image_h: 40, ..tiny() }, "image_h"),
            (ModelConfig { grid_w: 3, ..tiny() }, "grid_w"),
            (ModelConfig { tok_heads: 3, ..tiny() }, "tok_heads"),
            (ModelConfig { cls_heads: 5, ..tiny() }, "cls_heads"),
            (ModelConfig { tok_layers: 0, ..tiny() }, "tok_layers"),
            (ModelConfig { n_classes: 1, ..tiny() }, "n_classes"),
        ];
        for (cfg, key) in cases {
            match Model::new(cfg) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("expected config error for {key}, got {:?}", other.err()),
            }
        }
    }
}
