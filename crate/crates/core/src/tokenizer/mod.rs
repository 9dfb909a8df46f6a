//! Superpixel tokenization by local dual-path cross-attention.
//!
//! Superpixel tokens attend to the pixels of their 3x3-patch window while each
//! pixel attends to its 9 neighboring superpixels. Both paths read the state of
//! the previous layer and update residually.

mod index;

pub use index::{slot_offset, NeighborhoodIndex, SLOTS};

use std::sync::Arc;

use crate::autodiff::{concat_cols, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{layer_norm, linear, BoundParams, Init, ParamStore};

/// Superpixel grid and attention sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub channels: usize,
}

impl GridConfig {
    /// Pixels per superpixel patch `(h, w)` for a feature map of the given size.
    pub fn patch_size(&self, feat_h: usize, feat_w: usize) -> Result<(usize, usize)> {
        if self.grid_h == 0 || !feat_h.is_multiple_of(self.grid_h) || feat_h < self.grid_h {
            return Err(Error::config("grid_h", format!("{} does not divide feature height {feat_h}", self.grid_h)));
        }
        if self.grid_w == 0 || !feat_w.is_multiple_of(self.grid_w) || feat_w < self.grid_w {
            return Err(Error::config("grid_w", format!("{} does not divide feature width {feat_w}", self.grid_w)));
        }
        Ok((feat_h / self.grid_h, feat_w / self.grid_w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.n_heads == 0 || !self.channels.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "tok_heads",
                format!("{} heads do not divide {} channels", self.n_heads, self.channels),
            ));
        }
        Ok(())
    }

    pub fn n_superpixels(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Behavioural switches for the tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerOptions {
    /// Scale attention logits by `1/sqrt(head_dim)`.
    pub scale_logits: bool,
    /// Add position embeddings to the query/key inputs of every layer, on top
    /// of the one-time addition to the layer-0 inputs.
    pub pos_every_layer: bool,
    /// Layer-normalize each path's input before projecting.
    pub pre_norm: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        TokenizerOptions { scale_logits: true, pos_every_layer: true, pre_norm: false }
    }
}

/// Extent of a learned position embedding for a feature axis of length `n`:
/// a quarter of `n` when `n >= 4`, else full resolution.
pub fn pos_embed_extent(n: usize) -> usize {
    if n >= 4 {
        n / 4
    } else {
        n
    }
}

pub const POS_PIXEL: &str = "tokenizer.pos.pixel";
pub const POS_SUPERPIXEL: &str = "tokenizer.pos.superpixel";
pub const QUERIES: &str = "tokenizer.queries";

/// Parameter names of one layer's projections.
const PROJECTIONS: [&str; 6] = ["sp_q", "px_k", "px_v", "px_q", "sp_k", "sp_v"];

/// Creates the position embedding parameters at reduced resolution.
///
/// Returns `(pixel_pe, superpixel_pe)`, shaped `[qh, qw, C]`.
pub fn init_position_embeddings(
    cfg: &GridConfig,
    feat_h: usize,
    feat_w: usize,
    init: &mut Init<'_>,
) -> (Tensor<f32>, Tensor<f32>) {
    let c = cfg.channels;
    let pixel = init.normal(vec![pos_embed_extent(feat_h), pos_embed_extent(feat_w), c], 0.02);
    let superpixel = init.normal(vec![pos_embed_extent(cfg.grid_h), pos_embed_extent(cfg.grid_w), c], 0.02);
    (pixel, superpixel)
}

pub fn init_params(
    cfg: &GridConfig,
    opts: &TokenizerOptions,
    feat_h: usize,
    feat_w: usize,
    store: &mut ParamStore<f32>,
    init: &mut Init<'_>,
) {
    let c = cfg.channels;
    store.insert(QUERIES, init.normal(vec![cfg.grid_h, cfg.grid_w, c], 0.02));
    let (pixel, superpixel) = init_position_embeddings(cfg, feat_h, feat_w, init);
    store.insert(POS_PIXEL, pixel);
    store.insert(POS_SUPERPIXEL, superpixel);
    for t in 0..cfg.n_layers {
        for proj in PROJECTIONS {
            init.linear(store, &format!("tokenizer.layer{t}.{proj}"), c, c);
        }
        if opts.pre_norm {
            init.norm(store, &format!("tokenizer.layer{t}.sp_norm"), c);
            init.norm(store, &format!("tokenizer.layer{t}.px_norm"), c);
        }
    }
}

/// Upsamples a reduced-resolution embedding to `[h * w, C]`.
pub fn expand_position_embedding<'t, T: Scalar>(pe: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let shape = pe.shape();
    let full = if shape[0] == h && shape[1] == w { pe } else { pe.bilinear_resize(h, w)? };
    full.reshape(vec![h * w, shape[2]])
}

/// Output of a multi-head local attention, with per-head weights `[Nq, L]`.
pub struct AttentionOutput<'t, T> {
    pub out: Var<'t, T>,
    pub weights: Vec<Var<'t, T>>,
}

/// Multi-head attention where query `n` attends to key rows `nbr[n*L .. n*L+L]`.
///
/// Invalid slots are masked additively before the softmax.
#[allow(clippy::too_many_arguments)]
pub fn local_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    nbr: &Arc<[u32]>,
    valid: &[bool],
    slots: usize,
    heads: usize,
    scale_logits: bool,
) -> Result<AttentionOutput<'t, T>> {
    let c = q.value().last_dim();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::config("heads", format!("{heads} heads for {c} channels")));
    }
    let dh = c / heads;
    let kg = k.gather_rows(nbr.clone())?;
    let vg = v.gather_rows(nbr.clone())?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.slice_cols(h * dh, dh)?, kg.slice_cols(h * dh, dh)?, vg.slice_cols(h * dh, dh)?);
        let mut logits = qh.slot_dot(kh, slots)?;
        if scale_logits {
            logits = logits.scale(1.0 / (dh as f64).sqrt())?;
        }
        let attn = logits.softmax(1, Some(valid))?;
        outs.push(attn.slot_combine(vh)?);
        weights.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { concat_cols(&outs)? };
    Ok(AttentionOutput { out, weights })
}

/// State carried between tokenizer layers: superpixels `[G, C]`, pixels `[P, C]`.
#[derive(Clone, Copy)]
pub struct DualState<'t, T> {
    pub superpixels: Var<'t, T>,
    pub pixels: Var<'t, T>,
}

/// Position embeddings at feature resolution, `[G, C]` and `[P, C]`.
#[derive(Clone, Copy)]
pub struct PositionEmbeddings<'t, T> {
    pub superpixel: Var<'t, T>,
    pub pixel: Var<'t, T>,
}

/// Per-path attention weights of one layer, for inspection.
pub struct LayerAttention<'t, T> {
    pub superpixel_path: Vec<Var<'t, T>>,
    pub pixel_path: Vec<Var<'t, T>>,
}

/// One local dual-path cross-attention layer.
pub fn dual_path_layer<'t, T: Scalar>(
    state: DualState<'t, T>,
    index: &NeighborhoodIndex,
    p: &BoundParams<'t, T>,
    layer: usize,
    cfg: &GridConfig,
    opts: &TokenizerOptions,
    pos: Option<PositionEmbeddings<'t, T>>,
) -> Result<(DualState<'t, T>, LayerAttention<'t, T>)> {
    let name = |proj: &str| format!("tokenizer.layer{layer}.{proj}");
    let (s, i) = (state.superpixels, state.pixels);
    let (sn, pn) =
        if opts.pre_norm { (layer_norm(p, &name("sp_norm"), s)?, layer_norm(p, &name("px_norm"), i)?) } else { (s, i) };
    let (s_qk, p_qk) = match pos {
        Some(pe) => (sn.add(pe.superpixel)?, pn.add(pe.pixel)?),
        None => (sn, pn),
    };

    let sp_path = local_attention(
        linear(p, &name("sp_q"), s_qk)?,
        linear(p, &name("px_k"), p_qk)?,
        linear(p, &name("px_v"), pn)?,
        &index.sp_to_pix,
        &index.sp_valid,
        index.window(),
        cfg.n_heads,
        opts.scale_logits,
    )?;
    let px_path = local_attention(
        linear(p, &name("px_q"), p_qk)?,
        linear(p, &name("sp_k"), s_qk)?,
        linear(p, &name("sp_v"), sn)?,
        &index.pix_to_sp,
        &index.pix_valid,
        SLOTS,
        cfg.n_heads,
        opts.scale_logits,
    )?;
    let next = DualState { superpixels: s.add(sp_path.out)?, pixels: i.add(px_path.out)? };
    Ok((next, LayerAttention { superpixel_path: sp_path.weights, pixel_path: px_path.weights }))
}

/// Learned queries and pixel features with their embeddings added once.
pub fn initial_state<'t, T: Scalar>(
    hypercolumn: Var<'t, T>,
    p: &BoundParams<'t, T>,
    cfg: &GridConfig,
) -> Result<(DualState<'t, T>, PositionEmbeddings<'t, T>)> {
    let shape = hypercolumn.shape();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(Error::config("channels", format!("hypercolumn {shape:?} vs {} channels", cfg.channels)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let pos = PositionEmbeddings {
        superpixel: expand_position_embedding(p.get(POS_SUPERPIXEL)?, cfg.grid_h, cfg.grid_w)?,
        pixel: expand_position_embedding(p.get(POS_PIXEL)?, h, w)?,
    };
    let queries = p.get(QUERIES)?.reshape(vec![cfg.n_superpixels(), c])?;
    let state = DualState {
        superpixels: queries.add(pos.superpixel)?,
        pixels: hypercolumn.reshape(vec![h * w, c])?.add(pos.pixel)?,
    };
    Ok((state, pos))
}

/// Runs all tokenizer layers on a `[H8, W8, C]` hypercolumn.
///
/// Returns the final superpixel `[G, C]` and pixel `[P, C]` features.
pub fn tokenize<'t, T: Scalar>(
    hypercolumn: Var<'t, T>,
    index: &NeighborhoodIndex,
    p: &BoundParams<'t, T>,
    cfg: &GridConfig,
    opts: &TokenizerOptions,
) -> Result<DualState<'t, T>> {
    if cfg.n_layers == 0 {
        return Err(Error::config("tok_layers", "at least one tokenizer layer is required"));
    }
    let (mut state, pos) = initial_state(hypercolumn, p, cfg)?;
    let layer_pos = opts.pos_every_layer.then_some(pos);
    for t in 0..cfg.n_layers {
        state = dual_path_layer(state, index, p, t, cfg, opts, layer_pos)?.0;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng;

    fn setup(cfg: &GridConfig, opts: &TokenizerOptions, fh: usize, fw: usize, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(seed, rng::stream::PARAM_INIT);
        init_params(cfg, opts, fh, fw, &mut store, &mut Init { rng: &mut r });
        store
    }

    #[test]
    fn position_embedding_extent_is_quarter_resolution() {
        let cfg = GridConfig { grid_h: 4, grid_w: 8, n_layers: 1, n_heads: 1, channels: 4 };
        let store = setup(&cfg, &TokenizerOptions::default(), 16, 32, 0);
        assert_eq!(store.get(POS_PIXEL).unwrap().shape(), &[4, 8, 4]);
        assert_eq!(store.get(POS_SUPERPIXEL).unwrap().shape(), &[1, 2, 4]);
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let up = expand_position_embedding(p.get(POS_PIXEL).unwrap(), 16, 32).unwrap();
        assert_eq!(up.shape(), vec![512, 4]);
        assert_eq!(pos_embed_extent(3), 3);
    }

    #[test]
    fn constant_embedding_upsamples_to_constant() {
        let tape = Tape::<f64>::new();
        let pe = tape.constant(Tensor::full(vec![2, 3, 2], 0.25));
        let up = expand_position_embedding(pe, 8, 12).unwrap();
        assert!(up.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_value_projections_are_identity() {
        let cfg = GridConfig { grid_h: 2, grid_w: 2, n_layers: 3, n_heads: 2, channels: 4 };
        let opts = TokenizerOptions::default();
        let mut store = setup(&cfg, &opts, 4, 4, 1);
        for (name, t) in store.iter_mut() {
            if name.contains("_v.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::<f32>::new();
        let p = store.bind_frozen(&tape);
        let index = NeighborhoodIndex::build(4, 4, &cfg).unwrap();
        let hc = tape.constant(Tensor::from_fn(vec![4, 4, 4], |i| (i as f32).sin()));
        let (init_state, _) = initial_state(hc, &p, &cfg).unwrap();
        let out = tokenize(hc, &index, &p, &cfg, &opts).unwrap();
        assert_eq!(out.superpixels.value().data(), init_state.superpixels.value().data());
        assert_eq!(out.pixels.value().data(), init_state.pixels.value().data());
    }

    #[test]
    fn single_superpixel_adds_its_value_to_every_pixel() {
        let cfg = GridConfig { grid_h: 1, grid_w: 1, n_layers: 1, n_heads: 1, channels: 3 };
        let opts = TokenizerOptions { pos_every_layer: false, ..Default::default() };
        let store = setup(&cfg, &opts, 2, 2, 2);
        let tape = Tape::<f64>::new();
        let store = store.cast::<f64>();
        let p = store.bind_frozen(&tape);
        let index = NeighborhoodIndex::build(2, 2, &cfg).unwrap();
        let s = tape.constant(Tensor::from_fn(vec![1, 3], |i| i as f64 * 0.3 - 0.2));
        let i = tape.constant(Tensor::from_fn(vec![4, 3], |k| (k as f64 * 0.7).cos()));
        let (out, att) =
            dual_path_layer(DualState { superpixels: s, pixels: i }, &index, &p, 0, &cfg, &opts, None).unwrap();
        assert!(att.pixel_path[0].value().data().iter().enumerate().all(|(k, &w)| {
            if k % 9 == 4 {
                (w - 1.0).abs() < 1e-15
            } else {
                w == 0.0
            }
        }));
        let vs = linear(&p, "tokenizer.layer0.sp_v", s).unwrap().to_tensor();
        let (iv, ov) = (i.to_tensor(), out.pixels.to_tensor());
        for px in 0..4 {
            for ch in 0..3 {
                let want = iv.data()[px * 3 + ch] + vs.data()[ch];
                assert!((ov.data()[px * 3 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_count_must_divide_channels() {
        let cfg = GridConfig { grid_h: 2, grid_w: 2, n_layers: 1, n_heads: 3, channels: 4 };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "tok_heads"));
    }
}
