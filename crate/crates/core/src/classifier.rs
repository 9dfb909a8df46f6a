//! Global self-attention over superpixel tokens and the linear class head.

use crate::autodiff::{concat_cols, Scalar, Var};
use crate::error::{Error, Result};
use crate::params::{layer_norm, linear, BoundParams, Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub scale_logits: bool,
    pub pre_norm: bool,
    /// Adds a feed-forward sublayer (expansion 4) after each attention layer.
    pub ffn: bool,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.channels.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "cls_heads",
                format!("{} heads do not divide {} channels", self.n_heads, self.channels),
            ));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least two classes"));
        }
        Ok(())
    }
}

pub fn init_params(cfg: &ClassifierConfig, store: &mut ParamStore<f32>, init: &mut Init<'_>) {
    let c = cfg.channels;
    for l in 0..cfg.n_layers {
        for proj in ["q", "k", "v", "o"] {
            init.linear(store, &format!("classifier.layer{l}.{proj}"), c, c);
        }
        if cfg.pre_norm {
            init.norm(store, &format!("classifier.layer{l}.norm"), c);
        }
        if cfg.ffn {
            init.linear(store, &format!("classifier.layer{l}.ffn1"), c, 4 * c);
            init.linear(store, &format!("classifier.layer{l}.ffn2"), 4 * c, c);
            if cfg.pre_norm {
                init.norm(store, &format!("classifier.layer{l}.ffn_norm"), c);
            }
        }
    }
    init.linear(store, "classifier.head", c, cfg.n_classes);
}

/// Refined features `F` `[T, C]`, class logits `[T, K]` and per-layer attention.
pub struct Classification<'t, T> {
    pub features: Var<'t, T>,
    pub logits: Var<'t, T>,
    /// `attention[layer][head]`, each `[T, T]` with rows summing to one.
    pub attention: Vec<Vec<Var<'t, T>>>,
}

/// Multi-head self-attention over all tokens of `x` `[T, C]`.
pub fn self_attention<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &BoundParams<'t, T>,
    prefix: &str,
    heads: usize,
    scale_logits: bool,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let c = x.value().last_dim();
    let dh = c / heads;
    let q = linear(p, &format!("{prefix}.q"), x)?;
    let k = linear(p, &format!("{prefix}.k"), x)?;
    let v = linear(p, &format!("{prefix}.v"), x)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?);
        let mut logits = qh.matmul(kh.transpose()?)?;
        if scale_logits {
            logits = logits.scale(1.0 / (dh as f64).sqrt())?;
        }
        let attn = logits.softmax(1, None)?;
        outs.push(attn.matmul(vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { concat_cols(&outs)? };
    Ok((linear(p, &format!("{prefix}.o"), merged)?, weights))
}

/// Classifies superpixel tokens `[T, C]`. No positional information is used.
pub fn classify<'t, T: Scalar>(
    tokens: Var<'t, T>,
    p: &BoundParams<'t, T>,
    cfg: &ClassifierConfig,
) -> Result<Classification<'t, T>> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[1] != cfg.channels {
        return Err(Error::shape("classify", format!("tokens {shape:?} for {} channels", cfg.channels)));
    }
    let mut x = tokens;
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let prefix = format!("classifier.layer{l}");
        let inp = if cfg.pre_norm { layer_norm(p, &format!("{prefix}.norm"), x)? } else { x };
        let (upd, w) = self_attention(inp, p, &prefix, cfg.n_heads, cfg.scale_logits)?;
        x = x.add(upd)?;
        attention.push(w);
        if cfg.ffn {
            let inp = if cfg.pre_norm { layer_norm(p, &format!("{prefix}.ffn_norm"), x)? } else { x };
            let hidden = linear(p, &format!("{prefix}.ffn1"), inp)?.gelu()?;
            x = x.add(linear(p, &format!("{prefix}.ffn2"), hidden)?)?;
        }
    }
    let logits = linear(p, "classifier.head", x)?;
    Ok(Classification { features: x, logits, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::rng;

    fn cfg() -> ClassifierConfig {
        ClassifierConfig {
            n_layers: 2,
            n_heads: 2,
            channels: 4,
            n_classes: 3,
            scale_logits: true,
            pre_norm: false,
            ffn: false,
        }
    }

    fn store(cfg: &ClassifierConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut r = rng::seeded(seed, rng::stream::PARAM_INIT);
        init_params(cfg, &mut s, &mut Init { rng: &mut r });
        s.cast()
    }

    #[test]
    fn single_token_with_zero_head_returns_bias() {
        let cfg = cfg();
        let mut s = store(&cfg, 0);
        s.get_mut("classifier.head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        s.get_mut("classifier.head.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        let tok = tape.constant(Tensor::new(vec![1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let out = classify(tok, &p, &cfg).unwrap();
        assert_eq!(out.logits.value().data(), &[0.5, -1.0, 2.0]);
        for layer in &out.attention {
            for w in layer {
                assert_eq!(w.value().data(), &[1.0]);
            }
        }
    }

    #[test]
    fn single_token_layer_adds_projected_value() {
        let cfg = ClassifierConfig { n_layers: 1, ..cfg() };
        let s = store(&cfg, 1);
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        let tok = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.1, 0.7]).unwrap());
        let out = classify(tok, &p, &cfg).unwrap();
        let v = linear(&p, "classifier.layer0.v", tok).unwrap();
        let o = linear(&p, "classifier.layer0.o", v).unwrap();
        let want = tok.add(o).unwrap().to_tensor();
        assert!(out.features.to_tensor().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let cfg = cfg();
        let s = store(&cfg, 2);
        let tape = Tape::new();
        let p = s.bind_frozen(&tape);
        let tok = tape.constant(Tensor::from_fn(vec![6, 4], |i| ((i * 13) % 7) as f64 - 3.0));
        let out = classify(tok, &p, &cfg).unwrap();
        for w in out.attention.iter().flatten() {
            for row in w.value().data().chunks(6) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let bad = ClassifierConfig { n_heads: 3, ..cfg() };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "cls_heads"));
    }
}
