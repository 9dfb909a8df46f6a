//! Analytic parameter and FLOP accounting per model component.
//!
//! FLOPs are `2 x` multiply-accumulates. Only matrix products, convolutions,
//! attention products and interpolation taps are counted; normalization,
//! activations and softmax are not. The linear class head is counted with
//! association (it feeds unfolding), so the self-attention row covers the
//! MHSA layers alone and is zero for a zero-layer classifier.

use std::fmt::Write as _;

use serde::Serialize;
use spx_core::backbone::{N_BLOCKS, TAPS, TAP_STRIDES};
use spx_core::model::ModelConfig;
use spx_core::tokenizer::{pos_embed_extent, SLOTS};

/// Row names, in report order.
pub const COMPONENTS: [&str; 5] =
    ["Backbone", "Hypercolumn", "Superpixel Tokenization", "Superpixel Self-Attention", "Superpixel Association"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub component: String,
    pub params: u64,
    pub flops: u64,
    /// Median wall time in milliseconds, when benchmarked.
    pub time_ms: Option<f64>,
}

/// Exact non-negative rational, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u128,
    pub den: u128,
}

impl Ratio {
    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total: CostRow,
    /// Benchmark time not attributed to any component (tape setup, parameter binding).
    pub overhead_ms: Option<f64>,
    /// Superpixel tokens `Gh * Gw`.
    pub tokens: u64,
    /// Input pixels `H * W`.
    pub pixels: u64,
    /// `Gh Gw / (H W)`.
    pub spatial_ratio: Ratio,
    /// Superpixel self-attention quadratic term over that of dense pixel
    /// self-attention at the same width: `(Gh Gw / (H W))^2`.
    pub quadratic_ratio: Ratio,
}

impl CostReport {
    /// Recomputes the total row from the component rows.
    pub fn finish_total(&mut self) {
        let time_ms = self.rows.iter().map(|r| r.time_ms).sum::<Option<f64>>();
        self.total = CostRow {
            component: "Total".into(),
            params: self.rows.iter().map(|r| r.params).sum(),
            flops: self.rows.iter().map(|r| r.flops).sum(),
            time_ms,
        };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table. Numbers use the same formatting as the JSON output.
    pub fn to_table(&self) -> String {
        let timed = self.rows.iter().any(|r| r.time_ms.is_some());
        let mut lines: Vec<[String; 4]> =
            vec![["Component".into(), "Params".into(), "FLOPs".into(), "Time (ms)".into()]];
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let t = r.time_ms.map_or_else(|| "-".to_string(), |v| v.to_string());
            lines.push([r.component.clone(), r.params.to_string(), r.flops.to_string(), t]);
        }
        let cols = if timed { 4 } else { 3 };
        let widths: Vec<usize> = (0..cols).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for (i, l) in lines.iter().enumerate() {
            let mut row = format!("{:<w$}", l[0], w = widths[0]);
            for c in 1..cols {
                let _ = write!(row, "  {:>w$}", l[c], w = widths[c]);
            }
            let _ = writeln!(s, "{}", row.trim_end());
            if i == 0 || i == lines.len() - 2 {
                let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            }
        }
        if let Some(o) = self.overhead_ms {
            let _ = writeln!(s, "overhead_ms {o}");
        }
        let _ = writeln!(s, "tokens {} pixels {}", self.tokens, self.pixels);
        let _ = writeln!(
            s,
            "spatial_ratio {}/{} ({})",
            self.spatial_ratio.num,
            self.spatial_ratio.den,
            self.spatial_ratio.value()
        );
        let _ = writeln!(
            s,
            "quadratic_ratio {}/{} ({})",
            self.quadratic_ratio.num,
            self.quadratic_ratio.den,
            self.quadratic_ratio.value()
        );
        s
    }
}

fn linear_params(cin: u64, cout: u64) -> u64 {
    cin * cout + cout
}

/// Analytic cost of one forward pass at the configured image size.
pub fn flops_count(cfg: &ModelConfig) -> CostReport {
    let u = |v: usize| v as u64;
    let (h, w) = (u(cfg.image_h), u(cfg.image_w));
    let c = u(cfg.channels);
    let k = u(cfg.n_classes);
    let (gh, gw) = (u(cfg.grid_h), u(cfg.grid_w));
    let g = gh * gw;
    let (fh, fw) = (h / 8, w / 8);
    let p8 = fh * fw;
    let slots = u(SLOTS);

    // Backbone: conv 3x3 stride 2 blocks with layer norm.
    let (mut bb_params, mut bb_flops) = (0, 0);
    let (mut sh, mut sw, mut cin) = (h, w, 3u64);
    let mut stage_sizes = Vec::new();
    for b in 0..N_BLOCKS {
        let cout = u(cfg.enc_channels[b]);
        (sh, sw) = (sh.div_ceil(2), sw.div_ceil(2));
        bb_flops += 2 * sh * sw * cin * cout * 9;
        bb_params += 9 * cin * cout + cout + 2 * cout;
        if TAPS.contains(&b) {
            stage_sizes.push((sh, sw, cout));
        }
        cin = cout;
    }
    debug_assert_eq!(stage_sizes.len(), TAP_STRIDES.len());

    // Hypercolumn: pointwise projections, then resize to stride 8 (4 taps per output).
    let (mut hc_params, mut hc_flops) = (0, 0);
    for &(sh, sw, cs) in &stage_sizes {
        hc_params += linear_params(cs, c);
        hc_flops += 2 * sh * sw * cs * c;
        if (sh, sw) != (fh, fw) {
            hc_flops += 2 * 4 * p8 * c;
        }
    }

    // Tokenization.
    let window = slots * (fh / gh.max(1)) * (fw / gw.max(1));
    let layers = u(cfg.tok_layers);
    let pe = u(pos_embed_extent(cfg.image_h / 8) * pos_embed_extent(cfg.image_w / 8))
        + u(pos_embed_extent(cfg.grid_h) * pos_embed_extent(cfg.grid_w));
    let mut tok_params = g * c + pe * c + layers * 6 * linear_params(c, c);
    if cfg.pre_norm {
        tok_params += layers * 2 * 2 * c;
    }
    let per_layer = 3 * 2 * g * c * c + 3 * 2 * p8 * c * c // projections
        + 2 * 2 * g * window * c // superpixel path: logits + values
        + 2 * 2 * p8 * slots * c; // pixel path
    let tok_flops = layers * per_layer;

    // Superpixel self-attention.
    let cl = u(cfg.cls_layers);
    let mut sa_layer_params = 4 * linear_params(c, c);
    let mut sa_layer_flops = 4 * 2 * g * c * c + 2 * 2 * g * g * c;
    if cfg.cls_ffn {
        sa_layer_params += linear_params(c, 4 * c) + linear_params(4 * c, c);
        sa_layer_flops += 2 * 2 * g * c * 4 * c;
    }
    if cfg.pre_norm {
        sa_layer_params += 2 * c * if cfg.cls_ffn { 2 } else { 1 };
    }
    let (sa_params, sa_flops) = (cl * sa_layer_params, cl * sa_layer_flops);

    // Association: class head, dot products, slot upsampling, unfolding.
    let as_params = linear_params(c, k);
    let full = h * w;
    let as_flops = 2 * g * c * k + 2 * p8 * slots * c + 2 * 4 * full * slots + 2 * full * slots * k;

    let rows = [
        (bb_params, bb_flops),
        (hc_params, hc_flops),
        (tok_params, tok_flops),
        (sa_params, sa_flops),
        (as_params, as_flops),
    ]
    .iter()
    .zip(COMPONENTS)
    .map(|(&(params, flops), name)| CostRow { component: name.into(), params, flops, time_ms: None })
    .collect();

    // Quadratic terms of one attention layer at width c: tokens vs pixels.
    let quad_sp = 2 * 2 * u128::from(g) * u128::from(g) * u128::from(c);
    let quad_dense = 2 * 2 * u128::from(full) * u128::from(full) * u128::from(c);
    let mut report = CostReport {
        rows,
        total: CostRow { component: "Total".into(), params: 0, flops: 0, time_ms: None },
        overhead_ms: None,
        tokens: g,
        pixels: full,
        spatial_ratio: Ratio::new(u128::from(g), u128::from(full)),
        quadratic_ratio: Ratio::new(quad_sp, quad_dense),
    };
    report.finish_total();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            enc_channels: [4, 8, 8, 8, 8],
            channels: 8,
            tok_heads: 2,
            cls_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_counts_match_initialized_model() {
        for cfg in [small(), ModelConfig { pre_norm: true, cls_ffn: true, ..small() }] {
            let store = cfg.init_params(0).unwrap();
            let report = flops_count(&cfg);
            let by_prefix = |pre: &str| store.num_scalars(pre) as u64;
            assert_eq!(report.rows[0].params, by_prefix("backbone."));
            assert_eq!(report.rows[1].params, by_prefix("hypercolumn."));
            assert_eq!(report.rows[2].params, by_prefix("tokenizer."));
            assert_eq!(report.rows[3].params + report.rows[4].params, by_prefix("classifier."));
            assert_eq!(report.total.params, store.num_scalars("") as u64);
        }
    }

    #[test]
    fn backbone_conv_flops_follow_the_formula() {
        let cfg = small();
        let r = flops_count(&cfg);
        // Oracle: 2 * Ho * Wo * Cin * Cout * 9 per block, written out.
        let want = 2 * 9 * (32 * 32 * 3 * 4 + 16 * 16 * 4 * 8 + 8 * 8 * 8 * 8 + 4 * 4 * 8 * 8 + 2 * 2 * 8 * 8);
        assert_eq!(r.rows[0].flops, want);
    }

    #[test]
    fn zero_classifier_layers_cost_nothing() {
        let r = flops_count(&ModelConfig { cls_layers: 0, ..small() });
        assert_eq!((r.rows[3].flops, r.rows[3].params), (0, 0));
    }

    #[test]
    fn totals_are_row_sums_and_table_matches_json() {
        let r = flops_count(&small());
        assert_eq!(r.total.flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
        let table = r.to_table();
        for row in &r.rows {
            assert!(table.contains(&row.flops.to_string()));
        }
        assert!(table.contains(&r.quadratic_ratio.value().to_string()));
    }

    #[test]
    fn ratios_reduce() {
        let r = Ratio::new(2048, 2_097_152);
        assert_eq!((r.num, r.den), (1, 1024));
    }
}
