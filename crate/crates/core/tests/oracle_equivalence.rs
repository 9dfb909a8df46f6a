//! Library kernels against loop-based reference implementations.

mod oracles;

use std::sync::Arc;

use oracles::{dense_association, dense_attention, max_abs_diff, rng, uniform, Grid};
use rand::Rng;
use spx_core::assoc::{association_logits, unfold, Associator};
use spx_core::autodiff::{Tape, Tensor};
use spx_core::params::{Init, ParamStore};
use spx_core::pipeline::{topk_count, topk_cross_entropy};
use spx_core::rng as spx_rng;
use spx_core::ssn::{slic_init, ssn_iterate};
use spx_core::tokenizer::{
    self, dual_path_layer, DualState, GridConfig, NeighborhoodIndex, PositionEmbeddings, TokenizerOptions,
};

fn rel_close(got: &[f64], want: &[f64], tol: f64) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol * w.abs().max(1.0))
}

fn linear_ref(store: &ParamStore<f64>, name: &str, x: &[f64], c: usize) -> Vec<f64> {
    let w = store.get(&format!("{name}.w")).unwrap();
    let b = store.get(&format!("{name}.b")).unwrap();
    let cout = w.shape()[1];
    let mut y = oracles::matmul(x, w.data(), x.len() / c, c, cout);
    for row in y.chunks_mut(cout) {
        row.iter_mut().zip(b.data()).for_each(|(v, bi)| *v += bi);
    }
    y
}

#[test]
fn bilinear_two_by_two_to_three_by_three() {
    let (a, b, c, d) = (1.0, 2.0, 5.0, -3.0);
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2, 2, 1], vec![a, b, c, d]).unwrap());
    let y = x.bilinear_resize(3, 3).unwrap().to_tensor();
    // Half-pixel centers: output rows/cols sample source 0, 0.5 and 1.
    let want = [a, (a + b) / 2.0, b, (a + c) / 2.0, (a + b + c + d) / 4.0, (b + d) / 2.0, c, (c + d) / 2.0, d];
    assert!(max_abs_diff(y.data(), &want) < 1e-15, "{:?}", y.data());
}

#[test]
fn dual_path_layer_matches_masked_dense_attention() {
    let mut r = rng(2024);
    for case in 0..60 {
        let (gh, gw) = (r.random_range(1..=6), r.random_range(1..=6));
        let (ph, pw) = (r.random_range(1..=4), r.random_range(1..=4));
        let heads = r.random_range(1..=2);
        let c = heads * r.random_range(1..=3);
        let scale = r.random_bool(0.5);
        let with_pos = r.random_bool(0.5);
        let g = Grid { feat_h: gh * ph, feat_w: gw * pw, grid_h: gh, grid_w: gw };
        let cfg = GridConfig { grid_h: gh, grid_w: gw, n_layers: 1, n_heads: heads, channels: c };
        let opts = TokenizerOptions { scale_logits: scale, ..TokenizerOptions::default() };
        let index = NeighborhoodIndex::build(g.feat_h, g.feat_w, &cfg).unwrap();

        let mut store = ParamStore::new();
        let mut pr = spx_rng::seeded(case, spx_rng::stream::PARAM_INIT);
        tokenizer::init_params(&cfg, &opts, g.feat_h, g.feat_w, &mut store, &mut Init { rng: &mut pr });
        let store = store.cast::<f64>();

        let (ng, np) = (g.n_superpixels(), g.n_pixels());
        let s = uniform(&mut r, ng * c, -1.0, 1.0);
        let i = uniform(&mut r, np * c, -1.0, 1.0);
        let pe_s = uniform(&mut r, ng * c, -0.5, 0.5);
        let pe_p = uniform(&mut r, np * c, -0.5, 0.5);

        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let state = DualState {
            superpixels: tape.constant(Tensor::new(vec![ng, c], s.clone()).unwrap()),
            pixels: tape.constant(Tensor::new(vec![np, c], i.clone()).unwrap()),
        };
        let pos = with_pos.then(|| PositionEmbeddings {
            superpixel: tape.constant(Tensor::new(vec![ng, c], pe_s.clone()).unwrap()),
            pixel: tape.constant(Tensor::new(vec![np, c], pe_p.clone()).unwrap()),
        });
        let (next, _) = dual_path_layer(state, &index, &p, 0, &cfg, &opts, pos).unwrap();

        let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
        let (s_qk, p_qk) = if with_pos { (add(&s, &pe_s), add(&i, &pe_p)) } else { (s.clone(), i.clone()) };
        let lin = |name: &str, x: &[f64]| linear_ref(&store, &format!("tokenizer.layer0.{name}"), x, c);
        let sp_upd =
            dense_attention(&lin("sp_q", &s_qk), &lin("px_k", &p_qk), &lin("px_v", &i), c, heads, scale, |n, m| {
                oracles::superpixel_sees_pixel(&g, n, m)
            });
        let px_upd =
            dense_attention(&lin("px_q", &p_qk), &lin("sp_k", &s_qk), &lin("sp_v", &s), c, heads, scale, |n, m| {
                oracles::pixel_sees_superpixel(&g, n, m)
            });
        let want_s = add(&s, &sp_upd);
        let want_p = add(&i, &px_upd);
        assert!(rel_close(next.superpixels.value().data(), &want_s, 1e-5), "case {case}: superpixel path");
        assert!(rel_close(next.pixels.value().data(), &want_p, 1e-5), "case {case}: pixel path");
    }
}

#[test]
fn ssn_matches_brute_force() {
    let mut r = rng(99);
    for case in 0..40 {
        // Half the cases use a 6x6 map on a 2x2 grid, half a 6x6 grid of 2x2 patches.
        let (g, c) = if case % 2 == 0 {
            (Grid { feat_h: 6, feat_w: 6, grid_h: 2, grid_w: 2 }, 3)
        } else {
            (Grid { feat_h: 12, feat_w: 12, grid_h: 6, grid_w: 6 }, 2)
        };
        let iters = r.random_range(1..=5);
        let pixels = uniform(&mut r, g.n_pixels() * c, 0.0, 1.5);
        let cfg = GridConfig { grid_h: g.grid_h, grid_w: g.grid_w, n_layers: 1, n_heads: 1, channels: c };
        let index = NeighborhoodIndex::build(g.feat_h, g.feat_w, &cfg).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![g.n_pixels(), c], pixels.clone()).unwrap());
        let st = ssn_iterate(x, slic_init(x, &index).unwrap(), &index, iters).unwrap();
        let want = oracles::ssn_brute_force(&g, &pixels, c, iters);
        let err = max_abs_diff(st.superpixels.value().data(), &want);
        assert!(err <= 1e-10, "case {case}: {err:e}");
    }
}

#[test]
fn association_is_stochastic_and_unfold_matches_dense_matrix() {
    let mut r = rng(7);
    for case in 0..40 {
        let (gh, gw) = (r.random_range(1..=4), r.random_range(1..=4));
        let (ph, pw) = (r.random_range(1..=3), r.random_range(1..=3));
        let up = if r.random_bool(0.5) { 8 } else { 1 };
        let (fh, fw) = (gh * ph, gw * pw);
        let (h, w) = (fh * up, fw * up);
        let (c, k) = (3, r.random_range(2..=5));
        let g = Grid { feat_h: fh, feat_w: fw, grid_h: gh, grid_w: gw };
        let cfg = GridConfig { grid_h: gh, grid_w: gw, n_layers: 1, n_heads: 1, channels: c };
        let index = NeighborhoodIndex::build(fh, fw, &cfg).unwrap();
        let assoc = Associator::new(&index, h, w).unwrap();

        let tape = Tape::<f64>::new();
        let pix = tape.constant(Tensor::new(vec![fh * fw, c], uniform(&mut r, fh * fw * c, -2.0, 2.0)).unwrap());
        let sps = tape.constant(Tensor::new(vec![gh * gw, c], uniform(&mut r, gh * gw * c, -2.0, 2.0)).unwrap());
        let classes = uniform(&mut r, gh * gw * k, -3.0, 3.0);
        let q = assoc.associate(association_logits(pix, sps, &index).unwrap()).unwrap();
        let qd = q.value().data().to_vec();
        for p in 0..h * w {
            let row = &qd[p * 9..(p + 1) * 9];
            let valid = &assoc.layout.valid[p * 9..(p + 1) * 9];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5, "case {case} pixel {p}: sum {sum}");
            for (v, ok) in row.iter().zip(valid) {
                assert!(*ok || *v == 0.0, "case {case}: invalid slot carries {v}");
                assert!(*v >= 0.0);
            }
        }
        let y =
            unfold(q, tape.constant(Tensor::new(vec![gh * gw, k], classes.clone()).unwrap()), &assoc.layout).unwrap();
        let a = dense_association(&g, h, w, &qd);
        let want = oracles::matmul(&a, &classes, h * w, gh * gw, k);
        assert!(max_abs_diff(y.value().data(), &want) <= 1e-5, "case {case}");
    }
}

#[test]
fn unfold_preserves_a_shared_argmax() {
    let mut r = rng(31);
    let (gh, gw, k) = (3, 4, 4);
    let g = Grid { feat_h: 6, feat_w: 8, grid_h: gh, grid_w: gw };
    let cfg = GridConfig { grid_h: gh, grid_w: gw, n_layers: 1, n_heads: 1, channels: 2 };
    let index = NeighborhoodIndex::build(6, 8, &cfg).unwrap();
    let assoc = Associator::new(&index, 6, 8).unwrap();
    for case in 0..1000 {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::new(vec![48, 9], uniform(&mut r, 48 * 9, -4.0, 4.0)).unwrap());
        let q = assoc.associate(logits).unwrap();
        let p = r.random_range(0..48);
        let cell = g.cell_at(p, 6, 8);
        let target = r.random_range(0..k);
        let mut classes = uniform(&mut r, gh * gw * k, -3.0, 3.0);
        for i in (0..gh * gw).filter(|&i| g.near(cell, i)) {
            let row = &mut classes[i * k..(i + 1) * k];
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row[target] = top + r.random_range(0.01..1.0);
        }
        let y = unfold(q, tape.constant(Tensor::new(vec![gh * gw, k], classes).unwrap()), &assoc.layout).unwrap();
        let yd = y.to_tensor();
        let row = &yd.data()[p * k..(p + 1) * k];
        assert_eq!(spx_core::assoc::argmax(row.iter().copied()), target, "case {case}");
    }
}

fn ce_ref(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

#[test]
fn topk_loss_equals_best_subset_by_enumeration() {
    let mut r = rng(5);
    for case in 0..100 {
        let n = r.random_range(1..=16);
        let k_cls = 3;
        let logits = uniform(&mut r, n * k_cls, -3.0, 3.0);
        let mut labels: Vec<u32> =
            (0..n).map(|_| if r.random_bool(0.2) { 255 } else { r.random_range(0..3) }).collect();
        labels[0] = r.random_range(0..3);
        let frac = r.random_range(0.05..=1.0);
        let labelled: Vec<usize> = (0..n).filter(|&i| labels[i] < 255).collect();
        let k = topk_count(frac, labelled.len());
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << labelled.len()) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let sum: f64 = labelled
                .iter()
                .enumerate()
                .filter(|(j, _)| mask >> j & 1 == 1)
                .map(|(_, &i)| ce_ref(&logits[i * k_cls..(i + 1) * k_cls], labels[i] as usize))
                .sum();
            best = best.max(sum);
        }
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![n, k_cls], logits).unwrap());
        let got = topk_cross_entropy(x, Arc::from(labels), frac).unwrap().item();
        assert!((got - best / k as f64).abs() < 1e-12, "case {case}: {got} vs {}", best / k as f64);
    }
}
