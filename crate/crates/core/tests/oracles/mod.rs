//! Slow, loop-based reference implementations used by the integration and
//! acceptance tests. None of them share code with the library beyond plain
//! data types.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Geometry of a superpixel grid over a feature map.
#[derive(Clone, Copy, Debug)]
pub struct Grid {
    pub feat_h: usize,
    pub feat_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Grid {
    pub fn patch(&self) -> (usize, usize) {
        (self.feat_h / self.grid_h, self.feat_w / self.grid_w)
    }

    pub fn n_pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn n_superpixels(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Grid cell containing pixel `p` of an `h x w` map over the same grid.
    pub fn cell_at(&self, p: usize, h: usize, w: usize) -> (usize, usize) {
        let (y, x) = (p / w, p % w);
        (y / (h / self.grid_h), x / (w / self.grid_w))
    }

    /// Whether superpixel `i` is within one cell (Chebyshev) of `cell`.
    pub fn near(&self, cell: (usize, usize), i: usize) -> bool {
        let (gy, gx) = (i / self.grid_w, i % self.grid_w);
        gy.abs_diff(cell.0) <= 1 && gx.abs_diff(cell.1) <= 1
    }
}

fn softmax_masked(logits: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = logits.iter().zip(allowed).filter(|(_, &a)| a).map(|(&l, _)| l).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(allowed).map(|(&l, &a)| if a { (l - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Dense multi-head attention of every query row over every key row, with keys
/// outside `allowed(query, key)` excluded. Rows are `[N, C]` in row-major order.
pub fn dense_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    c: usize,
    heads: usize,
    scale: bool,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let (nq, nk) = (q.len() / c, k.len() / c);
    let dh = c / heads;
    let mut out = vec![0.0; nq * c];
    for n in 0..nq {
        let mask: Vec<bool> = (0..nk).map(|m| allowed(n, m)).collect();
        for h in 0..heads {
            let logits: Vec<f64> = (0..nk)
                .map(|m| {
                    let dot: f64 = (0..dh).map(|d| q[n * c + h * dh + d] * k[m * c + h * dh + d]).sum();
                    if scale {
                        dot / (dh as f64).sqrt()
                    } else {
                        dot
                    }
                })
                .collect();
            let w = softmax_masked(&logits, &mask);
            for m in 0..nk {
                for d in 0..dh {
                    out[n * c + h * dh + d] += w[m] * v[m * c + h * dh + d];
                }
            }
        }
    }
    out
}

/// Superpixel path: superpixel `i` attends to pixels inside its 3x3-patch window.
pub fn superpixel_sees_pixel(g: &Grid, i: usize, p: usize) -> bool {
    g.near(g.cell_at(p, g.feat_h, g.feat_w), i)
}

/// Pixel path: pixel `p` attends to the superpixels adjacent to its own cell.
pub fn pixel_sees_superpixel(g: &Grid, p: usize, i: usize) -> bool {
    superpixel_sees_pixel(g, i, p)
}

/// SLIC-style soft clustering written directly from its definition.
///
/// `pixels` is `[P, C]` on the `feat_h x feat_w` map; returns the centers
/// `[G, C]` after `iters` updates.
pub fn ssn_brute_force(g: &Grid, pixels: &[f64], c: usize, iters: usize) -> Vec<f64> {
    let (np, ns) = (g.n_pixels(), g.n_superpixels());
    let (ph, pw) = g.patch();
    let mut s = vec![0.0; ns * c];
    for p in 0..np {
        let (cy, cx) = g.cell_at(p, g.feat_h, g.feat_w);
        let i = cy * g.grid_w + cx;
        for d in 0..c {
            s[i * c + d] += pixels[p * c + d] / (ph * pw) as f64;
        }
    }
    for _ in 0..iters {
        let mut next = vec![0.0; ns * c];
        for i in 0..ns {
            let mut z = 0.0;
            let mut acc = vec![0.0; c];
            for p in 0..np {
                if !g.near(g.cell_at(p, g.feat_h, g.feat_w), i) {
                    continue;
                }
                let dist: f64 = (0..c).map(|d| (pixels[p * c + d] - s[i * c + d]).powi(2)).sum();
                let w = (-dist).exp();
                z += w;
                for d in 0..c {
                    acc[d] += w * pixels[p * c + d];
                }
            }
            let z = z.max(1e-12);
            for d in 0..c {
                next[i * c + d] = acc[d] / z;
            }
        }
        s = next;
    }
    s
}

/// Row-stochastic dense association matrix `A [P, G]` built from per-pixel
/// slot weights `q [P, 9]`, where slot `k` names grid offset `(k/3-1, k%3-1)`.
pub fn dense_association(g: &Grid, h: usize, w: usize, q: &[f64]) -> Vec<f64> {
    let ns = g.n_superpixels();
    let mut a = vec![0.0; h * w * ns];
    for p in 0..h * w {
        let (cy, cx) = g.cell_at(p, h, w);
        for k in 0..9 {
            let (r, c) = (cy as isize + k as isize / 3 - 1, cx as isize + k as isize % 3 - 1);
            if (0..g.grid_h as isize).contains(&r) && (0..g.grid_w as isize).contains(&c) {
                a[p * ns + r as usize * g.grid_w + c as usize] += q[p * 9 + k];
            }
        }
    }
    a
}

/// `[m, n] x [n, k]` by triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[i * k + j] = (0..n).map(|t| a[i * n + t] * b[t * k + j]).sum();
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Number of 4-connected components of each label value.
pub fn components_per_label(ids: &[u32], w: usize, h: usize) -> std::collections::BTreeMap<u32, usize> {
    let mut seen = vec![false; ids.len()];
    let mut counts = std::collections::BTreeMap::new();
    for start in 0..ids.len() {
        if seen[start] {
            continue;
        }
        *counts.entry(ids[start]).or_insert(0) += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            for n in nbrs {
                if !seen[n] && ids[n] == ids[p] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
    }
    counts
}
