use std::sync::Arc;

use super::ops::SparseMap;
use super::tape::Var;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Half-pixel-center source taps for one axis: `(lo, hi, frac)` with the
/// sample at `lo + frac`, clamped to `[0, in_len - 1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize, dst: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    clamped_taps(src, 0, in_len - 1)
}

/// Splits a continuous coordinate, already clamped into `[lo, hi]`, into two taps.
pub fn clamped_taps(src: f64, lo: usize, hi: usize) -> (usize, usize, f64) {
    let src = src.clamp(lo as f64, hi as f64);
    let i0 = (src.floor() as usize).min(hi);
    let i1 = (i0 + 1).min(hi);
    (i0, i1, src - i0 as f64)
}

/// Row map for resizing an `[in_h, in_w, C]` map to `[out_h, out_w, C]`.
pub fn bilinear_map(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SparseMap {
    let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(in_h, out_h, y)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(in_w, out_w, x)).collect();
    let mut map = SparseMap::new(in_h * in_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let taps = [
                (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * in_w + x1, (1.0 - fy) * fx),
                (y1 * in_w + x0, fy * (1.0 - fx)),
                (y1 * in_w + x1, fy * fx),
            ];
            map.push_row(taps.into_iter().filter(|&(_, w)| w != 0.0));
        }
    }
    map
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Bilinear resize of an `[H, W, C]` feature map (half-pixel centers, border clamp).
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::shape("bilinear_resize", format!("expected [H, W, C], got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape("bilinear_resize", format!("{shape:?} -> {out_h}x{out_w}")));
        }
        let map = bilinear_map(shape[0], shape[1], out_h, out_w);
        self.resample(Arc::new(map), vec![out_h, out_w, shape[2]])
    }
}
