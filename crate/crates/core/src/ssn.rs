//! Differentiable SLIC: soft k-means over pixel features restricted to each
//! pixel's 3x3 superpixel neighborhood.

use std::sync::Arc;

use log::warn;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::{NeighborhoodIndex, SLOTS};

/// Floor applied to the normalizers `Z_i`.
pub const Z_FLOOR: f64 = 1e-12;

pub const DEFAULT_COMPACTNESS: f64 = 0.5;

/// Iteration result. `q` holds the unnormalized weights `[P, 9]` (zero on
/// invalid slots) and `z` the per-superpixel normalizers `[G]`.
pub struct SsnState<'t, T> {
    pub superpixels: Var<'t, T>,
    pub q: Var<'t, T>,
    pub z: Var<'t, T>,
}

/// Appends `(row, col) / max(H, W) * compactness` to `[H, W, C]` features, giving `[H*W, C+2]`.
pub fn with_position_channels<T: Scalar>(features: &Tensor<T>, compactness: f64) -> Result<Tensor<T>> {
    if features.rank() != 3 {
        return Err(Error::shape("with_position_channels", format!("expected [H, W, C], got {:?}", features.shape())));
    }
    let (h, w, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let norm = h.max(w) as f64;
    let mut data = Vec::with_capacity(h * w * (c + 2));
    for (p, px) in features.data().chunks(c.max(1)).enumerate().take(h * w) {
        data.extend_from_slice(&px[..c]);
        data.push(T::of((p / w) as f64 / norm * compactness));
        data.push(T::of((p % w) as f64 / norm * compactness));
    }
    Tensor::new(vec![h * w, c + 2], data)
}

/// Initial centers: the mean of each superpixel's own patch. `pixels` is `[P, C]`.
pub fn slic_init<'t, T: Scalar>(pixels: Var<'t, T>, index: &NeighborhoodIndex) -> Result<Var<'t, T>> {
    check_pixels(pixels, index)?;
    let owners: Arc<[u32]> = (0..index.n_pixels()).map(|p| index.owner(p) as u32).collect();
    let area = (index.patch_h * index.patch_w) as f64;
    pixels.scatter_add_rows(owners, index.n_superpixels())?.scale(1.0 / area)
}

/// Runs `iters` rounds of `Q_pi = exp(-|I_p - S_i|^2)` followed by
/// `S_i = sum_p Q_pi I_p / Z_i`.
pub fn ssn_iterate<'t, T: Scalar>(
    pixels: Var<'t, T>,
    superpixels: Var<'t, T>,
    index: &NeighborhoodIndex,
    iters: usize,
) -> Result<SsnState<'t, T>> {
    if iters == 0 {
        return Err(Error::config("ssn_iters", "at least one iteration is required"));
    }
    check_pixels(pixels, index)?;
    let tape: &'t Tape<T> = pixels.tape();
    let (npix, g) = (index.n_pixels(), index.n_superpixels());
    let c = pixels.value().last_dim();
    let repeat: Arc<[u32]> = (0..npix * SLOTS).map(|r| (r / SLOTS) as u32).collect();
    let keep: Vec<T> = index.pix_valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    let ones = tape.constant(Tensor::full(vec![g, c], T::one()));
    let pix_rep = pixels.gather_rows(repeat)?;

    let mut s = superpixels;
    let mut state = None;
    for _ in 0..iters {
        let diff = pix_rep.sub(s.gather_rows(index.pix_to_sp.clone())?)?;
        let q = diff.mul(diff)?.sum_last()?.scale(-1.0)?.exp()?.mul_const(&keep)?.reshape(vec![npix * SLOTS, 1])?;
        let z = q.scatter_add_rows(index.pix_to_sp.clone(), g)?;
        let num = q.slot_combine(pix_rep)?.scatter_add_rows(index.pix_to_sp.clone(), g)?;
        if z.value().data().iter().any(|&v| v.to_f64_lossy() < Z_FLOOR) {
            warn!("ssn: superpixel normalizer underflow, applying floor {Z_FLOOR:e}");
        }
        let zb = z.clamp_min(Z_FLOOR)?.slot_combine(ones)?;
        s = num.div(zb)?;
        state = Some((q.reshape(vec![npix, SLOTS])?, z.reshape(vec![g])?));
    }
    let (q, z) = state.expect("iters >= 1");
    Ok(SsnState { superpixels: s, q, z })
}

/// Superpixel id of the strongest valid slot per pixel (ties → lowest slot).
pub fn ssn_hard_labels<T: Scalar>(state: &SsnState<'_, T>, index: &NeighborhoodIndex) -> Vec<u32> {
    let q = state.q.value();
    (0..index.n_pixels())
        .map(|p| {
            let row = &q.data()[p * SLOTS..(p + 1) * SLOTS];
            let mut best: Option<(usize, T)> = None;
            for (k, &v) in row.iter().enumerate() {
                if index.pix_valid[p * SLOTS + k] && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            index.pix_to_sp[p * SLOTS + best.map_or(4, |(k, _)| k)]
        })
        .collect()
}

fn check_pixels<T: Scalar>(pixels: Var<'_, T>, index: &NeighborhoodIndex) -> Result<()> {
    let shape = pixels.shape();
    if shape.len() != 2 || shape[0] != index.n_pixels() {
        return Err(Error::shape("ssn", format!("pixels {shape:?} for {} positions", index.n_pixels())));
    }
    Ok(())
}

/// Runs SSN on an `[H, W, C]` feature map with position channels appended and
/// returns the hard superpixel map.
pub fn segment(
    features: &Tensor<f64>,
    grid_h: usize,
    grid_w: usize,
    compactness: f64,
    iters: usize,
) -> Result<Vec<u32>> {
    let (h, w) = (features.shape()[0], features.shape()[1]);
    let cfg = crate::tokenizer::GridConfig { grid_h, grid_w, n_layers: 1, n_heads: 1, channels: 1 };
    let index = NeighborhoodIndex::build(h, w, &cfg)?;
    let tape = Tape::new();
    let pixels = tape.constant(with_position_channels(features, compactness)?);
    let s0 = slic_init(pixels, &index)?;
    let state = ssn_iterate(pixels, s0, &index, iters)?;
    Ok(ssn_hard_labels(&state, &index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::GridConfig;

    fn index(fh: usize, fw: usize, gh: usize, gw: usize) -> NeighborhoodIndex {
        NeighborhoodIndex::build(fh, fw, &GridConfig { grid_h: gh, grid_w: gw, n_layers: 1, n_heads: 1, channels: 1 })
            .unwrap()
    }

    #[test]
    fn constant_features_give_unit_weights_and_equal_centers() {
        let idx = index(4, 4, 2, 2);
        let tape = Tape::<f64>::new();
        let px = tape.constant(Tensor::full(vec![16, 3], 0.3));
        let s0 = slic_init(px, &idx).unwrap();
        assert!(s0.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let st = ssn_iterate(px, s0, &idx, 1).unwrap();
        for (q, &ok) in st.q.value().data().iter().zip(&idx.pix_valid) {
            assert_eq!(*q, if ok { 1.0 } else { 0.0 });
        }
        assert!(st.superpixels.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn singleton_patches_reshape_the_map() {
        let idx = index(3, 2, 3, 2);
        let tape = Tape::<f64>::new();
        let px = tape.constant(Tensor::from_fn(vec![6, 2], |i| i as f64));
        assert_eq!(slic_init(px, &idx).unwrap().value().data(), px.value().data());
    }

    #[test]
    fn far_apart_singletons_attract_themselves() {
        let idx = index(2, 2, 2, 2);
        let tape = Tape::<f64>::new();
        let px = tape.constant(Tensor::from_fn(vec![4, 1], |i| 10.0 * i as f64));
        let st = ssn_iterate(px, slic_init(px, &idx).unwrap(), &idx, 3).unwrap();
        let labels = ssn_hard_labels(&st, &idx);
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert!(st.superpixels.value().max_abs_diff(&px.to_tensor()) < 1e-12);
    }

    #[test]
    fn uniform_row_breaks_ties_to_slot_zero() {
        let idx = index(3, 3, 3, 3);
        let tape = Tape::<f64>::new();
        let px = tape.constant(Tensor::full(vec![9, 1], 1.0));
        let st = ssn_iterate(px, slic_init(px, &idx).unwrap(), &idx, 1).unwrap();
        let labels = ssn_hard_labels(&st, &idx);
        // Centre pixel: all nine slots valid and equal, slot 0 is superpixel 0.
        assert_eq!(labels[4], 0);
        // Corner pixel (0,0): first valid slot is its own cell.
        assert_eq!(labels[0], 0);
        assert_eq!(labels[8], 4);
    }

    #[test]
    fn position_channels_are_scaled_by_the_longer_side() {
        let f = Tensor::<f64>::zeros(vec![2, 4, 1]);
        let t = with_position_channels(&f, 0.5).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        assert_eq!(&t.data()[7 * 3..], &[0.0, 0.125, 0.375]);
    }
}
