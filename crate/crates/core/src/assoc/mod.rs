//! Pixel/superpixel association, unfolding of superpixel logits to dense
//! logits, hard assignment and overlay rendering.
//!
//! Slot `k` of a pixel always refers to the superpixel at grid offset
//! [`slot_offset`]`(k)` from the pixel's own cell, at every resolution.

mod overlay;

pub use overlay::{boundary_mask, colorize_labels, overlay_boundaries, Palette, BOUNDARY_COLOR};

use std::sync::Arc;

use crate::autodiff::clamped_taps;
use crate::autodiff::{Scalar, SparseMap, Var, MASK_NEG};
use crate::error::{Error, Result};
use crate::tokenizer::{slot_offset, NeighborhoodIndex, SLOTS};

/// Slot → superpixel table at some output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLayout {
    pub height: usize,
    pub width: usize,
    /// `[P * 9]`; invalid slots hold 0.
    pub sp_ids: Arc<[u32]>,
    pub valid: Vec<bool>,
}

impl SlotLayout {
    /// Layout for a `height x width` map covering the same grid as `index`.
    pub fn new(index: &NeighborhoodIndex, height: usize, width: usize) -> Result<Self> {
        let (gh, gw) = (index.grid_h, index.grid_w);
        if !height.is_multiple_of(gh) || !width.is_multiple_of(gw) {
            return Err(Error::InvalidArgument(format!("{height}x{width} is not divisible by the {gh}x{gw} grid")));
        }
        let (ch, cw) = (height / gh, width / gw);
        let mut sp_ids = Vec::with_capacity(height * width * SLOTS);
        let mut valid = Vec::with_capacity(height * width * SLOTS);
        for y in 0..height {
            for x in 0..width {
                let (cy, cx) = ((y / ch) as isize, (x / cw) as isize);
                for k in 0..SLOTS {
                    let (di, dj) = slot_offset(k);
                    let (r, c) = (cy + di, cx + dj);
                    let ok = (0..gh as isize).contains(&r) && (0..gw as isize).contains(&c);
                    sp_ids.push(if ok { (r as usize * gw + c as usize) as u32 } else { 0 });
                    valid.push(ok);
                }
            }
        }
        Ok(SlotLayout { height, width, sp_ids: sp_ids.into(), valid })
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Soft assignment `Q` `[H, W, 9]` at output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMap<T> {
    pub layout: SlotLayout,
    pub weights: Vec<T>,
}

impl<T: Scalar> AssociationMap<T> {
    pub fn new(layout: SlotLayout, weights: Vec<T>) -> Result<Self> {
        if weights.len() != layout.n_pixels() * SLOTS {
            return Err(Error::shape(
                "AssociationMap",
                format!("{} weights for {} pixels", weights.len(), layout.n_pixels()),
            ));
        }
        Ok(AssociationMap { layout, weights })
    }

    pub fn row(&self, p: usize) -> &[T] {
        &self.weights[p * SLOTS..(p + 1) * SLOTS]
    }
}

/// Dense per-pixel logits `[H, W, K]` and their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrediction<T> {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub logits: Vec<T>,
    pub labels: Vec<u32>,
}

impl<T: Scalar> DensePrediction<T> {
    pub fn from_logits(height: usize, width: usize, n_classes: usize, logits: Vec<T>) -> Result<Self> {
        if logits.len() != height * width * n_classes {
            return Err(Error::shape(
                "DensePrediction",
                format!("{} logits for {height}x{width}x{n_classes}", logits.len()),
            ));
        }
        let labels = logits.chunks(n_classes).map(|row| argmax(row.iter().copied()) as u32).collect();
        Ok(DensePrediction { height, width, n_classes, logits, labels })
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Stride-8 association logits: slot `k` of pixel `p` is `I_p . S_{i(p,k)}`.
///
/// `pixels` is `[P, C]`, `superpixels` `[G, C]`; invalid slots carry [`MASK_NEG`].
pub fn association_logits<'t, T: Scalar>(
    pixels: Var<'t, T>,
    superpixels: Var<'t, T>,
    index: &NeighborhoodIndex,
) -> Result<Var<'t, T>> {
    let gathered = superpixels.gather_rows(index.pix_to_sp.clone())?;
    let dots = pixels.slot_dot(gathered, SLOTS)?;
    let keep: Vec<T> = index.pix_valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
    let sentinel: Vec<T> = index.pix_valid.iter().map(|&v| if v { T::zero() } else { T::of(MASK_NEG) }).collect();
    dots.mul_const(&keep)?.add_const(&sentinel)
}

/// Upsamples stride-8 association logits and normalizes them per pixel.
///
/// Each slot channel is interpolated on its own with half-pixel bilinear
/// weights whose sources are clamped to the stride-8 sites where that slot is
/// valid, so the mask sentinel never leaks into valid weights.
#[derive(Clone, Debug)]
pub struct Associator {
    pub layout: SlotLayout,
    map: Arc<SparseMap>,
    feat_h: usize,
    feat_w: usize,
}

impl Associator {
    /// `out` must equal the stride-8 size times 8, or times 1 (no resampling).
    pub fn new(index: &NeighborhoodIndex, out_h: usize, out_w: usize) -> Result<Self> {
        let (fh, fw) = (index.feat_h, index.feat_w);
        let factor_ok = (out_h == 8 * fh && out_w == 8 * fw) || (out_h == fh && out_w == fw);
        if !factor_ok {
            return Err(Error::InvalidArgument(format!(
                "association output {out_h}x{out_w} is not 8x (or 1x) the {fh}x{fw} feature map"
            )));
        }
        let layout = SlotLayout::new(index, out_h, out_w)?;
        let (ph, pw) = (index.patch_h, index.patch_w);
        let (gh, gw) = (index.grid_h as isize, index.grid_w as isize);
        // Stride-8 row/col range on which a slot offset stays inside the grid.
        let valid_range = |d: isize, g: isize, patch: usize| -> (usize, usize) {
            let lo = (-d).max(0) as usize;
            let hi = (g - 1 - d).min(g - 1) as usize;
            (lo * patch, (hi + 1) * patch - 1)
        };
        let (sy_scale, sx_scale) = (fh as f64 / out_h as f64, fw as f64 / out_w as f64);
        let mut map = SparseMap::new(fh * fw * SLOTS);
        for y in 0..out_h {
            let sy = (y as f64 + 0.5) * sy_scale - 0.5;
            for x in 0..out_w {
                let sx = (x as f64 + 0.5) * sx_scale - 0.5;
                let p = y * out_w + x;
                for k in 0..SLOTS {
                    if !layout.valid[p * SLOTS + k] {
                        map.push_row(std::iter::empty());
                        continue;
                    }
                    let (di, dj) = slot_offset(k);
                    let (rlo, rhi) = valid_range(di, gh, ph);
                    let (clo, chi) = valid_range(dj, gw, pw);
                    let (y0, y1, fy) = clamped_taps(sy, rlo, rhi);
                    let (x0, x1, fx) = clamped_taps(sx, clo, chi);
                    let taps = [
                        ((y0 * fw + x0) * SLOTS + k, (1.0 - fy) * (1.0 - fx)),
                        ((y0 * fw + x1) * SLOTS + k, (1.0 - fy) * fx),
                        ((y1 * fw + x0) * SLOTS + k, fy * (1.0 - fx)),
                        ((y1 * fw + x1) * SLOTS + k, fy * fx),
                    ];
                    map.push_row(taps.into_iter().filter(|&(_, w)| w != 0.0));
                }
            }
        }
        Ok(Associator { layout, map: Arc::new(map), feat_h: fh, feat_w: fw })
    }

    /// Interpolated (pre-softmax) logits `[H * W, 9]`.
    pub fn upsample_logits<'t, T: Scalar>(&self, logits: Var<'t, T>) -> Result<Var<'t, T>> {
        let n8 = self.feat_h * self.feat_w;
        if logits.value().numel() != n8 * SLOTS {
            return Err(Error::shape("upsample_associate", format!("logits {:?} for {n8} sites", logits.shape())));
        }
        let npix = self.layout.n_pixels();
        logits
            .reshape(vec![n8 * SLOTS, 1])?
            .resample(self.map.clone(), vec![npix * SLOTS, 1])?
            .reshape(vec![npix, SLOTS])
    }

    /// Soft association `Q` `[H * W, 9]`: upsample, then masked softmax per pixel.
    pub fn associate<'t, T: Scalar>(&self, logits: Var<'t, T>) -> Result<Var<'t, T>> {
        self.upsample_logits(logits)?.softmax(1, Some(&self.layout.valid))
    }

    pub fn to_map<T: Scalar>(&self, q: Var<'_, T>) -> Result<AssociationMap<T>> {
        AssociationMap::new(self.layout.clone(), q.value().data().to_vec())
    }
}

/// Functional form of [`Associator::associate`].
pub fn upsample_associate<'t, T: Scalar>(
    logits: Var<'t, T>,
    index: &NeighborhoodIndex,
    out_h: usize,
    out_w: usize,
) -> Result<(Var<'t, T>, SlotLayout)> {
    let assoc = Associator::new(index, out_h, out_w)?;
    Ok((assoc.associate(logits)?, assoc.layout))
}

/// `Y_p = sum_k Q_p[k] C_{i(p,k)}`: `q` `[P, 9]`, `class_logits` `[G, K]` → `[P, K]`.
pub fn unfold<'t, T: Scalar>(q: Var<'t, T>, class_logits: Var<'t, T>, layout: &SlotLayout) -> Result<Var<'t, T>> {
    let per_slot = class_logits.gather_rows(layout.sp_ids.clone())?;
    q.slot_combine(per_slot)
}

/// Superpixel id of the strongest valid slot per pixel (ties → lowest slot).
pub fn hard_assign<T: Scalar>(q: &AssociationMap<T>) -> Vec<u32> {
    let l = &q.layout;
    (0..l.n_pixels())
        .map(|p| {
            let row = q.row(p);
            let mut best: Option<(usize, T)> = None;
            for k in 0..SLOTS {
                if !l.valid[p * SLOTS + k] {
                    continue;
                }
                if best.is_none_or(|(_, b)| row[k] > b) {
                    best = Some((k, row[k]));
                }
            }
            let k = best.map_or(4, |(k, _)| k);
            l.sp_ids[p * SLOTS + k]
        })
        .collect()
}
