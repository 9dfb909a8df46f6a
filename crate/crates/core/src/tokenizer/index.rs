use std::sync::Arc;

use super::GridConfig;
use crate::error::Result;

/// Superpixel slots per pixel (3x3 window).
pub const SLOTS: usize = 9;

/// Relative grid offset `(di, dj)` of slot `k`, row-major over `{-1, 0, 1}^2`.
pub const fn slot_offset(k: usize) -> (isize, isize) {
    ((k / 3) as isize - 1, (k % 3) as isize - 1)
}

/// Bidirectional pixel/superpixel neighborhoods on a regular grid.
///
/// Pixel `p` sees the 3x3 superpixels around its own cell; superpixel `i` sees
/// the `3h x 3w` pixel window centered on its patch. Invalid slots (beyond the
/// grid or image) point at entry 0 and are marked false in the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodIndex {
    pub feat_h: usize,
    pub feat_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// `[P * 9]` superpixel id per pixel slot.
    pub pix_to_sp: Arc<[u32]>,
    pub pix_valid: Vec<bool>,
    /// `[G * 9hw]` pixel id per superpixel slot.
    pub sp_to_pix: Arc<[u32]>,
    pub sp_valid: Vec<bool>,
    pub periodic: bool,
}

impl NeighborhoodIndex {
    pub fn build(feat_h: usize, feat_w: usize, cfg: &GridConfig) -> Result<Self> {
        Self::build_inner(feat_h, feat_w, cfg, false)
    }

    /// Variant where neighborhoods wrap around the grid (torus). Only used to
    /// test translation behaviour; the model always uses truncated borders.
    pub fn build_periodic(feat_h: usize, feat_w: usize, cfg: &GridConfig) -> Result<Self> {
        Self::build_inner(feat_h, feat_w, cfg, true)
    }

    fn build_inner(feat_h: usize, feat_w: usize, cfg: &GridConfig, periodic: bool) -> Result<Self> {
        let (ph, pw) = cfg.patch_size(feat_h, feat_w)?;
        let (gh, gw) = (cfg.grid_h, cfg.grid_w);
        let wrap = |v: isize, n: usize| -> Option<usize> {
            if periodic {
                Some(v.rem_euclid(n as isize) as usize)
            } else {
                (0..n as isize).contains(&v).then_some(v as usize)
            }
        };

        let npix = feat_h * feat_w;
        let mut pix_to_sp = Vec::with_capacity(npix * SLOTS);
        let mut pix_valid = Vec::with_capacity(npix * SLOTS);
        for y in 0..feat_h {
            for x in 0..feat_w {
                let (cy, cx) = ((y / ph) as isize, (x / pw) as isize);
                for k in 0..SLOTS {
                    let (di, dj) = slot_offset(k);
                    match (wrap(cy + di, gh), wrap(cx + dj, gw)) {
                        (Some(r), Some(c)) => {
                            pix_to_sp.push((r * gw + c) as u32);
                            pix_valid.push(true);
                        }
                        _ => {
                            pix_to_sp.push(0);
                            pix_valid.push(false);
                        }
                    }
                }
            }
        }

        let window = SLOTS * ph * pw;
        let mut sp_to_pix = Vec::with_capacity(gh * gw * window);
        let mut sp_valid = Vec::with_capacity(gh * gw * window);
        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = (gy as isize - 1) * ph as isize;
                let x0 = (gx as isize - 1) * pw as isize;
                for r in 0..3 * ph as isize {
                    for c in 0..3 * pw as isize {
                        match (wrap(y0 + r, feat_h), wrap(x0 + c, feat_w)) {
                            (Some(y), Some(x)) => {
                                sp_to_pix.push((y * feat_w + x) as u32);
                                sp_valid.push(true);
                            }
                            _ => {
                                sp_to_pix.push(0);
                                sp_valid.push(false);
                            }
                        }
                    }
                }
            }
        }

        Ok(NeighborhoodIndex {
            feat_h,
            feat_w,
            grid_h: gh,
            grid_w: gw,
            patch_h: ph,
            patch_w: pw,
            pix_to_sp: pix_to_sp.into(),
            pix_valid,
            sp_to_pix: sp_to_pix.into(),
            sp_valid,
            periodic,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    pub fn n_superpixels(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixel slots per superpixel, `9 h w`.
    pub fn window(&self) -> usize {
        SLOTS * self.patch_h * self.patch_w
    }

    /// Valid superpixel neighbors of pixel `p` as `(slot, superpixel)`.
    pub fn pixel_neighbors(&self, p: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..SLOTS)
            .filter(move |&k| self.pix_valid[p * SLOTS + k])
            .map(move |k| (k, self.pix_to_sp[p * SLOTS + k] as usize))
    }

    /// Valid pixel neighbors of superpixel `i` as `(slot, pixel)`.
    pub fn superpixel_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let l = self.window();
        (0..l).filter(move |&s| self.sp_valid[i * l + s]).map(move |s| (s, self.sp_to_pix[i * l + s] as usize))
    }

    /// Superpixel that owns pixel `p` (its own cell).
    pub fn owner(&self, p: usize) -> usize {
        self.pix_to_sp[p * SLOTS + 4] as usize
    }
}
