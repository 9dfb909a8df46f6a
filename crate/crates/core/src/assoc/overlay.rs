use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::RgbImage;

pub const BOUNDARY_COLOR: [u8; 3] = [255, 255, 0];

/// Marks every pixel that has a 4-neighbor with a different id.
pub fn boundary_mask(ids: &[u32], width: usize, height: usize) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width && ids[p] != ids[p + 1] {
                mask[p] = true;
                mask[p + 1] = true;
            }
            if y + 1 < height && ids[p] != ids[p + width] {
                mask[p] = true;
                mask[p + width] = true;
            }
        }
    }
    mask
}

/// Draws superpixel boundaries of `ids` over `image`.
pub fn overlay_boundaries(image: &RgbImage, ids: &[u32]) -> Result<RgbImage> {
    if ids.len() != image.width * image.height {
        return Err(Error::InvalidArgument(format!(
            "map of {} pixels for a {}x{} image",
            ids.len(),
            image.width,
            image.height
        )));
    }
    let mut out = image.clone();
    for (p, on) in boundary_mask(ids, image.width, image.height).into_iter().enumerate() {
        if on {
            out.set_pixel(p % image.width, p / image.width, BOUNDARY_COLOR);
        }
    }
    Ok(out)
}

/// Class-id → color table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

const BASE_COLORS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [220, 20, 60],
    [0, 160, 80],
    [30, 90, 230],
    [250, 170, 30],
    [150, 60, 200],
    [0, 200, 200],
    [240, 240, 240],
];

impl Palette {
    /// Fixed colors for the first eight classes, then a deterministic hash.
    pub fn default_for(n_classes: usize) -> Self {
        let colors = (0..n_classes)
            .map(|c| {
                BASE_COLORS.get(c).copied().unwrap_or_else(|| {
                    let h = (c as u32).wrapping_mul(2_654_435_761);
                    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
                })
            })
            .collect();
        Palette { colors }
    }

    pub fn color(&self, class: u32) -> [u8; 3] {
        self.colors.get(class as usize).copied().unwrap_or([0, 0, 0])
    }

    /// Parses `class_id R G B` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries: Vec<(usize, [u8; 3])> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let nums: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<usize>> =
                (nums.len() == 4).then(|| nums.iter().map(|s| s.parse().ok()).collect()).flatten();
            match parsed {
                Some(v) if v[1..].iter().all(|&c| c <= 255) => {
                    entries.push((v[0], [v[1] as u8, v[2] as u8, v[3] as u8]))
                }
                _ => return Err(format!("line {}: expected `class_id R G B`", lineno + 1)),
            }
        }
        let n = entries.iter().map(|(c, _)| c + 1).max().unwrap_or(0);
        let mut colors = vec![[0, 0, 0]; n];
        for (c, rgb) in entries {
            colors[c] = rgb;
        }
        Ok(Palette { colors })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, [r, g, b]) in self.colors.iter().enumerate() {
            let _ = writeln!(s, "{c} {r} {g} {b}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }
}

/// Renders a label map with `palette`; ids outside the palette are black.
pub fn colorize_labels(labels: &[u32], width: usize, height: usize, palette: &Palette) -> RgbImage {
    let mut out = RgbImage::new(width, height);
    for (p, &l) in labels.iter().enumerate() {
        out.set_pixel(p % width, p / width, palette.color(l));
    }
    out
}
