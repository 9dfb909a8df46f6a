//! Synthetic shapes dataset and its on-disk layout.
//!
//! Each image has a grayish background and 1 to 4 non-overlapping shapes.
//! Classes `1..K` cycle through rectangle, circle and triangle; class 0 is the
//! background. Shape colors are a per-class base color with jitter, and every
//! channel gets Gaussian noise with sigma 0.05 before quantization to 8 bits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pnm::{GrayImage, RgbImage};
use crate::rng;

pub const IGNORE_ID: u8 = 255;
pub const NOISE_SIGMA: f64 = 0.05;
pub const MAX_SHAPES: usize = 4;
pub const PLACEMENT_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeKind {
    /// Shape drawn for class `c >= 1`.
    pub fn for_class(c: usize) -> Self {
        match (c - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Triangle,
        }
    }

    /// Whether the pixel center `(y + 0.5, x + 0.5)` lies inside the shape inscribed in `bbox`.
    pub fn contains(self, bbox: &BBox, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let (y0, x0, h, w) = (bbox.y as f64, bbox.x as f64, bbox.h as f64, bbox.w as f64);
        if py < y0 || px < x0 || py > y0 + h || px > x0 + w {
            return false;
        }
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Circle => {
                let r = h.min(w) / 2.0;
                let (cy, cx) = (y0 + h / 2.0, x0 + w / 2.0);
                (py - cy).powi(2) + (px - cx).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // Apex at the top middle, base along the bottom edge.
                let t = (py - y0) / h;
                let half = t * w / 2.0;
                (px - (x0 + w / 2.0)).abs() <= half
            }
        }
    }
}

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl BBox {
    /// Overlap test with a one-pixel gap required between boxes.
    pub fn overlaps(&self, o: &BBox) -> bool {
        self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1 && self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1
    }
}

/// One image and its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: GrayImage,
}

impl Sample {
    /// Image as an `[H, W, 3]` tensor in `[0, 1]`.
    pub fn image_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.image.height, self.image.width, 3], self.image.to_unit_floats())
            .expect("image buffer matches its extents")
    }

    pub fn label_ids(&self) -> Vec<u32> {
        self.labels.data.iter().map(|&l| u32::from(l)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the samples from `at` onward into a second dataset.
    pub fn split_off(&mut self, at: usize) -> Dataset {
        let rest = self.samples.split_off(at.min(self.samples.len()));
        Dataset { n_classes: self.n_classes, height: self.height, width: self.width, samples: rest }
    }

    /// Writes `meta.txt`, `img_%05d.ppm` and `lbl_%05d.pgm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "n_classes={}\nheight={}\nwidth={}\ncount={}\n",
            self.n_classes,
            self.height,
            self.width,
            self.samples.len()
        );
        let meta_path = dir.join("meta.txt");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            s.image.write_ppm(&dir.join(format!("img_{i:05}.ppm")))?;
            s.labels.write_pgm(&dir.join(format!("lbl_{i:05}.pgm")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut meta = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(&meta_path, format!("expected key=value, got `{line}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::format(&meta_path, format!("`{}` is not a non-negative integer", v.trim())))?;
            meta.insert(k.trim().to_string(), v);
        }
        let field = |k: &str| meta.get(k).copied().ok_or_else(|| Error::format(&meta_path, format!("missing `{k}`")));
        let (n_classes, height, width, count) =
            (field("n_classes")?, field("height")?, field("width")?, field("count")?);
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let img_path = dir.join(format!("img_{i:05}.ppm"));
            let lbl_path = dir.join(format!("lbl_{i:05}.pgm"));
            let image = RgbImage::read_ppm(&img_path)?;
            let labels = GrayImage::read_pgm(&lbl_path)?;
            if (image.height, image.width) != (height, width) || (labels.height, labels.width) != (height, width) {
                return Err(Error::format(&img_path, format!("sample {i} does not match {height}x{width}")));
            }
            if let Some(&bad) = labels.data.iter().find(|&&l| l != IGNORE_ID && usize::from(l) >= n_classes) {
                return Err(Error::format(&lbl_path, format!("label {bad} outside {n_classes} classes")));
            }
            samples.push(Sample { image, labels });
        }
        Ok(Dataset { n_classes, height, width, samples })
    }
}

/// Base color of class `c >= 1`.
pub fn class_color(c: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 6] =
        [[0.85, 0.2, 0.2], [0.2, 0.75, 0.25], [0.2, 0.3, 0.9], [0.9, 0.75, 0.15], [0.7, 0.2, 0.8], [0.1, 0.8, 0.8]];
    BASE[(c - 1) % BASE.len()]
}

/// Generates sample `index` of the dataset keyed by `seed`.
///
/// Each sample draws from its own substream so samples can be regenerated
/// independently.
pub fn generate_sample(seed: u64, index: u64, height: usize, width: usize, n_classes: usize) -> Sample {
    let mut r = rng::substream(seed, rng::stream::DATASET, index);
    let gray: f64 = r.random_range(0.3..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.05..0.05));
    let bg = tint.map(|t| gray + t);

    let n_shapes = r.random_range(1..=MAX_SHAPES);
    let (min_side, max_side) = ((height.min(width) / 4).max(3), (height.min(width) / 2).max(4));
    let mut placed: Vec<(BBox, usize, [f64; 3])> = Vec::new();
    for _ in 0..n_shapes {
        let class = r.random_range(1..n_classes.max(2));
        let jitter: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.08..0.08));
        let base = class_color(class);
        let color = std::array::from_fn(|k| base[k] + jitter[k]);
        let mut found = None;
        for _ in 0..PLACEMENT_RETRIES {
            let h = r.random_range(min_side..=max_side);
            let w = r.random_range(min_side..=max_side);
            let bbox = BBox { y: r.random_range(0..=height - h), x: r.random_range(0..=width - w), h, w };
            if placed.iter().all(|(b, _, _)| !b.overlaps(&bbox)) {
                found = Some(bbox);
                break;
            }
        }
        match found {
            Some(b) => placed.push((b, class, color)),
            None => {
                info!("sample {index}: placed {} of {n_shapes} shapes", placed.len());
                break;
            }
        }
    }

    let mut image = RgbImage::new(width, height);
    let mut labels = GrayImage { width, height, data: vec![0; width * height] };
    for y in 0..height {
        for x in 0..width {
            let mut rgb = bg;
            for (bbox, class, color) in &placed {
                if ShapeKind::for_class(*class).contains(bbox, y, x) {
                    rgb = *color;
                    labels.data[y * width + x] = *class as u8;
                }
            }
            let px = rgb.map(|v| {
                let noisy = v + rng::normal(&mut r, NOISE_SIGMA);
                (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            image.set_pixel(x, y, px);
        }
    }
    Sample { image, labels }
}

/// Deterministic dataset of `count` samples.
pub fn generate_shapes_dataset(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    n_classes: usize,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::config("n_classes", "need background plus at least one shape class"));
    }
    if n_classes > 255 {
        return Err(Error::config("n_classes", "at most 255 classes"));
    }
    if height < 8 || width < 8 {
        return Err(Error::config("image_h", format!("{height}x{width} is too small for shapes")));
    }
    let samples = (0..count as u64).map(|i| generate_sample(seed, i, height, width, n_classes)).collect();
    Ok(Dataset { n_classes, height, width, samples })
}
