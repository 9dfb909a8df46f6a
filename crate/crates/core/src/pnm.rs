//! Binary PPM (P6) / PGM (P5) reading and writing, plus PNG export.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// From `[H, W, 3]` floats in `[0, 1]` (clamped, rounded).
    pub fn from_unit_floats(width: usize, height: usize, values: &[f32]) -> Self {
        let data = values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        RgbImage { width, height, data }
    }

    pub fn to_unit_floats(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode_ppm())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, width, height, pixels) = parse_pnm(&bytes).map_err(|m| Error::format(path, m))?;
        if magic != b'6' {
            return Err(Error::format(path, "expected a binary PPM (P6)"));
        }
        if pixels.len() < width * height * 3 {
            return Err(Error::format(path, "truncated pixel data"));
        }
        Ok(RgbImage { width, height, data: pixels[..width * height * 3].to_vec() })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

impl GrayImage {
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode_pgm())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, width, height, pixels) = parse_pnm(&bytes).map_err(|m| Error::format(path, m))?;
        if magic != b'5' {
            return Err(Error::format(path, "expected a binary PGM (P5)"));
        }
        if pixels.len() < width * height {
            return Err(Error::format(path, "truncated pixel data"));
        }
        Ok(GrayImage { width, height, data: pixels[..width * height].to_vec() })
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Splits a binary PNM into `(type digit, width, height, raster)`. Only maxval 255 is accepted.
fn parse_pnm(bytes: &[u8]) -> std::result::Result<(u8, usize, usize, &[u8]), String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("missing PNM magic".into());
    }
    let magic = bytes[1];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    if fields[2] != 255 {
        return Err(format!("unsupported maxval {}", fields[2]));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing raster separator".into());
    }
    Ok((magic, fields[0], fields[1], &bytes[pos + 1..]))
}
