//! RGB images and binary PPM (P6) I/O.

use std::path::Path;

use crate::error::{bail, Result};

/// Row-major RGB image with channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            bail!(Dimension, "{} values for a {height}x{width} RGB image", pixels.len());
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, pixels }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Same image with values clamped to `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Mean squared error per channel value.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            bail!(Dimension, "image sizes differ");
        }
        let s: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.pixels.len() as f64)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 encoding: `"P6\n<w> <h>\n255\n"` followed by `w*h*3` bytes.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        bail!(Format, "not a binary PPM (expected P6 magic)");
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!(Format, "truncated PPM header"),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "malformed PPM header");
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| crate::Error::Format("PPM header number out of range".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        bail!(Format, "only maxval 255 is supported, got {maxval}");
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        bail!(Format, "missing separator after PPM header");
    }
    pos += 1;
    let n = width * height * 3;
    if bytes.len() - pos < n {
        bail!(Format, "PPM body has {} bytes, expected {n}", bytes.len() - pos);
    }
    let pixels = bytes[pos..pos + n].iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(height, width, pixels)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(img))?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}

/// Per-pixel boolean mask; `true` marks pixels to regenerate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask { height, width, mask: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        PixelMask { height, width, mask: vec![true; height * width] }
    }

    /// Pixels brighter than mid-grey are masked.
    pub fn from_image(img: &Image) -> Self {
        let mask = img.pixels.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0 > 0.5).collect();
        PixelMask { height: img.height, width: img.width, mask }
    }

    pub fn set(&mut self, y: usize, x: usize) {
        self.mask[y * self.width + x] = true;
    }
}
