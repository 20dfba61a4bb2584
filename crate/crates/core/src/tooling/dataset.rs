//! Procedural captioned shapes.
//!
//! Each sample is a coloured shape on a plain background, rendered with 4x4
//! supersampling on a randomly sized canvas and then cropped to the output
//! size. Pixel values are snapped to 8-bit levels so PPM round trips are
//! exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::conditioning::{CaptionVocabulary, MicroConditioning};
use crate::error::{bail, Result};

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Light,
    Dark,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
        }
    }
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Light, Background::Dark];

    pub fn word(self) -> &'static str {
        match self {
            Background::Light => "light",
            Background::Dark => "dark",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Background::Light => [0.92, 0.92, 0.88],
            Background::Dark => [0.1, 0.1, 0.14],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: ShapeKind,
    pub color: Color,
    pub background: Background,
}

impl Attributes {
    /// Every combination, in a fixed order.
    pub fn all() -> Vec<Attributes> {
        let mut out = Vec::with_capacity(18);
        for shape in ShapeKind::ALL {
            for color in Color::ALL {
                for background in Background::ALL {
                    out.push(Attributes { shape, color, background });
                }
            }
        }
        out
    }

    /// `"<color> <shape> <background>"`.
    pub fn caption(&self) -> String {
        format!("{} {} {}", self.color.word(), self.shape.word(), self.background.word())
    }
}

/// Caption vocabulary covering every attribute word.
pub fn dataset_vocabulary() -> CaptionVocabulary {
    let mut words: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
    words.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    words.extend(Background::ALL.iter().map(|b| b.word()));
    CaptionVocabulary::new(&words).expect("distinct words")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { image_size: 32, samples: 36, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub text: String,
    pub caption: Vec<usize>,
    pub attributes: Attributes,
    pub micro: MicroConditioning,
}

/// Generates `spec.samples` samples. Attribute combinations are visited in a
/// seeded order so that small datasets still cover many of them.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if spec.image_size < 8 || spec.samples == 0 {
        bail!(Config, "dataset needs image_size >= 8 and at least one sample");
    }
    let vocab = dataset_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order = Attributes::all();
    order.shuffle(&mut rng);
    (0..spec.samples).map(|i| render(order[i % order.len()], spec.image_size, &vocab, &mut rng)).collect()
}

fn luminance(c: [f64; 3]) -> f64 {
    (c[0] + c[1] + c[2]) / 3.0
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        ShapeKind::Triangle => {
            let pts = [(0.0, -r), (0.95 * r, 0.75 * r), (-0.95 * r, 0.75 * r)];
            (0..3).all(|k| {
                let (ax, ay) = pts[k];
                let (bx, by) = pts[(k + 1) % 3];
                (bx - ax) * (dy - ay) - (by - ay) * (dx - ax) >= 0.0
            })
        }
    }
}

fn render(attrs: Attributes, size: usize, vocab: &CaptionVocabulary, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let orig_h = size + rng.gen_range(0..=size / 2);
    let orig_w = size + rng.gen_range(0..=size / 2);
    let crop_top = rng.gen_range(0..=orig_h - size);
    let crop_left = rng.gen_range(0..=orig_w - size);
    let shade = rng.gen_range(0.6..=1.0);
    let jitter = size as f64 / 8.0;
    let cy = (crop_top as f64 + size as f64 / 2.0) + rng.gen_range(-jitter..=jitter);
    let cx = (crop_left as f64 + size as f64 / 2.0) + rng.gen_range(-jitter..=jitter);
    let r = size as f64 * rng.gen_range(0.22..=0.34);

    let fg = attrs.color.rgb().map(|c| c * shade);
    let bg = attrs.background.rgb();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = (crop_top + y) as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let px = (crop_left + x) as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += inside(attrs.shape, px - cx, py - cy, r) as usize;
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let v = bg[c] * (1.0 - cov) + fg[c] * cov;
                pixels.push(((v * 255.0).round() / 255.0) as f32);
            }
        }
    }
    let quality = ((luminance(fg) - luminance(bg)).abs() * 1000.0).round() / 1000.0;
    let text = attrs.caption();
    Ok(Sample {
        image: Image::new(size, size, pixels)?,
        caption: vocab.encode(&text)?,
        text,
        attributes: attrs,
        micro: MicroConditioning {
            orig_height: orig_h as u32,
            orig_width: orig_w as u32,
            crop_top: crop_top as u32,
            crop_left: crop_left as u32,
            quality: quality as f32,
        },
    })
}
