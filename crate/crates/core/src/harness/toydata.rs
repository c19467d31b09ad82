//! Procedural shape images with short captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::Image;

pub const COLORS: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

pub const BACKGROUNDS: [[f32; 3]; 4] = [
    [0.10, 0.10, 0.12],
    [0.92, 0.92, 0.88],
    [0.45, 0.45, 0.50],
    [0.20, 0.28, 0.40],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

pub const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

/// Instruction word for the color-inversion edit.
pub const INVERT_WORD: u32 = (COLORS.len() + SHAPES.len() + BACKGROUNDS.len()) as u32;

/// Caption vocabulary: colors, then shapes, then backgrounds, then the edit word.
pub const TOY_TEXT_VOCAB: u32 = INVERT_WORD + 1;

/// Caption words in id order.
pub const TOY_WORDS: [&str; TOY_TEXT_VOCAB as usize] = [
    "red", "green", "blue", "yellow", "magenta", "cyan", "disc", "square", "triangle", "ring", "dark", "light",
    "gray", "navy", "invert",
];

/// Parses whitespace- or comma-separated caption words (or raw ids) into ids.
pub fn parse_words(text: &str) -> Result<Vec<u32>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(|w| {
            if let Some(i) = TOY_WORDS.iter().position(|&k| k.eq_ignore_ascii_case(w)) {
                return Ok(i as u32);
            }
            match w.parse::<u32>() {
                Ok(id) if id < TOY_TEXT_VOCAB => Ok(id),
                _ => domain(format!("unknown word {w:?}; known: {}", TOY_WORDS.join(" "))),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub image: Image,
    pub caption: Vec<u32>,
    pub color: usize,
    pub shape: Shape,
    pub background: usize,
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        Shape::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

/// Draws one sample of the given size.
pub fn toy_sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> ToySample {
    let color = rng.random_range(0..COLORS.len());
    let shape = SHAPES[rng.random_range(0..SHAPES.len())];
    let background = rng.random_range(0..BACKGROUNDS.len());
    let short = height.min(width) as f32;
    let r = short * rng.random_range(0.22..0.38);
    let cx = rng.random_range(r..(width as f32 - r).max(r + 1.0));
    let cy = rng.random_range(r..(height as f32 - r).max(r + 1.0));
    let bg = BACKGROUNDS[background];
    let fg = COLORS[color];
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        // Vertical shading keeps backgrounds from being flat.
        let shade = 0.85 + 0.3 * (y as f32 / height.max(1) as f32);
        for x in 0..width {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let px = if inside(shape, dx, dy, r) {
                fg
            } else {
                [bg[0] * shade, bg[1] * shade, bg[2] * shade]
            };
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    let shape_id = SHAPES.iter().position(|&s| s == shape).unwrap();
    ToySample {
        image: Image::new(height, width, data).expect("sizes agree"),
        caption: vec![
            color as u32,
            (COLORS.len() + shape_id) as u32,
            (COLORS.len() + SHAPES.len() + background) as u32,
        ],
        color,
        shape,
        background,
    }
}

pub fn toy_dataset(seed: u64, n: usize, height: usize, width: usize) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| toy_sample(&mut rng, height, width)).collect()
}

/// Source image, instruction ids, and the edited target.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTriple {
    pub source: Image,
    pub instruction: Vec<u32>,
    pub target: Image,
}

/// Toy images paired with their color inversions.
pub fn invert_triples(seed: u64, n: usize, height: usize, width: usize) -> Vec<EditTriple> {
    toy_dataset(seed, n, height, width)
        .into_iter()
        .map(|s| EditTriple {
            target: s.image.inverted(),
            instruction: vec![INVERT_WORD],
            source: s.image,
        })
        .collect()
}

/// Images whose pixels are independent and uniform on [0, 1].
pub fn random_patch_images(seed: u64, n: usize, size: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
            Image::new(size, size, data).expect("sizes agree")
        })
        .collect()
}
