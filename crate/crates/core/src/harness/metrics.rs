//! Reconstruction metrics.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::Image;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images match.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Mean SSIM over every `window`×`window` box (stride 1) and channel.
pub fn ssim(a: &Image, b: &Image, window: usize, max_value: f64) -> Result<f64> {
    ssim_with(a, b, window, max_value, 0.01, 0.03)
}

pub fn ssim_with(a: &Image, b: &Image, window: usize, max_value: f64, k1: f64, k2: f64) -> Result<f64> {
    same_shape(a, b)?;
    if window == 0 || window > a.height || window > a.width {
        return domain(format!(
            "window {window} does not fit a {}x{} image",
            a.height, a.width
        ));
    }
    let c1 = (k1 * max_value).powi(2);
    let c2 = (k2 * max_value).powi(2);
    let n = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=a.height - window {
            for x0 in 0..=a.width - window {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + window {
                    for x in x0..x0 + window {
                        let i = (y * a.width + x) * 3 + c;
                        let (va, vb) = (a.data[i] as f64, b.data[i] as f64);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let var_a = saa / n - ma * ma;
                let var_b = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return domain(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    Ok(())
}

/// Mean cosine similarity between paired rows; zero-norm rows count as 0.
pub fn mean_cosine(a: &[f32], b: &[f32], dim: usize) -> Result<f64> {
    if a.len() != b.len() || dim == 0 || a.len() % dim != 0 {
        return domain("cosine inputs must be equal-length multiples of dim");
    }
    let rows = a.len() / dim;
    if rows == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (x, y) in a.chunks(dim).zip(b.chunks(dim)) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum();
        let nx: f64 = x.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
        if nx > 0.0 && ny > 0.0 {
            sum += dot / (nx * ny);
        }
    }
    Ok(sum / rows as f64)
}

/// One line of a metrics stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sem_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization_sem: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization_pix: Option<f64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub losses: std::collections::BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f32) -> Image {
        Image::new(h, w, (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |i| (i % 7) as f32 / 7.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let zero = Image::filled(4, 4, [0.0; 3]);
        let one = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&zero, &one, 1.0).unwrap().abs() < 1e-12);
        // MSE = 1/100 of max²
        let tenth = Image::filled(4, 4, [0.1; 3]);
        assert!((psnr(&zero, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&zero, &Image::filled(4, 5, [0.0; 3]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_negation() {
        let a = img(8, 8, |i| ((i * 37) % 11) as f32 / 11.0);
        assert!((ssim(&a, &a, 4, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let mean = a.data.iter().sum::<f32>() / a.data.len() as f32;
        let centered = Image::new(8, 8, a.data.iter().map(|v| v - mean).collect()).unwrap();
        let neg = Image::new(8, 8, centered.data.iter().map(|v| -v).collect()).unwrap();
        assert!(ssim(&centered, &neg, 8, 1.0).unwrap() < 0.0);
        assert!(ssim(&a, &a, 9, 1.0).is_err());
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(mean_cosine(&[1.0, 0.0], &[1.0, 0.0], 2).unwrap(), 1.0);
        assert_eq!(mean_cosine(&[1.0, 0.0], &[-1.0, 0.0], 2).unwrap(), -1.0);
        assert_eq!(mean_cosine(&[0.0, 0.0], &[1.0, 0.0], 2).unwrap(), 0.0);
    }
}
