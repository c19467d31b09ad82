//! Encode, optionally perturb, and decode a single image file.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{psnr, ssim, MetricsRecord};
use crate::dualvitok::{inject_noise, DualTokenizer, NoiseSpec};
use crate::error::Result;
use crate::grid::Image;

/// Nearest dims at least `m` that are multiples of `m`.
pub fn divisible_dims(height: usize, width: usize, m: usize) -> (usize, usize) {
    let round = |v: usize| (((v + m / 2) / m) * m).max(m);
    (round(height), round(width))
}

/// Reconstructs `image` at its own size. Inputs whose dims are not multiples of
/// the tokenizer's grid are resized to the nearest valid size and back.
pub fn reconstruct_image(tok: &DualTokenizer, image: &Image, noise: Option<(&NoiseSpec, u64)>) -> Result<Image> {
    let m = tok.config().multiple();
    let (h, w) = divisible_dims(image.height, image.width, m);
    let resized = if (h, w) == (image.height, image.width) {
        image.clone()
    } else {
        image.resize_bicubic(h, w)
    };
    let out = tok.encode(&resized)?;
    let mut sem = out.sem.as_ref().map(|s| s.indices.clone());
    let mut pix = out.pix.as_ref().map(|p| p.indices.clone());
    if let Some((spec, seed)) = noise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let (Some(g), Some(cb)) = (sem.as_mut(), tok.sem_codebook()) {
            *g = inject_noise(g, spec, cb.size(), &mut rng);
        }
        if let (Some(g), Some(cb)) = (pix.as_mut(), tok.pix_codebook()) {
            *g = inject_noise(g, spec, cb.size(), &mut rng);
        }
    }
    let recon = tok.decode(sem.as_ref(), pix.as_ref())?;
    Ok(if (h, w) == (image.height, image.width) {
        recon
    } else {
        recon.resize_bicubic(image.height, image.width)
    })
}

/// Reads a PNG, reconstructs it, writes the result, and returns its metrics.
pub fn reconstruct_file(
    tok: &DualTokenizer,
    input: &Path,
    output: &Path,
    noise: Option<(&NoiseSpec, u64)>,
) -> Result<MetricsRecord> {
    let image = Image::load_png(input)?;
    let recon = reconstruct_image(tok, &image, noise)?;
    recon.save_png(output)?;
    let window = 7.min(image.height).min(image.width);
    Ok(MetricsRecord {
        stage: "reconstruct".into(),
        psnr: Some(psnr(&recon, &image, 1.0)?.min(100.0)),
        ssim: Some(ssim(&recon, &image, window, 1.0)?),
        ..MetricsRecord::default()
    })
}
