//! Aspect-ratio matching, crop-integrity filtering, resolution-bucketed
//! batching and per-stage target resolutions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Exact width:height ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub w: u32,
    pub h: u32,
}

impl Ratio {
    pub const fn new(w: u32, h: u32) -> Self {
        Self { w, h }
    }

    pub fn value(&self) -> f64 {
        self.w as f64 / self.h as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.w, self.h)
    }
}

/// The eleven supported width:height ratios, in tie-break order.
pub const ASPECT_RATIOS: [Ratio; 11] = [
    Ratio::new(1, 1),
    Ratio::new(3, 4),
    Ratio::new(4, 3),
    Ratio::new(2, 3),
    Ratio::new(3, 2),
    Ratio::new(1, 2),
    Ratio::new(2, 1),
    Ratio::new(1, 3),
    Ratio::new(3, 1),
    Ratio::new(1, 4),
    Ratio::new(4, 1),
];

/// Smallest retained area fraction a crop may keep.
pub const MIN_RETAINED: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropPlan {
    pub ratio: Ratio,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub retained: f64,
}

/// Picks the ratio closest to `W/H` in log distance (earliest wins ties) and
/// the largest centered box of exactly that ratio.
pub fn match_ratio(width: u32, height: u32, ratios: &[Ratio]) -> Result<CropPlan> {
    if width == 0 || height == 0 {
        return domain("image dims must be at least 1");
    }
    let Some(first) = ratios.first() else {
        return domain("empty ratio set");
    };
    let target = (width as f64 / height as f64).ln();
    let mut best = *first;
    let mut best_d = (target - first.value().ln()).abs();
    for r in &ratios[1..] {
        let d = (target - r.value().ln()).abs();
        if d < best_d {
            best = *r;
            best_d = d;
        }
    }
    // Largest integer k with k·rw <= W and k·rh <= H gives an exact-ratio box.
    let k = (width / best.w).min(height / best.h);
    let (cw, ch) = if k == 0 {
        // Too small for an exact integral box: crop along one axis only.
        if width as u64 * best.h as u64 > height as u64 * best.w as u64 {
            (((height as u64 * best.w as u64) / best.h as u64).max(1) as u32, height)
        } else {
            (width, ((width as u64 * best.h as u64) / best.w as u64).max(1) as u32)
        }
    } else {
        (k * best.w, k * best.h)
    };
    Ok(CropPlan {
        ratio: best,
        x: (width - cw) / 2,
        y: (height - ch) / 2,
        w: cw,
        h: ch,
        retained: (cw as f64 * ch as f64) / (width as f64 * height as f64),
    })
}

/// Keeps a crop iff it retains at least [`MIN_RETAINED`] of the source area.
pub fn integrity_filter(plan: &CropPlan) -> bool {
    plan.retained >= MIN_RETAINED
}

/// Groups sample ids by exact target resolution. Samples are shuffled with
/// `seed` first (pass `None` to keep input order); batches never mix sizes.
pub fn bucket_batches<T: Clone>(
    samples: &[(T, (u32, u32))],
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<Vec<T>>> {
    if batch_size == 0 {
        return domain("batch size must be at least 1");
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    // Buckets keep first-seen order so output is deterministic.
    let mut keys: Vec<(u32, u32)> = Vec::new();
    let mut buckets: BTreeMap<(u32, u32), Vec<T>> = BTreeMap::new();
    for i in order {
        let (item, res) = &samples[i];
        if !buckets.contains_key(res) {
            keys.push(*res);
        }
        buckets.entry(*res).or_default().push(item.clone());
    }
    let mut out = Vec::new();
    for key in keys {
        let items = buckets.remove(&key).unwrap();
        out.extend(items.chunks(batch_size).map(|c| c.to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ResolutionMode {
    /// Square images of the given side.
    Fixed { size: u32 },
    /// Aspect-ratio preserving with at most `budget` pixels.
    Anyres { budget: u64 },
}

/// Trainable parameter groups of the unified model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Adapters,
    VisionEmbeddings,
    VisionHead,
    Body,
    TextEmbeddings,
    TextHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub id: String,
    pub mode: ResolutionMode,
    pub trainable: Vec<ParamGroup>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ResolutionMode::Fixed { size: 0 } | ResolutionMode::Anyres { budget: 0 } => {
                domain(format!("stage {}: resolution budget must be positive", self.id))
            }
            _ => Ok(()),
        }
    }
}

/// Target `(height, width)` for an image under a stage's resolution policy.
/// Both output dims are multiples of `multiple`.
pub fn stage_resolution(stage: &StagePlan, width: u32, height: u32, multiple: u32) -> Result<(u32, u32)> {
    stage.validate()?;
    if multiple == 0 {
        return domain("divisibility multiple must be positive");
    }
    match stage.mode {
        ResolutionMode::Fixed { size } => {
            if size % multiple != 0 {
                return domain(format!("fixed size {size} not divisible by {multiple}"));
            }
            Ok((size, size))
        }
        ResolutionMode::Anyres { budget } => {
            let plan = match_ratio(width, height, &ASPECT_RATIOS)?;
            let r = plan.ratio;
            // Exact-ratio dims are (rh·t, rw·t); both divisible by `multiple`
            // exactly when t is a multiple of `step`.
            let m = multiple as u64;
            let step = lcm(m / gcd(m, r.w as u64), m / gcd(m, r.h as u64));
            let unit_w = r.w as u64 * step;
            let unit_h = r.h as u64 * step;
            let mut best: Option<(u64, u64)> = None;
            let mut k = 1u64;
            loop {
                let (h, w) = (unit_h * k, unit_w * k);
                if h * w > budget {
                    break;
                }
                best = Some((h, w));
                k += 1;
            }
            match best {
                Some((h, w)) => Ok((h as u32, w as u32)),
                None => domain(format!(
                    "budget {budget} too small for ratio {r} at multiple {multiple}"
                )),
            }
        }
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One line of a data-plan manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub ratio: String,
    pub retained: f64,
    pub keep: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<(u32, u32)>,
}

pub fn manifest_record(path: &str, width: u32, height: u32, stage: Option<(&StagePlan, u32)>) -> Result<ManifestRecord> {
    let plan = match_ratio(width, height, &ASPECT_RATIOS)?;
    let keep = integrity_filter(&plan);
    let target = match stage {
        Some((s, m)) if keep => Some(stage_resolution(s, width, height, m)?),
        _ => None,
    };
    Ok(ManifestRecord {
        path: path.to_string(),
        width,
        height,
        ratio: plan.ratio.to_string(),
        retained: plan.retained,
        keep,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let p = match_ratio(800, 600, &ASPECT_RATIOS).unwrap();
        assert_eq!(p.ratio, Ratio::new(4, 3));
        assert_eq!(p.retained, 1.0);
        assert!(integrity_filter(&p));

        let p = match_ratio(1000, 300, &ASPECT_RATIOS).unwrap();
        assert_eq!(p.ratio, Ratio::new(3, 1));
        assert_eq!((p.w, p.h), (900, 300));
        assert!((p.retained - 0.9).abs() < 1e-12);
        assert!(integrity_filter(&p));

        let p = match_ratio(3000, 300, &ASPECT_RATIOS).unwrap();
        assert_eq!(p.ratio, Ratio::new(4, 1));
        assert_eq!((p.w, p.h), (1200, 300));
        assert!((p.retained - 0.4).abs() < 1e-12);
        assert!(!integrity_filter(&p));
    }

    #[test]
    fn crop_is_centered_and_inside() {
        let p = match_ratio(1000, 300, &ASPECT_RATIOS).unwrap();
        assert_eq!((p.x, p.y), (50, 0));
        let p = match_ratio(1, 1, &ASPECT_RATIOS).unwrap();
        assert_eq!((p.w, p.h, p.retained), (1, 1, 1.0));
        let p = match_ratio(2, 7, &ASPECT_RATIOS).unwrap();
        assert!(p.x + p.w <= 2 && p.y + p.h <= 7);
        assert!(match_ratio(0, 5, &ASPECT_RATIOS).is_err());
    }

    #[test]
    fn bucket_example() {
        let a = (64u32, 64u32);
        let b = (32u32, 96u32);
        let samples: Vec<(usize, (u32, u32))> = (0..5)
            .map(|i| (i, a))
            .chain((5..8).map(|i| (i, b)))
            .collect();
        let batches = bucket_batches(&samples, 4, None).unwrap();
        assert_eq!(batches, vec![vec![0, 1, 2, 3], vec![4], vec![5, 6, 7]]);
        assert!(bucket_batches(&samples, 0, None).is_err());
        let s1 = bucket_batches(&samples, 4, Some(3)).unwrap();
        let s2 = bucket_batches(&samples, 4, Some(3)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn stage_resolution_examples() {
        let fixed = StagePlan {
            id: "s".into(),
            mode: ResolutionMode::Fixed { size: 256 },
            trainable: vec![],
        };
        assert_eq!(stage_resolution(&fixed, 123, 77, 8).unwrap(), (256, 256));
        let any = StagePlan {
            id: "a".into(),
            mode: ResolutionMode::Anyres { budget: 64 * 64 },
            trainable: vec![],
        };
        assert_eq!(stage_resolution(&any, 100, 50, 8).unwrap(), (40, 80));
        assert_eq!(stage_resolution(&any, 500, 500, 8).unwrap(), (64, 64));
        let odd = StagePlan {
            id: "o".into(),
            mode: ResolutionMode::Anyres { budget: 60 * 60 },
            trainable: vec![],
        };
        assert_eq!(stage_resolution(&odd, 500, 500, 8).unwrap(), (56, 56));
    }
}
