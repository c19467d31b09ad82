use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::IndexGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Random,
    Zero,
}

/// Token perturbation policy: with probability `alpha` a grid is perturbed,
/// and then each of its tokens is replaced with probability `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Random,
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, alpha: f64, beta: f64) -> Result<Self> {
        let spec = Self { kind, alpha, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&p) {
                return domain(format!("noise {name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    /// Applies the policy to one token set in place; returns which positions
    /// were selected for replacement.
    pub fn apply<R: Rng + ?Sized>(&self, ids: &mut [u32], codebook_size: usize, rng: &mut R) -> Vec<bool> {
        let mut replaced = vec![false; ids.len()];
        if self.kind == NoiseKind::None || !rng.random_bool(self.alpha) {
            return replaced;
        }
        for (id, flag) in ids.iter_mut().zip(replaced.iter_mut()) {
            if rng.random_bool(self.beta) {
                *flag = true;
                *id = match self.kind {
                    NoiseKind::Random => rng.random_range(0..codebook_size as u32),
                    _ => 0,
                };
            }
        }
        replaced
    }
}

pub fn inject_noise<R: Rng + ?Sized>(
    grid: &IndexGrid,
    spec: &NoiseSpec,
    codebook_size: usize,
    rng: &mut R,
) -> IndexGrid {
    let mut out = grid.clone();
    spec.apply(&mut out.data, codebook_size, rng);
    out
}

/// Perturbs a flat batch of `ids.len() / per_sample` grids independently.
pub fn inject_noise_batch<R: Rng + ?Sized>(
    ids: &[u32],
    per_sample: usize,
    spec: &NoiseSpec,
    codebook_size: usize,
    rng: &mut R,
) -> Vec<u32> {
    let mut out = ids.to_vec();
    for chunk in out.chunks_mut(per_sample.max(1)) {
        spec.apply(chunk, codebook_size, rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = IndexGrid::new(2, 2, vec![3, 4, 5, 6]).unwrap();
        let off = NoiseSpec::new(NoiseKind::Random, 0.0, 1.0).unwrap();
        for _ in 0..100 {
            assert_eq!(inject_noise(&g, &off, 8, &mut rng), g);
        }
        let zero = NoiseSpec::new(NoiseKind::Zero, 1.0, 1.0).unwrap();
        assert_eq!(inject_noise(&g, &zero, 8, &mut rng).data, vec![0; 4]);

        let big = IndexGrid::filled(100, 100, 1);
        let spec = NoiseSpec::new(NoiseKind::Zero, 1.0, 0.1).unwrap();
        let changed = inject_noise(&big, &spec, 8, &mut rng)
            .data
            .iter()
            .filter(|&&v| v == 0)
            .count();
        assert!((700..=1300).contains(&changed), "{changed}");
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(NoiseSpec::new(NoiseKind::Random, 1.5, 0.1).is_err());
        assert!(NoiseSpec::new(NoiseKind::Random, 0.1, -0.1).is_err());
    }

    #[test]
    fn random_ids_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NoiseSpec::new(NoiseKind::Random, 1.0, 1.0).unwrap();
        let out = inject_noise_batch(&[0; 64], 16, &spec, 5, &mut rng);
        assert!(out.iter().all(|&v| v < 5));
    }
}
