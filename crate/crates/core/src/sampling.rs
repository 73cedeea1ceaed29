//! Seeded sample generation for the verification oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Near-kink sampling never produces more points than this in total.
pub const MAX_KINK_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    StandardNormal,
    /// Uniform on `[-radius, radius]^d`.
    UniformBox {
        radius: f64,
    },
    /// Points within `offset` of each kink hyperplane `{x : w^T x = 0}`.
    /// `count` is then the number of points per hyperplane.
    NearKinks {
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub count: usize,
    pub distribution: Sampling,
    pub seed: u64,
    /// Pass threshold applied to the report's `max_residual`.
    pub tolerance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            distribution: Sampling::StandardNormal,
            seed: 0,
            tolerance: 1e-8,
        }
    }
}

impl SamplerConfig {
    pub fn standard_normal(count: usize, seed: u64, tolerance: f64) -> Self {
        Self {
            count,
            distribution: Sampling::StandardNormal,
            seed,
            tolerance,
        }
    }

    /// 1000 points per hyperplane at distance up to `1e-6`.
    pub fn near_kinks(seed: u64, tolerance: f64) -> Self {
        Self {
            count: 1_000,
            distribution: Sampling::NearKinks { offset: 1e-6 },
            seed,
            tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig(
                "sample count must be at least 1".into(),
            ));
        }
        match self.distribution {
            Sampling::UniformBox { radius } if !(radius > 0.0 && radius.is_finite()) => Err(
                Error::InvalidConfig(format!("box radius must be positive, got {radius}")),
            ),
            Sampling::NearKinks { offset } if !(offset > 0.0 && offset.is_finite()) => Err(
                Error::InvalidConfig(format!("kink offset must be positive, got {offset}")),
            ),
            _ if self.tolerance.is_nan() || self.tolerance < 0.0 => Err(Error::InvalidConfig(
                format!("tolerance must be nonnegative, got {}", self.tolerance),
            )),
            _ => Ok(()),
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// `count` standard normal vectors in `R^d`, deterministic in `seed`.
pub fn standard_normal_vectors(count: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| normal_vec(&mut rng, d)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Drops zero normals and normals collinear with an earlier one.
fn distinct_directions(normals: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for w in normals {
        let nw = norm(w);
        if nw == 0.0 {
            continue;
        }
        let unit: Vec<f64> = w.iter().map(|v| v / nw).collect();
        let duplicate = kept.iter().any(|k| {
            let dot: f64 = k.iter().zip(&unit).map(|(a, b)| a * b).sum();
            dot.abs() > 1.0 - 1e-12
        });
        if !duplicate {
            kept.push(unit);
        }
    }
    kept
}

/// Input points in `R^d` drawn per `cfg`. `kink_normals` is only used by
/// [`Sampling::NearKinks`].
pub fn draw_vectors(
    cfg: &SamplerConfig,
    d: usize,
    kink_normals: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.distribution {
        Sampling::StandardNormal => Ok((0..cfg.count).map(|_| normal_vec(&mut rng, d)).collect()),
        Sampling::UniformBox { radius } => Ok((0..cfg.count)
            .map(|_| (0..d).map(|_| rng.random_range(-radius..=radius)).collect())
            .collect()),
        Sampling::NearKinks { offset } => {
            let planes = distinct_directions(kink_normals);
            if planes.is_empty() {
                return Err(Error::InvalidConfig(
                    "near-kink sampling needs at least one nonzero kink normal".into(),
                ));
            }
            let per_plane = cfg.count.min(MAX_KINK_SAMPLES / planes.len()).max(1);
            let mut out = Vec::with_capacity(per_plane * planes.len());
            for unit in &planes {
                for _ in 0..per_plane {
                    let mut g = normal_vec(&mut rng, d);
                    let along: f64 = g.iter().zip(unit).map(|(a, b)| a * b).sum();
                    let shift = offset * rng.random_range(-1.0..=1.0) - along;
                    g.iter_mut()
                        .zip(unit)
                        .for_each(|(gi, ui)| *gi += shift * ui);
                    out.push(g);
                }
            }
            Ok(out)
        }
    }
}

/// Scalar samples: standard normal, uniform on `[-radius, radius]`, or
/// uniform within `offset` of the origin.
pub fn draw_scalars(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = (0..cfg.count).map(|_| match cfg.distribution {
        Sampling::StandardNormal => rng.sample(StandardNormal),
        Sampling::UniformBox { radius } => rng.random_range(-radius..=radius),
        Sampling::NearKinks { offset } => rng.random_range(-offset..=offset),
    });
    Ok(draws.collect())
}
