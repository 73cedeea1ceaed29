//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipabsorb_core::{ActivationKind, Block, Matrix, PlantConfig, Skip};

/// Identity-skip block with Gaussian weights, where no subset satisfies the
/// condition, so the search visits every subset.
pub fn generic_block(d: usize, n: usize, act: ActivationKind, seed: u64) -> Block {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let up = Matrix::random_normal(n, d, &mut rng);
    let down = Matrix::random_normal(d, n, &mut rng);
    Block::ungated(up, down, act, Skip::Identity).expect("shapes are consistent")
}

pub fn planted_block(
    d: usize,
    n: usize,
    m: usize,
    act: ActivationKind,
    seed: u64,
) -> (Block, Vec<usize>) {
    let (b, cert) = skipabsorb_core::plant_instance(&PlantConfig::new(d, n, m, act, seed))
        .expect("valid shape");
    (b, cert.subset)
}
