//! Seeded randomness. Every random draw in the crate goes through here so a
//! run is reproducible from its seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::Vector;

pub type SolverRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SolverRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for sub-task `stream` of a run.
pub fn substream(seed: u64, stream: u64) -> SolverRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian(dim: usize, rng: &mut SolverRng) -> Vector {
    Vector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)))
}

/// Uniform direction on the unit sphere (normalised Gaussian).
pub fn unit_sphere(dim: usize, rng: &mut SolverRng) -> Vector {
    loop {
        let g = gaussian(dim, rng);
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

/// Uniform point in the ball of the given radius centred at the origin.
pub fn in_ball(dim: usize, radius: f64, rng: &mut SolverRng) -> Vector {
    use rand::Rng;
    let dir = unit_sphere(dim, rng);
    let u: f64 = rng.random();
    dir * (radius * u.powf(1.0 / dim as f64))
}
