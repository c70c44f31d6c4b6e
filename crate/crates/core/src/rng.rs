//! Named, seedable random streams.
//!
//! Each consumer (timestep draws, noise, latents, poses, init) reads its own
//! ChaCha stream derived from the run seed, so enabling or disabling one
//! consumer never shifts another's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{ScoreTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Timestep = 1,
    Noise = 2,
    Latent = 3,
    Pose = 4,
    Init = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// The per-run stream bundle threaded through distillation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSet {
    pub timestep: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub latent: ChaCha8Rng,
    pub pose: ChaCha8Rng,
}

impl StreamSet {
    pub fn new(seed: u64) -> Self {
        Self {
            timestep: stream(seed, Stream::Timestep),
            noise: stream(seed, Stream::Noise),
            latent: stream(seed, Stream::Latent),
            pose: stream(seed, Stream::Pose),
        }
    }

    /// Word positions of `[timestep, noise, latent, pose]`.
    pub fn positions(&self) -> [u128; 4] {
        [
            self.timestep.get_word_pos(),
            self.noise.get_word_pos(),
            self.latent.get_word_pos(),
            self.pose.get_word_pos(),
        ]
    }

    pub fn restore(seed: u64, positions: [u128; 4]) -> Self {
        let mut s = Self::new(seed);
        s.timestep.set_word_pos(positions[0]);
        s.noise.set_word_pos(positions[1]);
        s.latent.set_word_pos(positions[2]);
        s.pose.set_word_pos(positions[3]);
        s
    }
}

pub fn standard_normal_tensor<R: rand::Rng + ?Sized>(shape: Shape, rng: &mut R) -> ScoreTensor {
    ScoreTensor::from_fn(shape, |_, _, _| StandardNormal.sample(rng))
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
