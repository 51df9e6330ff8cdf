//! Procedural 8x8 two-class images: class 0 has one bright horizontal bar,
//! class 1 one bright vertical bar, both at a random offset and buried in
//! Gaussian pixel noise (std 0.3).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};

const SIDE: usize = 8;

pub fn synthetic(n: usize, seed: u64, split: Split) -> Dataset {
    let tag = match split {
        Split::Train => 0x5452,
        Split::Test => 0x5445,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for i in 0..n {
        let class = i % 2;
        let at = rng.gen_range(1..SIDE - 1);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let on = if class == 0 { y == at } else { x == at };
                images.push((if on { 1.0 } else { 0.0 } + noise.sample(&mut rng)) as f32);
            }
        }
        labels.push(class);
    }
    Dataset::new([1, SIDE, SIDE], 2, split, images, labels).expect("consistent synthetic data")
}
