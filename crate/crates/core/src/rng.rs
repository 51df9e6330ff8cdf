//! Counter-based random numbers.
//!
//! Every Gaussian draw is a pure function of `(key, stream, index)`, which is
//! what makes chip instances reproducible element by element and lets chip
//! evaluation run in any order or on any number of threads.
//!
//! The generator is Philox4x32-10 (Salmon et al., "Parallel random numbers:
//! as easy as 1, 2, 3"), checked against the Random123 known-answer vectors.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32-10 block.
#[inline]
pub fn philox4x32(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, ctr[0]);
        let (hi1, lo1) = mulhilo(M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// SplitMix64 finalizer, used to derive keys from seeds and domain tags.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Addresses one independent sequence of draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    /// Upper 64 bits of the Philox counter (e.g. chip index).
    pub major: u64,
    /// Next 32 bits (e.g. tensor id).
    pub minor: u32,
}

/// Keyed counter-based generator of standard normal variates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
}

#[inline]
fn unit_open(hi: u32, lo: u32) -> f64 {
    // 53 random bits mapped to the open interval (0, 1).
    let bits = (u64::from(hi) << 21) ^ (u64::from(lo) >> 11);
    ((bits & ((1 << 53) - 1)) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

impl CounterRng {
    pub fn new(seed: u64, domain: u64) -> Self {
        let k = mix64(seed ^ mix64(domain));
        Self { key: [k as u32, (k >> 32) as u32] }
    }

    #[inline]
    fn block(&self, stream: Stream, block: u32) -> [u32; 4] {
        philox4x32([block, stream.minor, stream.major as u32, (stream.major >> 32) as u32], self.key)
    }

    /// Pair of standard normals for one counter block (Box-Muller).
    #[inline]
    fn normal_pair(&self, stream: Stream, block: u32) -> (f64, f64) {
        let r = self.block(stream, block);
        let u1 = unit_open(r[0], r[1]);
        let u2 = unit_open(r[2], r[3]);
        let rad = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (rad * c, rad * s)
    }

    /// The `index`-th standard normal of `stream`.
    pub fn normal(&self, stream: Stream, index: u64) -> f64 {
        let block = u32::try_from(index / 2).expect("stream index exceeds 2^33");
        let (a, b) = self.normal_pair(stream, block);
        if index.is_multiple_of(2) {
            a
        } else {
            b
        }
    }

    /// Fills `out` with draws `0..out.len()` of `stream`.
    pub fn fill_normal(&self, stream: Stream, out: &mut [f64]) {
        for (block, pair) in out.chunks_mut(2).enumerate() {
            let (a, b) = self.normal_pair(stream, block as u32);
            pair[0] = a;
            if pair.len() > 1 {
                pair[1] = b;
            }
        }
    }

    /// Uniform in (0,1); uses a disjoint counter space from `normal`.
    pub fn uniform(&self, stream: Stream, index: u32) -> f64 {
        let r =
            philox4x32([index, stream.minor, stream.major as u32, (stream.major >> 32) as u32 ^ 0x8000_0000], self.key);
        unit_open(r[0], r[1])
    }
}
