//! Seeded deterministic random number generator.
//!
//! The generator is xoshiro256** (Blackman & Vigna) seeded through
//! SplitMix64. Both algorithms are pure integer arithmetic on u64, so the
//! same seed yields the same stream on every platform, independent of any
//! external crate's stream guarantees. Gaussian variates come from the
//! Box-Muller transform; no state beyond the four xoshiro words is kept.

#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of stream identifiers into a single sub-seed so that
/// independent components (clients, repeats, stages) draw from
/// non-overlapping streams of the same base seed.
pub fn stream_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    let mut acc = splitmix64(&mut x);
    for &p in path {
        let mut y = acc ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        acc = splitmix64(&mut y);
    }
    acc
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { state }
    }

    /// Generator for the sub-stream identified by `path` under `seed`.
    pub fn with_stream(seed: u64, path: &[u64]) -> Self {
        Rng::new(stream_seed(seed, path))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch only, stateless).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Index drawn from a normalized probability vector; the final category
    /// absorbs any rounding slack.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut cum = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return k;
            }
        }
        probs.len() - 1
    }

    /// Uniform integer in [0, n) by the widening-multiply method.
    pub fn next_below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn reference_values_pinned() {
        // SplitMix64 published test vector for seed 0
        let mut x = 0u64;
        assert_eq!(splitmix64(&mut x), 0xE220A8397B1DCDAF);
        assert_eq!(splitmix64(&mut x), 0x6E789E6AA1B965F4);
        assert_eq!(splitmix64(&mut x), 0x06C45D188009454F);
        // first xoshiro256** outputs under that expansion, frozen so any
        // change to the stream is caught
        let mut r = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(
            first,
            vec![11091344671253066420, 13793997310169335082, 1900383378846508768]
        );
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = Rng::with_stream(42, &[1, 0]);
        let mut b = Rng::with_stream(42, &[1, 1]);
        assert_ne!(a.next_u64(), b.next_u64());
        let mut c = Rng::with_stream(42, &[1, 0]);
        assert_eq!(Rng::with_stream(42, &[1, 0]).next_u64(), c.next_u64());
    }

    #[test]
    fn uniform_mean_sane() {
        let mut r = Rng::new(3);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| r.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn normal_moments_sane() {
        let mut r = Rng::new(4);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }

    #[test]
    fn categorical_frequencies() {
        let probs = [0.2, 0.5, 0.3];
        let mut r = Rng::new(5);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[r.categorical(&probs)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut xs: Vec<usize> = (0..50).collect();
        let mut r = Rng::new(6);
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
