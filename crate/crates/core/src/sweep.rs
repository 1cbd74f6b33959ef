//! Data-parallel helpers. With the `parallel` feature (default) work is
//! spread over the rayon pool; without it everything runs on the calling
//! thread. The `_sequential` variants are always available so the two can be
//! compared side by side.

use crate::harness::{self, ExperimentConfig, ExperimentReport, HarnessError};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `items.iter().map(f)`, in parallel when the feature is on. Output order
/// matches input order either way.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// One experiment per seed, `base` otherwise unchanged.
pub fn seed_sweep(base: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<ExperimentReport, HarnessError>> {
    map(seeds, |s| run_seed(base, *s))
}

pub fn seed_sweep_sequential(base: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<ExperimentReport, HarnessError>> {
    map_sequential(seeds, |s| run_seed(base, *s))
}

/// Apply `f` to every single-byte variant of `bytes`: each offset set to
/// each of the 255 values it does not already hold. Results come back as
/// `(offset, new_value, f(variant))` in offset order.
pub fn byte_variants<R, F>(bytes: &[u8], f: F) -> Vec<(usize, u8, R)>
where
    R: Send,
    F: Fn(&[u8]) -> R + Sync + Send,
{
    let offsets: Vec<usize> = (0..bytes.len()).collect();
    map(&offsets, |&i| variants_at(bytes, i, &f)).into_iter().flatten().collect()
}

pub fn byte_variants_sequential<R, F>(bytes: &[u8], f: F) -> Vec<(usize, u8, R)>
where
    F: Fn(&[u8]) -> R,
{
    (0..bytes.len()).flat_map(|i| variants_at(bytes, i, &f)).collect()
}

fn variants_at<R>(bytes: &[u8], i: usize, f: &impl Fn(&[u8]) -> R) -> Vec<(usize, u8, R)> {
    let mut buf = bytes.to_vec();
    let mut out = Vec::with_capacity(255);
    for v in 0..=255u8 {
        if v == bytes[i] {
            continue;
        }
        buf[i] = v;
        out.push((i, v, f(&buf)));
    }
    out
}

fn run_seed(base: &ExperimentConfig, seed: u64) -> Result<ExperimentReport, HarnessError> {
    let mut cfg = base.clone();
    cfg.set_seed(seed);
    harness::run(&cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 7;
        assert_eq!(map(&xs, f), map_sequential(&xs, f));
    }

    #[test]
    fn byte_variants_cover_every_other_value() {
        let bytes = [0u8, 7, 255];
        let v = byte_variants(&bytes, |b| b.to_vec());
        assert_eq!(v.len(), 3 * 255);
        assert!(v.iter().all(|(i, x, b)| b[*i] == *x && bytes[*i] != *x));
        let changed: usize = v.iter().map(|(_, _, b)| b.iter().zip(&bytes).filter(|(a, c)| a != c).count()).sum();
        assert_eq!(changed, 3 * 255);
        assert_eq!(v, byte_variants_sequential(&bytes, |b| b.to_vec()));
    }

    #[test]
    fn sweep_matches_sequential_sweep() {
        let mut base = ExperimentConfig::default();
        base.ops = 50;
        base.net.drop_prob = 0.1;
        let seeds = [1, 2, 3, 4];
        let a: Vec<String> = seed_sweep(&base, &seeds).into_iter().map(|r| r.unwrap().render_machine()).collect();
        let b: Vec<String> = seed_sweep_sequential(&base, &seeds)
            .into_iter()
            .map(|r| r.unwrap().render_machine())
            .collect();
        assert_eq!(a, b);
    }
}
