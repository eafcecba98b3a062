//! Seed derivation, deterministic parallel mapping, and small numeric
//! helpers shared across modules.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream from a master seed and a label.
///
/// Streams with different labels are statistically independent, and the
/// derivation is stable across platforms, so every consumer of randomness
/// (model init, data order, augmentation, patient generation) can own its
/// own stream without coordinating counters.
pub fn rng_stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Standard normal sample via Box-Muller, so param init needs nothing
/// beyond a uniform source.
pub fn randn<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Fills a vector with `n` scaled normal samples.
pub fn randn_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| randn(rng) * scale).collect()
}

/// Worker cap honored by the few embarrassingly parallel loops.
///
/// Read from `FVLM_THREADS`; defaults to the machine's parallelism.
/// Results are placed by index, so the outcome is identical for any cap.
pub fn worker_cap() -> usize {
    std::env::var("FVLM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Maps `f` over `0..n` on up to `worker_cap()` threads, collecting results
/// in index order. `f` must be pure per index.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_cap().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ptr = SlotWriter(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let f = &f;
            let writer = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                // Each index is claimed exactly once, so the write is unaliased.
                unsafe { writer.0.add(i).write(Some(value)) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

struct SlotWriter<T>(*mut Option<T>);
unsafe impl<T: Send> Sync for SlotWriter<T> {}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_streams_are_independent_and_stable() {
        let a: Vec<u64> = {
            let mut r = rng_stream(7, "alpha");
            (0..4).map(|_| r.gen()).collect()
        };
        let a2: Vec<u64> = {
            let mut r = rng_stream(7, "alpha");
            (0..4).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = rng_stream(7, "beta");
            (0..4).map(|_| r.gen()).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn parallel_map_matches_serial() {
        let serial: Vec<usize> = (0..100).map(|i| i * i).collect();
        let parallel = parallel_map(100, |i| i * i);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn randn_moments_are_sane() {
        let mut rng = rng_stream(0, "randn");
        let xs = randn_vec(&mut rng, 20_000, 1.0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
