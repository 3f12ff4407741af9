//! Counter-based random streams: every Monte Carlo path owns an independent
//! ChaCha stream selected by its index, so results do not depend on how the
//! paths are distributed across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`),
/// accumulated in index order.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
