use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Paired bootstrap p-value for the claim `mean(a) > mean(b)`.
///
/// Example indices are resampled with replacement; the p-value is the share
/// of resamples in which `mean(a) <= mean(b)`. Ties count against the claim,
/// so `p(a, b) + p(b, a) >= 1` for the same seed.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract(
            "paired bootstrap needs at least two examples".into(),
        ));
    }
    if resamples == 0 {
        return Err(Error::Contract("resamples must be positive".into()));
    }
    let n = a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..resamples {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa += a[i];
            sb += b[i];
        }
        if sa <= sb {
            not_better += 1;
        }
    }
    Ok(not_better as f64 / resamples as f64)
}
