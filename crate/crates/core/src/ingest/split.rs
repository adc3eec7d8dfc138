use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles `ids` with a seeded generator and splits them into
/// `(train, test)`. The training share is rounded and clamped so that at
/// least one id always lands in the test split.
pub fn split_dataset<T: Clone>(
    ids: &[T],
    train_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));

    let n_train = ((train_fraction * n as f64).round() as usize).clamp((n > 1) as usize, n - 1);
    let train = order[..n_train].iter().map(|&i| ids[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| ids[i].clone()).collect();
    Ok((train, test))
}
