use crate::rng::SplitMix64;

const SPLIT_STREAM: u64 = 0x5b117;

/// Seeded shuffle of `ids`, then the first `round(len * train_fraction)` go to train.
pub fn split_dataset<I: Clone>(ids: &[I], train_fraction: f64, seed: u64) -> (Vec<I>, Vec<I>) {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    SplitMix64::stream(seed, SPLIT_STREAM).shuffle(&mut order);
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).min(ids.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}
