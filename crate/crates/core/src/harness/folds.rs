use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the fit for factor count `p` on fold `fold`.
pub fn cell_seed(base: u64, p: usize, fold: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(base) ^ p as u64) ^ fold as u64)
}

fn partition_seed(base: u64) -> u64 {
    mix_seed(base ^ 0x5eed_f01d)
}

/// Stratified assignment of rows to `k` folds.
///
/// Rows of each class are shuffled, then the classes are dealt round-robin
/// (positives first, continuing the rotation into the negatives), so fold
/// sizes differ by at most one and each class is spread as evenly as possible.
/// Returns the sorted row indices of each fold; the result depends only on
/// `(labels, k, seed)`.
pub fn stratified_folds(labels: &DVector<f64>, k: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(k >= 1, "at least one fold");
    let mut rng = ChaCha8Rng::seed_from_u64(partition_seed(seed));
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [1.0, -1.0] {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rows.shuffle(&mut rng);
        for r in rows {
            folds[slot % k].push(r);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Rows outside fold `fold`.
pub fn complement(folds: &[Vec<usize>], fold: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = folds.iter().enumerate().filter(|&(i, _)| i != fold).flat_map(|(_, f)| f.iter().copied()).collect();
    rows.sort_unstable();
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..10).flat_map(|p| (0..5).map(move |f| cell_seed(42, p, f))).collect();
        assert_eq!(seeds.len(), 50);
        assert_eq!(cell_seed(42, 3, 1), cell_seed(42, 3, 1));
    }

    #[test]
    fn balanced_classes() {
        let y = DVector::from_fn(30, |i, _| if i < 10 { 1.0 } else { -1.0 });
        let folds = stratified_folds(&y, 5, 1);
        for f in &folds {
            assert_eq!(f.len(), 6);
            assert_eq!(f.iter().filter(|&&i| y[i] > 0.0).count(), 2);
        }
        assert_eq!(complement(&folds, 0).len(), 24);
    }
}
