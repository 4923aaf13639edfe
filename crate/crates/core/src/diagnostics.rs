//! Convergence diagnostics.

use crate::scalar::Scalar;
use crate::sampler::norm_quantile;

/// Potential scale reduction computed on chains split in half. Chains are
/// truncated to the shortest length. Returns 1 for identical constant chains
/// and infinity when the halves are constant but disagree.
pub fn split_rhat<T: Scalar>(chains: &[Vec<T>]) -> T {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = len / 2;
    if chains.is_empty() || half < 2 {
        return T::nan();
    }
    let halves: Vec<&[T]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[len - half..len]])
        .collect();
    let n = T::from_count(half);
    let m = T::from_count(halves.len());
    let means: Vec<T> = halves.iter().map(|h| h.iter().copied().sum::<T>() / n).collect();
    let vars: Vec<T> = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / (n - T::one()))
        .collect();
    let w = vars.iter().copied().sum::<T>() / m;
    let grand = means.iter().copied().sum::<T>() / m;
    let b = n * means.iter().map(|&mu| (mu - grand) * (mu - grand)).sum::<T>() / (m - T::one());
    if w == T::zero() {
        return if b == T::zero() { T::one() } else { T::infinity() };
    }
    let var_plus = (n - T::one()) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Normal scores of the pooled ranks (average ranks for ties), reshaped per chain.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let mut pooled: Vec<(f64, usize)> = chains
        .iter()
        .flat_map(|c| c[..len].iter().copied())
        .enumerate()
        .map(|(i, x)| (x, i))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let mut scores = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < pooled.len() {
        let mut k = i;
        while k + 1 < pooled.len() && pooled[k + 1].0 == pooled[i].0 {
            k += 1;
        }
        let rank = 0.5 * ((i + 1) as f64 + (k + 1) as f64);
        let z = norm_quantile((rank - 0.375) / (s + 0.25));
        for p in &pooled[i..=k] {
            scores[p.1] = z;
        }
        i = k + 1;
    }
    scores.chunks(len.max(1)).map(<[f64]>::to_vec).collect()
}

/// Split R̂ of the rank normal scores. Unchanged by monotone transformations.
pub fn bulk_rhat(chains: &[Vec<f64>]) -> f64 {
    split_rhat(&rank_normalize(chains))
}

/// Rank-normalized split R̂: the larger of the bulk value (normal scores of
/// the ranks) and the tail value (same on distances from the pooled median).
pub fn rank_normalized_split_rhat(chains: &[Vec<f64>]) -> f64 {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    if chains.is_empty() || len < 4 {
        return f64::NAN;
    }
    let bulk = bulk_rhat(chains);
    let mut all: Vec<f64> = chains.iter().flat_map(|c| c[..len].iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    let median = 0.5 * (all[(all.len() - 1) / 2] + all[all.len() / 2]);
    let folded: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c[..len].iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = split_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(n_chains: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_chains)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn iid_chains_near_one() {
        let c = iid(4, 2000, 1);
        assert!((split_rhat(&c) - 1.0).abs() < 0.01);
        assert!((rank_normalized_split_rhat(&c) - 1.0).abs() < 0.01);
    }

    #[test]
    fn shifted_chain_detected() {
        let mut c = iid(4, 1000, 2);
        for x in &mut c[0] {
            *x += 3.0;
        }
        assert!(split_rhat(&c) > 1.2);
        assert!(rank_normalized_split_rhat(&c) > 1.2);
    }

    #[test]
    fn trend_within_chain_detected_by_split() {
        let c: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..1000).map(|i| i as f64 / 100.0).collect())
            .collect();
        assert!(split_rhat(&c) > 1.5);
    }

    #[test]
    fn bulk_invariant_under_monotone_map() {
        let c = iid(4, 1000, 3);
        let exp: Vec<Vec<f64>> = c.iter().map(|v| v.iter().map(|x| (4.0 * x).exp()).collect()).collect();
        assert!((bulk_rhat(&c) - bulk_rhat(&exp)).abs() < 1e-12);
        assert!(rank_normalized_split_rhat(&exp) < 1.02);
    }

    #[test]
    fn constant_chains() {
        let c = vec![vec![2.0f32; 10]; 3];
        assert_eq!(split_rhat(&c), 1.0);
        let d = vec![vec![2.0f64; 10], vec![3.0; 10]];
        assert!(split_rhat(&d).is_infinite());
    }
}
