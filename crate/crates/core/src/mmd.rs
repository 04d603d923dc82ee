//! Gaussian-kernel-ensemble Maximum Mean Discrepancy.
//!
//! The exact estimator is the biased V-statistic (diagonal terms included),
//! i.e. the Euclidean norm of the mean feature difference; the subsampled
//! estimator averages the exact statistic over M independent subsample pairs
//! of size N.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_WIDTHS: [f64; 5] = [1.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmdConfig {
    pub widths: Vec<f64>,
    /// Number of subsample pairs.
    pub subsample_count: usize,
    /// Size of each subsample.
    pub subsample_size: usize,
    pub seed: u64,
}

impl MmdConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            widths: DEFAULT_WIDTHS.to_vec(),
            subsample_count: 100,
            subsample_size: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w <= 0.0) {
            return Err(Error::argument("kernel widths must be positive"));
        }
        if self.subsample_count < 1 {
            return Err(Error::argument("subsample count must be >= 1"));
        }
        if self.subsample_size < 2 {
            return Err(Error::argument("subsample size must be >= 2"));
        }
        Ok(())
    }
}

/// Width-ensemble Gaussian kernel: sum over widths of exp(-||z-z'||^2 / (2 s^2)).
pub fn kernel(z: &[f64], z2: &[f64], widths: &[f64]) -> f64 {
    assert_eq!(z.len(), z2.len(), "kernel dimension mismatch");
    let d2 = crate::numerics::squared_distance(z, z2);
    kernel_from_d2(d2, widths)
}

fn kernel_from_d2(d2: f64, widths: &[f64]) -> f64 {
    widths.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

/// Biased MMD estimate between explicit latent sets, in root units.
pub fn mmd_exact(a: &[Vec<f64>], b: &[Vec<f64>], widths: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::argument("mmd_exact needs nonempty sets"));
    }
    let kaa = mean_kernel(a, a, widths);
    let kbb = mean_kernel(b, b, widths);
    let kab = mean_kernel(a, b, widths);
    // clamp absorbs -1e-17-style rounding before the root
    Ok((kaa + kbb - 2.0 * kab).max(0.0).sqrt())
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], widths: &[f64]) -> f64 {
    // summed in sorted order so mmd_exact(A, B) == mmd_exact(B, A) bit-exactly
    let mut vals = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            vals.push(kernel(x, y, widths));
        }
    }
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// Mean over `subsample_count` pairs of without-replacement subsamples of
/// size `subsample_size`. The per-pair RNG stream is derived from the pair
/// index, so the result does not depend on evaluation order.
pub fn mmd_subsampled(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmdConfig) -> Result<f64> {
    cfg.validate()?;
    let n = cfg.subsample_size;
    if a.len() < n || b.len() < n {
        return Err(Error::argument(format!(
            "parent sets ({}, {}) smaller than subsample size {n}",
            a.len(),
            b.len()
        )));
    }
    let root = Rng::with_stream(cfg.seed, 0);
    let mut total = 0.0;
    for i in 0..cfg.subsample_count {
        let mut rng = root.split(i as u64);
        let ia = rng.sample_without_replacement(a.len(), n);
        let ib = rng.sample_without_replacement(b.len(), n);
        let sa: Vec<Vec<f64>> = ia.into_iter().map(|j| a[j].clone()).collect();
        let sb: Vec<Vec<f64>> = ib.into_iter().map(|j| b[j].clone()).collect();
        total += mmd_exact(&sa, &sb, &cfg.widths)?;
    }
    Ok(total / cfg.subsample_count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_cloud(n: usize, dim: usize, mean: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal_scaled(mean, 1.0)).collect())
            .collect()
    }

    #[test]
    fn kernel_at_zero_distance_is_width_count() {
        let z = vec![0.3, -0.7, 1.1];
        assert_eq!(kernel(&z, &z, &DEFAULT_WIDTHS), 5.0);
    }

    #[test]
    fn kernel_symmetric_and_decaying() {
        let a = vec![0.0, 0.0];
        let b = vec![1.0, 2.0];
        assert_eq!(kernel(&a, &b, &DEFAULT_WIDTHS), kernel(&b, &a, &DEFAULT_WIDTHS));
        let mut prev = kernel(&a, &a, &DEFAULT_WIDTHS);
        for r in 1..200 {
            let far = vec![r as f64, 0.0];
            let k = kernel(&a, &far, &DEFAULT_WIDTHS);
            assert!(k < prev, "kernel must decay monotonically in distance");
            prev = k;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn mmd_identical_multisets_is_zero() {
        let mut rng = Rng::new(1);
        let a = gaussian_cloud(20, 4, 0.0, &mut rng);
        assert_eq!(mmd_exact(&a, &a, &DEFAULT_WIDTHS).unwrap(), 0.0);
        let z = vec![vec![0.5, 0.5]];
        assert_eq!(mmd_exact(&z, &z, &DEFAULT_WIDTHS).unwrap(), 0.0);
    }

    #[test]
    fn two_cluster_limit_is_sqrt_ten() {
        // all A-points equal, all B-points equal, clusters far apart:
        // MMD^2 -> 5 + 5 - 0
        let a = vec![vec![0.0; 4]; 10];
        let b = vec![vec![1e4; 4]; 10];
        let m = mmd_exact(&a, &b, &DEFAULT_WIDTHS).unwrap();
        assert!((m - 10.0f64.sqrt()).abs() < 1e-9, "{m}");
    }

    #[test]
    fn subsampled_reduces_to_exact_when_n_covers_parents() {
        let mut rng = Rng::new(2);
        let a = gaussian_cloud(8, 3, 0.0, &mut rng);
        let cfg = MmdConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
            subsample_count: 1,
            subsample_size: 8,
            seed: 0,
        };
        assert_eq!(mmd_subsampled(&a, &a, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn subsampled_separates_shifted_gaussians() {
        let mut rng = Rng::new(3);
        let a = gaussian_cloud(1000, 32, 0.0, &mut rng);
        let b_same = gaussian_cloud(1000, 32, 0.0, &mut rng);
        let b_far = gaussian_cloud(1000, 32, 5.0, &mut rng);
        let cfg = MmdConfig::new(17);
        let near = mmd_subsampled(&a, &b_same, &cfg).unwrap();
        let far = mmd_subsampled(&a, &b_far, &cfg).unwrap();
        // the biased V-statistic has a same-distribution floor of about 0.47
        // at subsample size 20 in 32 dimensions, which caps this ratio near 4.7
        assert!(far / near > 4.0, "near {near} far {far}");
        assert!(far > 2.0 && near < 0.5, "near {near} far {far}");
    }

    #[test]
    fn subsampled_deterministic_under_seed() {
        let mut rng = Rng::new(4);
        let a = gaussian_cloud(50, 8, 0.0, &mut rng);
        let b = gaussian_cloud(50, 8, 1.0, &mut rng);
        let cfg = MmdConfig {
            subsample_count: 10,
            ..MmdConfig::new(99)
        };
        let x = mmd_subsampled(&a, &b, &cfg).unwrap();
        let y = mmd_subsampled(&a, &b, &cfg).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn subsampled_rejects_small_parents() {
        let a = vec![vec![0.0; 2]; 5];
        let cfg = MmdConfig::new(0);
        assert!(mmd_subsampled(&a, &a, &cfg).is_err());
    }

    #[test]
    fn same_distribution_decay_over_sizes() {
        // median over 20 seeds of same-Gaussian mmd_exact at sizes 50/200/800
        // must be non-increasing
        let mut medians = Vec::new();
        for &size in &[50usize, 200, 800] {
            let mut vals: Vec<f64> = (0..20)
                .map(|s| {
                    let mut rng = Rng::with_stream(1000 + s, 7);
                    let a = gaussian_cloud(size, 8, 0.0, &mut rng);
                    let b = gaussian_cloud(size, 8, 0.0, &mut rng);
                    mmd_exact(&a, &b, &DEFAULT_WIDTHS).unwrap()
                })
                .collect();
            vals.sort_by(f64::total_cmp);
            medians.push(vals[10]);
        }
        assert!(
            medians[0] >= medians[1] && medians[1] >= medians[2],
            "medians {medians:?}"
        );
    }

    #[test]
    fn subsampled_estimator_concentrates() {
        let mut rng = Rng::new(5);
        let a = gaussian_cloud(400, 16, 0.0, &mut rng);
        let b = gaussian_cloud(400, 16, 2.0, &mut rng);
        let vals: Vec<f64> = (0..20)
            .map(|s| {
                let cfg = MmdConfig::new(5000 + s);
                mmd_subsampled(&a, &b, &cfg).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(var.sqrt() < 0.1 * mean, "std {} mean {mean}", var.sqrt());
    }

    mod properties {
        use super::super::*;
        use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn nonnegative_and_symmetric(seed in 0u64..1000) {
                let mut rng = Rng::new(seed);
                let na = 2 + rng.index(10);
                let nb = 2 + rng.index(10);
                let dim = 1 + rng.index(6);
                let a: Vec<Vec<f64>> = (0..na)
                    .map(|_| (0..dim).map(|_| rng.uniform_in(-10.0, 10.0)).collect())
                    .collect();
                let b: Vec<Vec<f64>> = (0..nb)
                    .map(|_| (0..dim).map(|_| rng.uniform_in(-10.0, 10.0)).collect())
                    .collect();
                let ab = mmd_exact(&a, &b, &DEFAULT_WIDTHS).unwrap();
                let ba = mmd_exact(&b, &a, &DEFAULT_WIDTHS).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab.to_bits(), ba.to_bits());
            }
        }
    }
}
