//! Small statistics helpers: a one-sided Mann–Whitney U test with tie
//! correction (normal approximation) used to verify that backdoor-sample
//! flip counts stochastically dominate clean-sample counts.

#[derive(Debug, Clone, Copy)]
pub struct MannWhitneyResult {
    pub u_statistic: f64,
    pub z_score: f64,
    /// One-sided p-value for "group A tends to exceed group B".
    pub p_value: f64,
}

/// One-sided Mann–Whitney U test of H1: values in `a` are stochastically
/// greater than values in `b`. Uses average ranks for ties and a
/// tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u_greater(a: &[f64], b: &[f64]) -> MannWhitneyResult {
    let n_a = a.len() as f64;
    let n_b = b.len() as f64;
    let n = n_a + n_b;

    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("non-finite sample"));

    // average ranks over tie groups, accumulating the tie correction term
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0usize;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let count = (j - i + 1) as f64;
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &pooled[i..=j] {
            if item.1 {
                rank_sum_a += avg_rank;
            }
        }
        tie_term += count * count * count - count;
        i = j + 1;
    }

    let u = rank_sum_a - n_a * (n_a + 1.0) / 2.0;
    let mean_u = n_a * n_b / 2.0;
    let var_u = (n_a * n_b / 12.0) * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var_u <= 0.0 {
        // all observations identical: no evidence either way
        return MannWhitneyResult {
            u_statistic: u,
            z_score: 0.0,
            p_value: 0.5,
        };
    }
    let z = (u - mean_u - 0.5) / var_u.sqrt();
    MannWhitneyResult {
        u_statistic: u,
        z_score: z,
        p_value: 1.0 - standard_normal_cdf(z),
    }
}

/// Φ(z) via the Abramowitz–Stegun 7.1.26 erf approximation (|error| <
/// 1.5e-7), ample for thresholding p-values around 0.01.
pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cdf_reference_values() {
        assert!((standard_normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((standard_normal_cdf(1.96) - 0.9750021).abs() < 1e-5);
        assert!((standard_normal_cdf(-1.2816) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn clearly_separated_groups_give_tiny_p() {
        let a: Vec<f64> = (0..100).map(|i| 20.0 + (i % 5) as f64).collect();
        let b: Vec<f64> = (0..100).map(|i| (i % 5) as f64).collect();
        let result = mann_whitney_u_greater(&a, &b);
        assert!(result.p_value < 1e-10, "p = {}", result.p_value);
    }

    #[test]
    fn identical_distributions_give_large_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..200).map(|_| rng.random_range(0..10) as f64).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.random_range(0..10) as f64).collect();
        let result = mann_whitney_u_greater(&a, &b);
        assert!(result.p_value > 0.01, "p = {}", result.p_value);
    }

    #[test]
    fn direction_matters() {
        let a: Vec<f64> = vec![1.0; 50];
        let b: Vec<f64> = vec![10.0; 50];
        let result = mann_whitney_u_greater(&a, &b);
        assert!(result.p_value > 0.99);
    }

    #[test]
    fn constant_pooled_sample_is_inconclusive() {
        let result = mann_whitney_u_greater(&[3.0; 10], &[3.0; 10]);
        assert_eq!(result.p_value, 0.5);
    }
}
