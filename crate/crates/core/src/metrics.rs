//! Wasserstein distance, stop-probability summaries and error measures.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::futility::Decision;
use crate::rng::{child_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty sample")]
    EmptySample,
    #[error("no decisions to summarise")]
    EmptyInput,
    #[error("reference probability must be positive")]
    ZeroReference,
    #[error("shifted and benchmark probabilities coincide")]
    DegenerateGap,
    #[error("sample contains a non-finite value")]
    NonFinite,
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if xs.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Exact W1 distance between two empirical distributions.
///
/// Both quantile functions are step functions with jumps at multiples of
/// `1/n` and `1/m`; the integral of their absolute difference is summed over
/// the merged partition, tracked in integer units of `1/(n m)`.
pub fn wasserstein_l1(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let (n, m) = (a.len() as u128, b.len() as u128);
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / n as f64);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut total = 0.0;
    let end = n * m;
    while pos < end {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    Ok(total / end as f64)
}

/// Bootstrap standard error of the W1 estimate, resampling both samples.
pub fn wasserstein_bootstrap_se(
    a: &[f64],
    b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut rng = child_rng(seed, Stream::Bootstrap, 0);
    let draw = |xs: &[f64], rng: &mut crate::rng::SimRng| -> Vec<f64> {
        (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).collect()
    };
    let stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let ra = draw(a, &mut rng);
            let rb = draw(b, &mut rng);
            wasserstein_l1(&ra, &rb)
        })
        .collect::<Result<_, _>>()?;
    if stats.len() < 2 {
        return Ok(0.0);
    }
    let mean = stats.iter().sum::<f64>() / stats.len() as f64;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (stats.len() - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StopSummary {
    pub n_replicates: usize,
    pub n_stops: usize,
    pub stop_probability: f64,
    pub mc_standard_error: f64,
}

impl StopSummary {
    pub fn from_flags<I: IntoIterator<Item = bool>>(stops: I) -> Result<Self, MetricsError> {
        let (mut n, mut k) = (0usize, 0usize);
        for s in stops {
            n += 1;
            k += usize::from(s);
        }
        if n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let p = k as f64 / n as f64;
        Ok(StopSummary {
            n_replicates: n,
            n_stops: k,
            stop_probability: p,
            mc_standard_error: (p * (1.0 - p) / n as f64).sqrt(),
        })
    }
}

pub fn stop_probability(decisions: &[Decision]) -> Result<StopSummary, MetricsError> {
    StopSummary::from_flags(decisions.iter().map(|d| d.stop_for_futility))
}

/// `(p - p_ref) / p_ref`.
pub fn relative_change(p: f64, p_ref: f64) -> Result<f64, MetricsError> {
    if !(p_ref > 0.0) {
        return Err(MetricsError::ZeroReference);
    }
    Ok((p - p_ref) / p_ref)
}

/// Share of the shift-induced gap removed by an adjustment:
/// `(p_shift - p_adjusted) / (p_shift - p_bench)`.
pub fn correction_fraction(p_shift: f64, p_adjusted: f64, p_bench: f64) -> Result<f64, MetricsError> {
    let gap = p_shift - p_bench;
    if gap == 0.0 || !gap.is_finite() {
        return Err(MetricsError::DegenerateGap);
    }
    Ok((p_shift - p_adjusted) / gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FutilityRuleSpec;
    use proptest::prelude::*;
    use rand::Rng;

    /// Minimum-cost perfect matching (Hungarian algorithm, O(n^3)).
    fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut p = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0;
            let mut minv = vec![f64::INFINITY; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let mut delta = f64::INFINITY;
                let mut j1 = 0;
                for j in 1..=n {
                    if !used[j] {
                        let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                        if cur < minv[j] {
                            minv[j] = cur;
                            way[j] = j0;
                        }
                        if minv[j] < delta {
                            delta = minv[j];
                            j1 = j;
                        }
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[p[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if p[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                p[j0] = p[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
    }

    /// W1 as an assignment between `n m` equal-mass atoms.
    fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
        let (n, m) = (a.len(), b.len());
        let left: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, m)).collect();
        let right: Vec<f64> = b.iter().flat_map(|&y| std::iter::repeat_n(y, n)).collect();
        let cost: Vec<Vec<f64>> = left
            .iter()
            .map(|x| right.iter().map(|y| (x - y).abs()).collect())
            .collect();
        assignment_cost(&cost) / (n * m) as f64
    }

    #[test]
    fn examples() {
        assert_eq!(wasserstein_l1(&[1.0, 5.0, 2.0], &[5.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_l1(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_l1(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_l1(&[1.0, 2.0], &[2.0, 1.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_l1(&[], &[1.0]), Err(MetricsError::EmptySample));
    }

    #[test]
    fn unequal_sizes_match_transport_oracle() {
        let mut rng = crate::rng::rng_from_seed(99);
        for _ in 0..10 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let w = wasserstein_l1(&a, &b).unwrap();
            assert!((w - transport_oracle(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn stop_summaries() {
        let rule = FutilityRuleSpec::posterior();
        let d = |s: bool| Decision {
            stop_for_futility: s,
            statistic: if s { 0.0 } else { 1.0 },
            rule,
        };
        let s = stop_probability(&[d(true), d(false), d(true), d(true)]).unwrap();
        assert_eq!(s.stop_probability, 0.75);
        assert!((s.mc_standard_error - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
        let none = stop_probability(&[d(false); 5]).unwrap();
        assert_eq!((none.stop_probability, none.mc_standard_error), (0.0, 0.0));
        assert_eq!(stop_probability(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn change_measures() {
        assert!((relative_change(0.5, 0.4).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(relative_change(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(relative_change(0.3, 0.0), Err(MetricsError::ZeroReference));
        assert_eq!(correction_fraction(0.3, 0.2, 0.2).unwrap(), 1.0);
        assert_eq!(correction_fraction(0.3, 0.3, 0.2).unwrap(), 0.0);
        assert!((correction_fraction(0.30, 0.25, 0.20).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(correction_fraction(0.2, 0.1, 0.2), Err(MetricsError::DegenerateGap));
    }

    #[test]
    fn bootstrap_se_is_deterministic_and_positive() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64).cos() + 0.3).collect();
        let s1 = wasserstein_bootstrap_se(&a, &b, 200, 5).unwrap();
        let s2 = wasserstein_bootstrap_se(&a, &b, 200, 5).unwrap();
        assert_eq!(s1, s2);
        assert!(s1 > 0.0);
    }

    proptest! {
        #[test]
        fn metric_axioms(
            a in prop::collection::vec(-100.0f64..100.0, 1..12),
            b in prop::collection::vec(-100.0f64..100.0, 1..12),
            c in prop::collection::vec(-100.0f64..100.0, 1..12),
            shift in -50.0f64..50.0,
            scale in -3.0f64..3.0,
        ) {
            let ab = wasserstein_l1(&a, &b).unwrap();
            let ba = wasserstein_l1(&b, &a).unwrap();
            let bc = wasserstein_l1(&b, &c).unwrap();
            let ac = wasserstein_l1(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(wasserstein_l1(&a, &a).unwrap(), 0.0);
            let sa: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + shift).collect();
            prop_assert!((wasserstein_l1(&sa, &sb).unwrap() - ab).abs() < 1e-9 * (1.0 + ab));
            let ka: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let kb: Vec<f64> = b.iter().map(|x| x * scale).collect();
            prop_assert!((wasserstein_l1(&ka, &kb).unwrap() - scale.abs() * ab).abs() < 1e-9 * (1.0 + ab));
        }

        #[test]
        fn correction_fraction_is_scale_free(
            ps in 0.01f64..1.0, pa in 0.0f64..1.0, pb in 0.0f64..1.0, k in 0.01f64..10.0
        ) {
            prop_assume!((ps - pb).abs() > 1e-3);
            let f = correction_fraction(ps, pa, pb).unwrap();
            let g = correction_fraction(k * ps, k * pa, k * pb).unwrap();
            prop_assert!((f - g).abs() < 1e-9 * (1.0 + f.abs()));
        }
    }
}
