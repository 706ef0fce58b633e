//! Normal-normal partial pooling with method-of-moments hyperparameters.

use serde::Serialize;

use super::stratum::StratumTable;
use super::EstimatorError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierarchicalFit {
    pub mu_hat: f64,
    pub tau2_hat: f64,
    pub sigma2_hat: f64,
    pub weights: Vec<f64>,
    pub pooled_means: Vec<f64>,
}

/// `tau2 / (tau2 + sigma2 / n)`: the weight on a group's own mean.
pub fn shrinkage_weight(tau2: f64, sigma2: f64, n: f64) -> f64 {
    if tau2 <= 0.0 {
        return 0.0;
    }
    tau2 / (tau2 + sigma2 / n)
}

/// Fits the two-level normal model to a stratum table.
///
/// `sigma2` is the pooled within-stratum variance, `tau2` the
/// DerSimonian-Laird moment estimate truncated at zero, and `mu` the
/// precision-weighted mean of the stratum means given `tau2`. Empty strata
/// receive `mu` with weight zero.
pub fn fit_hierarchical(table: &StratumTable) -> Result<HierarchicalFit, EstimatorError> {
    let observed: Vec<(usize, f64)> = table
        .strata
        .iter()
        .filter_map(|s| s.mean.map(|m| (s.n, m)))
        .collect();
    if observed.len() < 2 {
        return Err(EstimatorError::Inestimable(
            "need at least two non-empty strata".into(),
        ));
    }
    let (ss, df) = table
        .strata
        .iter()
        .filter_map(|s| s.var.map(|v| (v * (s.n - 1) as f64, (s.n - 1) as f64)))
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if df == 0.0 {
        return Err(EstimatorError::Inestimable(
            "need at least one stratum with two or more observations".into(),
        ));
    }
    let sigma2 = ss / df;

    if sigma2 <= 0.0 {
        // No within-stratum noise: every observed mean is exact.
        let mu = observed.iter().map(|(_, m)| m).sum::<f64>() / observed.len() as f64;
        let g = observed.len() as f64;
        let tau2 = observed.iter().map(|(_, m)| (m - mu).powi(2)).sum::<f64>() / (g - 1.0);
        let (weights, pooled) = table
            .strata
            .iter()
            .map(|s| match s.mean {
                Some(m) => (1.0, m),
                None => (0.0, mu),
            })
            .unzip();
        return Ok(HierarchicalFit {
            mu_hat: mu,
            tau2_hat: tau2,
            sigma2_hat: 0.0,
            weights,
            pooled_means: pooled,
        });
    }

    let w: Vec<f64> = observed.iter().map(|(n, _)| *n as f64 / sigma2).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let mu_fixed = observed.iter().zip(&w).map(|((_, m), wi)| wi * m).sum::<f64>() / sw;
    let q: f64 = observed
        .iter()
        .zip(&w)
        .map(|((_, m), wi)| wi * (m - mu_fixed).powi(2))
        .sum();
    let c = sw - sw2 / sw;
    let tau2 = ((q - (observed.len() as f64 - 1.0)) / c).max(0.0);

    let (num, den) = observed.iter().fold((0.0, 0.0), |acc, (n, m)| {
        let p = 1.0 / (tau2 + sigma2 / *n as f64);
        (acc.0 + p * m, acc.1 + p)
    });
    let mu = num / den;

    let (weights, pooled_means) = table
        .strata
        .iter()
        .map(|s| match s.mean {
            Some(m) => {
                let wk = shrinkage_weight(tau2, sigma2, s.n as f64);
                (wk, wk * m + (1.0 - wk) * mu)
            }
            None => (0.0, mu),
        })
        .unzip();

    Ok(HierarchicalFit {
        mu_hat: mu,
        tau2_hat: tau2,
        sigma2_hat: sigma2,
        weights,
        pooled_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::stratum::StratumStats;
    use proptest::prelude::*;

    fn table(groups: &[Vec<f64>]) -> StratumTable {
        StratumTable {
            strata: groups.iter().map(|g| StratumStats::from_values(g)).collect(),
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(shrinkage_weight(1.0, 1.0, 1.0), 0.5);
        assert_eq!(shrinkage_weight(0.0, 3.0, 10.0), 0.0);
        assert!((shrinkage_weight(4.0, 8.0, 4.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weight_monotone_on_grid() {
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 * 0.7).collect();
        let ns: Vec<f64> = (1..=10).map(|i| (i * i) as f64).collect();
        for &t in &grid {
            for &s in &grid {
                for w in ns.windows(2) {
                    assert!(shrinkage_weight(t, s, w[1]) > shrinkage_weight(t, s, w[0]));
                }
            }
        }
        for &n in &ns {
            for &s in &grid {
                for w in grid.windows(2) {
                    assert!(shrinkage_weight(w[1], s, n) > shrinkage_weight(w[0], s, n));
                    assert!(shrinkage_weight(s, w[1], n) < shrinkage_weight(s, w[0], n));
                }
            }
        }
        assert!(shrinkage_weight(1.0, 1.0, 1e9) > 0.999);
    }

    #[test]
    fn homogeneous_groups_pool_completely() {
        let t = table(&[vec![1.0, 3.0], vec![0.0, 4.0, 2.0], vec![2.0, 2.5, 1.5]]);
        let fit = fit_hierarchical(&t).unwrap();
        assert_eq!(fit.tau2_hat, 0.0);
        for m in &fit.pooled_means {
            assert!((m - 2.0).abs() < 1e-12);
        }
        assert!((fit.mu_hat - 2.0).abs() < 1e-12);
    }

    #[test]
    fn small_stratum_shrinks_more() {
        let mut big: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        big[0] = 1.0;
        let t = table(&[vec![10.0], big]);
        let fit = fit_hierarchical(&t).unwrap();
        let raw_small = 10.0;
        let raw_big = t.strata[1].mean.unwrap();
        let rel_small = (fit.pooled_means[0] - fit.mu_hat).abs() / (raw_small - fit.mu_hat).abs();
        let rel_big = (fit.pooled_means[1] - fit.mu_hat).abs() / (raw_big - fit.mu_hat).abs();
        assert!(fit.weights[0] < fit.weights[1]);
        assert!(rel_small < rel_big);
    }

    /// Moment estimator written out longhand, one step per line.
    fn moment_oracle(groups: &[Vec<f64>]) -> (f64, f64, f64, Vec<f64>) {
        let mut n = Vec::new();
        let mut ybar = Vec::new();
        let mut within_ss = 0.0;
        let mut within_df = 0.0;
        for g in groups {
            let ni = g.len() as f64;
            let mi = g.iter().sum::<f64>() / ni;
            for v in g {
                within_ss += (v - mi) * (v - mi);
            }
            within_df += ni - 1.0;
            n.push(ni);
            ybar.push(mi);
        }
        let sigma2 = within_ss / within_df;
        let mut sum_w = 0.0;
        let mut sum_w2 = 0.0;
        let mut sum_wy = 0.0;
        for i in 0..n.len() {
            let wi = n[i] / sigma2;
            sum_w += wi;
            sum_w2 += wi * wi;
            sum_wy += wi * ybar[i];
        }
        let mu_fe = sum_wy / sum_w;
        let mut q = 0.0;
        for i in 0..n.len() {
            q += n[i] / sigma2 * (ybar[i] - mu_fe) * (ybar[i] - mu_fe);
        }
        let k = n.len() as f64;
        let mut tau2 = (q - (k - 1.0)) / (sum_w - sum_w2 / sum_w);
        if tau2 < 0.0 {
            tau2 = 0.0;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n.len() {
            let v = tau2 + sigma2 / n[i];
            num += ybar[i] / v;
            den += 1.0 / v;
        }
        let mu = num / den;
        let pooled = (0..n.len())
            .map(|i| {
                let w = tau2 / (tau2 + sigma2 / n[i]);
                w * ybar[i] + (1.0 - w) * mu
            })
            .collect();
        (mu, tau2, sigma2, pooled)
    }

    #[test]
    fn fixture_matches_moment_oracle() {
        let groups = vec![
            vec![12.1, 9.7, 11.4, 10.2],
            vec![4.0, 6.5, 5.2],
            vec![8.8, 7.9, 9.9, 8.1, 10.4, 9.0],
            vec![15.2, 13.1],
        ];
        let fit = fit_hierarchical(&table(&groups)).unwrap();
        let (mu, tau2, sigma2, pooled) = moment_oracle(&groups);
        assert!(tau2 > 0.0);
        assert!((fit.mu_hat - mu).abs() < 1e-10);
        assert!((fit.tau2_hat - tau2).abs() < 1e-10);
        assert!((fit.sigma2_hat - sigma2).abs() < 1e-10);
        for (a, b) in fit.pooled_means.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_strata_get_the_grand_mean() {
        let t = table(&[vec![1.0, 2.0], vec![], vec![5.0, 7.0]]);
        let fit = fit_hierarchical(&t).unwrap();
        assert_eq!(fit.weights[1], 0.0);
        assert_eq!(fit.pooled_means[1], fit.mu_hat);
    }

    #[test]
    fn preconditions() {
        assert!(fit_hierarchical(&table(&[vec![1.0, 2.0], vec![]])).is_err());
        assert!(fit_hierarchical(&table(&[vec![1.0], vec![2.0]])).is_err());
    }

    proptest! {
        #[test]
        fn pooled_means_are_convex_combinations(
            groups in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 2..12), 2..7)
        ) {
            let t = table(&groups);
            let fit = fit_hierarchical(&t).unwrap();
            for (s, (pm, w)) in t.strata.iter().zip(fit.pooled_means.iter().zip(&fit.weights)) {
                let raw = s.mean.unwrap();
                prop_assert!((0.0..=1.0).contains(w));
                let lo = raw.min(fit.mu_hat) - 1e-9;
                let hi = raw.max(fit.mu_hat) + 1e-9;
                prop_assert!(*pm >= lo && *pm <= hi);
            }
        }
    }
}
