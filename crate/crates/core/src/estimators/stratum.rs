//! Per-stratum summaries and the post-stratified mean.

use serde::Serialize;

use super::{EstimatorError, Proportions, Stratifier};
use crate::model::{Arm, PatientRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmFilter {
    Only(Arm),
    All,
}

impl ArmFilter {
    fn admits(self, arm: Arm) -> bool {
        match self {
            ArmFilter::Only(a) => a == arm,
            ArmFilter::All => true,
        }
    }
}

impl From<Arm> for ArmFilter {
    fn from(arm: Arm) -> Self {
        ArmFilter::Only(arm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratumStats {
    pub n: usize,
    /// `None` when the stratum is empty.
    pub mean: Option<f64>,
    /// Unbiased sample variance; `None` when `n < 2`.
    pub var: Option<f64>,
}

impl StratumStats {
    pub const EMPTY: StratumStats = StratumStats {
        n: 0,
        mean: None,
        var: None,
    };

    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::EMPTY;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = (n >= 2)
            .then(|| values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64);
        StratumStats {
            n,
            mean: Some(mean),
            var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumTable {
    pub strata: Vec<StratumStats>,
}

impl StratumTable {
    pub fn len(&self) -> usize {
        self.strata.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    pub fn total_n(&self) -> usize {
        self.strata.iter().map(|s| s.n).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.strata.iter().map(|s| s.n).collect()
    }

    /// Unweighted mean of all observations in the table.
    pub fn grand_mean(&self) -> Option<f64> {
        let n = self.total_n();
        (n > 0).then(|| {
            self.strata
                .iter()
                .filter_map(|s| s.mean.map(|m| m * s.n as f64))
                .sum::<f64>()
                / n as f64
        })
    }

    /// Proportions equal to the observed stratum shares.
    pub fn observed_proportions(&self) -> Result<Proportions, EstimatorError> {
        let n = self.total_n();
        if n == 0 {
            return Err(EstimatorError::EmptyInput);
        }
        Proportions::estimated(
            self.strata.iter().map(|s| s.n as f64 / n as f64).collect(),
            n,
        )
    }
}

pub fn stratum_summaries(
    records: &[PatientRecord],
    arm: ArmFilter,
    stratifier: Stratifier,
) -> Result<StratumTable, EstimatorError> {
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); stratifier.n_strata()];
    let mut any = false;
    for r in records.iter().filter(|r| arm.admits(r.arm)) {
        let k = stratifier.index(r)?;
        values[k].push(r.outcome);
        any = true;
    }
    if !any {
        return Err(EstimatorError::EmptyInput);
    }
    Ok(StratumTable {
        strata: values.iter().map(|v| StratumStats::from_values(v)).collect(),
    })
}

/// `sum_k p_k * mean_k`. Strata with `p_k = 0` are ignored even if empty.
pub fn post_stratified_mean(table: &StratumTable, props: &Proportions) -> Result<f64, EstimatorError> {
    if table.len() != props.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: table.len(),
            found: props.len(),
        });
    }
    let mut total = 0.0;
    for (k, (s, &p)) in table.strata.iter().zip(props.values()).enumerate() {
        if p == 0.0 {
            continue;
        }
        match s.mean {
            Some(m) => total += p * m,
            None => return Err(EstimatorError::EmptyStratum { stratum: k }),
        }
    }
    Ok(total)
}

/// Post-stratification over externally supplied stratum means.
pub fn weighted_mean(means: &[f64], props: &Proportions) -> Result<f64, EstimatorError> {
    if means.len() != props.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: props.len(),
            found: means.len(),
        });
    }
    Ok(means
        .iter()
        .zip(props.values())
        .filter(|(_, &p)| p > 0.0)
        .map(|(m, p)| m * p)
        .sum())
}

/// Empirical stratum mean where `n_k >= cutoff`, model mean otherwise.
/// An empty stratum always takes the model mean.
pub fn hybrid_means(
    table: &StratumTable,
    model_means: &[f64],
    cutoff: usize,
) -> Result<Vec<f64>, EstimatorError> {
    if model_means.len() != table.len() {
        return Err(EstimatorError::LengthMismatch {
            expected: table.len(),
            found: model_means.len(),
        });
    }
    Ok(table
        .strata
        .iter()
        .zip(model_means)
        .map(|(s, &m)| match s.mean {
            Some(mean) if s.n >= cutoff => mean,
            _ => m,
        })
        .collect())
}

/// Stratum shares of a baseline record set.
///
/// With `fallback` set, strata absent from the baseline get their design
/// proportion and the vector is renormalised to sum to one.
pub fn estimate_stratum_proportions(
    baseline: &[PatientRecord],
    stratifier: Stratifier,
    design_props: &Proportions,
    fallback: bool,
) -> Result<Proportions, EstimatorError> {
    if baseline.is_empty() {
        return Err(EstimatorError::EmptyInput);
    }
    let k = stratifier.n_strata();
    if design_props.len() != k {
        return Err(EstimatorError::LengthMismatch {
            expected: k,
            found: design_props.len(),
        });
    }
    let mut counts = vec![0usize; k];
    for r in baseline {
        counts[stratifier.index(r)?] += 1;
    }
    let n = baseline.len();
    let mut p: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    if let Some(missing) = counts
        .iter()
        .zip(design_props.values())
        .position(|(&c, &dp)| c == 0 && dp > 0.0)
    {
        if !fallback {
            return Err(EstimatorError::MissingStratum { stratum: missing });
        }
        for ((pk, &c), &dp) in p.iter_mut().zip(&counts).zip(design_props.values()) {
            if c == 0 {
                *pk = dp;
            }
        }
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        let s: f64 = p.iter().sum();
        // Push the rounding residue onto the largest entry.
        if let Some(big) = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])) {
            p[big] += 1.0 - s;
        }
    }
    Proportions::estimated(p, n)
}
