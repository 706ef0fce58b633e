//! Random-intercept linear mixed model fitted by profiled REML.
//!
//! Mean model: intercept, subgroup indicators (first subgroup is the
//! reference), a treatment indicator, and optionally treatment-by-subgroup
//! interactions. One random intercept per site. With `lambda = s2_site /
//! s2_resid` the marginal covariance is `s2_resid * (I + lambda Z Z')`, whose
//! inverse is block-wise `I - c_s 11'` with `c_s = lambda / (1 + lambda n_s)`,
//! so every quantity reduces to per-site sums.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::EstimatorError;
use crate::model::{Arm, ModelSpec, PatientRecord};

const LAMBDA_MIN: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e3;
const GRID_PER_DECADE: usize = 10;
const GOLDEN_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmmFit {
    /// Intercept, subgroup contrasts, treatment, then interactions if any.
    pub fixed_effects: Vec<f64>,
    pub sigma2_resid: f64,
    pub sigma2_site: f64,
    pub lambda: f64,
    pub converged: bool,
    pub log_restricted_likelihood: f64,
    pub n_subgroups: usize,
    pub interaction: bool,
}

impl LmmFit {
    /// Index of the treatment coefficient.
    pub fn treatment_index(&self) -> usize {
        self.n_subgroups
    }

    /// Treatment effect implied for subgroup `k`.
    pub fn subgroup_effect(&self, k: usize) -> f64 {
        let mut e = self.fixed_effects[self.treatment_index()];
        if self.interaction && k > 0 {
            e += self.fixed_effects[self.n_subgroups + k];
        }
        e
    }

    fn row(&self, k: usize, arm: Arm) -> Vec<f64> {
        design_row(self.n_subgroups, self.interaction, k, arm)
    }
}

fn n_columns(k: usize, interaction: bool) -> usize {
    1 + (k - 1) + 1 + if interaction { k - 1 } else { 0 }
}

fn design_row(k: usize, interaction: bool, subgroup: usize, arm: Arm) -> Vec<f64> {
    let mut x = vec![0.0; n_columns(k, interaction)];
    x[0] = 1.0;
    if subgroup > 0 {
        x[subgroup] = 1.0;
    }
    let treated = arm == Arm::Treatment;
    if treated {
        x[k] = 1.0;
        if interaction && subgroup > 0 {
            x[k + subgroup] = 1.0;
        }
    }
    x
}

/// Sufficient statistics of one data set for repeated REML evaluations.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    site_of: Vec<usize>,
    site_n: Vec<f64>,
    site_xsum: Vec<DVector<f64>>,
    xtx: DMatrix<f64>,
    n_subgroups: usize,
    interaction: bool,
}

#[derive(Debug, Clone)]
pub struct RemlEval {
    pub objective: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl RemlProblem {
    pub fn new(
        records: &[PatientRecord],
        n_subgroups: usize,
        model: ModelSpec,
    ) -> Result<Self, EstimatorError> {
        let interaction = match model {
            ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction,
            } => treatment_by_subgroup_interaction,
            ModelSpec::HierarchicalNormal => {
                return Err(EstimatorError::Inestimable(
                    "hierarchical model is not a mixed model".into(),
                ))
            }
        };
        if n_subgroups == 0 || records.is_empty() {
            return Err(EstimatorError::EmptyInput);
        }
        let mut site_ids: Vec<usize> = records.iter().map(|r| r.site_index).collect();
        site_ids.sort_unstable();
        site_ids.dedup();
        if site_ids.len() < 2 {
            return Err(EstimatorError::TooFewSites);
        }
        let p = n_columns(n_subgroups, interaction);
        let mut x = Vec::with_capacity(records.len());
        let mut y = Vec::with_capacity(records.len());
        let mut site_of = Vec::with_capacity(records.len());
        let mut site_n = vec![0.0; site_ids.len()];
        let mut site_xsum = vec![DVector::zeros(p); site_ids.len()];
        let mut xtx = DMatrix::zeros(p, p);
        for r in records {
            if r.subgroup_index >= n_subgroups {
                return Err(EstimatorError::InvalidRecord(format!(
                    "subgroup index {} out of range",
                    r.subgroup_index
                )));
            }
            let row = design_row(n_subgroups, interaction, r.subgroup_index, r.arm);
            let s = site_ids.binary_search(&r.site_index).expect("site present");
            site_n[s] += 1.0;
            for (a, &xa) in row.iter().enumerate() {
                site_xsum[s][a] += xa;
                for (b, &xb) in row.iter().enumerate() {
                    xtx[(a, b)] += xa * xb;
                }
            }
            x.push(row);
            y.push(r.outcome);
            site_of.push(s);
        }
        if records.len() <= p {
            return Err(EstimatorError::RankDeficient);
        }
        // Relative pivot check on the fixed-effects cross-product.
        let scale = (0..p).map(|i| xtx[(i, i)]).fold(0.0, f64::max);
        match xtx.clone().cholesky() {
            Some(ch) => {
                let l = ch.l();
                if (0..p).any(|i| l[(i, i)] * l[(i, i)] <= 1e-10 * scale) {
                    return Err(EstimatorError::RankDeficient);
                }
            }
            None => return Err(EstimatorError::RankDeficient),
        }
        Ok(RemlProblem {
            x,
            y,
            site_of,
            site_n,
            site_xsum,
            xtx,
            n_subgroups,
            interaction,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.xtx.nrows()
    }

    /// Profiled restricted log-likelihood at variance ratio `lambda`.
    pub fn evaluate(&self, lambda: f64) -> Option<RemlEval> {
        let p = self.p();
        let n = self.n() as f64;
        let c: Vec<f64> = self.site_n.iter().map(|&ns| lambda / (1.0 + lambda * ns)).collect();

        let mut a = self.xtx.clone();
        for (cs, u) in c.iter().zip(&self.site_xsum) {
            a -= u * u.transpose() * *cs;
        }
        let mut site_ysum = vec![0.0; self.site_n.len()];
        let mut xty = DVector::zeros(p);
        for ((row, &yi), &s) in self.x.iter().zip(&self.y).zip(&self.site_of) {
            site_ysum[s] += yi;
            for (j, &xj) in row.iter().enumerate() {
                xty[j] += xj * yi;
            }
        }
        let mut b = xty;
        for ((cs, u), ys) in c.iter().zip(&self.site_xsum).zip(&site_ysum) {
            b -= u * (*cs * ys);
        }
        let chol = a.cholesky()?;
        let beta = chol.solve(&b);
        let log_det_a: f64 = 2.0 * (0..p).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();

        let mut rr = 0.0;
        let mut site_rsum = vec![0.0; self.site_n.len()];
        for ((row, &yi), &s) in self.x.iter().zip(&self.y).zip(&self.site_of) {
            let fitted: f64 = row.iter().zip(beta.iter()).map(|(xj, bj)| xj * bj).sum();
            let r = yi - fitted;
            rr += r * r;
            site_rsum[s] += r;
        }
        for (cs, rs) in c.iter().zip(&site_rsum) {
            rr -= cs * rs * rs;
        }
        let dof = n - p as f64;
        let sigma2 = (rr / dof).max(f64::MIN_POSITIVE);
        let log_det_h: f64 = self.site_n.iter().map(|&ns| (1.0 + lambda * ns).ln()).sum();
        let objective = -0.5
            * (dof * (sigma2.ln() + 1.0 + (2.0 * std::f64::consts::PI).ln())
                + log_det_h
                + log_det_a);
        objective.is_finite().then(|| RemlEval {
            objective,
            beta: beta.iter().copied().collect(),
            sigma2,
        })
    }

    /// Log-spaced search grid over `[1e-6, 1e3]`.
    pub fn grid() -> Vec<f64> {
        let decades = (LAMBDA_MAX / LAMBDA_MIN).log10().round() as usize;
        let steps = decades * GRID_PER_DECADE;
        (0..=steps)
            .map(|i| LAMBDA_MIN * 10f64.powf(i as f64 / GRID_PER_DECADE as f64))
            .collect()
    }

    pub fn fit(&self) -> Result<LmmFit, EstimatorError> {
        let grid = Self::grid();
        let evals: Vec<Option<RemlEval>> = grid.iter().map(|&l| self.evaluate(l)).collect();
        let best = evals
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (i, e.objective)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        let Some((imax, _)) = best else {
            return Err(EstimatorError::NoConvergence);
        };
        let last = grid.len() - 1;
        let mut best_lambda = grid[imax];
        let mut best_eval = evals[imax].clone().expect("finite");
        let converged = imax < last;
        if converged {
            let mut lo = grid[imax.saturating_sub(1)].ln();
            let mut hi = grid[imax + 1].ln();
            let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
            let f = |t: f64| {
                self.evaluate(t.exp())
                    .map(|e| e.objective)
                    .unwrap_or(f64::NEG_INFINITY)
            };
            let mut x1 = hi - inv_phi * (hi - lo);
            let mut x2 = lo + inv_phi * (hi - lo);
            let mut f1 = f(x1);
            let mut f2 = f(x2);
            while hi - lo > GOLDEN_REL_TOL {
                if f1 >= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - inv_phi * (hi - lo);
                    f1 = f(x1);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + inv_phi * (hi - lo);
                    f2 = f(x2);
                }
            }
            for t in [x1, x2, lo, hi] {
                if let Some(e) = self.evaluate(t.exp()) {
                    if e.objective > best_eval.objective {
                        best_lambda = t.exp();
                        best_eval = e;
                    }
                }
            }
        }
        Ok(LmmFit {
            fixed_effects: best_eval.beta,
            sigma2_resid: best_eval.sigma2,
            sigma2_site: best_lambda * best_eval.sigma2,
            lambda: best_lambda,
            converged,
            log_restricted_likelihood: best_eval.objective,
            n_subgroups: self.n_subgroups,
            interaction: self.interaction,
        })
    }
}

/// Fits the random-intercept model. A maximum on the upper edge of the
/// variance-ratio grid is reported with `converged = false`.
pub fn fit_random_intercept_lmm(
    records: &[PatientRecord],
    n_subgroups: usize,
    model: ModelSpec,
) -> Result<LmmFit, EstimatorError> {
    RemlProblem::new(records, n_subgroups, model)?.fit()
}

/// Population-level (fixed-effects only) mean for each requested subgroup.
pub fn predict_stratum_means(
    fit: &LmmFit,
    arm: Arm,
    subgroups: &[usize],
) -> Result<Vec<f64>, EstimatorError> {
    if !fit.converged {
        return Err(EstimatorError::NotConverged);
    }
    subgroups
        .iter()
        .map(|&k| {
            if k >= fit.n_subgroups {
                return Err(EstimatorError::InvalidRecord(format!(
                    "subgroup index {k} out of range"
                )));
            }
            Ok(fit
                .row(k, arm)
                .iter()
                .zip(&fit.fixed_effects)
                .map(|(x, b)| x * b)
                .sum())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const BASE: [f64; 2] = [40.0, 20.0];
    const EFFECT: [f64; 2] = [7.0, 3.0];

    /// Balanced fixture: 4 sites x 2 subgroups x 2 arms, `per_cell` patients each.
    fn fixture(per_cell: usize, sd: f64, site_effects: [f64; 4], seed: u64) -> Vec<PatientRecord> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let mut out = Vec::new();
        for site in 0..4 {
            for k in 0..2 {
                for arm in Arm::BOTH {
                    for _ in 0..per_cell {
                        let z: f64 = rng.sample(StandardNormal);
                        let treated = if arm == Arm::Treatment { EFFECT[k] } else { 0.0 };
                        out.push(PatientRecord {
                            id: out.len() as u64,
                            subgroup_index: k,
                            site_index: site,
                            arm,
                            outcome: BASE[k] + treated + site_effects[site] + sd * z,
                            in_ia: true,
                            baseline_available: true,
                        });
                    }
                }
            }
        }
        out
    }

    /// Same residual pattern in every site, so site means carry no spread.
    fn site_balanced_fixture(per_cell: usize, seed: u64) -> Vec<PatientRecord> {
        let mut rng = crate::rng::rng_from_seed(seed);
        let pattern: Vec<f64> = (0..per_cell * 4).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = Vec::new();
        for site in 0..4 {
            let mut it = pattern.iter();
            for k in 0..2 {
                for arm in Arm::BOTH {
                    for _ in 0..per_cell {
                        let treated = if arm == Arm::Treatment { EFFECT[k] } else { 0.0 };
                        out.push(PatientRecord {
                            id: out.len() as u64,
                            subgroup_index: k,
                            site_index: site,
                            arm,
                            outcome: BASE[k] + treated + it.next().unwrap(),
                            in_ia: true,
                            baseline_available: true,
                        });
                    }
                }
            }
        }
        out
    }

    /// Ordinary least squares through the normal equations.
    fn ols(records: &[PatientRecord], interaction: bool) -> Vec<f64> {
        let p = n_columns(2, interaction);
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        for r in records {
            let x = design_row(2, interaction, r.subgroup_index, r.arm);
            for a in 0..p {
                xty[a] += x[a] * r.outcome;
                for b in 0..p {
                    xtx[(a, b)] += x[a] * x[b];
                }
            }
        }
        xtx.lu().solve(&xty).unwrap().iter().copied().collect()
    }

    #[test]
    fn no_site_spread_collapses_to_ols() {
        let recs = site_balanced_fixture(15, 3);
        let model = ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: true,
        };
        let fit = fit_random_intercept_lmm(&recs, 2, model).unwrap();
        assert!(fit.converged);
        assert!(fit.lambda <= 1e-4, "lambda {}", fit.lambda);
        for (a, b) in fit.fixed_effects.iter().zip(ols(&recs, true)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_interaction_recovers_subgroup_effects() {
        let recs = fixture(15, 1e-6, [1.5, -2.0, 0.4, 3.1], 8);
        let model = ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: true,
        };
        let fit = fit_random_intercept_lmm(&recs, 2, model).unwrap();
        assert!((fit.subgroup_effect(0) - 7.0).abs() < 1e-3);
        assert!((fit.subgroup_effect(1) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn homogeneous_effect_model_pools_the_effect() {
        let recs = fixture(15, 1e-6, [0.0; 4], 4);
        let model = ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: false,
        };
        let fit = fit_random_intercept_lmm(&recs, 2, model).unwrap();
        assert!(fit.converged);
        let oracle = ols(&recs, false);
        let t = fit.fixed_effects[fit.treatment_index()];
        assert!((t - oracle[2]).abs() < 1e-6);
        assert!(t > 3.0 && t < 7.0);
        assert!(fit.subgroup_effect(0) < 7.0);
        assert!(fit.subgroup_effect(1) > 3.0);
    }

    #[test]
    fn predictions() {
        let recs = fixture(15, 1e-6, [0.0; 4], 6);
        let with = fit_random_intercept_lmm(
            &recs,
            2,
            ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction: true,
            },
        )
        .unwrap();
        for arm in Arm::BOTH {
            let pred = predict_stratum_means(&with, arm, &[0, 1]).unwrap();
            for (k, p) in pred.iter().enumerate() {
                let cell: Vec<f64> = recs
                    .iter()
                    .filter(|r| r.arm == arm && r.subgroup_index == k)
                    .map(|r| r.outcome)
                    .collect();
                let m = cell.iter().sum::<f64>() / cell.len() as f64;
                assert!((p - m).abs() < 1e-3);
            }
        }

        let without = fit_random_intercept_lmm(
            &recs,
            2,
            ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction: false,
            },
        )
        .unwrap();
        let t = predict_stratum_means(&without, Arm::Treatment, &[0, 1]).unwrap();
        let c = predict_stratum_means(&without, Arm::Control, &[0, 1]).unwrap();
        assert!(((t[0] - c[0]) - (t[1] - c[1])).abs() < 1e-12);

        // Hand-assembled X * beta.
        let b = &without.fixed_effects;
        let manual = [b[0] + b[2], b[0] + b[1] + b[2], b[0], b[0] + b[1]];
        for (got, want) in t.iter().chain(&c).zip(manual) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn returned_lambda_beats_every_grid_point() {
        for seed in 0..5 {
            let recs = fixture(8, 2.0, [1.0, -1.5, 0.3, 2.2], 100 + seed);
            let model = ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction: false,
            };
            let problem = RemlProblem::new(&recs, 2, model).unwrap();
            let fit = problem.fit().unwrap();
            assert!(fit.converged);
            for l in RemlProblem::grid() {
                let v = problem.evaluate(l).unwrap().objective;
                assert!(fit.log_restricted_likelihood >= v);
            }
            assert!(fit.sigma2_site >= 0.0 && fit.sigma2_resid > 0.0);
        }
    }

    #[test]
    fn error_paths() {
        let mut recs = fixture(3, 1.0, [0.0; 4], 1);
        let model = ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: false,
        };
        let one_site: Vec<_> = recs.iter().filter(|r| r.site_index == 0).copied().collect();
        assert_eq!(
            fit_random_intercept_lmm(&one_site, 2, model),
            Err(EstimatorError::TooFewSites)
        );
        recs.retain(|r| r.subgroup_index == 0);
        assert_eq!(
            fit_random_intercept_lmm(&recs, 2, model),
            Err(EstimatorError::RankDeficient)
        );
        let unconverged = LmmFit {
            fixed_effects: vec![0.0; 3],
            sigma2_resid: 1.0,
            sigma2_site: 1.0,
            lambda: LAMBDA_MAX,
            converged: false,
            log_restricted_likelihood: 0.0,
            n_subgroups: 2,
            interaction: false,
        };
        assert_eq!(
            predict_stratum_means(&unconverged, Arm::Control, &[0]),
            Err(EstimatorError::NotConverged)
        );
    }
}
