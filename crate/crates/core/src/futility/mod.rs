//! Posterior- and predictive-probability futility rules for binary endpoints.

pub mod quadrature;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Beta, Binomial};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use thiserror::Error;

use crate::estimators::Proportions;
use crate::model::{largest_remainder, BetaPrior, FutilityKind, FutilityRuleSpec};
use crate::rng::{child_rng, Stream};
use quadrature::adaptive_simpson;

const QUAD_TOL: f64 = 1e-6;
const QUAD_PANELS: usize = 16;
/// Control-mean grid resolution of the cached success boundary.
const BOUNDARY_GRID: usize = 1025;
const BOUNDARY_BISECT_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FutilityError {
    #[error("quadrature did not reach tolerance")]
    QuadratureFailure,
    #[error("beta parameters must be positive and finite (got {alpha}, {beta})")]
    InvalidPosterior { alpha: f64, beta: f64 },
    #[error("rule kind {0:?} cannot be evaluated here")]
    WrongRuleKind(FutilityKind),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl ArmPosterior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, FutilityError> {
        if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
            Ok(ArmPosterior { alpha, beta })
        } else {
            Err(FutilityError::InvalidPosterior { alpha, beta })
        }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    fn singular(&self) -> bool {
        self.alpha < 1.0 || self.beta < 1.0
    }

    fn pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let la = if self.alpha == 1.0 { 0.0 } else { (self.alpha - 1.0) * x.ln() };
        let lb = if self.beta == 1.0 { 0.0 } else { (self.beta - 1.0) * (1.0 - x).ln() };
        (la + lb - ln_beta(self.alpha, self.beta)).exp()
    }

    fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else {
            beta_reg(self.alpha, self.beta, x)
        }
    }
}

/// Beta posterior from a (possibly fractional) mean and effective size.
pub fn beta_posterior(mean: f64, n_effective: f64, prior: BetaPrior) -> ArmPosterior {
    ArmPosterior {
        alpha: prior.alpha + mean * n_effective,
        beta: prior.beta + (1.0 - mean) * n_effective,
    }
}

/// `P(p_t - p_c > delta)` for independent Beta arms.
pub fn posterior_prob_effect_exceeds(
    treat: ArmPosterior,
    ctrl: ArmPosterior,
    delta: f64,
) -> Result<f64, FutilityError> {
    ArmPosterior::new(treat.alpha, treat.beta)?;
    ArmPosterior::new(ctrl.alpha, ctrl.beta)?;
    if delta.is_nan() {
        return Err(FutilityError::InvalidInput("delta is NaN".into()));
    }
    if delta >= 1.0 {
        return Ok(0.0);
    }
    if delta <= -1.0 {
        return Ok(1.0);
    }
    let quad = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
        adaptive_simpson(&f, a, b, QUAD_TOL, QUAD_PANELS).map_err(|_| FutilityError::QuadratureFailure)
    };
    let p = if ctrl.singular() && !treat.singular() {
        // Integrate over the treatment density instead: P = E_t[F_c(Y - delta)].
        let f = |y: f64| treat.pdf(y) * ctrl.cdf(y - delta);
        if delta >= 0.0 {
            quad(&f, delta, 1.0)?
        } else {
            quad(&f, 0.0, 1.0 + delta)? + (1.0 - treat.cdf(1.0 + delta))
        }
    } else {
        let f = |x: f64| ctrl.pdf(x) * (1.0 - treat.cdf(x + delta));
        if delta >= 0.0 {
            quad(&f, 0.0, 1.0 - delta)?
        } else {
            ctrl.cdf(-delta) + quad(&f, -delta, 1.0)?
        }
    };
    Ok(p.clamp(0.0, 1.0))
}

/// An arm's interim summary: a mean on the probability scale and the number
/// of patients behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmSummary {
    pub mean: f64,
    pub n: f64,
}

impl ArmSummary {
    pub fn from_counts(successes: u64, n: u64) -> Self {
        ArmSummary {
            mean: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            n: n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decision {
    pub stop_for_futility: bool,
    pub statistic: f64,
    pub rule: FutilityRuleSpec,
}

/// Stop iff `statistic < cut`.
pub fn decide(statistic: f64, rule: &FutilityRuleSpec) -> Decision {
    Decision {
        stop_for_futility: statistic < rule.futility_cut,
        statistic,
        rule: *rule,
    }
}

pub fn evaluate_posterior_rule(
    treat: ArmSummary,
    ctrl: ArmSummary,
    rule: &FutilityRuleSpec,
) -> Result<Decision, FutilityError> {
    if rule.kind != FutilityKind::PosteriorProb {
        return Err(FutilityError::WrongRuleKind(rule.kind));
    }
    for s in [treat, ctrl] {
        if !(0.0..=1.0).contains(&s.mean) || !(s.n >= 0.0) {
            return Err(FutilityError::InvalidInput(format!(
                "arm summary mean {} n {}",
                s.mean, s.n
            )));
        }
    }
    let stat = posterior_prob_effect_exceeds(
        beta_posterior(treat.mean, treat.n, rule.prior),
        beta_posterior(ctrl.mean, ctrl.n, rule.prior),
        rule.effect_threshold_delta,
    )?;
    Ok(decide(stat, rule))
}

/// Interim successes and size of one (stratum, arm) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub successes: u64,
    pub n: u64,
}

/// How the final analysis summarises an arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalEstimate {
    /// Raw pooled proportion.
    #[default]
    Pooled,
    /// Planned-proportion weighted mean of per-stratum proportions.
    PostStratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemainingPerArm {
    pub treatment: u64,
    pub control: u64,
}

type BoundaryKey = (u64, u64, u64, u64, u64, u64);

/// Final-success region `{(m_t, m_c) : stat >= gamma}` for fixed final arm
/// sizes. Success is monotone increasing in `m_t` and decreasing in `m_c`,
/// so bracketing the threshold in `m_t` on a grid of `m_c` values settles
/// most queries without quadrature.
struct SuccessBoundary {
    n_t: f64,
    n_c: f64,
    rule: FutilityRuleSpec,
    grid: Vec<OnceLock<Result<(f64, f64), FutilityError>>>,
}

impl SuccessBoundary {
    fn new(n_t: f64, n_c: f64, rule: FutilityRuleSpec) -> Self {
        SuccessBoundary {
            n_t,
            n_c,
            rule,
            grid: (0..BOUNDARY_GRID).map(|_| OnceLock::new()).collect(),
        }
    }

    fn exact(&self, m_t: f64, m_c: f64) -> Result<bool, FutilityError> {
        final_success(m_t, self.n_t, m_c, self.n_c, &self.rule)
    }

    /// `(lo, hi)` with success false at `m_t = lo` and true at `m_t = hi`.
    fn bracket(&self, i: usize) -> Result<(f64, f64), FutilityError> {
        self.grid[i]
            .get_or_init(|| {
                let m_c = i as f64 / (BOUNDARY_GRID - 1) as f64;
                if self.exact(0.0, m_c)? {
                    return Ok((f64::NEG_INFINITY, 0.0));
                }
                if !self.exact(1.0, m_c)? {
                    return Ok((1.0, f64::INFINITY));
                }
                let (mut lo, mut hi) = (0.0, 1.0);
                while hi - lo > BOUNDARY_BISECT_TOL {
                    let mid = 0.5 * (lo + hi);
                    if self.exact(mid, m_c)? {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                Ok((lo, hi))
            })
            .clone()
    }

    fn succeeds(&self, m_t: f64, m_c: f64) -> Result<bool, FutilityError> {
        let scaled = m_c.clamp(0.0, 1.0) * (BOUNDARY_GRID - 1) as f64;
        let i = (scaled.floor() as usize).min(BOUNDARY_GRID - 2);
        let (lo_left, _) = self.bracket(i)?;
        let (_, hi_right) = self.bracket(i + 1)?;
        if m_t >= hi_right {
            Ok(true)
        } else if m_t <= lo_left {
            Ok(false)
        } else {
            self.exact(m_t, m_c)
        }
    }
}

fn final_success(
    m_t: f64,
    n_t: f64,
    m_c: f64,
    n_c: f64,
    rule: &FutilityRuleSpec,
) -> Result<bool, FutilityError> {
    if rule.final_success_gamma >= 1.0 {
        return Ok(false);
    }
    let stat = posterior_prob_effect_exceeds(
        beta_posterior(m_t, n_t, rule.prior),
        beta_posterior(m_c, n_c, rule.prior),
        rule.effect_threshold_delta,
    )?;
    Ok(stat >= rule.final_success_gamma)
}

/// Predictive-probability evaluation with success boundaries shared across
/// calls (and threads). Results do not depend on call order.
#[derive(Default)]
pub struct PredictiveEvaluator {
    boundaries: Mutex<HashMap<BoundaryKey, Arc<SuccessBoundary>>>,
}

fn arm_final_mean(
    counts: &[CellCount],
    future: &[u64],
    remaining: &[u64],
    props: &[f64],
    prior: BetaPrior,
    how: FinalEstimate,
) -> f64 {
    match how {
        FinalEstimate::Pooled => {
            let s: u64 = counts.iter().map(|c| c.successes).sum::<u64>() + future.iter().sum::<u64>();
            let n: u64 = counts.iter().map(|c| c.n).sum::<u64>() + remaining.iter().sum::<u64>();
            s as f64 / n as f64
        }
        FinalEstimate::PostStratified => counts
            .iter()
            .zip(future.iter().zip(remaining))
            .zip(props)
            .filter(|(_, &p)| p > 0.0)
            .map(|((c, (y, r)), p)| {
                let n = c.n + r;
                let m = if n == 0 {
                    // Never observed: fall back to the cell's prior mean.
                    prior.alpha / (prior.alpha + prior.beta)
                } else {
                    (c.successes + y) as f64 / n as f64
                };
                p * m
            })
            .sum(),
    }
}

impl PredictiveEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    fn boundary(&self, n_t: u64, n_c: u64, rule: &FutilityRuleSpec) -> Arc<SuccessBoundary> {
        let key = (
            n_t,
            n_c,
            rule.effect_threshold_delta.to_bits(),
            rule.final_success_gamma.to_bits(),
            rule.prior.alpha.to_bits(),
            rule.prior.beta.to_bits(),
        );
        let mut map = self.boundaries.lock().expect("boundary cache poisoned");
        map.entry(key)
            .or_insert_with(|| Arc::new(SuccessBoundary::new(n_t as f64, n_c as f64, *rule)))
            .clone()
    }

    /// Probability that the completed trial meets `stat >= gamma`.
    ///
    /// `treat` and `ctrl` hold interim counts per stratum; the remaining
    /// patients of each arm are split over strata by `planned` with
    /// largest-remainder rounding.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        treat: &[CellCount],
        ctrl: &[CellCount],
        remaining: RemainingPerArm,
        planned: &Proportions,
        how: FinalEstimate,
        rule: &FutilityRuleSpec,
        seed: u64,
    ) -> Result<Decision, FutilityError> {
        if rule.kind != FutilityKind::PredictiveProb {
            return Err(FutilityError::WrongRuleKind(rule.kind));
        }
        let k = planned.len();
        if treat.len() != k || ctrl.len() != k {
            return Err(FutilityError::InvalidInput(format!(
                "expected {k} strata per arm, got {} and {}",
                treat.len(),
                ctrl.len()
            )));
        }
        if treat.iter().chain(ctrl).any(|c| c.successes > c.n) {
            return Err(FutilityError::InvalidInput("successes exceed n".into()));
        }
        let props = planned.values();
        let rem_t: Vec<u64> = largest_remainder(props, remaining.treatment as usize)
            .into_iter()
            .map(|x| x as u64)
            .collect();
        let rem_c: Vec<u64> = largest_remainder(props, remaining.control as usize)
            .into_iter()
            .map(|x| x as u64)
            .collect();
        let n_t: u64 = treat.iter().map(|c| c.n).sum::<u64>() + remaining.treatment;
        let n_c: u64 = ctrl.iter().map(|c| c.n).sum::<u64>() + remaining.control;
        if n_t == 0 || n_c == 0 {
            return Err(FutilityError::InvalidInput("an arm has no patients at final".into()));
        }
        let prior = rule.prior;

        if rule.final_success_gamma >= 1.0 {
            return Ok(decide(0.0, rule));
        }
        if remaining.treatment == 0 && remaining.control == 0 {
            let zeros = vec![0u64; k];
            let m_t = arm_final_mean(treat, &zeros, &zeros, props, prior, how);
            let m_c = arm_final_mean(ctrl, &zeros, &zeros, props, prior, how);
            let ok = final_success(m_t, n_t as f64, m_c, n_c as f64, rule)?;
            return Ok(decide(if ok { 1.0 } else { 0.0 }, rule));
        }

        let posteriors = |cells: &[CellCount]| -> Result<Vec<Beta<f64>>, FutilityError> {
            cells
                .iter()
                .map(|c| {
                    let a = prior.alpha + c.successes as f64;
                    let b = prior.beta + (c.n - c.successes) as f64;
                    Beta::new(a, b).map_err(|_| FutilityError::InvalidPosterior { alpha: a, beta: b })
                })
                .collect()
        };
        let post_t = posteriors(treat)?;
        let post_c = posteriors(ctrl)?;
        let boundary = self.boundary(n_t, n_c, rule);
        let mut rng = child_rng(seed, Stream::Predictive, 0);
        let mut future_t = vec![0u64; k];
        let mut future_c = vec![0u64; k];
        let mut wins = 0usize;
        let simulate = |post: &[Beta<f64>], rem: &[u64], out: &mut [u64], rng: &mut _| {
            for ((d, &r), y) in post.iter().zip(rem).zip(out.iter_mut()) {
                *y = if r == 0 {
                    0
                } else {
                    let p: f64 = Rng::sample(rng, d);
                    Rng::sample(rng, Binomial::new(r, p).expect("p in [0, 1]"))
                };
            }
        };
        for _ in 0..rule.pp_draws {
            simulate(&post_t, &rem_t, &mut future_t, &mut rng);
            simulate(&post_c, &rem_c, &mut future_c, &mut rng);
            let m_t = arm_final_mean(treat, &future_t, &rem_t, props, prior, how);
            let m_c = arm_final_mean(ctrl, &future_c, &rem_c, props, prior, how);
            if boundary.succeeds(m_t, m_c)? {
                wins += 1;
            }
        }
        Ok(decide(wins as f64 / rule.pp_draws as f64, rule))
    }
}

/// One-off predictive-probability evaluation. Prefer a shared
/// [`PredictiveEvaluator`] for repeated calls with the same final sizes.
#[allow(clippy::too_many_arguments)]
pub fn predictive_probability(
    treat: &[CellCount],
    ctrl: &[CellCount],
    remaining: RemainingPerArm,
    planned: &Proportions,
    how: FinalEstimate,
    rule: &FutilityRuleSpec,
    seed: u64,
) -> Result<Decision, FutilityError> {
    PredictiveEvaluator::new().evaluate(treat, ctrl, remaining, planned, how, rule, seed)
}
