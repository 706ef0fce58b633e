//! Shared domain types and design validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for every "sums to one" check.
pub const PROPORTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("subgroup proportions must be non-negative and sum to 1 (sum = {sum})")]
    InvalidProportions { sum: f64 },
    #[error("subgroup {subgroup} rounds to zero patients")]
    InfeasibleQuota { subgroup: usize },
    #[error("total_n must be positive")]
    NonPositiveN,
    #[error("invalid design parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Control,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treatment, Arm::Control];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubgroupSpec {
    pub label: String,
    pub population_proportion: f64,
    /// Control response probability (binary) or baseline mean (continuous).
    pub control_param: f64,
    /// Treated response probability (binary) or additive effect (continuous).
    pub treatment_effect: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Endpoint {
    Binary,
    Continuous { residual_sd: f64 },
}

impl Endpoint {
    pub fn is_binary(&self) -> bool {
        matches!(self, Endpoint::Binary)
    }
}

/// Treatment:control allocation ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub treatment: u32,
    pub control: u32,
}

impl Default for Allocation {
    fn default() -> Self {
        Allocation {
            treatment: 1,
            control: 1,
        }
    }
}

impl Allocation {
    fn shares(&self) -> [f64; 2] {
        let total = f64::from(self.treatment + self.control);
        [
            f64::from(self.treatment) / total,
            f64::from(self.control) / total,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub count: usize,
    pub effect_sd: f64,
}

impl Default for SiteSpec {
    fn default() -> Self {
        SiteSpec {
            count: 1,
            effect_sd: 0.0,
        }
    }
}

/// How arms are assigned when a cohort is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomization {
    /// Exact allocation within every subgroup.
    #[default]
    StratifiedBlocks,
    /// Exact allocation over the whole cohort; within-subgroup split is random.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialDesign {
    pub total_n: usize,
    #[serde(default)]
    pub allocation: Allocation,
    pub endpoint: Endpoint,
    pub subgroups: Vec<SubgroupSpec>,
    #[serde(default)]
    pub sites: SiteSpec,
    pub ia_fraction: f64,
    #[serde(default)]
    pub randomization: Randomization,
}

impl TrialDesign {
    pub fn proportions(&self) -> Vec<f64> {
        self.subgroups
            .iter()
            .map(|s| s.population_proportion)
            .collect()
    }

    /// Population mean of an arm under the design.
    pub fn arm_mean(&self, arm: Arm) -> f64 {
        self.subgroups
            .iter()
            .map(|s| {
                let mean = match (self.endpoint, arm) {
                    (Endpoint::Binary, Arm::Treatment) => s.treatment_effect,
                    (Endpoint::Binary, Arm::Control) => s.control_param,
                    (Endpoint::Continuous { .. }, Arm::Treatment) => {
                        s.control_param + s.treatment_effect
                    }
                    (Endpoint::Continuous { .. }, Arm::Control) => s.control_param,
                };
                s.population_proportion * mean
            })
            .sum()
    }

    /// Population treatment effect (treated minus control) implied by the design.
    pub fn true_effect(&self) -> f64 {
        self.arm_mean(Arm::Treatment) - self.arm_mean(Arm::Control)
    }

    pub fn validate(&self) -> Result<ValidatedDesign, DesignError> {
        validate_design(self)
    }
}

/// A design whose invariants have been checked, with exact derived counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedDesign {
    design: TrialDesign,
    subgroup_counts: Vec<usize>,
    /// Per subgroup `[treatment, control]` under stratified randomisation.
    cell_counts: Vec<[usize; 2]>,
    arm_counts: [usize; 2],
    ia_size: usize,
}

impl ValidatedDesign {
    pub fn design(&self) -> &TrialDesign {
        &self.design
    }

    pub fn subgroup_counts(&self) -> &[usize] {
        &self.subgroup_counts
    }

    pub fn cell_counts(&self) -> &[[usize; 2]] {
        &self.cell_counts
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        match arm {
            Arm::Treatment => self.arm_counts[0],
            Arm::Control => self.arm_counts[1],
        }
    }

    pub fn ia_size(&self) -> usize {
        self.ia_size
    }

    pub fn n_subgroups(&self) -> usize {
        self.design.subgroups.len()
    }

    pub fn n_sites(&self) -> usize {
        self.design.sites.count
    }

    pub fn total_n(&self) -> usize {
        self.design.total_n
    }
}

/// Largest-remainder apportionment of `total` units over `weights`
/// (non-negative, summing to one). Ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    if !weights.iter().any(|w| *w > 0.0) {
        return counts;
    }
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if weights[k] > 0.0 {
            counts[k] += 1;
            remaining -= 1;
        }
    }
    counts
}

pub(crate) fn check_simplex(p: &[f64]) -> Result<(), DesignError> {
    let sum: f64 = p.iter().sum();
    if p.is_empty()
        || p.iter().any(|x| !x.is_finite() || *x < 0.0)
        || (sum - 1.0).abs() > PROPORTION_TOLERANCE
    {
        return Err(DesignError::InvalidProportions { sum });
    }
    Ok(())
}

pub fn validate_design(design: &TrialDesign) -> Result<ValidatedDesign, DesignError> {
    if design.total_n == 0 {
        return Err(DesignError::NonPositiveN);
    }
    if design.subgroups.is_empty() {
        return Err(DesignError::InvalidParameter(
            "at least one subgroup is required".into(),
        ));
    }
    let props = design.proportions();
    if props.iter().any(|p| *p <= 0.0 || *p > 1.0) {
        return Err(DesignError::InvalidProportions {
            sum: props.iter().sum(),
        });
    }
    check_simplex(&props)?;
    match design.endpoint {
        Endpoint::Binary => {
            for (i, s) in design.subgroups.iter().enumerate() {
                for p in [s.control_param, s.treatment_effect] {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(DesignError::InvalidParameter(format!(
                            "subgroup {i}: binary response probability {p} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        Endpoint::Continuous { residual_sd } => {
            if !(residual_sd >= 0.0 && residual_sd.is_finite()) {
                return Err(DesignError::InvalidParameter(format!(
                    "residual_sd must be finite and >= 0, got {residual_sd}"
                )));
            }
            if design
                .subgroups
                .iter()
                .any(|s| !s.control_param.is_finite() || !s.treatment_effect.is_finite())
            {
                return Err(DesignError::InvalidParameter(
                    "subgroup parameters must be finite".into(),
                ));
            }
        }
    }
    if design.sites.count == 0 {
        return Err(DesignError::InvalidParameter("sites.count must be >= 1".into()));
    }
    if !(design.sites.effect_sd >= 0.0 && design.sites.effect_sd.is_finite()) {
        return Err(DesignError::InvalidParameter(
            "sites.effect_sd must be finite and >= 0".into(),
        ));
    }
    if design.allocation.treatment == 0 || design.allocation.control == 0 {
        return Err(DesignError::InvalidParameter(
            "allocation ratio terms must be positive".into(),
        ));
    }
    if !(design.ia_fraction > 0.0 && design.ia_fraction <= 1.0) {
        return Err(DesignError::InvalidParameter(format!(
            "ia_fraction must lie in (0, 1], got {}",
            design.ia_fraction
        )));
    }

    let subgroup_counts = largest_remainder(&props, design.total_n);
    if let Some(k) = subgroup_counts.iter().position(|&c| c == 0) {
        return Err(DesignError::InfeasibleQuota { subgroup: k });
    }
    let shares = design.allocation.shares();
    let cell_counts: Vec<[usize; 2]> = subgroup_counts
        .iter()
        .map(|&m| {
            let split = largest_remainder(&shares, m);
            [split[0], split[1]]
        })
        .collect();
    let arm_counts = match design.randomization {
        Randomization::StratifiedBlocks => cell_counts
            .iter()
            .fold([0, 0], |acc, c| [acc[0] + c[0], acc[1] + c[1]]),
        Randomization::Complete => {
            let split = largest_remainder(&shares, design.total_n);
            [split[0], split[1]]
        }
    };

    let ia_size = (design.total_n as f64 * design.ia_fraction).round() as usize;
    let ia_split = largest_remainder(&shares, ia_size);
    if ia_split.iter().any(|&c| c < 2) {
        return Err(DesignError::InvalidParameter(format!(
            "interim analysis of {ia_size} patients leaves fewer than 2 per arm"
        )));
    }

    Ok(ValidatedDesign {
        design: design.clone(),
        subgroup_counts,
        cell_counts,
        arm_counts,
        ia_size,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    ExactQuota,
}

/// Target subgroup composition of the interim analysis set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub ia_subgroup_proportions: Vec<f64>,
    #[serde(default)]
    pub mode: ShiftMode,
}

impl ShiftSpec {
    pub fn new(ia_subgroup_proportions: Vec<f64>) -> Self {
        ShiftSpec {
            ia_subgroup_proportions,
            mode: ShiftMode::ExactQuota,
        }
    }

    /// The no-shift (representative) composition of a design.
    pub fn representative(design: &TrialDesign) -> Self {
        ShiftSpec::new(design.proportions())
    }

    pub fn validate_for(&self, design: &TrialDesign) -> Result<(), DesignError> {
        if self.ia_subgroup_proportions.len() != design.subgroups.len() {
            return Err(DesignError::InvalidParameter(format!(
                "shift has {} proportions but the design has {} subgroups",
                self.ia_subgroup_proportions.len(),
                design.subgroups.len()
            )));
        }
        check_simplex(&self.ia_subgroup_proportions)
    }

    pub fn label(&self) -> String {
        self.ia_subgroup_proportions
            .iter()
            .map(|p| format!("{:.4}", p))
            .collect::<Vec<_>>()
            .join(":")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: u64,
    pub subgroup_index: usize,
    pub site_index: usize,
    pub arm: Arm,
    /// Binary outcomes are coded 0.0 / 1.0.
    pub outcome: f64,
    pub in_ia: bool,
    pub baseline_available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutilityKind {
    PosteriorProb,
    PredictiveProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaPrior {
    fn default() -> Self {
        BetaPrior {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

fn default_delta() -> f64 {
    0.2
}
fn default_cut() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.9
}
fn default_pp_draws() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FutilityRuleSpec {
    pub kind: FutilityKind,
    #[serde(default = "default_delta")]
    pub effect_threshold_delta: f64,
    #[serde(default = "default_cut")]
    pub futility_cut: f64,
    #[serde(default)]
    pub prior: BetaPrior,
    #[serde(default = "default_gamma")]
    pub final_success_gamma: f64,
    #[serde(default = "default_pp_draws")]
    pub pp_draws: usize,
}

impl FutilityRuleSpec {
    pub fn posterior() -> Self {
        FutilityRuleSpec {
            kind: FutilityKind::PosteriorProb,
            effect_threshold_delta: default_delta(),
            futility_cut: default_cut(),
            prior: BetaPrior::default(),
            final_success_gamma: default_gamma(),
            pp_draws: default_pp_draws(),
        }
    }

    pub fn predictive() -> Self {
        FutilityRuleSpec {
            kind: FutilityKind::PredictiveProb,
            ..FutilityRuleSpec::posterior()
        }
    }

    pub fn validate(&self) -> Result<(), DesignError> {
        let bad = |msg: String| Err(DesignError::InvalidParameter(msg));
        if !(self.futility_cut > 0.0 && self.futility_cut < 1.0) {
            return bad(format!("futility_cut {} outside (0, 1)", self.futility_cut));
        }
        if !(self.effect_threshold_delta > -1.0 && self.effect_threshold_delta < 1.0) {
            return bad(format!(
                "effect_threshold_delta {} outside (-1, 1)",
                self.effect_threshold_delta
            ));
        }
        if !(self.prior.alpha > 0.0
            && self.prior.beta > 0.0
            && self.prior.alpha.is_finite()
            && self.prior.beta.is_finite())
        {
            return bad("prior parameters must be positive and finite".into());
        }
        // gamma = 1 is accepted and means final success is unattainable.
        if !(self.final_success_gamma > 0.0 && self.final_success_gamma <= 1.0) {
            return bad(format!(
                "final_success_gamma {} outside (0, 1]",
                self.final_success_gamma
            ));
        }
        if self.pp_draws == 0 {
            return bad("pp_draws must be positive".into());
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            FutilityKind::PosteriorProb => format!(
                "posterior(delta={},cut={})",
                self.effect_threshold_delta, self.futility_cut
            ),
            FutilityKind::PredictiveProb => format!(
                "predictive(delta={},gamma={},cut={},draws={})",
                self.effect_threshold_delta,
                self.final_success_gamma,
                self.futility_cut,
                self.pp_draws
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    HierarchicalNormal,
    RandomInterceptLmm {
        #[serde(default)]
        treatment_by_subgroup_interaction: bool,
    },
}

impl ModelSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ModelSpec::HierarchicalNormal => "hierarchical",
            ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction: true,
            } => "lmm_interaction",
            ModelSpec::RandomInterceptLmm {
                treatment_by_subgroup_interaction: false,
            } => "lmm",
        }
    }
}

pub const DEFAULT_HYBRID_CUTOFF: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorKind {
    Unadjusted,
    NaivePostStrat,
    ModelBasedPostStrat {
        model: ModelSpec,
    },
    HybridPostStrat {
        model: ModelSpec,
        #[serde(default = "default_cutoff")]
        cutoff: usize,
    },
}

fn default_cutoff() -> usize {
    DEFAULT_HYBRID_CUTOFF
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProportionSource {
    #[default]
    DesignTruth,
    EstimatedFromBaseline {
        #[serde(default)]
        fallback_to_design: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub proportion_source: ProportionSource,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            proportion_source: ProportionSource::DesignTruth,
        }
    }

    pub fn unadjusted() -> Self {
        Self::new(EstimatorKind::Unadjusted)
    }

    pub fn naive() -> Self {
        Self::new(EstimatorKind::NaivePostStrat)
    }

    pub fn with_source(mut self, source: ProportionSource) -> Self {
        self.proportion_source = source;
        self
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            EstimatorKind::Unadjusted => "unadjusted".to_string(),
            EstimatorKind::NaivePostStrat => "naive".to_string(),
            EstimatorKind::ModelBasedPostStrat { model } => format!("model_{}", model.label()),
            EstimatorKind::HybridPostStrat { model, cutoff } => {
                format!("hybrid_{}_c{}", model.label(), cutoff)
            }
        };
        match (self.kind, self.proportion_source) {
            (EstimatorKind::Unadjusted, _) | (_, ProportionSource::DesignTruth) => base,
            (_, ProportionSource::EstimatedFromBaseline { .. }) => format!("{base}_estprops"),
        }
    }
}
