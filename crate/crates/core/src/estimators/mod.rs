//! Point estimation of stratum means and treatment effects.

pub mod hierarchical;
pub mod lmm;
pub mod stratum;

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    check_simplex, Arm, EstimatorKind, EstimatorSpec, ModelSpec, PatientRecord, TrialDesign,
};

pub use hierarchical::{fit_hierarchical, shrinkage_weight, HierarchicalFit};
pub use lmm::{fit_random_intercept_lmm, predict_stratum_means, LmmFit};
pub use stratum::{
    estimate_stratum_proportions, hybrid_means, post_stratified_mean, stratum_summaries,
    weighted_mean, ArmFilter, StratumStats, StratumTable,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no records to summarise")]
    EmptyInput,
    #[error("stratum {stratum} has positive weight but no observations")]
    EmptyStratum { stratum: usize },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("stratum {stratum} is absent from the baseline set")]
    MissingStratum { stratum: usize },
    #[error("model not estimable: {0}")]
    Inestimable(String),
    #[error("fixed-effects design is rank deficient")]
    RankDeficient,
    #[error("random-intercept model needs at least two sites")]
    TooFewSites,
    #[error("variance-ratio search found no finite objective")]
    NoConvergence,
    #[error("mixed-model fit did not converge")]
    NotConverged,
    #[error("no {} records in the interim set", .0.as_str())]
    ArmMissing(Arm),
    #[error("proportions must be non-negative and sum to 1")]
    InvalidProportions,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProportionsSource {
    DesignTruth,
    Estimated { n_baseline: usize },
}

/// Stratum weights on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proportions {
    p: Vec<f64>,
    source: ProportionsSource,
}

impl Proportions {
    pub fn design(p: Vec<f64>) -> Result<Self, EstimatorError> {
        Self::checked(p, ProportionsSource::DesignTruth)
    }

    pub fn estimated(p: Vec<f64>, n_baseline: usize) -> Result<Self, EstimatorError> {
        Self::checked(p, ProportionsSource::Estimated { n_baseline })
    }

    fn checked(p: Vec<f64>, source: ProportionsSource) -> Result<Self, EstimatorError> {
        check_simplex(&p).map_err(|_| EstimatorError::InvalidProportions)?;
        Ok(Proportions { p, source })
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn source(&self) -> ProportionsSource {
        self.source
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifierKind {
    /// One stratum per subgroup.
    #[default]
    Subgroup,
    /// One stratum per (subgroup, site) cell, subgroup-major.
    SubgroupBySite,
}

/// Maps records to post-stratification cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stratifier {
    pub kind: StratifierKind,
    pub n_subgroups: usize,
    pub n_sites: usize,
}

impl Stratifier {
    pub fn subgroups(n_subgroups: usize) -> Self {
        Stratifier {
            kind: StratifierKind::Subgroup,
            n_subgroups,
            n_sites: 1,
        }
    }

    pub fn subgroup_by_site(n_subgroups: usize, n_sites: usize) -> Self {
        Stratifier {
            kind: StratifierKind::SubgroupBySite,
            n_subgroups,
            n_sites,
        }
    }

    pub fn for_design(kind: StratifierKind, design: &TrialDesign) -> Self {
        match kind {
            StratifierKind::Subgroup => Self::subgroups(design.subgroups.len()),
            StratifierKind::SubgroupBySite => {
                Self::subgroup_by_site(design.subgroups.len(), design.sites.count)
            }
        }
    }

    pub fn n_strata(&self) -> usize {
        match self.kind {
            StratifierKind::Subgroup => self.n_subgroups,
            StratifierKind::SubgroupBySite => self.n_subgroups * self.n_sites,
        }
    }

    pub fn index(&self, r: &PatientRecord) -> Result<usize, EstimatorError> {
        if r.subgroup_index >= self.n_subgroups {
            return Err(EstimatorError::InvalidRecord(format!(
                "subgroup index {} out of range",
                r.subgroup_index
            )));
        }
        match self.kind {
            StratifierKind::Subgroup => Ok(r.subgroup_index),
            StratifierKind::SubgroupBySite => {
                if r.site_index >= self.n_sites {
                    return Err(EstimatorError::InvalidRecord(format!(
                        "site index {} out of range",
                        r.site_index
                    )));
                }
                Ok(r.subgroup_index * self.n_sites + r.site_index)
            }
        }
    }

    pub fn subgroup_of(&self, stratum: usize) -> usize {
        match self.kind {
            StratifierKind::Subgroup => stratum,
            StratifierKind::SubgroupBySite => stratum / self.n_sites,
        }
    }

    /// Design proportions per stratum. Sites are uniform, so a cell gets
    /// its subgroup share divided by the number of sites.
    pub fn design_proportions(&self, design: &TrialDesign) -> Result<Proportions, EstimatorError> {
        let sub = design.proportions();
        if sub.len() != self.n_subgroups {
            return Err(EstimatorError::LengthMismatch {
                expected: self.n_subgroups,
                found: sub.len(),
            });
        }
        let p = match self.kind {
            StratifierKind::Subgroup => sub,
            StratifierKind::SubgroupBySite => {
                let mut p: Vec<f64> = (0..self.n_strata())
                    .map(|s| sub[self.subgroup_of(s)] / self.n_sites as f64)
                    .collect();
                let tot: f64 = p.iter().sum();
                p[0] += 1.0 - tot;
                p
            }
        };
        Proportions::design(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmPair {
    pub treatment: f64,
    pub control: f64,
}

impl ArmPair {
    pub fn get(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Treatment => self.treatment,
            Arm::Control => self.control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub value: f64,
    pub per_arm_means: ArmPair,
    pub method: EstimatorSpec,
    pub proportions_used: Proportions,
}

/// Model-predicted stratum means for both arms, `[treatment, control]`.
///
/// The hierarchical model is fitted separately per arm over the strata. The
/// mixed model is fitted once on all records and its fixed-effects
/// prediction for a stratum's subgroup is used for every cell of that
/// subgroup.
pub fn model_stratum_means(
    records: &[PatientRecord],
    stratifier: Stratifier,
    model: ModelSpec,
) -> Result<[Vec<f64>; 2], EstimatorError> {
    match model {
        ModelSpec::HierarchicalNormal => {
            let fit = |arm| {
                let table = stratum_summaries(records, ArmFilter::Only(arm), stratifier)?;
                Ok::<_, EstimatorError>(fit_hierarchical(&table)?.pooled_means)
            };
            Ok([fit(Arm::Treatment)?, fit(Arm::Control)?])
        }
        ModelSpec::RandomInterceptLmm { .. } => {
            let fit = fit_random_intercept_lmm(records, stratifier.n_subgroups, model)?;
            let subgroups: Vec<usize> = (0..stratifier.n_strata())
                .map(|s| stratifier.subgroup_of(s))
                .collect();
            Ok([
                predict_stratum_means(&fit, Arm::Treatment, &subgroups)?,
                predict_stratum_means(&fit, Arm::Control, &subgroups)?,
            ])
        }
    }
}

/// Effect estimation over one interim data set. Model fits are cached so
/// several estimators sharing a model pay for one fit.
pub struct EffectEstimator<'a> {
    records: &'a [PatientRecord],
    stratifier: Stratifier,
    tables: [StratumTable; 2],
    models: RefCell<HashMap<ModelSpec, Result<[Vec<f64>; 2], EstimatorError>>>,
}

fn slot(arm: Arm) -> usize {
    match arm {
        Arm::Treatment => 0,
        Arm::Control => 1,
    }
}

impl<'a> EffectEstimator<'a> {
    pub fn new(records: &'a [PatientRecord], stratifier: Stratifier) -> Result<Self, EstimatorError> {
        let table = |arm| {
            stratum_summaries(records, ArmFilter::Only(arm), stratifier).map_err(|e| match e {
                EstimatorError::EmptyInput => EstimatorError::ArmMissing(arm),
                other => other,
            })
        };
        Ok(EffectEstimator {
            records,
            stratifier,
            tables: [table(Arm::Treatment)?, table(Arm::Control)?],
            models: RefCell::new(HashMap::new()),
        })
    }

    pub fn table(&self, arm: Arm) -> &StratumTable {
        &self.tables[slot(arm)]
    }

    pub fn arm_n(&self, arm: Arm) -> usize {
        self.table(arm).total_n()
    }

    fn model_means(&self, model: ModelSpec) -> Result<[Vec<f64>; 2], EstimatorError> {
        self.models
            .borrow_mut()
            .entry(model)
            .or_insert_with(|| model_stratum_means(self.records, self.stratifier, model))
            .clone()
    }

    pub fn estimate(
        &self,
        spec: EstimatorSpec,
        props: &Proportions,
    ) -> Result<EffectEstimate, EstimatorError> {
        let mut means = [0.0; 2];
        for arm in Arm::BOTH {
            let t = self.table(arm);
            means[slot(arm)] = match spec.kind {
                EstimatorKind::Unadjusted => t.grand_mean().ok_or(EstimatorError::ArmMissing(arm))?,
                EstimatorKind::NaivePostStrat => post_stratified_mean(t, props)?,
                EstimatorKind::ModelBasedPostStrat { model } => {
                    weighted_mean(&self.model_means(model)?[slot(arm)], props)?
                }
                EstimatorKind::HybridPostStrat { model, cutoff } => {
                    let m = hybrid_means(t, &self.model_means(model)?[slot(arm)], cutoff)?;
                    weighted_mean(&m, props)?
                }
            };
        }
        let per_arm_means = ArmPair {
            treatment: means[0],
            control: means[1],
        };
        Ok(EffectEstimate {
            value: per_arm_means.treatment - per_arm_means.control,
            per_arm_means,
            method: spec,
            proportions_used: props.clone(),
        })
    }
}

/// Treated-minus-control estimate on the interim records.
pub fn estimate_treatment_effect(
    ia_records: &[PatientRecord],
    spec: EstimatorSpec,
    props: &Proportions,
    stratifier: Stratifier,
) -> Result<EffectEstimate, EstimatorError> {
    EffectEstimator::new(ia_records, stratifier)?.estimate(spec, props)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_cohort, select_ia_subset};
    use crate::harness::presets;
    use crate::model::{ShiftSpec, ValidatedDesign};
    use crate::rng::{child_seed, Stream};
    use proptest::prelude::*;

    fn lmm(interaction: bool) -> ModelSpec {
        ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: interaction,
        }
    }

    fn all_specs() -> Vec<EstimatorSpec> {
        vec![
            EstimatorSpec::unadjusted(),
            EstimatorSpec::naive(),
            EstimatorSpec::new(EstimatorKind::ModelBasedPostStrat {
                model: ModelSpec::HierarchicalNormal,
            }),
            EstimatorSpec::new(EstimatorKind::ModelBasedPostStrat { model: lmm(false) }),
            EstimatorSpec::new(EstimatorKind::HybridPostStrat {
                model: lmm(false),
                cutoff: 10,
            }),
        ]
    }

    fn ia_records(design: &ValidatedDesign, shift: &ShiftSpec, seed: u64) -> Vec<PatientRecord> {
        let cohort = generate_cohort(design, seed);
        let ia = select_ia_subset(&cohort, shift).unwrap();
        cohort.subset(&ia.ia_ids)
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn stratifier_cells() {
        let s = Stratifier::subgroup_by_site(2, 4);
        assert_eq!(s.n_strata(), 8);
        let r = PatientRecord {
            id: 0,
            subgroup_index: 1,
            site_index: 2,
            arm: Arm::Control,
            outcome: 0.0,
            in_ia: true,
            baseline_available: true,
        };
        assert_eq!(s.index(&r).unwrap(), 6);
        assert_eq!(s.subgroup_of(6), 1);
        let p = s.design_proportions(&presets::continuous_scenario()).unwrap();
        assert!((p.values()[0] - 0.15).abs() < 1e-12);
        assert!((p.values()[7] - 0.1).abs() < 1e-15);
        assert!(Stratifier::subgroups(2).index(&PatientRecord { subgroup_index: 2, ..r }).is_err());
    }

    #[test]
    fn arm_missing_is_reported() {
        let design = presets::binary_scenario().validate().unwrap();
        let mut recs = ia_records(&design, &ShiftSpec::new(vec![0.6, 0.4]), 1);
        recs.retain(|r| r.arm == Arm::Control);
        let p = Proportions::design(vec![0.6, 0.4]).unwrap();
        assert_eq!(
            estimate_treatment_effect(&recs, EstimatorSpec::naive(), &p, Stratifier::subgroups(2))
                .unwrap_err(),
            EstimatorError::ArmMissing(Arm::Treatment)
        );
    }

    #[test]
    fn value_is_difference_of_arm_means() {
        let design = presets::continuous_scenario().validate().unwrap();
        let recs = ia_records(&design, &ShiftSpec::new(vec![0.5, 0.5]), 9);
        let p = Proportions::design(vec![0.6, 0.4]).unwrap();
        let est = EffectEstimator::new(&recs, Stratifier::subgroups(2)).unwrap();
        for spec in all_specs() {
            let e = est.estimate(spec, &p).unwrap();
            assert!((e.value - (e.per_arm_means.treatment - e.per_arm_means.control)).abs() <= 1e-12);
            assert_eq!(e.method, spec);
        }
    }

    #[test]
    fn representative_interim_methods_agree_in_expectation() {
        let design = presets::continuous_scenario().validate().unwrap();
        let shift = ShiftSpec::representative(design.design());
        let p = Proportions::design(design.design().proportions()).unwrap();
        let specs = all_specs();
        let mut diffs = vec![Vec::new(); specs.len()];
        for r in 0..2000 {
            let recs = ia_records(&design, &shift, child_seed(77, Stream::Replicate, r));
            let est = EffectEstimator::new(&recs, Stratifier::subgroups(2)).unwrap();
            let base = est.estimate(specs[0], &p).unwrap().value;
            for (d, spec) in diffs.iter_mut().zip(&specs) {
                d.push(est.estimate(*spec, &p).unwrap().value - base);
            }
        }
        for (d, spec) in diffs.iter().zip(&specs).skip(1) {
            let (m, se) = mean_and_se(d);
            assert!(m.abs() < 3.0 * se + 1e-12, "{}: {m} vs se {se}", spec.label());
        }
    }

    #[test]
    fn shifted_interim_naive_is_unbiased_and_pooled_model_is_not() {
        let design = presets::continuous_scenario().validate().unwrap();
        let shift = ShiftSpec::new(vec![0.5, 0.5]);
        let p = Proportions::design(design.design().proportions()).unwrap();
        let truth = design.design().true_effect();
        let mut naive = Vec::new();
        let mut model = Vec::new();
        for r in 0..1000 {
            let recs = ia_records(&design, &shift, child_seed(5, Stream::Replicate, r));
            let est = EffectEstimator::new(&recs, Stratifier::subgroups(2)).unwrap();
            naive.push(est.estimate(EstimatorSpec::naive(), &p).unwrap().value);
            let spec = EstimatorSpec::new(EstimatorKind::ModelBasedPostStrat { model: lmm(false) });
            model.push(est.estimate(spec, &p).unwrap().value);
        }
        let (mn, sen) = mean_and_se(&naive);
        assert!((mn - truth).abs() < 3.0 * sen, "naive {mn} truth {truth}");
        let (mm, sem) = mean_and_se(&model);
        // The pooled coefficient weights subgroups by IA precision (50:50),
        // pulling the estimate below the 60:40 truth.
        assert!(truth - mm > 3.0 * sem, "model {mm} truth {truth}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn location_equivariance(seed in 0u64..1000, shift in -1e3f64..1e3) {
            let design = presets::continuous_scenario().validate().unwrap();
            let recs = ia_records(&design, &ShiftSpec::new(vec![0.5, 0.5]), seed);
            let moved: Vec<_> = recs
                .iter()
                .map(|r| PatientRecord { outcome: r.outcome + shift, ..*r })
                .collect();
            let p = Proportions::design(vec![0.6, 0.4]).unwrap();
            let a = EffectEstimator::new(&recs, Stratifier::subgroups(2)).unwrap();
            let b = EffectEstimator::new(&moved, Stratifier::subgroups(2)).unwrap();
            for spec in all_specs() {
                let x = a.estimate(spec, &p).unwrap().value;
                let y = b.estimate(spec, &p).unwrap().value;
                prop_assert!((x - y).abs() < 1e-8 * (1.0 + shift.abs()), "{}", spec.label());
            }
        }
    }
}
