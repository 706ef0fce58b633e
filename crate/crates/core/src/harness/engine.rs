//! Replication engine.
//!
//! Every replicate owns its random streams: the cohort seed is derived from
//! `(master_seed, replicate)` and shared by all grid cells of that replicate
//! (common random numbers), while predictive-probability draws are derived
//! from `(master_seed, cell, replicate)`. Results are assembled in
//! `(cell, replicate, estimator, rule)` order, so output does not depend on
//! the number of workers.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ConfigError, ScenarioConfig};
use super::output::{fmt_f64, fmt_opt, write_csv, write_json, Manifest};
use crate::datagen::{
    baseline_seed, generate_cohort, select_baseline_available_with, select_ia_subset, Cohort,
    IASelection,
};
use crate::estimators::{
    estimate_stratum_proportions, EffectEstimate, EffectEstimator, Proportions, Stratifier,
};
use crate::futility::{
    evaluate_posterior_rule, ArmSummary, CellCount, Decision, FinalEstimate, PredictiveEvaluator,
    RemainingPerArm,
};
use crate::metrics::{
    correction_fraction, relative_change, wasserstein_bootstrap_se, wasserstein_l1, StopSummary,
};
use crate::model::{
    Arm, EstimatorKind, EstimatorSpec, FutilityKind, FutilityRuleSpec, ModelSpec,
    ProportionSource, ShiftSpec, ValidatedDesign,
};
use crate::rng::{child_seed, Stream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Runs `f` on a dedicated pool of `workers` threads (default: rayon's choice).
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().expect("thread pool").install(f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub shift: ShiftSpec,
    pub baseline_fraction: f64,
    /// The representative, complete-baseline reference cell.
    pub benchmark: bool,
}

/// Cell 0 is the benchmark; then the shift grid crossed with the baseline
/// fraction grid, shift-major.
pub fn cells(config: &ScenarioConfig) -> Vec<Cell> {
    let mut out = vec![Cell {
        index: 0,
        shift: ShiftSpec::representative(&config.design),
        baseline_fraction: 1.0,
        benchmark: true,
    }];
    for s in &config.shift_grid {
        for f in config.fractions() {
            out.push(Cell {
                index: out.len(),
                shift: s.clone(),
                baseline_fraction: f,
                benchmark: false,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub cell: usize,
    pub shift: String,
    pub shift_p1: f64,
    pub baseline_fraction: f64,
    pub benchmark: bool,
    pub replicate: usize,
    pub estimator: String,
    pub rule: String,
    pub estimate: Option<f64>,
    pub mean_treatment: Option<f64>,
    pub mean_control: Option<f64>,
    pub statistic: Option<f64>,
    pub stop: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub cell: usize,
    pub shift: String,
    pub shift_p1: f64,
    pub baseline_fraction: f64,
    pub benchmark: bool,
    pub estimator: String,
    pub rule: String,
    pub n_ok: usize,
    pub n_errors: usize,
    pub mean_estimate: Option<f64>,
    pub sd_estimate: Option<f64>,
    pub se_mean_estimate: Option<f64>,
    pub stop: Option<StopSummary>,
    /// Stop probability relative to the benchmark cell, same estimator and rule.
    pub relative_change: Option<f64>,
    /// Share of the unadjusted shift-induced gap removed by this estimator.
    pub correction_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
    pub replicates: usize,
    pub n_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub cells: Vec<Cell>,
    pub rows: Vec<ReplicateRow>,
    pub aggregates: Vec<AggregateRow>,
    pub provenance: Provenance,
    pub error_count: usize,
}

impl ScenarioResult {
    pub fn aggregate(&self, cell: usize, estimator: &str, rule: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.cell == cell && a.estimator == estimator && a.rule == rule)
    }
}

const NO_RULE: &str = "none";

struct Ctx<'a> {
    config: &'a ScenarioConfig,
    design: ValidatedDesign,
    cells: Vec<Cell>,
    stratifier: Stratifier,
    design_props: Proportions,
    evaluator: PredictiveEvaluator,
    rule_labels: Vec<String>,
    estimator_labels: Vec<String>,
    needs_baseline: bool,
}

fn p1(shift: &ShiftSpec) -> f64 {
    shift.ia_subgroup_proportions[0]
}

impl<'a> Ctx<'a> {
    fn new(config: &'a ScenarioConfig) -> Result<Self, ConfigError> {
        let design = config.validate()?;
        let stratifier = Stratifier::for_design(config.stratifier, &config.design);
        let design_props = stratifier
            .design_proportions(&config.design)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Ctx {
            config,
            cells: cells(config),
            stratifier,
            design_props,
            evaluator: PredictiveEvaluator::new(),
            rule_labels: if config.rules.is_empty() {
                vec![NO_RULE.to_string()]
            } else {
                config.rules.iter().map(|r| r.label()).collect()
            },
            estimator_labels: config.estimators.iter().map(|e| e.label()).collect(),
            needs_baseline: config.estimators.iter().any(|e| {
                matches!(e.proportion_source, ProportionSource::EstimatedFromBaseline { .. })
            }),
            design,
        })
    }

    fn row(&self, cell: &Cell, r: usize, e: usize, k: usize) -> ReplicateRow {
        ReplicateRow {
            cell: cell.index,
            shift: cell.shift.label(),
            shift_p1: p1(&cell.shift),
            baseline_fraction: cell.baseline_fraction,
            benchmark: cell.benchmark,
            replicate: r,
            estimator: self.estimator_labels[e].clone(),
            rule: self.rule_labels[k].clone(),
            estimate: None,
            mean_treatment: None,
            mean_control: None,
            statistic: None,
            stop: None,
            error: None,
        }
    }

    fn replicate(&self, r: usize) -> Vec<Vec<ReplicateRow>> {
        let cohort = generate_cohort(&self.design, child_seed(self.config.master_seed, Stream::Cohort, r as u64));
        let mut ia_cache: HashMap<String, Result<IASelection, String>> = HashMap::new();
        self.cells
            .iter()
            .map(|cell| {
                let ia = ia_cache
                    .entry(cell.shift.label())
                    .or_insert_with(|| select_ia_subset(&cohort, &cell.shift).map_err(|e| e.to_string()))
                    .clone();
                self.cell_rows(&cohort, ia, cell, r)
            })
            .collect()
    }

    fn cell_rows(
        &self,
        cohort: &Cohort,
        ia: Result<IASelection, String>,
        cell: &Cell,
        r: usize,
    ) -> Vec<ReplicateRow> {
        let n_rules = self.rule_labels.len();
        let mut rows = Vec::with_capacity(self.estimator_labels.len() * n_rules);
        let fail_all = |rows: &mut Vec<ReplicateRow>, msg: &str| {
            for e in 0..self.estimator_labels.len() {
                for k in 0..n_rules {
                    let mut row = self.row(cell, r, e, k);
                    row.error = Some(msg.to_string());
                    rows.push(row);
                }
            }
        };
        let ia = match ia {
            Ok(ia) => ia,
            Err(msg) => {
                fail_all(&mut rows, &msg);
                return rows;
            }
        };
        let ia_records = cohort.subset(&ia.ia_ids);
        let estimator = match EffectEstimator::new(&ia_records, self.stratifier) {
            Ok(e) => e,
            Err(err) => {
                fail_all(&mut rows, &err.to_string());
                return rows;
            }
        };
        let baseline_records = if self.needs_baseline {
            select_baseline_available_with(
                cohort,
                &ia,
                cell.baseline_fraction,
                baseline_seed(cohort),
                self.config.baseline_remainder,
            )
            .map(|b| cohort.subset(&b.available_ids))
            .map_err(|e| e.to_string())
        } else {
            Ok(Vec::new())
        };
        let pp_base = child_seed(
            child_seed(self.config.master_seed, Stream::Cell, cell.index as u64),
            Stream::Replicate,
            r as u64,
        );

        for (e, spec) in self.config.estimators.iter().enumerate() {
            let est = self.props_for(spec, &baseline_records).and_then(|props| {
                estimator.estimate(*spec, &props).map_err(|e| e.to_string())
            });
            for k in 0..n_rules {
                let mut row = self.row(cell, r, e, k);
                match &est {
                    Err(msg) => row.error = Some(msg.clone()),
                    Ok(est) => {
                        row.estimate = Some(est.value);
                        row.mean_treatment = Some(est.per_arm_means.treatment);
                        row.mean_control = Some(est.per_arm_means.control);
                        if let Some(rule) = self.config.rules.get(k) {
                            let seed = child_seed(pp_base, Stream::Predictive, (e * n_rules + k) as u64);
                            match self.decide(&estimator, est, spec, rule, seed) {
                                Ok(d) => {
                                    row.statistic = Some(d.statistic);
                                    row.stop = Some(d.stop_for_futility);
                                }
                                Err(msg) => row.error = Some(msg),
                            }
                        }
                    }
                }
                rows.push(row);
            }
        }
        rows
    }

    fn props_for(
        &self,
        spec: &EstimatorSpec,
        baseline: &Result<Vec<crate::model::PatientRecord>, String>,
    ) -> Result<Proportions, String> {
        match spec.proportion_source {
            ProportionSource::DesignTruth => Ok(self.design_props.clone()),
            ProportionSource::EstimatedFromBaseline { fallback_to_design } => {
                let records = baseline.as_ref().map_err(Clone::clone)?;
                estimate_stratum_proportions(records, self.stratifier, &self.design_props, fallback_to_design)
                    .map_err(|e| e.to_string())
            }
        }
    }

    fn decide(
        &self,
        estimator: &EffectEstimator,
        est: &EffectEstimate,
        spec: &EstimatorSpec,
        rule: &FutilityRuleSpec,
        seed: u64,
    ) -> Result<Decision, String> {
        let arm_n = |arm| estimator.arm_n(arm) as f64;
        match rule.kind {
            FutilityKind::PosteriorProb => evaluate_posterior_rule(
                ArmSummary {
                    mean: est.per_arm_means.treatment.clamp(0.0, 1.0),
                    n: arm_n(Arm::Treatment),
                },
                ArmSummary {
                    mean: est.per_arm_means.control.clamp(0.0, 1.0),
                    n: arm_n(Arm::Control),
                },
                rule,
            )
            .map_err(|e| e.to_string()),
            FutilityKind::PredictiveProb => {
                let counts = |arm: Arm| -> Vec<CellCount> {
                    estimator
                        .table(arm)
                        .strata
                        .iter()
                        .map(|s| CellCount {
                            successes: s.mean.map_or(0, |m| (m * s.n as f64).round() as u64),
                            n: s.n as u64,
                        })
                        .collect()
                };
                let pool = |cells: Vec<CellCount>| {
                    vec![CellCount {
                        successes: cells.iter().map(|c| c.successes).sum(),
                        n: cells.iter().map(|c| c.n).sum(),
                    }]
                };
                let remaining = RemainingPerArm {
                    treatment: (self.design.arm_count(Arm::Treatment) - estimator.arm_n(Arm::Treatment)) as u64,
                    control: (self.design.arm_count(Arm::Control) - estimator.arm_n(Arm::Control)) as u64,
                };
                let (t, c, planned, how) = match spec.kind {
                    EstimatorKind::Unadjusted => (
                        pool(counts(Arm::Treatment)),
                        pool(counts(Arm::Control)),
                        Proportions::design(vec![1.0]).expect("unit simplex"),
                        FinalEstimate::Pooled,
                    ),
                    EstimatorKind::NaivePostStrat => (
                        counts(Arm::Treatment),
                        counts(Arm::Control),
                        est.proportions_used.clone(),
                        FinalEstimate::PostStratified,
                    ),
                    _ => return Err("predictive rule needs an unadjusted or naive estimator".into()),
                };
                self.evaluator
                    .evaluate(&t, &c, remaining, &planned, how, rule, seed)
                    .map_err(|e| e.to_string())
            }
        }
    }
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(m), None, None);
    }
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (Some(m), Some(sd), Some(sd / n.sqrt()))
}

/// Aggregates per `(cell, estimator, rule)`, computed from the rows alone.
pub fn aggregate_rows(rows: &[ReplicateRow], cells: &[Cell]) -> Vec<AggregateRow> {
    let mut order: Vec<(usize, String, String)> = Vec::new();
    let mut groups: HashMap<(usize, String, String), Vec<&ReplicateRow>> = HashMap::new();
    for r in rows {
        let key = (r.cell, r.estimator.clone(), r.rule.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            })
            .push(r);
    }
    order.sort_by_key(|a| a.0);
    let mut aggs: Vec<AggregateRow> = order
        .iter()
        .map(|key| {
            let g = &groups[key];
            let ok: Vec<&&ReplicateRow> = g.iter().filter(|r| r.error.is_none()).collect();
            let estimates: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
            let (mean, sd, se) = mean_sd(&estimates);
            let stops: Vec<bool> = ok.iter().filter_map(|r| r.stop).collect();
            let cell = &cells[key.0];
            AggregateRow {
                cell: key.0,
                shift: cell.shift.label(),
                shift_p1: p1(&cell.shift),
                baseline_fraction: cell.baseline_fraction,
                benchmark: cell.benchmark,
                estimator: key.1.clone(),
                rule: key.2.clone(),
                n_ok: ok.len(),
                n_errors: g.len() - ok.len(),
                mean_estimate: mean,
                sd_estimate: sd,
                se_mean_estimate: se,
                stop: StopSummary::from_flags(stops).ok(),
                relative_change: None,
                correction_fraction: None,
            }
        })
        .collect();
    let stop_p = |aggs: &[AggregateRow], cell: usize, est: &str, rule: &str| {
        aggs.iter()
            .find(|a| a.cell == cell && a.estimator == est && a.rule == rule)
            .and_then(|a| a.stop.map(|s| s.stop_probability))
    };
    let unadjusted = EstimatorSpec::unadjusted().label();
    let extra: Vec<(Option<f64>, Option<f64>)> = aggs
        .iter()
        .map(|a| {
            let Some(p) = a.stop.map(|s| s.stop_probability) else {
                return (None, None);
            };
            let rc = stop_p(&aggs, 0, &a.estimator, &a.rule).and_then(|b| relative_change(p, b).ok());
            let cf = match (stop_p(&aggs, a.cell, &unadjusted, &a.rule), stop_p(&aggs, 0, &unadjusted, &a.rule)) {
                (Some(ps), Some(pb)) if !a.benchmark => correction_fraction(ps, p, pb).ok(),
                _ => None,
            };
            (rc, cf)
        })
        .collect();
    for (a, (rc, cf)) in aggs.iter_mut().zip(extra) {
        a.relative_change = rc;
        a.correction_fraction = cf;
    }
    aggs
}

/// Runs every `(cell, replicate)` task and aggregates.
pub fn run_scenario(config: &ScenarioConfig, workers: Option<usize>) -> Result<ScenarioResult, ConfigError> {
    let ctx = Ctx::new(config)?;
    let per_rep: Vec<Vec<Vec<ReplicateRow>>> = with_workers(workers, || {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| ctx.replicate(r))
            .collect()
    });
    let n_cells = ctx.cells.len();
    let mut rows = Vec::new();
    for c in 0..n_cells {
        for rep in &per_rep {
            rows.extend(rep[c].iter().cloned());
        }
    }
    let error_count = rows.iter().filter(|r| r.error.is_some()).count();
    let aggregates = aggregate_rows(&rows, &ctx.cells);
    Ok(ScenarioResult {
        provenance: Provenance {
            config_hash: config.hash(),
            master_seed: config.master_seed,
            version: VERSION.to_string(),
            replicates: config.replicates,
            n_cells,
        },
        cells: ctx.cells,
        rows,
        aggregates,
        error_count,
    })
}

pub const ROW_HEADER: [&str; 14] = [
    "cell",
    "shift",
    "shift_p1",
    "baseline_fraction",
    "benchmark",
    "replicate",
    "estimator",
    "rule",
    "estimate",
    "mean_treatment",
    "mean_control",
    "statistic",
    "stop",
    "error",
];

pub const AGGREGATE_HEADER: [&str; 19] = [
    "cell",
    "shift",
    "shift_p1",
    "baseline_fraction",
    "benchmark",
    "estimator",
    "rule",
    "n_ok",
    "n_errors",
    "mean_estimate",
    "sd_estimate",
    "se_mean_estimate",
    "n_stops",
    "stop_prob",
    "mc_se",
    "relative_change",
    "correction_fraction",
    "n_replicates",
    "stop_defined",
];

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

pub fn row_record(r: &ReplicateRow) -> Vec<String> {
    vec![
        r.cell.to_string(),
        r.shift.clone(),
        fmt_f64(r.shift_p1),
        fmt_f64(r.baseline_fraction),
        flag(r.benchmark),
        r.replicate.to_string(),
        r.estimator.clone(),
        r.rule.clone(),
        fmt_opt(r.estimate),
        fmt_opt(r.mean_treatment),
        fmt_opt(r.mean_control),
        fmt_opt(r.statistic),
        r.stop.map(flag).unwrap_or_default(),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn aggregate_record(a: &AggregateRow) -> Vec<String> {
    vec![
        a.cell.to_string(),
        a.shift.clone(),
        fmt_f64(a.shift_p1),
        fmt_f64(a.baseline_fraction),
        flag(a.benchmark),
        a.estimator.clone(),
        a.rule.clone(),
        a.n_ok.to_string(),
        a.n_errors.to_string(),
        fmt_opt(a.mean_estimate),
        fmt_opt(a.sd_estimate),
        fmt_opt(a.se_mean_estimate),
        a.stop.map(|s| s.n_stops.to_string()).unwrap_or_default(),
        fmt_opt(a.stop.map(|s| s.stop_probability)),
        fmt_opt(a.stop.map(|s| s.mc_standard_error)),
        fmt_opt(a.relative_change),
        fmt_opt(a.correction_fraction),
        a.stop.map(|s| s.n_replicates.to_string()).unwrap_or_default(),
        flag(a.stop.is_some()),
    ]
}

#[derive(Serialize)]
struct ResultDocument<'a> {
    provenance: &'a Provenance,
    config: &'a ScenarioConfig,
    cells: &'a [Cell],
    error_count: usize,
    aggregates: &'a [AggregateRow],
}

/// Writes `rows.csv` (optional), `aggregates.csv` and `result.json`.
pub fn write_scenario(result: &ScenarioResult, config: &ScenarioConfig, dir: &Path) -> std::io::Result<Manifest> {
    let mut m = Manifest::new(dir)?;
    if config.output.per_replicate_rows {
        let rows: Vec<Vec<String>> = result.rows.iter().map(row_record).collect();
        write_csv(m.path("rows.csv"), &ROW_HEADER, &rows)?;
    }
    let aggs: Vec<Vec<String>> = result.aggregates.iter().map(aggregate_record).collect();
    write_csv(m.path("aggregates.csv"), &AGGREGATE_HEADER, &aggs)?;
    write_json(
        m.path("result.json"),
        &ResultDocument {
            provenance: &result.provenance,
            config,
            cells: &result.cells,
            error_count: result.error_count,
            aggregates: &result.aggregates,
        },
    )?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutoffCurve {
    pub cutoffs: Vec<usize>,
    pub distances: Vec<f64>,
    /// Cutoff with the smallest distance; ties go to the smaller cutoff.
    pub argmin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutoffStudy {
    pub curve: CutoffCurve,
    pub model: ModelSpec,
    pub shift: ShiftSpec,
    pub replicates_used: usize,
    pub replicate_errors: usize,
    /// Unadjusted estimates on representative interim samples.
    pub benchmark: Vec<f64>,
    pub naive: Vec<f64>,
    pub model_based: Vec<f64>,
    /// Hybrid estimates, one vector per cutoff.
    pub hybrid: Vec<Vec<f64>>,
    pub naive_w1: f64,
    pub model_w1: f64,
    pub tuned_w1: f64,
    pub naive_w1_se: f64,
    pub model_w1_se: f64,
    pub tuned_w1_se: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 500;

fn study_model(config: &ScenarioConfig) -> ModelSpec {
    config
        .estimators
        .iter()
        .find_map(|e| match e.kind {
            EstimatorKind::HybridPostStrat { model, .. } => Some(model),
            _ => None,
        })
        .or_else(|| {
            config.estimators.iter().find_map(|e| match e.kind {
                EstimatorKind::ModelBasedPostStrat { model } => Some(model),
                _ => None,
            })
        })
        .unwrap_or(ModelSpec::RandomInterceptLmm {
            treatment_by_subgroup_interaction: false,
        })
}

/// Hybrid estimates for every cutoff of `grid` at the first shift of the
/// config, compared by W1 with the benchmark distribution. Replicates in
/// which any estimator fails are dropped from every list.
pub fn cutoff_study(
    config: &ScenarioConfig,
    grid: &[usize],
    workers: Option<usize>,
) -> Result<CutoffStudy, ConfigError> {
    if grid.is_empty() {
        return Err(ConfigError::Invalid("cutoff grid is empty".into()));
    }
    let design = config.validate()?;
    if design.design().endpoint.is_binary() {
        return Err(ConfigError::Invalid("cutoff tuning needs a continuous endpoint".into()));
    }
    let model = study_model(config);
    let shift = config.shift_grid[0].clone();
    let representative = ShiftSpec::representative(&config.design);
    let stratifier = Stratifier::for_design(config.stratifier, &config.design);
    let props = stratifier
        .design_proportions(&config.design)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

    type Rep = (f64, f64, f64, Vec<f64>);
    let per_rep: Vec<Option<Rep>> = with_workers(workers, || {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| {
                let cohort = generate_cohort(&design, child_seed(config.master_seed, Stream::Cohort, r as u64));
                let bench_ia = select_ia_subset(&cohort, &representative).ok()?;
                let bench_recs = cohort.subset(&bench_ia.ia_ids);
                let bench = EffectEstimator::new(&bench_recs, stratifier)
                    .ok()?
                    .estimate(EstimatorSpec::unadjusted(), &props)
                    .ok()?
                    .value;
                let ia = select_ia_subset(&cohort, &shift).ok()?;
                let recs = cohort.subset(&ia.ia_ids);
                let est = EffectEstimator::new(&recs, stratifier).ok()?;
                let naive = est.estimate(EstimatorSpec::naive(), &props).map(|e| e.value).unwrap_or(f64::NAN);
                let mb = est
                    .estimate(EstimatorSpec::new(EstimatorKind::ModelBasedPostStrat { model }), &props)
                    .ok()?
                    .value;
                let hybrids = grid
                    .iter()
                    .map(|&cutoff| {
                        est.estimate(EstimatorSpec::new(EstimatorKind::HybridPostStrat { model, cutoff }), &props)
                            .map(|e| e.value)
                    })
                    .collect::<Result<Vec<f64>, _>>()
                    .ok()?;
                Some((bench, naive, mb, hybrids))
            })
            .collect()
    });

    let replicate_errors = per_rep.iter().filter(|r| r.is_none()).count();
    let kept: Vec<Rep> = per_rep.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(ConfigError::Invalid("every replicate failed".into()));
    }
    let benchmark: Vec<f64> = kept.iter().map(|r| r.0).collect();
    // Naive fails when a stratum is empty; its distribution uses the replicates where it exists.
    let naive: Vec<f64> = kept.iter().map(|r| r.1).filter(|x| x.is_finite()).collect();
    let model_based: Vec<f64> = kept.iter().map(|r| r.2).collect();
    let hybrid: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| kept.iter().map(|r| r.3[i]).collect())
        .collect();
    let w1 = |xs: &[f64]| wasserstein_l1(xs, &benchmark).unwrap_or(f64::NAN);
    let distances: Vec<f64> = hybrid.iter().map(|h| w1(h)).collect();
    let best = distances
        .iter()
        .enumerate()
        .fold(0, |b, (i, d)| if *d < distances[b] { i } else { b });
    let seed = child_seed(config.master_seed, Stream::Bootstrap, 0);
    let se = |xs: &[f64], i: u64| {
        wasserstein_bootstrap_se(xs, &benchmark, BOOTSTRAP_RESAMPLES, child_seed(seed, Stream::Bootstrap, i))
            .unwrap_or(f64::NAN)
    };
    Ok(CutoffStudy {
        curve: CutoffCurve {
            cutoffs: grid.to_vec(),
            distances: distances.clone(),
            argmin: grid[best],
        },
        model,
        shift,
        replicates_used: kept.len(),
        replicate_errors,
        naive_w1: w1(&naive),
        model_w1: w1(&model_based),
        tuned_w1: distances[best],
        naive_w1_se: se(&naive, 0),
        model_w1_se: se(&model_based, 1),
        tuned_w1_se: se(&hybrid[best], 2),
        benchmark,
        naive,
        model_based,
        hybrid,
    })
}

pub fn tune_hybrid_cutoff(
    config: &ScenarioConfig,
    grid: &[usize],
    workers: Option<usize>,
) -> Result<CutoffCurve, ConfigError> {
    cutoff_study(config, grid, workers).map(|s| s.curve)
}
