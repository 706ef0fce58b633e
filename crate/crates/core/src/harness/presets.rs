//! Preset scenarios and figure reproduction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, OutputSpec, ScenarioConfig};
use super::engine::{cutoff_study, run_scenario, ScenarioResult, VERSION};
use super::output::{fmt_f64, fmt_opt, write_csv, write_json, Manifest};
use crate::datagen::BaselineRemainder;
use crate::estimators::{shrinkage_weight, StratifierKind};
use crate::model::{
    Allocation, Endpoint, EstimatorKind, EstimatorSpec, FutilityRuleSpec, ModelSpec,
    ProportionSource, Randomization, ShiftSpec, SiteSpec, SubgroupSpec, TrialDesign,
};

pub const MASTER_SEED: u64 = 20_240_917;
/// Subgroup-1 interim proportions: -8.3% .. +25% relative to 0.6.
pub const FIG1_SHIFTS: [f64; 5] = [0.55, 0.60, 0.65, 0.70, 0.75];
pub const FIG6_GRID: [usize; 7] = [0, 2, 5, 10, 20, 50, 100];
pub const FIG8_FRACTIONS: [f64; 8] = [0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
/// Residual SD of the continuous scenario (not given by the source scenario).
pub const CONTINUOUS_RESIDUAL_SD: f64 = 5.0;

fn subgroup(label: &str, p: f64, control: f64, treatment: f64) -> SubgroupSpec {
    SubgroupSpec {
        label: label.into(),
        population_proportion: p,
        control_param: control,
        treatment_effect: treatment,
    }
}

/// Binary endpoint, N = 300, subgroups 60:40 with control 30% / 30% and
/// treated 40% / 65%, interim at 40%.
pub fn binary_scenario() -> TrialDesign {
    TrialDesign {
        total_n: 300,
        allocation: Allocation::default(),
        endpoint: Endpoint::Binary,
        subgroups: vec![subgroup("S1", 0.6, 0.3, 0.4), subgroup("S2", 0.4, 0.3, 0.65)],
        sites: SiteSpec::default(),
        ia_fraction: 0.4,
        randomization: Randomization::StratifiedBlocks,
    }
}

/// Continuous endpoint, N = 600, baselines 40 / 20, effects 7 / 3, four
/// sites with effect SD 2.5, interim at 40%.
pub fn continuous_scenario() -> TrialDesign {
    TrialDesign {
        total_n: 600,
        allocation: Allocation::default(),
        endpoint: Endpoint::Continuous {
            residual_sd: CONTINUOUS_RESIDUAL_SD,
        },
        subgroups: vec![subgroup("S1", 0.6, 40.0, 7.0), subgroup("S2", 0.4, 20.0, 3.0)],
        sites: SiteSpec {
            count: 4,
            effect_sd: 2.5,
        },
        ia_fraction: 0.4,
        randomization: Randomization::Complete,
    }
}

fn shifts(p1s: &[f64]) -> Vec<ShiftSpec> {
    p1s.iter().map(|&p| ShiftSpec::new(vec![p, 1.0 - p])).collect()
}

fn base_config(design: TrialDesign, replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        design,
        shift_grid: Vec::new(),
        estimators: Vec::new(),
        rules: Vec::new(),
        baseline_fraction_grid: Vec::new(),
        replicates,
        master_seed: MASTER_SEED,
        stratifier: StratifierKind::Subgroup,
        baseline_remainder: BaselineRemainder::FinitePopulation,
        output: OutputSpec::default(),
    }
}

pub fn lmm_without_interaction() -> ModelSpec {
    ModelSpec::RandomInterceptLmm {
        treatment_by_subgroup_interaction: false,
    }
}

pub fn fig1_config(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        shift_grid: shifts(&FIG1_SHIFTS),
        estimators: vec![EstimatorSpec::unadjusted(), EstimatorSpec::naive()],
        rules: vec![FutilityRuleSpec::posterior()],
        ..base_config(binary_scenario(), replicates)
    }
}

pub fn fig2_config(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        rules: vec![FutilityRuleSpec::predictive()],
        ..fig1_config(replicates)
    }
}

pub fn fig5_config(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        shift_grid: shifts(&[0.5]),
        estimators: vec![
            EstimatorSpec::unadjusted(),
            EstimatorSpec::naive(),
            EstimatorSpec::new(EstimatorKind::ModelBasedPostStrat {
                model: lmm_without_interaction(),
            }),
        ],
        ..base_config(continuous_scenario(), replicates)
    }
}

/// Hybrid tuning works on subgroup-by-site cells, where small cells occur.
pub fn fig6_config(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        shift_grid: shifts(&[0.5]),
        estimators: vec![EstimatorSpec::new(EstimatorKind::HybridPostStrat {
            model: lmm_without_interaction(),
            cutoff: crate::model::DEFAULT_HYBRID_CUTOFF,
        })],
        stratifier: StratifierKind::SubgroupBySite,
        ..base_config(continuous_scenario(), replicates)
    }
}

pub fn fig8_config(replicates: usize) -> ScenarioConfig {
    ScenarioConfig {
        shift_grid: shifts(&[0.7]),
        estimators: vec![
            EstimatorSpec::unadjusted(),
            EstimatorSpec::naive().with_source(ProportionSource::EstimatedFromBaseline {
                fallback_to_design: true,
            }),
        ],
        rules: vec![FutilityRuleSpec::posterior()],
        baseline_fraction_grid: FIG8_FRACTIONS.to_vec(),
        ..base_config(binary_scenario(), replicates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FigureId {
    Fig1,
    Fig2,
    Fig5,
    Fig6,
    Fig7,
    Fig8,
    Fig9,
}

impl FigureId {
    pub const ALL: [FigureId; 7] = [
        FigureId::Fig1,
        FigureId::Fig2,
        FigureId::Fig5,
        FigureId::Fig6,
        FigureId::Fig7,
        FigureId::Fig8,
        FigureId::Fig9,
    ];

    pub fn default_replicates(self) -> usize {
        match self {
            FigureId::Fig8 | FigureId::Fig9 => 10_000,
            _ => 1_000,
        }
    }

    pub fn config(self, replicates: usize) -> ScenarioConfig {
        match self {
            FigureId::Fig1 => fig1_config(replicates),
            FigureId::Fig2 => fig2_config(replicates),
            FigureId::Fig5 => fig5_config(replicates),
            FigureId::Fig6 | FigureId::Fig7 => fig6_config(replicates),
            FigureId::Fig8 | FigureId::Fig9 => fig8_config(replicates),
        }
    }
}

impl fmt::Display for FigureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FigureId::Fig1 => "fig1",
            FigureId::Fig2 => "fig2",
            FigureId::Fig5 => "fig5",
            FigureId::Fig6 => "fig6",
            FigureId::Fig7 => "fig7",
            FigureId::Fig8 => "fig8",
            FigureId::Fig9 => "fig9",
        };
        f.write_str(s)
    }
}

impl FromStr for FigureId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FigureId::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| format!("unknown figure {s:?} (expected fig1, fig2, fig5, fig6, fig7, fig8 or fig9)"))
    }
}

#[derive(Debug, Error)]
pub enum ReproduceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

#[derive(Serialize)]
struct Sidecar<'a, S: Serialize> {
    figure: String,
    version: &'a str,
    config_hash: String,
    master_seed: u64,
    replicates: usize,
    config: &'a ScenarioConfig,
    summary: S,
}

fn sidecar<S: Serialize>(
    m: &mut Manifest,
    fig: FigureId,
    config: &ScenarioConfig,
    summary: S,
) -> std::io::Result<()> {
    write_json(
        m.path(&format!("{fig}.json")),
        &Sidecar {
            figure: fig.to_string(),
            version: VERSION,
            config_hash: config.hash(),
            master_seed: config.master_seed,
            replicates: config.replicates,
            config,
            summary,
        },
    )
}

fn shift_pct(p1: f64, planned: f64) -> f64 {
    100.0 * (p1 - planned) / planned
}

fn stop_curve_rows(res: &ScenarioResult, config: &ScenarioConfig) -> Vec<Vec<String>> {
    let planned = config.design.subgroups[0].population_proportion;
    res.aggregates
        .iter()
        .filter(|a| !a.benchmark)
        .filter_map(|a| {
            let s = a.stop?;
            Some(vec![
                fmt_f64(shift_pct(a.shift_p1, planned)),
                a.estimator.clone(),
                fmt_f64(s.stop_probability),
                fmt_opt(a.relative_change.map(|x| 100.0 * x)),
                fmt_f64(s.mc_standard_error),
            ])
        })
        .collect()
}

#[derive(Serialize)]
struct StopCurveSummary {
    benchmark: Vec<(String, Option<f64>)>,
    error_count: usize,
    shift_grid_pct: Vec<f64>,
}

fn stop_curve_summary(res: &ScenarioResult, config: &ScenarioConfig) -> StopCurveSummary {
    let planned = config.design.subgroups[0].population_proportion;
    StopCurveSummary {
        benchmark: res
            .aggregates
            .iter()
            .filter(|a| a.benchmark)
            .map(|a| (a.estimator.clone(), a.stop.map(|s| s.stop_probability)))
            .collect(),
        error_count: res.error_count,
        shift_grid_pct: config
            .shift_grid
            .iter()
            .map(|s| shift_pct(s.ia_subgroup_proportions[0], planned))
            .collect(),
    }
}

#[derive(Serialize)]
struct Distribution {
    method: String,
    n: usize,
    mean: f64,
    variance: f64,
}

fn describe(method: &str, xs: &[f64]) -> Distribution {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Distribution {
        method: method.to_string(),
        n: xs.len(),
        mean,
        variance,
    }
}

fn distribution_rows(series: &[(&str, &[f64])]) -> Vec<Vec<String>> {
    series
        .iter()
        .flat_map(|(name, xs)| {
            xs.iter()
                .enumerate()
                .map(move |(i, x)| vec![name.to_string(), i.to_string(), fmt_f64(*x)])
        })
        .collect()
}

/// Writes `<fig>.csv` and `<fig>.json` into `out_dir`.
pub fn reproduce_figure(
    fig: FigureId,
    out_dir: &Path,
    replicates: Option<usize>,
    workers: Option<usize>,
) -> Result<Manifest, ReproduceError> {
    let config = fig.config(replicates.unwrap_or(fig.default_replicates()));
    let mut m = Manifest::new(out_dir)?;
    let csv_name = format!("{fig}.csv");
    match fig {
        FigureId::Fig1 | FigureId::Fig2 => {
            let res = run_scenario(&config, workers)?;
            write_csv(
                m.path(&csv_name),
                &["shift_pct", "method", "stop_prob", "rel_change_pct", "mc_se"],
                &stop_curve_rows(&res, &config),
            )?;
            sidecar(&mut m, fig, &config, stop_curve_summary(&res, &config))?;
        }
        FigureId::Fig5 => {
            let res = run_scenario(&config, workers)?;
            let mut series: Vec<(String, Vec<f64>)> = Vec::new();
            let bench: Vec<f64> = res
                .rows
                .iter()
                .filter(|r| r.cell == 0 && r.estimator == "unadjusted")
                .filter_map(|r| r.estimate)
                .collect();
            series.push(("benchmark".into(), bench));
            for e in &config.estimators {
                let label = e.label();
                let xs = res
                    .rows
                    .iter()
                    .filter(|r| r.cell == 1 && r.estimator == label)
                    .filter_map(|r| r.estimate)
                    .collect();
                series.push((label, xs));
            }
            let refs: Vec<(&str, &[f64])> = series.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            write_csv(m.path(&csv_name), &["method", "replicate", "estimate"], &distribution_rows(&refs))?;
            #[derive(Serialize)]
            struct S {
                true_effect: f64,
                distributions: Vec<Distribution>,
                error_count: usize,
            }
            sidecar(
                &mut m,
                fig,
                &config,
                S {
                    true_effect: config.design.true_effect(),
                    distributions: refs.iter().map(|(n, v)| describe(n, v)).collect(),
                    error_count: res.error_count,
                },
            )?;
        }
        FigureId::Fig6 | FigureId::Fig7 => {
            let study = cutoff_study(&config, &FIG6_GRID, workers)?;
            if fig == FigureId::Fig6 {
                let rows = study
                    .curve
                    .cutoffs
                    .iter()
                    .zip(&study.curve.distances)
                    .map(|(c, d)| {
                        vec![c.to_string(), fmt_f64(*d), u8::from(*c == study.curve.argmin).to_string()]
                    })
                    .collect::<Vec<_>>();
                write_csv(m.path(&csv_name), &["cutoff", "w1", "argmin"], &rows)?;
                #[derive(Serialize)]
                struct S<'a> {
                    curve: &'a super::engine::CutoffCurve,
                    naive_w1: f64,
                    model_w1: f64,
                    replicates_used: usize,
                    replicate_errors: usize,
                }
                sidecar(
                    &mut m,
                    fig,
                    &config,
                    S {
                        curve: &study.curve,
                        naive_w1: study.naive_w1,
                        model_w1: study.model_w1,
                        replicates_used: study.replicates_used,
                        replicate_errors: study.replicate_errors,
                    },
                )?;
            } else {
                let at = study
                    .curve
                    .cutoffs
                    .iter()
                    .position(|&c| c == study.curve.argmin)
                    .expect("argmin is on the grid");
                let hybrid_name = format!("hybrid_c{}", study.curve.argmin);
                let refs: Vec<(&str, &[f64])> = vec![
                    ("benchmark", &study.benchmark),
                    ("naive", &study.naive),
                    ("model", &study.model_based),
                    (hybrid_name.as_str(), &study.hybrid[at]),
                ];
                write_csv(m.path(&csv_name), &["method", "replicate", "estimate"], &distribution_rows(&refs))?;
                #[derive(Serialize)]
                struct S {
                    tuned_cutoff: usize,
                    w1: Vec<(String, f64)>,
                    distributions: Vec<Distribution>,
                }
                sidecar(
                    &mut m,
                    fig,
                    &config,
                    S {
                        tuned_cutoff: study.curve.argmin,
                        w1: vec![
                            ("naive".into(), study.naive_w1),
                            ("model".into(), study.model_w1),
                            (hybrid_name.clone(), study.tuned_w1),
                        ],
                        distributions: refs.iter().map(|(n, v)| describe(n, v)).collect(),
                    },
                )?;
            }
        }
        FigureId::Fig8 | FigureId::Fig9 => {
            let res = run_scenario(&config, workers)?;
            let rule = config.rules[0].label();
            let unadj = EstimatorSpec::unadjusted().label();
            let adj = config.estimators[1].label();
            let bench = res.aggregate(0, &unadj, &rule).and_then(|a| a.stop);
            let mut rows = Vec::new();
            for cell in res.cells.iter().filter(|c| !c.benchmark) {
                let u = res.aggregate(cell.index, &unadj, &rule);
                let a = res.aggregate(cell.index, &adj, &rule);
                if fig == FigureId::Fig8 {
                    rows.push(vec![
                        fmt_f64(cell.baseline_fraction),
                        fmt_opt(u.and_then(|x| x.stop).map(|s| s.stop_probability)),
                        fmt_opt(a.and_then(|x| x.stop).map(|s| s.stop_probability)),
                        fmt_opt(bench.map(|s| s.stop_probability)),
                        fmt_opt(a.and_then(|x| x.correction_fraction)),
                        fmt_opt(a.and_then(|x| x.stop).map(|s| s.mc_standard_error)),
                    ]);
                } else {
                    for (name, agg) in [("unadjusted", u), ("naive_estprops", a)] {
                        rows.push(vec![
                            fmt_f64(cell.baseline_fraction),
                            name.to_string(),
                            fmt_opt(agg.and_then(|x| x.mean_estimate)),
                            fmt_opt(agg.and_then(|x| x.se_mean_estimate)),
                            fmt_f64(config.design.true_effect()),
                        ]);
                    }
                }
            }
            let header: &[&str] = if fig == FigureId::Fig8 {
                &[
                    "baseline_fraction",
                    "stop_prob_unadjusted",
                    "stop_prob_adjusted",
                    "stop_prob_benchmark",
                    "correction_fraction",
                    "mc_se",
                ]
            } else {
                &["baseline_fraction", "method", "mean_estimate", "mc_se", "true_effect"]
            };
            write_csv(m.path(&csv_name), header, &rows)?;
            #[derive(Serialize)]
            struct S {
                benchmark_stop_prob: Option<f64>,
                unadjusted_error_inflation: Option<f64>,
                true_effect: f64,
                error_count: usize,
            }
            let inflation = res.aggregate(1, &unadj, &rule).and_then(|a| a.relative_change);
            sidecar(
                &mut m,
                fig,
                &config,
                S {
                    benchmark_stop_prob: bench.map(|s| s.stop_probability),
                    unadjusted_error_inflation: inflation,
                    true_effect: config.design.true_effect(),
                    error_count: res.error_count,
                },
            )?;
        }
    }
    Ok(m)
}

pub const SHRINKAGE_TAU2: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const SHRINKAGE_N: [usize; 5] = [1, 5, 10, 25, 50];

/// Weight against group size for several `tau2` and against `tau2` for
/// several group sizes, all with `sigma2 = 1`.
pub fn shrinkage_curves(out_dir: &Path) -> std::io::Result<Manifest> {
    let mut m = Manifest::new(out_dir)?;
    let sigma2 = 1.0;
    let header = ["tau2", "sigma2", "n", "weight"];
    let by_n: Vec<Vec<String>> = SHRINKAGE_TAU2
        .iter()
        .flat_map(|&t| {
            (1..=100).map(move |n| {
                vec![fmt_f64(t), fmt_f64(sigma2), n.to_string(), fmt_f64(shrinkage_weight(t, sigma2, n as f64))]
            })
        })
        .collect();
    write_csv(m.path("shrinkage_vs_n.csv"), &header, &by_n)?;
    let by_tau: Vec<Vec<String>> = SHRINKAGE_N
        .iter()
        .flat_map(|&n| {
            (0..=100).map(move |i| {
                let t = i as f64 * 0.05;
                vec![fmt_f64(t), fmt_f64(sigma2), n.to_string(), fmt_f64(shrinkage_weight(t, sigma2, n as f64))]
            })
        })
        .collect();
    write_csv(m.path("shrinkage_vs_tau2.csv"), &header, &by_tau)?;
    #[derive(Serialize)]
    struct S {
        version: &'static str,
        sigma2: f64,
        tau2_values: [f64; 5],
        n_values: [usize; 5],
    }
    write_json(
        m.path("shrinkage.json"),
        &S {
            version: VERSION,
            sigma2,
            tau2_values: SHRINKAGE_TAU2,
            n_values: SHRINKAGE_N,
        },
    )?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn designs_validate() {
        let d2 = binary_scenario().validate().unwrap();
        assert_eq!(d2.subgroup_counts(), &[180, 120]);
        assert!((binary_scenario().true_effect() - 0.2).abs() < 1e-12);
        let d3 = continuous_scenario().validate().unwrap();
        assert_eq!(d3.n_sites(), 4);
        assert!((continuous_scenario().true_effect() - 5.4).abs() < 1e-12);
        for f in FigureId::ALL {
            f.config(3).validate().unwrap();
            assert_eq!(f.to_string().parse::<FigureId>().unwrap(), f);
        }
    }

    #[test]
    fn fig1_schema() {
        let dir = tempfile::tempdir().unwrap();
        let m = reproduce_figure(FigureId::Fig1, dir.path(), Some(20), Some(1)).unwrap();
        assert_eq!(m.files, vec!["fig1.csv", "fig1.json"]);
        let text = std::fs::read_to_string(dir.path().join("fig1.csv")).unwrap();
        assert!(text.starts_with("shift_pct,method,stop_prob,rel_change_pct,mc_se\n"));
        assert_eq!(text.lines().count(), 1 + FIG1_SHIFTS.len() * 2);
    }

    #[test]
    fn fig8_has_one_row_per_fraction() {
        let dir = tempfile::tempdir().unwrap();
        reproduce_figure(FigureId::Fig8, dir.path(), Some(20), Some(1)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("fig8.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + FIG8_FRACTIONS.len());
        assert!(lines[0].contains("correction_fraction"));
    }

    #[test]
    fn shrinkage_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = shrinkage_curves(dir.path()).unwrap();
        assert_eq!(m.files.len(), 3);
        let text = std::fs::read_to_string(dir.path().join("shrinkage_vs_n.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 500);
    }
}
