//! Subsampling chi-square screen for baseline variables whose interim
//! distribution departs from the available-baseline distribution.
//!
//! The interim set is part of the baseline set, so the usual independence
//! tests do not apply. The null distribution is instead built from uniform
//! without-replacement subsamples of the baseline set of the interim size.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::PatientRecord;
use crate::rng::{child_rng, child_seed, Stream};

pub const DEFAULT_SUBSAMPLES: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreeningError {
    #[error("category {category} has zero expected proportion but {observed} observations")]
    ZeroExpected { category: usize, observed: u64 },
    #[error("no observations")]
    EmptyCounts,
    #[error("variable {0:?} is not in the baseline data")]
    VariableMissing(String),
    #[error("interim id {0} is not in the baseline set")]
    IaNotSubset(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Pearson goodness-of-fit statistic `sum (O - E)^2 / E`, `E = p * sum O`.
/// Categories with `p = 0` and no observations contribute nothing.
pub fn chi_square_gof(observed: &[u64], expected_props: &[f64]) -> Result<f64, ScreeningError> {
    if observed.len() != expected_props.len() {
        return Err(ScreeningError::InvalidArgument(format!(
            "{} counts vs {} proportions",
            observed.len(),
            expected_props.len()
        )));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(ScreeningError::EmptyCounts);
    }
    let mut stat = 0.0;
    for (k, (&o, &p)) in observed.iter().zip(expected_props).enumerate() {
        if p <= 0.0 {
            if o > 0 {
                return Err(ScreeningError::ZeroExpected {
                    category: k,
                    observed: o,
                });
            }
            continue;
        }
        let e = p * total as f64;
        stat += (o as f64 - e).powi(2) / e;
    }
    Ok(stat)
}

/// Categorical baseline variables keyed by patient id, stored in id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineFrame {
    ids: Vec<u64>,
    /// Per variable: category labels and the category code of each row.
    variables: BTreeMap<String, (Vec<String>, Vec<usize>)>,
}

impl BaselineFrame {
    /// Builds a frame from `(id, value)` rows per variable name.
    pub fn new(
        ids: Vec<u64>,
        columns: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, ScreeningError> {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| ids[i]);
        if order.windows(2).any(|w| ids[w[0]] == ids[w[1]]) {
            return Err(ScreeningError::InvalidArgument("duplicate ids".into()));
        }
        let mut variables = BTreeMap::new();
        for (name, values) in columns {
            if values.len() != ids.len() {
                return Err(ScreeningError::InvalidArgument(format!(
                    "column {name} has {} values for {} ids",
                    values.len(),
                    ids.len()
                )));
            }
            let labels: Vec<String> = values
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let code: HashMap<&str, usize> =
                labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
            let codes = order.iter().map(|&i| code[values[i].as_str()]).collect();
            variables.insert(name, (labels, codes));
        }
        Ok(BaselineFrame {
            ids: order.iter().map(|&i| ids[i]).collect(),
            variables,
        })
    }

    /// `subgroup` and `site` columns of baseline-available records.
    pub fn from_records(records: &[PatientRecord]) -> Result<Self, ScreeningError> {
        let avail: Vec<&PatientRecord> = records.iter().filter(|r| r.baseline_available).collect();
        let mut cols = BTreeMap::new();
        cols.insert(
            "subgroup".to_string(),
            avail.iter().map(|r| r.subgroup_index.to_string()).collect(),
        );
        cols.insert(
            "site".to_string(),
            avail.iter().map(|r| r.site_index.to_string()).collect(),
        );
        Self::new(avail.iter().map(|r| r.id).collect(), cols)
    }

    /// Reads a CSV with a header row. Rows with a false `baseline_available`
    /// column (when present) are dropped; ids come from an `id` column or
    /// the row number. Returns the frame and the ids flagged by `ia_col`.
    pub fn from_csv<R: Read>(
        reader: R,
        ia_col: &str,
        vars: &[String],
    ) -> Result<(Self, BTreeSet<u64>), ScreeningError> {
        let csv_err = |e: csv::Error| ScreeningError::Csv(e.to_string());
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let pos = |name: &str| headers.iter().position(|h| h == name);
        let ia_pos = pos(ia_col).ok_or_else(|| ScreeningError::VariableMissing(ia_col.into()))?;
        let id_pos = pos("id");
        let avail_pos = pos("baseline_available");
        let var_pos: Vec<usize> = vars
            .iter()
            .map(|v| pos(v).ok_or_else(|| ScreeningError::VariableMissing(v.clone())))
            .collect::<Result<_, _>>()?;
        let truthy = |s: &str| matches!(s.trim(), "1" | "true" | "TRUE" | "True");
        let mut ids = Vec::new();
        let mut ia = BTreeSet::new();
        let mut cols: Vec<Vec<String>> = vec![Vec::new(); vars.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let in_ia = truthy(&rec[ia_pos]);
            if let Some(a) = avail_pos {
                if !truthy(&rec[a]) && !in_ia {
                    continue;
                }
            }
            let id = match id_pos {
                Some(p) => rec[p]
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| ScreeningError::Csv(format!("row {row}: id: {e}")))?,
                None => row as u64,
            };
            ids.push(id);
            if in_ia {
                ia.insert(id);
            }
            for (c, &p) in cols.iter_mut().zip(&var_pos) {
                c.push(rec[p].trim().to_string());
            }
        }
        let frame = Self::new(ids, vars.iter().cloned().zip(cols).collect())?;
        Ok((frame, ia))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn variable_names(&self) -> impl Iterator<Item = &str> {
        self.variables.keys().map(String::as_str)
    }

    fn variable(&self, name: &str) -> Result<&(Vec<String>, Vec<usize>), ScreeningError> {
        self.variables
            .get(name)
            .ok_or_else(|| ScreeningError::VariableMissing(name.into()))
    }

    fn rows_of(&self, ids: &BTreeSet<u64>) -> Result<Vec<usize>, ScreeningError> {
        ids.iter()
            .map(|id| {
                self.ids
                    .binary_search(id)
                    .map_err(|_| ScreeningError::IaNotSubset(*id))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermResult {
    pub variable: String,
    pub observed_stat: f64,
    pub null_stats: Vec<f64>,
    pub p_value: f64,
    #[serde(rename = "B")]
    pub b: usize,
}

fn counts(codes: &[usize], rows: impl Iterator<Item = usize>, k: usize) -> Vec<u64> {
    let mut c = vec![0u64; k];
    for r in rows {
        c[codes[r]] += 1;
    }
    c
}

/// Chi-square statistic of the interim set against the full baseline
/// composition, referred to `b` subsamples of the interim size.
/// `p = (1 + #{null >= observed}) / (b + 1)`.
pub fn permutation_shift_test(
    frame: &BaselineFrame,
    ia_ids: &BTreeSet<u64>,
    variable: &str,
    b: usize,
    seed: u64,
) -> Result<PermResult, ScreeningError> {
    if b == 0 {
        return Err(ScreeningError::InvalidArgument("B must be at least 1".into()));
    }
    let (labels, codes) = frame.variable(variable)?;
    let rows = frame.rows_of(ia_ids)?;
    if rows.is_empty() {
        return Err(ScreeningError::EmptyCounts);
    }
    let k = labels.len();
    let n = frame.len();
    let props: Vec<f64> = counts(codes, 0..n, k)
        .iter()
        .map(|&c| c as f64 / n as f64)
        .collect();
    let observed_stat = chi_square_gof(&counts(codes, rows.iter().copied(), k), &props)?;
    let size = rows.len();
    let null_stats: Vec<f64> = (0..b as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, Stream::Permutation, i);
            let pick = index::sample(&mut rng, n, size);
            chi_square_gof(&counts(codes, pick.into_iter(), k), &props)
        })
        .collect::<Result<_, _>>()?;
    let exceed = null_stats.iter().filter(|&&s| s >= observed_stat).count();
    Ok(PermResult {
        variable: variable.to_string(),
        observed_stat,
        p_value: (1 + exceed) as f64 / (b + 1) as f64,
        null_stats,
        b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenReport {
    pub alpha: f64,
    pub bonferroni: bool,
    /// Threshold actually applied to each p-value.
    pub threshold: f64,
    pub results: Vec<PermResult>,
    pub selected: Vec<String>,
}

/// Tests each candidate independently and keeps those with `p <= alpha`
/// (or `p <= alpha / m` with the Bonferroni flag).
pub fn screen_stratifiers(
    frame: &BaselineFrame,
    ia_ids: &BTreeSet<u64>,
    candidates: &[String],
    alpha: f64,
    b: usize,
    seed: u64,
    bonferroni: bool,
) -> Result<ScreenReport, ScreeningError> {
    if candidates.is_empty() {
        return Err(ScreeningError::InvalidArgument("no candidate variables".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ScreeningError::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    let threshold = if bonferroni {
        alpha / candidates.len() as f64
    } else {
        alpha
    };
    let results: Vec<PermResult> = candidates
        .iter()
        .enumerate()
        .map(|(i, v)| {
            permutation_shift_test(frame, ia_ids, v, b, child_seed(seed, Stream::Permutation, i as u64))
        })
        .collect::<Result<_, _>>()?;
    let selected = results
        .iter()
        .filter(|r| r.p_value <= threshold)
        .map(|r| r.variable.clone())
        .collect();
    Ok(ScreenReport {
        alpha,
        bonferroni,
        threshold,
        results,
        selected,
    })
}
