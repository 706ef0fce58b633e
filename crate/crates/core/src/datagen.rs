//! Cohort generation and interim / baseline subset selection.
//!
//! Subsets are drawn from the finite cohort without replacement. When the
//! interim set over-samples a subgroup, the remaining cohort under-represents
//! it, so a baseline set that tops up the interim set with non-interim
//! patients sits between the interim composition and the truth.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    largest_remainder, Arm, DesignError, Endpoint, PatientRecord, Randomization, ShiftSpec,
    ValidatedDesign,
};
use crate::rng::{child_rng, child_seed, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatagenError {
    #[error("interim quota of {requested} for subgroup {subgroup} exceeds cohort supply {available}")]
    QuotaInfeasible {
        subgroup: usize,
        requested: usize,
        available: usize,
    },
    #[error("baseline fraction {fraction} cannot contain the {ia_size} interim patients")]
    FractionTooSmall { fraction: f64, ia_size: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cohort {
    pub design: ValidatedDesign,
    pub records: Vec<PatientRecord>,
    pub seed: u64,
    pub site_effects: Vec<f64>,
}

impl Cohort {
    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.id)
    }

    /// Records whose id is in `ids`, in cohort order.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Vec<PatientRecord> {
        self.records
            .iter()
            .filter(|r| ids.contains(&r.id))
            .copied()
            .collect()
    }

    /// Copies of all records with `in_ia` / `baseline_available` set. Without
    /// a baseline set only interim records are marked available.
    pub fn annotated(&self, ia: &IASelection, baseline: Option<&BaselineSet>) -> Vec<PatientRecord> {
        self.records
            .iter()
            .map(|r| {
                let in_ia = ia.ia_ids.contains(&r.id);
                let available = in_ia
                    || baseline.is_some_and(|b| b.available_ids.contains(&r.id));
                PatientRecord {
                    in_ia,
                    baseline_available: available,
                    ..*r
                }
            })
            .collect()
    }

    fn subgroup_cells(&self) -> Vec<[Vec<u64>; 2]> {
        let mut cells: Vec<[Vec<u64>; 2]> = vec![[Vec::new(), Vec::new()]; self.design.n_subgroups()];
        for r in &self.records {
            let slot = match r.arm {
                Arm::Treatment => 0,
                Arm::Control => 1,
            };
            cells[r.subgroup_index][slot].push(r.id);
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IASelection {
    pub ia_ids: BTreeSet<u64>,
    pub target_proportions: ShiftSpec,
    /// Realised per-subgroup interim counts.
    pub subgroup_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSet {
    pub available_ids: BTreeSet<u64>,
    pub fraction: f64,
}

/// Where non-interim baseline records come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineRemainder {
    /// Uniform without replacement from the non-interim cohort members.
    #[default]
    FinitePopulation,
    /// Non-interim members drawn with the design's subgroup proportions.
    TrueDistribution,
}

pub fn generate_cohort(design: &ValidatedDesign, seed: u64) -> Cohort {
    let d = design.design();
    let n = design.total_n();

    let site_effects: Vec<f64> = if d.sites.effect_sd > 0.0 {
        let normal = Normal::new(0.0, d.sites.effect_sd).expect("validated sd");
        let mut rng = child_rng(seed, Stream::SiteEffects, 0);
        (0..d.sites.count).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; d.sites.count]
    };

    let mut subgroup_of = Vec::with_capacity(n);
    for (k, &count) in design.subgroup_counts().iter().enumerate() {
        subgroup_of.extend(std::iter::repeat_n(k, count));
    }

    let mut arm_rng = child_rng(seed, Stream::Arms, 0);
    let arms: Vec<Arm> = match d.randomization {
        Randomization::StratifiedBlocks => {
            let mut arms = Vec::with_capacity(n);
            for cell in design.cell_counts() {
                let mut block: Vec<Arm> = std::iter::repeat_n(Arm::Treatment, cell[0])
                    .chain(std::iter::repeat_n(Arm::Control, cell[1]))
                    .collect();
                block.shuffle(&mut arm_rng);
                arms.extend(block);
            }
            arms
        }
        Randomization::Complete => {
            let mut arms: Vec<Arm> =
                std::iter::repeat_n(Arm::Treatment, design.arm_count(Arm::Treatment))
                    .chain(std::iter::repeat_n(Arm::Control, design.arm_count(Arm::Control)))
                    .collect();
            arms.shuffle(&mut arm_rng);
            arms
        }
    };

    let mut site_rng = child_rng(seed, Stream::Sites, 0);
    let mut outcome_rng = child_rng(seed, Stream::Outcomes, 0);
    let records = (0..n)
        .map(|i| {
            let k = subgroup_of[i];
            let arm = arms[i];
            let site = site_rng.random_range(0..d.sites.count);
            let sg = &d.subgroups[k];
            let outcome = match d.endpoint {
                Endpoint::Binary => {
                    let p = match arm {
                        Arm::Treatment => sg.treatment_effect,
                        Arm::Control => sg.control_param,
                    };
                    if outcome_rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                Endpoint::Continuous { residual_sd } => {
                    let treated = if arm == Arm::Treatment {
                        sg.treatment_effect
                    } else {
                        0.0
                    };
                    let noise = if residual_sd > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut outcome_rng);
                        residual_sd * z
                    } else {
                        0.0
                    };
                    sg.control_param + treated + site_effects[site] + noise
                }
            };
            PatientRecord {
                id: i as u64,
                subgroup_index: k,
                site_index: site,
                arm,
                outcome,
                in_ia: false,
                baseline_available: false,
            }
        })
        .collect();

    Cohort {
        design: design.clone(),
        records,
        seed,
        site_effects,
    }
}

pub fn select_ia_subset(cohort: &Cohort, shift: &ShiftSpec) -> Result<IASelection, DatagenError> {
    shift.validate_for(cohort.design.design())?;
    let quota = largest_remainder(&shift.ia_subgroup_proportions, cohort.design.ia_size());
    let cells = cohort.subgroup_cells();
    let mut rng = child_rng(cohort.seed, Stream::Interim, 0);
    let mut ia_ids = BTreeSet::new();
    for (k, (&q, cell)) in quota.iter().zip(&cells).enumerate() {
        let supply = cell[0].len() + cell[1].len();
        if q > supply {
            return Err(DatagenError::QuotaInfeasible {
                subgroup: k,
                requested: q,
                available: supply,
            });
        }
        if q == 0 {
            continue;
        }
        let shares = [
            cell[0].len() as f64 / supply as f64,
            cell[1].len() as f64 / supply as f64,
        ];
        let split = largest_remainder(&shares, q);
        for (ids, &take) in cell.iter().zip(&split) {
            ia_ids.extend(ids.choose_multiple(&mut rng, take).copied());
        }
    }
    Ok(IASelection {
        ia_ids,
        target_proportions: shift.clone(),
        subgroup_counts: quota,
    })
}

pub fn select_baseline_available(
    cohort: &Cohort,
    ia: &IASelection,
    fraction: f64,
    seed: u64,
) -> Result<BaselineSet, DatagenError> {
    select_baseline_available_with(cohort, ia, fraction, seed, BaselineRemainder::FinitePopulation)
}

pub fn select_baseline_available_with(
    cohort: &Cohort,
    ia: &IASelection,
    fraction: f64,
    seed: u64,
    remainder: BaselineRemainder,
) -> Result<BaselineSet, DatagenError> {
    let n = cohort.design.total_n();
    let target = (fraction * n as f64).round() as usize;
    if !(fraction > 0.0 && fraction <= 1.0) || target < ia.ia_ids.len() {
        return Err(DatagenError::FractionTooSmall {
            fraction,
            ia_size: ia.ia_ids.len(),
        });
    }
    let extra = target - ia.ia_ids.len();
    let mut rng = child_rng(seed, Stream::Baseline, 0);
    let mut available = ia.ia_ids.clone();
    match remainder {
        BaselineRemainder::FinitePopulation => {
            let rest: Vec<u64> = cohort
                .ids()
                .filter(|id| !ia.ia_ids.contains(id))
                .collect();
            available.extend(rest.choose_multiple(&mut rng, extra).copied());
        }
        BaselineRemainder::TrueDistribution => {
            let k = cohort.design.n_subgroups();
            let mut rest: Vec<Vec<u64>> = vec![Vec::new(); k];
            for r in &cohort.records {
                if !ia.ia_ids.contains(&r.id) {
                    rest[r.subgroup_index].push(r.id);
                }
            }
            let mut want = largest_remainder(&cohort.design.design().proportions(), extra);
            // Move any quota a subgroup cannot supply to the others, in index order.
            let mut overflow = 0;
            for (w, pool) in want.iter_mut().zip(&rest) {
                if *w > pool.len() {
                    overflow += *w - pool.len();
                    *w = pool.len();
                }
            }
            for (w, pool) in want.iter_mut().zip(&rest) {
                let room = pool.len() - *w;
                let add = room.min(overflow);
                *w += add;
                overflow -= add;
            }
            for (pool, &take) in rest.iter().zip(&want) {
                available.extend(pool.choose_multiple(&mut rng, take).copied());
            }
        }
    }
    Ok(BaselineSet {
        available_ids: available,
        fraction,
    })
}

/// Seed for the baseline draw that belongs to a cohort.
pub fn baseline_seed(cohort: &Cohort) -> u64 {
    child_seed(cohort.seed, Stream::Baseline, 0)
}

/// Writes records as CSV: `id,subgroup,site,arm,outcome,in_ia,baseline_available`.
pub fn write_cohort_csv<W: Write>(records: &[PatientRecord], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record([
        "id",
        "subgroup",
        "site",
        "arm",
        "outcome",
        "in_ia",
        "baseline_available",
    ])?;
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.subgroup_index.to_string(),
            r.site_index.to_string(),
            r.arm.as_str().to_string(),
            crate::harness::output::fmt_f64(r.outcome),
            u8::from(r.in_ia).to_string(),
            u8::from(r.baseline_available).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
