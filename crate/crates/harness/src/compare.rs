//! Baseline versus self-modulation comparisons over a set of records.
//!
//! The unpaired view takes, for each (loss, Lipschitz family, arch)
//! group, the best seed-median FID over the optimization hyperparameters
//! separately for each arm. The paired view compares the two arms
//! setting by setting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use selfmod::architectures::Family;
use selfmod::losses::LossKind;
use selfmod::train::{Lipschitz, RunRecord};

use crate::error::{HarnessError, Result};
use crate::grid::{Cell, Conditioning};
use crate::stats::{median, median_with_sem};

/// `100·(baseline − selfmod)/baseline`.
pub fn relative_reduction(baseline_fid: f64, selfmod_fid: f64) -> Result<f64> {
    if baseline_fid.is_nan() || baseline_fid <= 0.0 {
        return Err(HarnessError::Argument(format!(
            "baseline FID must be positive, got {baseline_fid}"
        )));
    }
    Ok(100.0 * (baseline_fid - selfmod_fid) / baseline_fid)
}

fn lipschitz_family(l: &Lipschitz) -> &'static str {
    match l {
        Lipschitz::Spectral => "sn",
        Lipschitz::GradientPenalty { .. } => "gp",
    }
}

/// FID of an ok run, if it was ever evaluated.
fn ok_fid(r: &RunRecord) -> Option<f64> {
    if r.is_ok() {
        r.best_fid
    } else {
        None
    }
}

/// Best hyperparameter choice for one arm of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmBest {
    pub fid: f64,
    pub sem: f64,
    pub hyperparameters: String,
    pub ok_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnpairedRow {
    pub loss: LossKind,
    pub lipschitz: String,
    pub arch: Family,
    pub baseline: Option<ArmBest>,
    pub self_mod: Option<ArmBest>,
    /// False when either arm has no ok run in this group.
    pub comparable: bool,
    pub reduction_percent: Option<f64>,
}

impl UnpairedRow {
    pub fn arm(&self, c: Conditioning) -> Option<&ArmBest> {
        match c {
            Conditioning::Baseline => self.baseline.as_ref(),
            Conditioning::SelfMod => self.self_mod.as_ref(),
        }
    }
}

type GroupKey = (LossKind, &'static str, Family);

/// Minimum over hyperparameter settings of the seed-median FID of ok
/// runs. Ties go to the lexicographically first setting label.
pub fn unpaired_compare(records: &[RunRecord]) -> Result<Vec<UnpairedRow>> {
    // group -> arm -> hyperparameters -> fids of ok runs
    let mut groups: BTreeMap<GroupKey, BTreeMap<Conditioning, BTreeMap<String, Vec<f64>>>> = BTreeMap::new();
    for r in records {
        let Some(cell) = Cell::of(r) else { continue };
        let key = (cell.loss, lipschitz_family(&cell.lipschitz), cell.arch);
        let fids = groups
            .entry(key)
            .or_default()
            .entry(cell.conditioning)
            .or_default()
            .entry(cell.hyperparameters())
            .or_default();
        if let Some(f) = ok_fid(r) {
            fids.push(f);
        }
    }
    let mut rows = Vec::new();
    for ((loss, lip, arch), arms) in groups {
        let best = |c: Conditioning| -> Result<Option<ArmBest>> {
            let mut out: Option<ArmBest> = None;
            for (hyper, fids) in arms.get(&c).into_iter().flatten() {
                if fids.is_empty() {
                    continue;
                }
                let (m, sem) = median_with_sem(fids)?;
                if out.as_ref().is_none_or(|b| m < b.fid) {
                    out = Some(ArmBest {
                        fid: m,
                        sem,
                        hyperparameters: hyper.clone(),
                        ok_runs: fids.len(),
                    });
                }
            }
            Ok(out)
        };
        let baseline = best(Conditioning::Baseline)?;
        let self_mod = best(Conditioning::SelfMod)?;
        let comparable = baseline.is_some() && self_mod.is_some();
        let reduction_percent = match (&baseline, &self_mod) {
            (Some(b), Some(s)) => relative_reduction(b.fid, s.fid).ok(),
            _ => None,
        };
        rows.push(UnpairedRow {
            loss,
            lipschitz: lip.to_string(),
            arch,
            baseline,
            self_mod,
            comparable,
            reduction_percent,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

/// Outcome for self-modulation; equal values are ties, not wins.
pub fn outcome(self_mod: f64, baseline: f64) -> Outcome {
    if self_mod < baseline {
        Outcome::Win
    } else if self_mod == baseline {
        Outcome::Tie
    } else {
        Outcome::Loss
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyCounts {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub settings: usize,
    pub win_rate: Option<f64>,
}

impl PolicyCounts {
    fn from_outcomes(outcomes: impl Iterator<Item = Outcome>) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            match o {
                Outcome::Win => c.wins += 1,
                Outcome::Tie => c.ties += 1,
                Outcome::Loss => c.losses += 1,
            }
            c.settings += 1;
        }
        c.win_rate = (c.settings > 0).then(|| c.wins as f64 / c.settings as f64);
        c
    }

    /// `wins/settings (rate%)`, e.g. `124/144 (86%)`.
    pub fn summary(&self) -> String {
        match self.win_rate {
            Some(r) => format!("{}/{} ({:.0}%)", self.wins, self.settings, 100.0 * r),
            None => "0/0".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub setting: String,
    /// Seed medians with diverged runs counted as +∞.
    pub baseline_sentinel: f64,
    pub self_mod_sentinel: f64,
    /// Seed medians over ok runs only.
    pub baseline_ok: Option<f64>,
    pub self_mod_ok: Option<f64>,
    pub sentinel: Outcome,
    pub ok_median: Option<Outcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub rows: Vec<PairedRow>,
    /// Diverged runs scored +∞: a diverged baseline is a self-mod win.
    pub sentinel: PolicyCounts,
    /// Only ok runs; settings where an arm has none are left out.
    pub ok_median: PolicyCounts,
    pub ok_median_excluded: Vec<String>,
    /// Settings present for only one arm.
    pub unmatched: Vec<String>,
}

/// Setting-by-setting comparison of the two arms.
pub fn paired_compare(records: &[RunRecord]) -> Result<PairedReport> {
    // setting -> arm -> per-run FID (None when diverged or never scored)
    let mut settings: BTreeMap<String, BTreeMap<Conditioning, Vec<Option<f64>>>> = BTreeMap::new();
    for r in records {
        let Some(cell) = Cell::of(r) else { continue };
        settings
            .entry(cell.setting())
            .or_default()
            .entry(cell.conditioning)
            .or_default()
            .push(ok_fid(r));
    }
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    let mut excluded = Vec::new();
    for (setting, arms) in settings {
        let (Some(b), Some(s)) = (arms.get(&Conditioning::Baseline), arms.get(&Conditioning::SelfMod)) else {
            unmatched.push(setting);
            continue;
        };
        let sentinel_median = |v: &[Option<f64>]| {
            let xs: Vec<f64> = v.iter().map(|f| f.unwrap_or(f64::INFINITY)).collect();
            median(&xs)
        };
        let ok_median = |v: &[Option<f64>]| -> Result<Option<f64>> {
            let xs: Vec<f64> = v.iter().flatten().copied().collect();
            if xs.is_empty() {
                Ok(None)
            } else {
                median(&xs).map(Some)
            }
        };
        let (bs, ss) = (sentinel_median(b)?, sentinel_median(s)?);
        let (bo, so) = (ok_median(b)?, ok_median(s)?);
        let ok_outcome = match (so, bo) {
            (Some(s), Some(b)) => Some(outcome(s, b)),
            _ => {
                excluded.push(setting.clone());
                None
            }
        };
        rows.push(PairedRow {
            setting,
            baseline_sentinel: bs,
            self_mod_sentinel: ss,
            baseline_ok: bo,
            self_mod_ok: so,
            sentinel: outcome(ss, bs),
            ok_median: ok_outcome,
        });
    }
    Ok(PairedReport {
        sentinel: PolicyCounts::from_outcomes(rows.iter().map(|r| r.sentinel)),
        ok_median: PolicyCounts::from_outcomes(rows.iter().filter_map(|r| r.ok_median)),
        ok_median_excluded: excluded,
        unmatched,
        rows,
    })
}

fn lower(baseline: Option<f64>, self_mod: Option<f64>) -> Option<Conditioning> {
    match (baseline, self_mod) {
        (Some(b), Some(s)) if s < b => Some(Conditioning::SelfMod),
        (Some(b), Some(s)) if b < s => Some(Conditioning::Baseline),
        _ => None,
    }
}

fn min_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))))
}

/// Arm with the lower best seed-median FID across the unpaired table.
pub fn unpaired_global_best(rows: &[UnpairedRow]) -> Option<Conditioning> {
    let best = |c| min_of(rows.iter().filter_map(|r| r.arm(c)).map(|a| a.fid));
    lower(best(Conditioning::Baseline), best(Conditioning::SelfMod))
}

/// Arm with the lower best ok seed-median FID across paired settings.
pub fn paired_global_best(report: &PairedReport) -> Option<Conditioning> {
    let b = min_of(report.rows.iter().filter_map(|r| r.baseline_ok));
    let s = min_of(report.rows.iter().filter_map(|r| r.self_mod_ok));
    lower(b, s)
}
