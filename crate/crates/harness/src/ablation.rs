//! Which normalization layers benefit from modulation.
//!
//! The base configuration is run with every layer modulated and with each
//! single layer modulated alone. The all-off mask is the baseline and is
//! covered by the main grid, so it is not repeated here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use selfmod::architectures::ModulationKind;
use selfmod::data::DatasetSpec;
use selfmod::train::{GanConfig, MetricsHook, RunRecord};

use crate::error::{HarnessError, Result};
use crate::grid::{run_jobs, Job, MissingRun};
use crate::stats::{median_with_sem, quantile};

/// `(label, mask)` for the all-layers run and each single-layer run.
pub fn ablation_masks(sites: usize) -> Vec<(String, Option<Vec<bool>>)> {
    let mut out = vec![("all".to_string(), None)];
    for l in 0..sites {
        let mut m = vec![false; sites];
        m[l] = true;
        out.push((format!("layer{}", l + 1), Some(m)));
    }
    out
}

/// One configuration per mask and seed, labelled by mask.
pub fn ablation_jobs(base: &GanConfig, seeds: &[u64]) -> Result<Vec<Job>> {
    if base.arch.modulation.kind == ModulationKind::None {
        return Err(HarnessError::Config("layer ablation needs a modulated generator".into()));
    }
    let mut jobs = Vec::new();
    for (label, mask) in ablation_masks(base.arch.norm_sites()) {
        for &seed in seeds {
            let mut config = base.clone();
            config.arch.modulation.layer_mask = mask.clone();
            config.train.seed = seed;
            jobs.push(Job {
                label: label.clone(),
                config,
            });
        }
    }
    Ok(jobs)
}

/// Distribution of best FIDs over seeds for one mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub ok_runs: usize,
    pub diverged: usize,
    pub median: Option<f64>,
    pub sem: Option<f64>,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub missing: Vec<MissingRun>,
}

fn mask_label(r: &RunRecord) -> String {
    match &r.config.arch.modulation.layer_mask {
        None => "all".into(),
        Some(m) => match m.iter().filter(|b| **b).count() {
            1 => format!("layer{}", m.iter().position(|b| *b).unwrap_or(0) + 1),
            _ => m.iter().map(|b| if *b { '1' } else { '0' }).collect(),
        },
    }
}

/// Summarizes records by mask, in the order of `masks`.
pub fn summarize(masks: &[String], records: &[RunRecord], missing: Vec<MissingRun>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for mask in masks {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| &mask_label(r) == mask).collect();
        let fids: Vec<f64> = mine.iter().filter(|r| r.is_ok()).filter_map(|r| r.best_fid).collect();
        let diverged = mine.iter().filter(|r| !r.is_ok()).count();
        let mut row = AblationRow {
            mask: mask.clone(),
            ok_runs: fids.len(),
            diverged,
            median: None,
            sem: None,
            min: None,
            q1: None,
            q3: None,
            max: None,
        };
        if !fids.is_empty() {
            let (m, s) = median_with_sem(&fids)?;
            row.median = Some(m);
            row.sem = Some(s);
            row.min = Some(quantile(&fids, 0.0)?);
            row.q1 = Some(quantile(&fids, 0.25)?);
            row.q3 = Some(quantile(&fids, 0.75)?);
            row.max = Some(quantile(&fids, 1.0)?);
        }
        rows.push(row);
    }
    Ok(AblationReport { rows, missing })
}

pub fn layer_ablation(
    base: &GanConfig,
    seeds: &[u64],
    data: &DatasetSpec,
    hook: &dyn MetricsHook,
    evaluation: &str,
    out_dir: &Path,
    threads: usize,
) -> Result<AblationReport> {
    let jobs = ablation_jobs(base, seeds)?;
    let outcome = run_jobs(&jobs, data, hook, evaluation, out_dir, threads)?;
    let masks: Vec<String> = ablation_masks(base.arch.norm_sites()).into_iter().map(|(l, _)| l).collect();
    summarize(&masks, &outcome.records, outcome.missing)
}

/// Writes `ablation.json` and `ablation.csv` into `dir`.
pub fn write_ablation(report: &AblationReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_vec_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
