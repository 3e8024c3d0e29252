//! Synthetic run records, for checking aggregation and report layouts
//! against known tables without training anything.

use selfmod::architectures::{ArchSpec, ModulationSpec};
use selfmod::train::{EvalPoint, GanConfig, PrdScores, RunRecord, RunStatus, TrainConfig};

use crate::grid::Cell;

pub fn template() -> GanConfig {
    GanConfig {
        arch: ArchSpec::mlp(16, 64, 2, 2).with_modulation(ModulationSpec::default()),
        train: TrainConfig::default(),
        projection: false,
    }
}

/// A record for `cell` and `seed` whose best FID is `fid`; `None` gives a
/// diverged run with no evaluations.
pub fn record(cell: &Cell, seed: u64, fid: Option<f64>) -> RunRecord {
    record_with(cell, seed, fid, None, None)
}

pub fn record_with(
    cell: &Cell,
    seed: u64,
    fid: Option<f64>,
    log_cond: Option<f64>,
    prd: Option<PrdScores>,
) -> RunRecord {
    let config = cell.config(&template(), seed);
    let trajectory: Vec<EvalPoint> = fid
        .map(|f| EvalPoint {
            step: config.train.total_steps,
            fid: f,
            is: None,
            cond_number: log_cond.unwrap_or(0.0),
            cond_degenerate: false,
        })
        .into_iter()
        .collect();
    RunRecord {
        status: if fid.is_some() { RunStatus::Ok } else { RunStatus::Diverged },
        failure: fid.is_none().then(|| "synthetic divergence".to_string()),
        features: "synthetic".into(),
        init: None,
        best_fid: fid,
        best_is: None,
        best_step: trajectory.first().map(|p| p.step),
        best_cond_number: fid.and(log_cond),
        final_cond_number: fid.and(log_cond),
        prd: fid.and(prd),
        disc_updates: 0,
        gen_updates: 0,
        trajectory,
        config,
    }
}
