//! Aggregate tables, flat CSV and scatter plots for a set of records.
//!
//! Everything here is a pure function of the records: records are sorted
//! into a canonical order first, so re-aggregating the same set gives
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use selfmod::train::{RunRecord, RunStatus};

use crate::compare::{paired_compare, paired_global_best, unpaired_compare, unpaired_global_best, PairedReport, UnpairedRow};
use crate::error::{HarnessError, Result};
use crate::grid::{Conditioning, MissingRun};
use crate::stats::{median_with_sem, pearson};

/// Configuration label of any record, including label-conditional ones.
pub fn record_label(r: &RunRecord) -> String {
    let c = &r.config;
    format!(
        "{}/{}/{}/{}:{}:{}/{}",
        c.train.loss.as_str(),
        c.arch.family.as_str(),
        c.train.lipschitz.label(),
        c.train.beta1,
        c.train.beta2,
        c.train.disc_iters,
        c.arch.modulation.kind.as_str()
    )
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatRow {
    pub label: String,
    pub loss: String,
    pub arch: String,
    pub lipschitz: String,
    pub beta1: f64,
    pub beta2: f64,
    pub disc_iters: usize,
    pub modulation: String,
    pub seed: u64,
    pub status: String,
    pub init_fid: Option<f64>,
    pub best_fid: Option<f64>,
    pub best_is: Option<f64>,
    pub best_step: Option<usize>,
    pub best_log_cond: Option<f64>,
    pub final_log_cond: Option<f64>,
    pub f8: Option<f64>,
    pub f_inv8: Option<f64>,
    pub disc_updates: usize,
    pub gen_updates: usize,
}

impl FlatRow {
    pub fn of(r: &RunRecord) -> Self {
        let c = &r.config;
        Self {
            label: record_label(r),
            loss: c.train.loss.as_str().into(),
            arch: c.arch.family.as_str().into(),
            lipschitz: c.train.lipschitz.label(),
            beta1: c.train.beta1,
            beta2: c.train.beta2,
            disc_iters: c.train.disc_iters,
            modulation: c.arch.modulation.kind.as_str().into(),
            seed: c.train.seed,
            status: match r.status {
                RunStatus::Ok => "ok".into(),
                RunStatus::Diverged => "diverged".into(),
            },
            init_fid: r.init.as_ref().map(|p| p.fid),
            best_fid: r.best_fid,
            best_is: r.best_is,
            best_step: r.best_step,
            best_log_cond: r.best_cond_number,
            final_log_cond: r.final_cond_number,
            f8: r.prd.map(|p| p.f8),
            f_inv8: r.prd.map(|p| p.f_inv8),
            disc_updates: r.disc_updates,
            gen_updates: r.gen_updates,
        }
    }
}

/// Records in canonical order: by configuration label, then seed.
pub fn canonical_order(records: &[RunRecord]) -> Vec<&RunRecord> {
    let mut v: Vec<&RunRecord> = records.iter().collect();
    v.sort_by_cached_key(|r| (record_label(r), r.config.train.seed));
    v
}

pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in canonical_order(records) {
        w.serialize(FlatRow::of(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<FlatRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(HarnessError::from)).collect()
}

/// Seed aggregate of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub ok_runs: usize,
    pub diverged: usize,
    pub median_fid: Option<f64>,
    pub sem: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Modulation kind, or `all`.
    pub group: String,
    pub points: usize,
    /// Pearson r between log condition number and FID at the best
    /// snapshot; `null` when undefined.
    pub pearson_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalBest {
    pub unpaired: Option<Conditioning>,
    pub paired: Option<Conditioning>,
    pub agree: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub records: usize,
    pub ok: usize,
    pub diverged: usize,
    pub cells: Vec<CellSummary>,
    pub missing: Vec<MissingRun>,
    pub unpaired: Vec<UnpairedRow>,
    /// Sentinel medians of +∞ serialize as `null`.
    pub paired: PairedReport,
    pub global_best: GlobalBest,
    pub correlations: Vec<Correlation>,
}

fn cond_fid_points(records: &[&RunRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.is_ok())
        .filter_map(|r| Some((r.best_cond_number?, r.best_fid?)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect()
}

fn by_modulation<'a>(records: &[&'a RunRecord]) -> BTreeMap<String, Vec<&'a RunRecord>> {
    let mut m: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.config.arch.modulation.kind.as_str().to_string()).or_default().push(r);
    }
    m
}

pub fn aggregate(records: &[RunRecord], missing: Vec<MissingRun>) -> Result<AggregateReport> {
    let ordered = canonical_order(records);
    let mut cells: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &ordered {
        cells.entry(record_label(r)).or_default().push(r);
    }
    let mut summaries = Vec::new();
    for (label, rs) in cells {
        let fids: Vec<f64> = rs.iter().filter(|r| r.is_ok()).filter_map(|r| r.best_fid).collect();
        let (median_fid, sem) = if fids.is_empty() {
            (None, None)
        } else {
            let (m, s) = median_with_sem(&fids)?;
            (Some(m), Some(s))
        };
        summaries.push(CellSummary {
            label,
            seeds: rs.iter().map(|r| r.config.train.seed).collect(),
            ok_runs: rs.iter().filter(|r| r.is_ok()).count(),
            diverged: rs.iter().filter(|r| !r.is_ok()).count(),
            median_fid,
            sem,
        });
    }
    let owned: Vec<RunRecord> = ordered.iter().map(|r| (*r).clone()).collect();
    let unpaired = unpaired_compare(&owned)?;
    let paired = paired_compare(&owned)?;
    let u = unpaired_global_best(&unpaired);
    let p = paired_global_best(&paired);
    let mut correlations = Vec::new();
    let mut groups = by_modulation(&ordered);
    groups.insert("all".into(), ordered.clone());
    for (group, rs) in groups {
        let pts = cond_fid_points(&rs);
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
        correlations.push(Correlation {
            group,
            points: pts.len(),
            pearson_r: pearson(&xs, &ys),
        });
    }
    let mut missing = missing;
    missing.sort_by(|a, b| (&a.label, a.seed).cmp(&(&b.label, b.seed)));
    Ok(AggregateReport {
        records: records.len(),
        ok: records.iter().filter(|r| r.is_ok()).count(),
        diverged: records.iter().filter(|r| !r.is_ok()).count(),
        cells: summaries,
        missing,
        unpaired,
        paired,
        global_best: GlobalBest {
            unpaired: u,
            paired: p,
            agree: u == p,
        },
        correlations,
    })
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn nice_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { 0.1 * lo.abs() } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Minimal scatter plot with axes, five ticks per axis and a legend.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (520.0, 400.0);
    let (left, right, top, bottom) = (70.0, 130.0, 40.0, 55.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = nice_range(all().map(|p| p.0));
    let (y0, y1) = nice_range(all().map(|p| p.1));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..5 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{xv:.3}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.2}" x2="{left}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" fill-opacity="0.75"/>"#,
                sx(*x),
                sy(*y)
            );
        }
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<circle cx="{lx}" cy="{ly}" r="4" fill="{color}"/><text x="{}" y="{}">{} (n={})</text>"#,
            lx + 10.0,
            ly + 4.0,
            escape(name),
            pts.len()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv`, `report.json`, `cond_vs_fid.svg` and
/// `prd_scatter.svg` into `out_dir`, creating it if needed.
pub fn emit_reports(records: &[RunRecord], missing: Vec<MissingRun>, out_dir: &Path) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(HarnessError::Argument("no records to report".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let report = aggregate(records, missing)?;
    write_csv(records, &out_dir.join("report.csv"))?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;

    let ordered = canonical_order(records);
    let groups = by_modulation(&ordered);
    let cond: Vec<(String, Vec<(f64, f64)>)> =
        groups.iter().map(|(k, rs)| (k.clone(), cond_fid_points(rs))).collect();
    std::fs::write(
        out_dir.join("cond_vs_fid.svg"),
        scatter_svg("Conditioning vs FID", "mean log condition number", "FID", &cond),
    )?;
    let prd: Vec<(String, Vec<(f64, f64)>)> = groups
        .iter()
        .map(|(k, rs)| {
            let pts = rs.iter().filter_map(|r| r.prd).map(|p| (p.f8, p.f_inv8)).collect();
            (k.clone(), pts)
        })
        .collect();
    std::fs::write(
        out_dir.join("prd_scatter.svg"),
        scatter_svg("Precision and recall", "F8 (recall)", "F1/8 (precision)", &prd),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::record_with;
    use crate::grid::{Cell, OptimizerSetting};
    use selfmod::architectures::Family;
    use selfmod::losses::LossKind;
    use selfmod::train::{Lipschitz, PrdScores};

    fn cell(c: Conditioning, opt: &str) -> Cell {
        Cell {
            loss: LossKind::Ns,
            arch: Family::Mlp,
            lipschitz: Lipschitz::Spectral,
            optimizer: opt.parse::<OptimizerSetting>().unwrap(),
            conditioning: c,
        }
    }

    fn records() -> Vec<RunRecord> {
        let e = std::f64::consts::E;
        let prd = Some(PrdScores { f8: 0.9, f_inv8: 0.8 });
        vec![
            record_with(&cell(Conditioning::SelfMod, "0:0.9:1"), 0, Some(10.0), Some(e.ln()), prd),
            record_with(&cell(Conditioning::SelfMod, "0:0.9:2"), 0, Some(20.0), Some((e * e).ln()), prd),
            record_with(&cell(Conditioning::Baseline, "0:0.9:1"), 1, Some(1.0 / 3.0), Some(0.1), None),
            record_with(&cell(Conditioning::Baseline, "0:0.9:2"), 0, None, None, None),
        ]
    }

    #[test]
    fn collinear_points_give_unit_correlation() {
        let rep = aggregate(&records(), vec![]).unwrap();
        let selfmod = rep.correlations.iter().find(|c| c.group == "self").unwrap();
        assert!((selfmod.pearson_r.unwrap() - 1.0).abs() < 1e-12);
        let base = rep.correlations.iter().find(|c| c.group == "none").unwrap();
        assert_eq!((base.points, base.pearson_r), (1, None));
    }

    #[test]
    fn files_are_written_and_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records();
        let rep = emit_reports(&recs, vec![], dir.path()).unwrap();
        assert_eq!(rep.records, 4);
        for f in ["report.csv", "report.json", "cond_vs_fid.svg", "prd_scatter.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rows = read_csv(&dir.path().join("report.csv")).unwrap();
        let want: Vec<FlatRow> = canonical_order(&recs).into_iter().map(FlatRow::of).collect();
        assert_eq!(rows, want);
    }

    #[test]
    fn reaggregation_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut recs = records();
        emit_reports(&recs, vec![], a.path()).unwrap();
        recs.reverse();
        emit_reports(&recs, vec![], b.path()).unwrap();
        for f in ["report.csv", "report.json", "cond_vs_fid.svg", "prd_scatter.svg"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn single_record_still_plots() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records()[..1].to_vec();
        let rep = emit_reports(&recs, vec![], dir.path()).unwrap();
        assert!(rep.correlations.iter().all(|c| c.pearson_r.is_none()));
        let svg = std::fs::read_to_string(dir.path().join("cond_vs_fid.svg")).unwrap();
        assert_eq!(svg.matches("r=\"3.5\"").count(), 1);
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_reports(&[], vec![], dir.path()).is_err());
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(
            emit_reports(&records(), vec![], &file.join("sub")),
            Err(HarnessError::Io(_))
        ));
    }
}
