//! The configuration grid and its resumable, parallel execution.
//!
//! Every run is stored under `runs/<hash>/record.json`, where the hash is
//! the SHA-256 of the canonical JSON of everything that determines the
//! run. A run whose record already exists is loaded instead of retrained.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use selfmod::architectures::{Family, ModulationKind};
use selfmod::data::DatasetSpec;
use selfmod::losses::LossKind;
use selfmod::train::{run_experiment, GanConfig, Lipschitz, MetricsHook, RunRecord};

use crate::error::{HarnessError, Result};

/// Adam moments plus discriminator steps per generator step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSetting {
    pub beta1: f64,
    pub beta2: f64,
    pub disc_iters: usize,
}

impl fmt::Display for OptimizerSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.beta1, self.beta2, self.disc_iters)
    }
}

impl FromStr for OptimizerSetting {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("optimizer setting `{s}` is not beta1:beta2:disc_iters"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(Self {
            beta1: parts[0].trim().parse().map_err(|_| bad())?,
            beta2: parts[1].trim().parse().map_err(|_| bad())?,
            disc_iters: parts[2].trim().parse().map_err(|_| bad())?,
        })
    }
}

/// The two arms every comparison is about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    Baseline,
    SelfMod,
}

impl Conditioning {
    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::Baseline => "baseline",
            Conditioning::SelfMod => "self-mod",
        }
    }

    pub fn modulation(self) -> ModulationKind {
        match self {
            Conditioning::Baseline => ModulationKind::None,
            Conditioning::SelfMod => ModulationKind::SelfMod,
        }
    }

    /// Arm of a generator configuration. Label-conditional variants are
    /// not part of the unconditional study and map to `None`.
    pub fn of(kind: ModulationKind) -> Option<Self> {
        match kind {
            ModulationKind::None => Some(Conditioning::Baseline),
            ModulationKind::SelfMod => Some(Conditioning::SelfMod),
            _ => None,
        }
    }
}

impl FromStr for Conditioning {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "none" => Ok(Conditioning::Baseline),
            "self-mod" | "self" => Ok(Conditioning::SelfMod),
            _ => Err(HarnessError::Config(format!("unknown conditioning `{s}`"))),
        }
    }
}

/// One point of the grid, without the seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub loss: LossKind,
    pub arch: Family,
    pub lipschitz: Lipschitz,
    pub optimizer: OptimizerSetting,
    pub conditioning: Conditioning,
}

impl Cell {
    /// Recovers the cell from a record's configuration echo.
    pub fn of(record: &RunRecord) -> Option<Self> {
        let c = &record.config;
        Some(Self {
            loss: c.train.loss,
            arch: c.arch.family,
            lipschitz: c.train.lipschitz,
            optimizer: OptimizerSetting {
                beta1: c.train.beta1,
                beta2: c.train.beta2,
                disc_iters: c.train.disc_iters,
            },
            conditioning: Conditioning::of(c.arch.modulation.kind)?,
        })
    }

    /// Full setting without the conditioning arm: the unit of pairing.
    pub fn setting(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.loss.as_str(),
            self.arch.as_str(),
            self.lipschitz.label(),
            self.optimizer
        )
    }

    /// Optimization hyperparameters that the unpaired comparison
    /// minimizes over: the penalty weight and the optimizer setting.
    pub fn hyperparameters(&self) -> String {
        format!("{}/{}", self.lipschitz.label(), self.optimizer)
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.setting(), self.conditioning.as_str())
    }

    pub fn config(&self, template: &GanConfig, seed: u64) -> GanConfig {
        let mut cfg = template.clone();
        cfg.arch.family = self.arch;
        cfg.arch.modulation.kind = self.conditioning.modulation();
        cfg.train.loss = self.loss;
        cfg.train.lipschitz = self.lipschitz;
        cfg.train.beta1 = self.optimizer.beta1;
        cfg.train.beta2 = self.optimizer.beta2;
        cfg.train.disc_iters = self.optimizer.disc_iters;
        cfg.train.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub losses: Vec<LossKind>,
    pub archs: Vec<Family>,
    /// Crossed with `optimizers`: `sn` plus each penalty weight.
    pub lipschitz: Vec<Lipschitz>,
    pub optimizers: Vec<OptimizerSetting>,
    pub conditionings: Vec<Conditioning>,
    pub seeds: Vec<u64>,
    /// Everything not varied by the grid: architecture sizes, budget,
    /// batch size, evaluation settings.
    pub template: GanConfig,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("losses", self.losses.len()),
            ("archs", self.archs.len()),
            ("lipschitz", self.lipschitz.len()),
            ("optimizers", self.optimizers.len()),
            ("conditionings", self.conditionings.len()),
            ("seeds", self.seeds.len()),
        ];
        for (name, n) in axes {
            if n == 0 {
                return Err(HarnessError::Config(format!("grid axis `{name}` is empty")));
            }
        }
        for c in self.cells() {
            c.config(&self.template, self.seeds[0]).train.validate()?;
        }
        Ok(())
    }

    /// Cartesian product in a fixed order: loss, arch, Lipschitz control,
    /// optimizer, conditioning.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &arch in &self.archs {
                for &lipschitz in &self.lipschitz {
                    for &optimizer in &self.optimizers {
                        for &conditioning in &self.conditionings {
                            out.push(Cell {
                                loss,
                                arch,
                                lipschitz,
                                optimizer,
                                conditioning,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn run_count(&self) -> usize {
        self.cells().len() * self.seeds.len()
    }

    /// Every (cell, seed) pair with its configuration.
    pub fn runs(&self) -> Vec<(Cell, u64, GanConfig)> {
        let seeds = &self.seeds;
        self.cells()
            .into_iter()
            .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
            .map(|(c, s)| (c, s, c.config(&self.template, s)))
            .collect()
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    config: &'a GanConfig,
    data: &'a DatasetSpec,
    evaluation: &'a str,
}

/// Hex SHA-256 of the canonical JSON of a run's inputs. `evaluation`
/// identifies the metric setup so that changing it invalidates records.
pub fn run_hash(config: &GanConfig, data: &DatasetSpec, evaluation: &str) -> String {
    let json = serde_json::to_vec(&HashInput {
        config,
        data,
        evaluation,
    })
    .expect("configuration serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn record_path(out_dir: &Path, hash: &str) -> PathBuf {
    out_dir.join("runs").join(hash).join("record.json")
}

/// A run that produced no record, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRun {
    pub label: String,
    pub seed: u64,
    pub hash: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub missing: Vec<MissingRun>,
    /// Runs actually trained in this invocation (the rest were loaded).
    pub trained: usize,
}

/// One unit of work: a labelled configuration.
#[derive(Clone, Debug)]
pub struct Job {
    pub label: String,
    pub config: GanConfig,
}

fn load_record(path: &Path) -> Result<Option<RunRecord>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn store_record(path: &Path, record: &RunRecord) -> Result<()> {
    let dir = path.parent().expect("record path has a parent");
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join("record.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

enum Done {
    Loaded(RunRecord),
    Trained(RunRecord),
    Missing(MissingRun),
}

fn execute(job: &Job, data: &DatasetSpec, hook: &dyn MetricsHook, evaluation: &str, out_dir: &Path) -> Done {
    let hash = run_hash(&job.config, data, evaluation);
    let missing = |reason: String| {
        Done::Missing(MissingRun {
            label: job.label.clone(),
            seed: job.config.train.seed,
            hash: hash.clone(),
            reason,
        })
    };
    let path = record_path(out_dir, &hash);
    match load_record(&path) {
        Ok(Some(r)) => return Done::Loaded(r),
        Ok(None) => {}
        Err(e) => return missing(format!("unreadable record: {e}")),
    }
    let record = match run_experiment(&job.config, data, hook) {
        Ok(r) => r,
        Err(e) => return missing(e.to_string()),
    };
    match store_record(&path, &record) {
        Ok(()) => Done::Trained(record),
        Err(e) => missing(format!("could not store record: {e}")),
    }
}

/// Executes `jobs` on up to `threads` workers. Results keep job order, so
/// the outcome does not depend on scheduling.
pub fn run_jobs(
    jobs: &[Job],
    data: &DatasetSpec,
    hook: &dyn MetricsHook,
    evaluation: &str,
    out_dir: &Path,
    threads: usize,
) -> Result<RunOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let done: Vec<Done> = pool.install(|| {
        jobs.par_iter()
            .map(|j| execute(j, data, hook, evaluation, out_dir))
            .collect()
    });
    let mut out = RunOutcome {
        records: Vec::new(),
        missing: Vec::new(),
        trained: 0,
    };
    for d in done {
        match d {
            Done::Loaded(r) => out.records.push(r),
            Done::Trained(r) => {
                out.trained += 1;
                out.records.push(r);
            }
            Done::Missing(m) => out.missing.push(m),
        }
    }
    Ok(out)
}

/// Runs every cell × seed of the grid.
pub fn run_grid(
    grid: &GridSpec,
    data: &DatasetSpec,
    hook: &dyn MetricsHook,
    evaluation: &str,
    out_dir: &Path,
    threads: usize,
) -> Result<RunOutcome> {
    grid.validate()?;
    let jobs: Vec<Job> = grid
        .runs()
        .into_iter()
        .map(|(cell, _, config)| Job {
            label: cell.label(),
            config,
        })
        .collect();
    run_jobs(&jobs, data, hook, evaluation, out_dir, threads)
}

/// Loads whatever records of the grid exist on disk without training.
pub fn collect_grid(grid: &GridSpec, data: &DatasetSpec, evaluation: &str, out_dir: &Path) -> Result<RunOutcome> {
    let mut out = RunOutcome {
        records: Vec::new(),
        missing: Vec::new(),
        trained: 0,
    };
    for (cell, seed, config) in grid.runs() {
        let hash = run_hash(&config, data, evaluation);
        let reason = match load_record(&record_path(out_dir, &hash)) {
            Ok(Some(r)) => {
                out.records.push(r);
                continue;
            }
            Ok(None) => "not run".to_string(),
            Err(e) => format!("unreadable record: {e}"),
        };
        out.missing.push(MissingRun {
            label: cell.label(),
            seed,
            hash,
            reason,
        });
    }
    Ok(out)
}
