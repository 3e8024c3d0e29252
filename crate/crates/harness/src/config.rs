//! Flat `key=value` configuration.
//!
//! A config file holds one `key = value` pair per line; blank lines and
//! lines starting with `#` are ignored. Command-line `--key=value` flags
//! are applied on top. Unknown keys are rejected so typos surface early.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use selfmod::architectures::{ArchSpec, Family, ModulationKind, ModulationSpec};
use selfmod::data::{Dataset, DatasetSpec};
use selfmod::losses::LossKind;
use selfmod::metrics::{make_feature_extractor, ExtractorKind, PrdConfig};
use selfmod::modulation::MODULATOR_HIDDEN;
use selfmod::train::{Evaluator, GanConfig, Lipschitz, TrainConfig};

use crate::error::{HarnessError, Result};
use crate::grid::{Conditioning, GridSpec, OptimizerSetting};

/// Every recognised key with its default (empty means "derived").
pub const KEYS: &[(&str, &str)] = &[
    // data
    ("dataset", "ring"),
    ("ring_modes", "8"),
    ("ring_radius", "1.0"),
    ("ring_std", "0.05"),
    ("image_size", "16"),
    ("shape_classes", "6"),
    ("data_path", ""),
    ("features", ""),
    // architecture
    ("arch", ""),
    ("latent_dim", "16"),
    ("base_channels", "64"),
    ("num_blocks", "2"),
    ("modulation", "self"),
    ("layer_mask", ""),
    ("modulator_hidden", ""),
    ("num_classes", ""),
    ("projection", "false"),
    // training
    ("loss", "hinge"),
    ("lipschitz", "sn"),
    ("gp_lambda", "10"),
    ("beta1", "0"),
    ("beta2", "0.9"),
    ("disc_iters", "1"),
    ("lr", "0.0002"),
    ("batch_size", "64"),
    ("total_steps", "5000"),
    ("eval_every", "500"),
    ("seed", "0"),
    // evaluation
    ("eval_samples", "1000"),
    ("cond_batch", "16"),
    ("eval_seed", "0"),
    ("prd_clusters", "20"),
    ("prd_angles", "1001"),
    ("prd_runs", "10"),
    // grid
    ("losses", "ns,hinge"),
    ("archs", "dcgan-like,resnet-like"),
    ("lipschitz_set", "sn,gp1,gp10"),
    ("optimizers", "0:0.9:1,0:0.9:2,0.5:0.999:1"),
    ("conditionings", "baseline,self-mod"),
    ("seeds", "0,1,2,3,4"),
    // execution
    ("out_dir", "out"),
    ("threads", "1"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(HarnessError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `--key=value` flags.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, flags: &[S]) -> Result<()> {
        for f in flags {
            let f = f.as_ref();
            let body = f
                .strip_prefix("--")
                .ok_or_else(|| HarnessError::Config(format!("expected --key=value, got `{f}`")))?;
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected --key=value, got `{f}`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        debug_assert!(known(key), "{key}");
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| *d))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>()
            .map_err(|e| HarnessError::Config(format!("{key} = `{raw}`: {e}")))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|e| HarnessError::Config(format!("{key}: `{s}`: {e}"))))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out_dir"))
    }

    pub fn threads(&self) -> Result<usize> {
        Ok(self.get::<usize>("threads")?.max(1))
    }

    pub fn dataset(&self) -> Result<DatasetSpec> {
        match self.raw("dataset") {
            "ring" => Ok(DatasetSpec::Ring {
                modes: self.get("ring_modes")?,
                radius: self.get("ring_radius")?,
                std: self.get("ring_std")?,
            }),
            "shapes" => Ok(DatasetSpec::Shapes {
                size: self.get("image_size")?,
                num_classes: self.get("shape_classes")?,
            }),
            "file" => {
                let p = self.raw("data_path");
                if p.is_empty() {
                    return Err(HarnessError::Config("dataset=file needs data_path".into()));
                }
                Ok(DatasetSpec::File { path: PathBuf::from(p) })
            }
            other => Err(HarnessError::Config(format!("unknown dataset `{other}`"))),
        }
    }

    /// Family for single runs: explicit `arch`, else `mlp` for vector data
    /// and `dcgan-like` for images.
    fn family(&self, sample_shape: &[usize]) -> Result<Family> {
        match self.optional::<Family>("arch")? {
            Some(f) => Ok(f),
            None if sample_shape.len() == 1 => Ok(Family::Mlp),
            None => Ok(Family::DcganLike),
        }
    }

    fn modulation(&self, kind: ModulationKind, num_classes: usize) -> Result<ModulationSpec> {
        let layer_mask = match self.raw("layer_mask") {
            "" => None,
            m => Some(
                m.split(',')
                    .map(|b| match b.trim() {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        o => Err(HarnessError::Config(format!("layer_mask entry `{o}`"))),
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(ModulationSpec {
            kind,
            layer_mask,
            hidden: self.optional("modulator_hidden")?.unwrap_or(MODULATOR_HIDDEN),
            num_classes: self.optional("num_classes")?.unwrap_or(num_classes),
        })
    }

    pub fn arch(&self, family: Family, kind: ModulationKind, data: &Dataset) -> Result<ArchSpec> {
        Ok(ArchSpec {
            family,
            latent_dim: self.get("latent_dim")?,
            base_channels: self.get("base_channels")?,
            num_blocks: self.get("num_blocks")?,
            output_shape: data.sample_shape.clone(),
            modulation: self.modulation(kind, data.num_classes)?,
        })
    }

    fn lipschitz(&self) -> Result<Lipschitz> {
        match self.raw("lipschitz") {
            "sn" | "spectral" => Ok(Lipschitz::Spectral),
            "gp" => Ok(Lipschitz::GradientPenalty {
                lambda: self.get("gp_lambda")?,
            }),
            o => parse_lipschitz(o),
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            loss: self.get("loss")?,
            lipschitz: self.lipschitz()?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            disc_iters: self.get("disc_iters")?,
            lr: self.get("lr")?,
            batch_size: self.get("batch_size")?,
            total_steps: self.get("total_steps")?,
            eval_every: self.get("eval_every")?,
            seed: self.get("seed")?,
            eval_samples: self.get("eval_samples")?,
            cond_batch: self.get("cond_batch")?,
        })
    }

    /// The single-run configuration described by this file.
    pub fn gan(&self, data: &Dataset) -> Result<GanConfig> {
        let family = self.family(&data.sample_shape)?;
        let kind: ModulationKind = self.get("modulation")?;
        Ok(GanConfig {
            arch: self.arch(family, kind, data)?,
            train: self.train()?,
            projection: self.get("projection")?,
        })
    }

    pub fn prd(&self) -> Result<PrdConfig> {
        Ok(PrdConfig {
            num_clusters: self.get("prd_clusters")?,
            num_angles: self.get("prd_angles")?,
            num_runs: self.get("prd_runs")?,
            seed: self.get("eval_seed")?,
        })
    }

    pub fn extractor_kind(&self, data: &Dataset) -> Result<ExtractorKind> {
        match self.raw("features") {
            "" if data.sample_shape.len() == 1 => Ok(ExtractorKind::Identity),
            "" => Ok(ExtractorKind::TrainedClassifier),
            "identity" => Ok(ExtractorKind::Identity),
            "classifier" => Ok(ExtractorKind::TrainedClassifier),
            o => Err(HarnessError::Config(format!("unknown features `{o}`"))),
        }
    }

    /// Evaluator shared by every run: reference statistics come from the
    /// held-out split of the dataset built with `eval_seed`, independent
    /// of the training seeds.
    pub fn evaluator(&self) -> Result<Evaluator> {
        let eval_seed: u64 = self.get("eval_seed")?;
        let data = self.dataset()?.build(eval_seed)?;
        let extractor = make_feature_extractor(self.extractor_kind(&data)?, &data, eval_seed)?;
        let mut ev = Evaluator::new(
            extractor,
            &data,
            self.get("latent_dim")?,
            self.get("eval_samples")?,
            self.get("cond_batch")?,
            eval_seed,
        )?;
        ev.prd = Some(self.prd()?);
        Ok(ev)
    }

    /// Identifies the evaluation setup in run hashes without building the
    /// feature extractor.
    pub fn evaluation_key(&self) -> Result<String> {
        let data = self.dataset()?.build(self.get("eval_seed")?)?;
        let features = match self.extractor_kind(&data)? {
            ExtractorKind::Identity => "identity",
            ExtractorKind::TrainedClassifier => "classifier",
        };
        Ok(format!(
            "{features}|eval_seed={}|prd={}/{}/{}",
            self.raw("eval_seed"),
            self.raw("prd_clusters"),
            self.raw("prd_angles"),
            self.raw("prd_runs")
        ))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let data = self.dataset()?.build(self.get("eval_seed")?)?;
        let archs: Vec<Family> = match self.values.get("archs") {
            None if data.sample_shape.len() == 1 => vec![Family::Mlp],
            _ => self.list("archs")?,
        };
        let lipschitz = self
            .list::<String>("lipschitz_set")?
            .iter()
            .map(|s| parse_lipschitz(s))
            .collect::<Result<Vec<_>>>()?;
        let template = self.gan(&data)?;
        Ok(GridSpec {
            losses: self.list::<LossKind>("losses")?,
            archs,
            lipschitz,
            optimizers: self.list::<OptimizerSetting>("optimizers")?,
            conditionings: self.list::<Conditioning>("conditionings")?,
            seeds: self.list::<u64>("seeds")?,
            template,
        })
    }
}

/// `sn`, `gp1`, `gp10`, ...
pub fn parse_lipschitz(s: &str) -> Result<Lipschitz> {
    if s == "sn" || s == "spectral" {
        return Ok(Lipschitz::Spectral);
    }
    s.strip_prefix("gp")
        .and_then(|l| l.parse::<f64>().ok())
        .map(|lambda| Lipschitz::GradientPenalty { lambda })
        .ok_or_else(|| HarnessError::Config(format!("unknown Lipschitz control `{s}`")))
}
