//! Alternating GAN training with periodic evaluation.
//!
//! Each generator step is preceded by `disc_iters` discriminator steps.
//! Every `eval_every` generator steps (and after the last one) the metrics
//! hook scores the generator in eval mode; the snapshot with the lowest FID
//! is kept and scored once more for precision/recall at the end.
//!
//! A non-finite loss, gradient or metric ends the run early with status
//! `diverged`; everything recorded up to that point is kept.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{build_discriminator, build_generator, ArchSpec, Discriminator, Generator};
use crate::autodiff::Graph;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{
    condition_number_score, fit_gaussian, frechet_distance, inception_score_surrogate, prd_curve,
    ConditionScore, FeatureExtractor, GaussianStats, PrdConfig, WithLabel,
};
use crate::modulation::{gradient_penalty, Mode};
use crate::optim::{AdamState, DEFAULT_LR};
use crate::tensor::Tensor;

const STREAM_LATENT: u64 = 10;
const STREAM_PENALTY: u64 = 11;
const STREAM_EVAL: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lipschitz {
    Spectral,
    GradientPenalty { lambda: f64 },
}

impl Lipschitz {
    pub fn label(&self) -> String {
        match self {
            Lipschitz::Spectral => "sn".into(),
            Lipschitz::GradientPenalty { lambda } => format!("gp{lambda}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lipschitz: Lipschitz,
    pub beta1: f64,
    pub beta2: f64,
    pub disc_iters: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Generated samples per FID evaluation.
    pub eval_samples: usize,
    /// Latents per condition-number estimate.
    pub cond_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Hinge,
            lipschitz: Lipschitz::Spectral,
            beta1: 0.0,
            beta2: 0.9,
            disc_iters: 1,
            lr: DEFAULT_LR,
            batch_size: 64,
            total_steps: 5000,
            eval_every: 500,
            seed: 0,
            eval_samples: 1000,
            cond_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.disc_iters == 0 {
            return bad("disc_iters must be at least 1".into());
        }
        if let Lipschitz::GradientPenalty { lambda } = self.lipschitz {
            if lambda != 1.0 && lambda != 10.0 {
                return bad(format!("gradient penalty weight must be 1 or 10, got {lambda}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return bad("lr, batch_size and eval_every must be positive".into());
        }
        if self.eval_samples < 2 || self.cond_batch == 0 {
            return bad("eval_samples must be ≥ 2 and cond_batch ≥ 1".into());
        }
        Ok(())
    }
}

/// Everything needed to reproduce one run apart from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    /// Projection discriminator (label-conditional critic).
    pub projection: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub fid: f64,
    pub is: Option<f64>,
    pub cond_number: f64,
    pub cond_degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrdScores {
    pub f8: f64,
    pub f_inv8: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: GanConfig,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub features: String,
    pub init: Option<EvalPoint>,
    pub trajectory: Vec<EvalPoint>,
    pub best_fid: Option<f64>,
    pub best_is: Option<f64>,
    pub best_step: Option<usize>,
    pub best_cond_number: Option<f64>,
    pub final_cond_number: Option<f64>,
    pub prd: Option<PrdScores>,
    pub disc_updates: usize,
    pub gen_updates: usize,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Scores a generator. Implementations must not keep per-run state: one
/// hook may serve many concurrent runs.
pub trait MetricsHook: Sync {
    fn describe(&self) -> String;
    fn evaluate(&self, gen: &mut Generator, step: usize) -> Result<EvalPoint>;
    fn precision_recall(&self, gen: &mut Generator) -> Result<Option<PrdScores>>;
}

/// FID, IS (when the extractor is a classifier), condition number and PRD
/// against a fixed real sample, using fixed latents so that evaluations
/// are comparable along a run and across runs.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub extractor: FeatureExtractor,
    real_stats: GaussianStats,
    real_features: Tensor,
    eval_z: Tensor,
    cond_z: Tensor,
    num_classes: usize,
    pub prd: Option<PrdConfig>,
}

impl Evaluator {
    pub fn new(extractor: FeatureExtractor, data: &Dataset, latent_dim: usize, eval_samples: usize, cond_batch: usize, seed: u64) -> Result<Self> {
        let real_features = extractor.embed(&data.test_samples)?;
        let real_stats = fit_gaussian(&real_features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_EVAL);
        let eval_z = Tensor::randn(vec![eval_samples, latent_dim], 1.0, &mut rng);
        let cond_z = Tensor::randn(vec![cond_batch, latent_dim], 1.0, &mut rng);
        Ok(Self {
            extractor,
            real_stats,
            real_features,
            eval_z,
            cond_z,
            num_classes: data.num_classes,
            prd: Some(PrdConfig::default()),
        })
    }

    pub fn real_stats(&self) -> &GaussianStats {
        &self.real_stats
    }

    fn eval_labels(&self, gen: &Generator, n: usize) -> Option<Vec<usize>> {
        gen.spec
            .modulation
            .kind
            .uses_labels()
            .then(|| (0..n).map(|i| i % self.num_classes).collect())
    }

    fn samples(&self, gen: &mut Generator) -> Result<Tensor> {
        let labels = self.eval_labels(gen, self.eval_z.shape()[0]);
        with_mode(gen, Mode::Eval, |g| g.generate(&self.eval_z, labels.as_deref()))
    }

    fn conditioning(&self, gen: &mut Generator) -> Result<ConditionScore> {
        with_mode(gen, Mode::Eval, |g| {
            if !g.spec.modulation.kind.uses_labels() {
                return condition_number_score(g, &self.cond_z);
            }
            let d = g.spec.latent_dim;
            let mut per_sample = Vec::new();
            let mut degenerate = false;
            for i in 0..self.cond_z.shape()[0] {
                let z = Tensor::new(vec![1, d], self.cond_z.row(i).to_vec())?;
                let mut m = WithLabel {
                    generator: g,
                    label: i % self.num_classes,
                };
                let s = condition_number_score(&mut m, &z)?;
                per_sample.push(s.mean_log_cond);
                degenerate |= s.degenerate;
            }
            Ok(ConditionScore {
                mean_log_cond: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
                per_sample,
                degenerate,
            })
        })
    }
}

fn with_mode<T>(gen: &mut Generator, mode: Mode, f: impl FnOnce(&mut Generator) -> Result<T>) -> Result<T> {
    let prev = gen.mode;
    gen.set_mode(mode);
    let out = f(gen);
    gen.set_mode(prev);
    out
}

impl MetricsHook for Evaluator {
    fn describe(&self) -> String {
        self.extractor.descriptor()
    }

    fn evaluate(&self, gen: &mut Generator, step: usize) -> Result<EvalPoint> {
        let x = self.samples(gen)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("generated samples".into()));
        }
        let feats = self.extractor.embed(&x)?;
        let fid = frechet_distance(&self.real_stats, &fit_gaussian(&feats)?)?;
        let is = match self.extractor.probabilities(&x)? {
            Some(p) => Some(inception_score_surrogate(&p)?),
            None => None,
        };
        let cond = self.conditioning(gen)?;
        if !fid.is_finite() || !cond.mean_log_cond.is_finite() {
            return Err(Error::NonFinite(format!("metrics at step {step}")));
        }
        Ok(EvalPoint {
            step,
            fid,
            is,
            cond_number: cond.mean_log_cond,
            cond_degenerate: cond.degenerate,
        })
    }

    fn precision_recall(&self, gen: &mut Generator) -> Result<Option<PrdScores>> {
        let Some(cfg) = self.prd else { return Ok(None) };
        let x = self.samples(gen)?;
        let feats = self.extractor.embed(&x)?;
        let r = prd_curve(&self.real_features, &feats, cfg)?;
        Ok(Some(PrdScores {
            f8: r.f8,
            f_inv8: r.f_inv8,
        }))
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NumericalDomain(_))
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss is {v}")))
    }
}

struct Trainer<'a> {
    gen: &'a mut Generator,
    disc: &'a mut Discriminator,
    data: &'a mut Dataset,
    cfg: &'a TrainConfig,
    adam_g: AdamState,
    adam_d: AdamState,
    z_rng: ChaCha8Rng,
    gp_rng: ChaCha8Rng,
    disc_updates: usize,
    gen_updates: usize,
}

impl Trainer<'_> {
    fn latents(&mut self) -> Tensor {
        Tensor::randn(vec![self.cfg.batch_size, self.gen.spec.latent_dim], 1.0, &mut self.z_rng)
    }

    fn gen_labels<'l>(&self, labels: &'l [usize]) -> Option<&'l [usize]> {
        self.gen.spec.modulation.kind.uses_labels().then_some(labels)
    }

    fn disc_labels<'l>(&self, labels: &'l [usize]) -> Option<&'l [usize]> {
        self.disc.is_conditional().then_some(labels)
    }

    fn disc_step(&mut self) -> Result<()> {
        let (real, labels) = self.data.sample(self.cfg.batch_size)?;
        let z = self.latents();
        let fake = {
            let mut g = Graph::new();
            let vars = self.gen.params.bind(&mut g, false);
            let zv = g.constant(z);
            let out = self.gen.forward(&mut g, &vars, zv, self.gen_labels(&labels))?;
            g.value(out).clone()
        };
        let dl = self.disc_labels(&labels);
        let mut g = Graph::new();
        let raw = self.disc.params.bind(&mut g, true);
        let vars = self.disc.prepare(&mut g, &raw, true)?;
        let rv = g.constant(real.clone());
        let fv = g.constant(fake.clone());
        let real_logits = self.disc.forward(&mut g, &vars, rv, dl)?;
        let fake_logits = self.disc.forward(&mut g, &vars, fv, dl)?;
        let mut loss = self.cfg.loss.discriminator(&mut g, real_logits, fake_logits);
        if let Lipschitz::GradientPenalty { lambda } = self.cfg.lipschitz {
            let disc = &*self.disc;
            let gp = gradient_penalty(
                &mut g,
                |g, x| disc.forward(g, &vars, x, dl),
                &real,
                &fake,
                lambda,
                &mut self.gp_rng,
            )?;
            loss = g.add(loss, gp)?;
        }
        check_finite(g.value(loss).item(), "discriminator")?;
        g.backward(loss)?;
        let grads = self.disc.params.gradients(&g, &raw);
        self.adam_d.step(self.disc.params.tensors_mut(), &grads)?;
        self.disc_updates += 1;
        Ok(())
    }

    fn gen_step(&mut self) -> Result<()> {
        let (_, labels) = self.data.sample(self.cfg.batch_size)?;
        let z = self.latents();
        let mut g = Graph::new();
        let gvars = self.gen.params.bind(&mut g, true);
        let zv = g.constant(z);
        let gl = self.gen_labels(&labels).map(<[usize]>::to_vec);
        let fake = self.gen.forward(&mut g, &gvars, zv, gl.as_deref())?;
        let raw = self.disc.params.bind(&mut g, false);
        let dvars = self.disc.prepare(&mut g, &raw, false)?;
        let dl = self.disc_labels(&labels);
        let logits = self.disc.forward(&mut g, &dvars, fake, dl)?;
        let loss = self.cfg.loss.generator(&mut g, logits);
        check_finite(g.value(loss).item(), "generator")?;
        g.backward(loss)?;
        let grads = self.gen.params.gradients(&g, &gvars);
        self.adam_g.step(self.gen.params.tensors_mut(), &grads)?;
        self.gen_updates += 1;
        Ok(())
    }
}

/// Trains `gen` against `disc` on batches from `data`.
///
/// Configuration and shape problems are returned as errors. Numerical
/// blow-ups are not errors: they end the run with status `diverged`.
pub fn train_gan(
    gen: &mut Generator,
    disc: &mut Discriminator,
    data: &mut Dataset,
    cfg: &TrainConfig,
    hook: &dyn MetricsHook,
) -> Result<RunRecord> {
    cfg.validate()?;
    if gen.spec.output_shape != data.sample_shape || disc.spec.output_shape != data.sample_shape {
        return Err(Error::Configuration(format!(
            "generator {:?} / discriminator {:?} do not match data {:?}",
            gen.spec.output_shape, disc.spec.output_shape, data.sample_shape
        )));
    }
    if matches!(cfg.lipschitz, Lipschitz::Spectral) != disc.spectral.is_some() {
        return Err(Error::Configuration(
            "spectral normalization setting differs between config and discriminator".into(),
        ));
    }
    let mut record = RunRecord {
        config: GanConfig {
            arch: gen.spec.clone(),
            train: cfg.clone(),
            projection: disc.is_conditional(),
        },
        status: RunStatus::Ok,
        failure: None,
        features: hook.describe(),
        init: None,
        trajectory: Vec::new(),
        best_fid: None,
        best_is: None,
        best_step: None,
        best_cond_number: None,
        final_cond_number: None,
        prd: None,
        disc_updates: 0,
        gen_updates: 0,
    };
    let stream = |s| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    gen.set_mode(Mode::Train);
    let mut best: Option<Generator> = None;
    let outcome = (|| -> Result<()> {
        record.init = Some(hook.evaluate(gen, 0)?);
        let mut t = Trainer {
            adam_g: AdamState::new(gen.params.tensors(), cfg.lr, cfg.beta1, cfg.beta2),
            adam_d: AdamState::new(disc.params.tensors(), cfg.lr, cfg.beta1, cfg.beta2),
            gen: &mut *gen,
            disc: &mut *disc,
            data: &mut *data,
            cfg,
            z_rng: stream(STREAM_LATENT),
            gp_rng: stream(STREAM_PENALTY),
            disc_updates: 0,
            gen_updates: 0,
        };
        let result = (|| -> Result<()> {
            for step in 1..=cfg.total_steps {
                for _ in 0..cfg.disc_iters {
                    t.disc_step()?;
                }
                t.gen_step()?;
                if step % cfg.eval_every == 0 || step == cfg.total_steps {
                    let point = hook.evaluate(t.gen, step)?;
                    if record.best_fid.is_none_or(|b| point.fid < b) {
                        record.best_fid = Some(point.fid);
                        record.best_step = Some(step);
                        record.best_cond_number = Some(point.cond_number);
                        best = Some(t.gen.clone());
                    }
                    if let Some(is) = point.is {
                        record.best_is = Some(record.best_is.map_or(is, |b: f64| b.max(is)));
                    }
                    record.final_cond_number = Some(point.cond_number);
                    record.trajectory.push(point);
                }
            }
            Ok(())
        })();
        record.disc_updates = t.disc_updates;
        record.gen_updates = t.gen_updates;
        result?;
        if let Some(b) = best.as_mut() {
            record.prd = hook.precision_recall(b)?;
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        if !is_divergence(&e) {
            return Err(e);
        }
        record.status = RunStatus::Diverged;
        record.failure = Some(e.to_string());
    }
    Ok(record)
}

/// Builds the networks and dataset for `cfg`, then trains.
pub fn run_experiment(cfg: &GanConfig, data: &DatasetSpec, hook: &dyn MetricsHook) -> Result<RunRecord> {
    let seed = cfg.train.seed;
    let mut dataset = data.build(seed)?;
    let mut gen = build_generator(&cfg.arch, seed)?;
    let spectral = matches!(cfg.train.lipschitz, Lipschitz::Spectral);
    let mut disc = build_discriminator(&cfg.arch, cfg.projection, spectral, seed)?;
    train_gan(&mut gen, &mut disc, &mut dataset, &cfg.train, hook)
}
