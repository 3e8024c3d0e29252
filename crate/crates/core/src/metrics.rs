//! Sample-quality and generator diagnostics.
//!
//! * Fréchet distance between Gaussians fitted to embedded samples.
//! * An Inception-Score style `exp(E KL(p(y|x) ‖ p(y)))` for any classifier.
//! * Mean log condition number of the generator Jacobian over latents.
//! * Precision/recall distributions with the recall-weighted `F₈` and
//!   precision-weighted `F₁/₈` summaries.
//! * Feature extractors: identity (low-dimensional data) or the penultimate
//!   layer of a small classifier trained on the labelled synthetic data.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::Generator;
use crate::autodiff::Graph;
use crate::autodiff::Var;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{singular_values, symmetric_eigen};
use crate::modulation::Mode;
use crate::nn::{Conv, Dense, Params};
use crate::optim::AdamState;
use crate::tensor::{Padding, Tensor};

pub const FID_JITTER: f64 = 1e-10;
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const PRD_CLUSTERS: usize = 20;
pub const PRD_ANGLES: usize = 1001;
pub const PRD_RUNS: usize = 10;
pub const CLASSIFIER_MIN_ACCURACY: f64 = 0.9;

// ----- Gaussian fit and Fréchet distance --------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// `F×F` unbiased covariance.
    pub sigma: Tensor,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and covariance (divisor `N − 1`) of the rows of `features`.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    let &[n, f] = features.shape() else {
        return Err(Error::dim("fit_gaussian", features.shape(), &[0, 0]));
    };
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let mut mu = vec![0.0; f];
    for i in 0..n {
        for (m, x) in mu.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; f * f];
    let mut centered = vec![0.0; f];
    for i in 0..n {
        for ((c, x), m) in centered.iter_mut().zip(features.row(i)).zip(&mu) {
            *c = x - m;
        }
        for a in 0..f {
            let ca = centered[a];
            for b in a..f {
                cov[a * f + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..f {
        for b in a..f {
            let v = cov[a * f + b] / denom;
            cov[a * f + b] = v;
            cov[b * f + a] = v;
        }
    }
    Ok(GaussianStats {
        mu,
        sigma: Tensor::new(vec![f, f], cov)?,
    })
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues slightly
/// below zero (rounding) are clamped; clearly negative ones are an error.
pub fn matrix_sqrt_psd(a: &Tensor) -> Result<Tensor> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let n = vals.len();
    let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&neg) = vals.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::NumericalDomain(format!(
            "matrix is not positive semi-definite (eigenvalue {neg:e})"
        )));
    }
    let roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    let q = vecs.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s: f64 = (0..n).map(|k| q[i * n + k] * roots[k] * q[j * n + k]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the cross term taken as
/// `Tr((√Σa Σb √Σa)^½)` so the matrix under the root stays symmetric PSD.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.shape() != b.sigma.shape() {
        return Err(Error::dim("frechet_distance", a.sigma.shape(), b.sigma.shape()));
    }
    let f = a.dim();
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = matrix_sqrt_psd(&a.sigma)?;
    let mut inner = root_a.matmul(&b.sigma)?.matmul(&root_a)?;
    {
        let d = inner.data_mut();
        for i in 0..f {
            for j in i + 1..f {
                let s = 0.5 * (d[i * f + j] + d[j * f + i]);
                d[i * f + j] = s;
                d[j * f + i] = s;
            }
            d[i * f + i] += FID_JITTER;
        }
    }
    let cross = matrix_sqrt_psd(&inner)?;
    let trace = |t: &Tensor| (0..f).map(|i| t.data()[i * f + i]).sum::<f64>();
    Ok(mean_term + trace(&a.sigma) + trace(&b.sigma) - 2.0 * trace(&cross))
}

// ----- Inception-Score surrogate ------------------------------------------

/// `exp(mean_x KL(p(y|x) ‖ p̄))` for rows of class probabilities.
pub fn inception_score_surrogate(probs: &Tensor) -> Result<f64> {
    let &[n, k] = probs.shape() else {
        return Err(Error::dim("inception_score", probs.shape(), &[0, 0]));
    };
    for i in 0..n {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Contract(format!("row {i} is not a probability distribution (sum {s})")));
        }
    }
    let mut marginal = vec![0.0; k];
    for i in 0..n {
        for (m, p) in marginal.iter_mut().zip(probs.row(i)) {
            *m += p / n as f64;
        }
    }
    let kl: f64 = (0..n)
        .map(|i| {
            probs
                .row(i)
                .iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(kl.exp())
}

// ----- Jacobian and condition number ------------------------------------

/// A differentiable map from latent rows to flat outputs.
pub trait LatentMap {
    fn latent_dim(&self) -> usize;
    /// Whether the map treats every row independently (no batch statistics).
    fn is_eval(&self) -> bool;
    /// `z: N×d` → `N×out`.
    fn map(&mut self, g: &mut Graph, z: Var) -> Result<Var>;
}

impl LatentMap for Generator {
    fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn is_eval(&self) -> bool {
        self.mode == Mode::Eval
    }

    fn map(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let vars = self.params.bind(g, false);
        let out = self.forward(g, &vars, z, None)?;
        g.flatten(out)
    }
}

/// A label-conditional generator evaluated at one fixed label.
pub struct WithLabel<'a> {
    pub generator: &'a mut Generator,
    pub label: usize,
}

impl LatentMap for WithLabel<'_> {
    fn latent_dim(&self) -> usize {
        self.generator.spec.latent_dim
    }

    fn is_eval(&self) -> bool {
        self.generator.mode == Mode::Eval
    }

    fn map(&mut self, g: &mut Graph, z: Var) -> Result<Var> {
        let n = g.shape(z)[0];
        let labels = vec![self.label; n];
        let vars = self.generator.params.bind(g, false);
        let out = self.generator.forward(g, &vars, z, Some(&labels))?;
        g.flatten(out)
    }
}

/// Exact Jacobians `∂G(z)_i / ∂z_j` for every row of `zs` (`N×d`), one
/// reverse pass per output component over the whole batch.
pub fn generator_jacobians<M: LatentMap + ?Sized>(map: &mut M, zs: &Tensor) -> Result<Vec<Tensor>> {
    if !map.is_eval() {
        return Err(Error::Contract(
            "Jacobian needs eval mode; batch statistics couple the samples".into(),
        ));
    }
    let d = map.latent_dim();
    let &[n, zd] = zs.shape() else {
        return Err(Error::dim("generator_jacobian", zs.shape(), &[0, d]));
    };
    if zd != d || n == 0 {
        return Err(Error::dim("generator_jacobian", zs.shape(), &[n, d]));
    }
    let mut g = Graph::new();
    let z = g.param(zs.clone());
    let out = map.map(&mut g, z)?;
    let m = g.shape(out)[1];
    let mut jac = vec![vec![0.0; m * d]; n];
    for i in 0..m {
        let mut mask = vec![0.0; n * m];
        for r in 0..n {
            mask[r * m + i] = 1.0;
        }
        let mask = g.constant(Tensor::new(vec![n, m], mask)?);
        let picked = g.mul(out, mask)?;
        let root = g.sum(picked);
        g.backward(root)?;
        let grad = g.gradient(z).expect("z is a parameter");
        for (r, j) in jac.iter_mut().enumerate() {
            j[i * d..(i + 1) * d].copy_from_slice(grad.row(r));
        }
    }
    jac.into_iter().map(|j| Tensor::new(vec![m, d], j)).collect()
}

/// Jacobian at a single latent `z` (length `d`), shape `out × d`.
pub fn generator_jacobian<M: LatentMap + ?Sized>(map: &mut M, z: &[f64]) -> Result<Tensor> {
    let zs = Tensor::new(vec![1, z.len()], z.to_vec())?;
    Ok(generator_jacobians(map, &zs)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub mean_log_cond: f64,
    pub per_sample: Vec<f64>,
    /// Some Jacobian had `σ_min` below the floor.
    pub degenerate: bool,
}

/// `ln(σ_max/σ_min)` of a dense matrix with `σ_min` floored; the flag says
/// whether the floor was hit.
pub fn log_condition(jac: &Tensor) -> Result<(f64, bool)> {
    let sv = singular_values(jac)?;
    let max = sv[0];
    let min = *sv.last().expect("non-empty");
    let floored = min < SIGMA_FLOOR;
    Ok(((max.max(SIGMA_FLOOR) / min.max(SIGMA_FLOOR)).ln(), floored))
}

/// Mean log condition number of the Jacobian over the rows of `zs`.
pub fn condition_number_score<M: LatentMap + ?Sized>(map: &mut M, zs: &Tensor) -> Result<ConditionScore> {
    let jacs = generator_jacobians(map, zs)?;
    let mut per_sample = Vec::with_capacity(jacs.len());
    let mut degenerate = false;
    for j in &jacs {
        let (lc, flag) = log_condition(j)?;
        per_sample.push(lc);
        degenerate |= flag;
    }
    Ok(ConditionScore {
        mean_log_cond: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
        degenerate,
    })
}

// ----- precision / recall distributions ---------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrdResult {
    /// Slopes `λ = tan θ` of the angular grid.
    pub slopes: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Recall-weighted score.
    pub f8: f64,
    /// Precision-weighted score.
    pub f_inv8: f64,
}

/// `λ = tan θ` for `θ` evenly spaced in `(0, π/2)`, endpoints nudged in.
pub fn prd_slopes(num_angles: usize) -> Vec<f64> {
    let eps = 1e-10;
    let (lo, hi) = (eps, FRAC_PI_2 - eps);
    (0..num_angles)
        .map(|i| {
            let t = if num_angles == 1 { 0.5 } else { i as f64 / (num_angles - 1) as f64 };
            (lo + t * (hi - lo)).tan()
        })
        .collect()
}

/// `F_β = max (1+β²) p r / (β² p + r)` over the curve.
pub fn f_beta_score(precision: &[f64], recall: &[f64], beta: f64) -> f64 {
    let b2 = beta * beta;
    precision
        .iter()
        .zip(recall)
        .map(|(&p, &r)| {
            let den = b2 * p + r;
            if den > 0.0 {
                (1.0 + b2) * p * r / den
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Curve from two histograms over the same bins: real `P`, generated `Q`,
/// `α(λ) = Σ min(λP, Q)` (precision) and `β(λ) = Σ min(P, Q/λ)` (recall).
pub fn prd_from_histograms(real: &[f64], fake: &[f64], num_angles: usize) -> Result<PrdResult> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::dim("prd", &[real.len()], &[fake.len()]));
    }
    if num_angles == 0 {
        return Err(Error::Argument("num_angles must be positive".into()));
    }
    let slopes = prd_slopes(num_angles);
    let mut precision = Vec::with_capacity(num_angles);
    let mut recall = Vec::with_capacity(num_angles);
    for &l in &slopes {
        let a: f64 = real.iter().zip(fake).map(|(&p, &q)| (l * p).min(q)).sum();
        let b: f64 = real.iter().zip(fake).map(|(&p, &q)| p.min(q / l)).sum();
        precision.push(a.clamp(0.0, 1.0));
        recall.push(b.clamp(0.0, 1.0));
    }
    let f8 = f_beta_score(&precision, &recall, 8.0);
    let f_inv8 = f_beta_score(&precision, &recall, 1.0 / 8.0);
    Ok(PrdResult {
        slopes,
        precision,
        recall,
        f8,
        f_inv8,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Returns the cluster of each row.
pub fn kmeans(points: &Tensor, k: usize, max_iter: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let &[n, f] = points.shape() else {
        return Err(Error::dim("kmeans", points.shape(), &[0, 0]));
    };
    if k == 0 || k > n {
        return Err(Error::Argument(format!("cannot form {k} clusters from {n} points")));
    }
    let mut centers: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    idx = i;
                    break;
                }
                t -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.push(c);
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let row = points.row(i);
            let best = (0..k)
                .min_by(|&x, &y| sq_dist(row, &centers[x]).total_cmp(&sq_dist(row, &centers[y])))
                .expect("k > 0");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; f]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centre
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(assign)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrdConfig {
    pub num_clusters: usize,
    pub num_angles: usize,
    pub num_runs: usize,
    pub seed: u64,
}

impl Default for PrdConfig {
    fn default() -> Self {
        Self {
            num_clusters: PRD_CLUSTERS,
            num_angles: PRD_ANGLES,
            num_runs: PRD_RUNS,
            seed: 0,
        }
    }
}

/// Clusters the pooled features, histograms each set over the clusters and
/// averages the resulting curves over `num_runs` independent clusterings.
pub fn prd_curve(real: &Tensor, fake: &Tensor, cfg: PrdConfig) -> Result<PrdResult> {
    let (rs, fs) = (real.shape(), fake.shape());
    if rs.len() != 2 || fs.len() != 2 || rs[1] != fs[1] {
        return Err(Error::dim("prd_curve", rs, fs));
    }
    let (nr, nf) = (rs[0], fs[0]);
    if nr == 0 || nf == 0 {
        return Err(Error::Argument("prd_curve needs non-empty sample sets".into()));
    }
    if cfg.num_clusters > nr + nf {
        return Err(Error::Argument(format!(
            "{} clusters requested for {} samples",
            cfg.num_clusters,
            nr + nf
        )));
    }
    let mut pooled = real.data().to_vec();
    pooled.extend_from_slice(fake.data());
    let pooled = Tensor::new(vec![nr + nf, rs[1]], pooled)?;
    let runs = cfg.num_runs.max(1);
    let mut precision = vec![0.0; cfg.num_angles];
    let mut recall = vec![0.0; cfg.num_angles];
    let mut slopes = Vec::new();
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(run as u64);
        let assign = kmeans(&pooled, cfg.num_clusters, 100, &mut rng)?;
        let mut p = vec![0.0; cfg.num_clusters];
        let mut q = vec![0.0; cfg.num_clusters];
        for &a in &assign[..nr] {
            p[a] += 1.0 / nr as f64;
        }
        for &a in &assign[nr..] {
            q[a] += 1.0 / nf as f64;
        }
        let one = prd_from_histograms(&p, &q, cfg.num_angles)?;
        for (acc, v) in precision.iter_mut().zip(&one.precision) {
            *acc += v / runs as f64;
        }
        for (acc, v) in recall.iter_mut().zip(&one.recall) {
            *acc += v / runs as f64;
        }
        slopes = one.slopes;
    }
    Ok(PrdResult {
        f8: f_beta_score(&precision, &recall, 8.0),
        f_inv8: f_beta_score(&precision, &recall, 1.0 / 8.0),
        slopes,
        precision,
        recall,
    })
}

// ----- feature extractors -------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    TrainedClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum ClassifierNet {
    Mlp { hidden: Vec<Dense>, out: Dense },
    Conv { c1: Conv, c2: Conv, fc: Dense, out: Dense },
}

/// Small classifier whose penultimate activations serve as features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    params: Params,
    net: ClassifierNet,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub held_out_accuracy: f64,
}

const CLASSIFIER_STEPS: usize = 600;
const CLASSIFIER_BATCH: usize = 64;
const CLASSIFIER_LR: f64 = 2e-3;
const CLASSIFIER_WIDTH: usize = 32;
const EMBED_CHUNK: usize = 256;

impl Classifier {
    fn features(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        match &self.net {
            ClassifierNet::Mlp { hidden, .. } => {
                let mut h = g.flatten(x)?;
                for l in hidden {
                    h = l.forward(g, vars, h)?;
                    h = g.relu(h);
                }
                Ok(h)
            }
            ClassifierNet::Conv { c1, c2, fc, .. } => {
                let mut h = c1.forward(g, vars, x)?;
                h = g.relu(h);
                h = g.avg_pool(h, 2)?;
                h = c2.forward(g, vars, h)?;
                h = g.relu(h);
                h = g.avg_pool(h, 2)?;
                h = g.flatten(h)?;
                h = fc.forward(g, vars, h)?;
                Ok(g.relu(h))
            }
        }
    }

    fn logits(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.features(g, vars, x)?;
        let out = match &self.net {
            ClassifierNet::Mlp { out, .. } | ClassifierNet::Conv { out, .. } => out,
        };
        out.forward(g, vars, h)
    }

    fn run<T>(&self, x: &Tensor, f: impl Fn(&Self, &mut Graph, &[Var], Var) -> Result<T>, collect: &mut Vec<T>) -> Result<()> {
        let n = x.shape()[0];
        let per = x.len() / n;
        for start in (0..n).step_by(EMBED_CHUNK) {
            let end = (start + EMBED_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(shape, x.data()[start * per..end * per].to_vec())?;
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g, false);
            let xv = g.constant(chunk);
            collect.push(f(self, &mut g, &vars, xv)?);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim("classifier", x.shape(), &self.input_shape));
        }
        Ok(())
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        self.run(x, |c, g, v, xv| {
            let h = c.features(g, v, xv)?;
            Ok(g.value(h).data().to_vec())
        }, &mut parts)?;
        Tensor::new(vec![x.shape()[0], self.feature_dim], parts.concat())
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        self.run(x, |c, g, v, xv| {
            let l = c.logits(g, v, xv)?;
            Ok(g.value(l).data().to_vec())
        }, &mut parts)?;
        let k = self.num_classes;
        let mut data = parts.concat();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new(vec![x.shape()[0], k], data)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.probabilities(x)?;
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let row = p.row(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                arg == y
            })
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Trains on fresh batches from a private copy of `data`, then checks
    /// accuracy on its held-out split.
    pub fn train(data: &Dataset, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let shape = data.sample_shape.clone();
        let k = data.num_classes;
        let w = CLASSIFIER_WIDTH;
        let (net, feature_dim) = if shape.len() == 3 {
            let (h, c) = (shape[0], shape[2]);
            if h % 4 != 0 {
                return Err(Error::Build(format!("image side {h} must be divisible by 4")));
            }
            let c1 = Conv::new(&mut params, "cls.conv1", 3, c, 8, 1, Padding::Same, &mut rng);
            let c2 = Conv::new(&mut params, "cls.conv2", 3, 8, 16, 1, Padding::Same, &mut rng);
            let flat = (h / 4) * (shape[1] / 4) * 16;
            let fc = Dense::new(&mut params, "cls.fc", flat, w, true, &mut rng);
            let out = Dense::new(&mut params, "cls.out", w, k, true, &mut rng);
            (ClassifierNet::Conv { c1, c2, fc, out }, w)
        } else {
            let fan_in: usize = shape.iter().product();
            let h1 = Dense::new(&mut params, "cls.fc1", fan_in, w, true, &mut rng);
            let h2 = Dense::new(&mut params, "cls.fc2", w, w, true, &mut rng);
            let out = Dense::new(&mut params, "cls.out", w, k, true, &mut rng);
            (ClassifierNet::Mlp { hidden: vec![h1, h2], out }, w)
        };
        let mut clf = Self {
            params,
            net,
            input_shape: shape,
            num_classes: k,
            feature_dim,
            held_out_accuracy: 0.0,
        };
        let mut adam = AdamState::new(clf.params.tensors(), CLASSIFIER_LR, 0.9, 0.999);
        let mut stream = data.clone();
        for _ in 0..CLASSIFIER_STEPS {
            let (x, y) = stream.sample(CLASSIFIER_BATCH)?;
            let mut g = Graph::new();
            let vars = clf.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = clf.logits(&mut g, &vars, xv)?;
            let loss = cross_entropy(&mut g, logits, &y)?;
            g.backward(loss)?;
            let grads = clf.params.gradients(&g, &vars);
            adam.step(clf.params.tensors_mut(), &grads)?;
        }
        clf.held_out_accuracy = clf.accuracy(&data.test_samples, &data.test_labels)?;
        if clf.held_out_accuracy < CLASSIFIER_MIN_ACCURACY {
            return Err(Error::Build(format!(
                "feature classifier reached only {:.3} held-out accuracy (need {CLASSIFIER_MIN_ACCURACY})",
                clf.held_out_accuracy
            )));
        }
        Ok(clf)
    }
}

/// Mean softmax cross-entropy of `logits: N×K` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let &[n, k] = g.shape(logits) else {
        return Err(Error::dim("cross_entropy", g.shape(logits), &[labels.len(), 0]));
    };
    if labels.len() != n || labels.iter().any(|&y| y >= k) {
        return Err(Error::Argument("labels do not match logits".into()));
    }
    let v = g.value(logits);
    let maxes: Vec<f64> = (0..n).map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let shift = g.constant(Tensor::new(vec![n, 1], maxes)?);
    let shifted = g.sub(logits, shift)?;
    let e = g.exp(shifted);
    let s = g.sum_axes(e, &[1])?;
    let lse = g.ln(s);
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![n, k], onehot)?);
    let picked = g.mul(shifted, onehot)?;
    let picked = g.sum_axes(picked, &[1])?;
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll))
}

/// Maps samples to the feature space used by the distance metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureExtractor {
    Identity { dim: usize },
    Classifier(Box<Classifier>),
}

impl FeatureExtractor {
    pub fn descriptor(&self) -> String {
        match self {
            FeatureExtractor::Identity { dim } => format!("identity[{dim}]"),
            FeatureExtractor::Classifier(c) => format!(
                "classifier[{:?}→{}; acc {:.3}]",
                c.input_shape, c.feature_dim, c.held_out_accuracy
            ),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Classifier(c) => c.feature_dim,
        }
    }

    /// `N×…` samples → `N×F` features.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeatureExtractor::Identity { dim } => {
                let n = x.shape().first().copied().unwrap_or(0);
                if n == 0 || x.len() / n != *dim {
                    return Err(Error::dim("identity features", x.shape(), &[n, *dim]));
                }
                x.reshape(vec![n, *dim])
            }
            FeatureExtractor::Classifier(c) => c.embed(x),
        }
    }

    /// Class probabilities when the extractor is a classifier.
    pub fn probabilities(&self, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            FeatureExtractor::Identity { .. } => Ok(None),
            FeatureExtractor::Classifier(c) => c.probabilities(x).map(Some),
        }
    }
}

pub fn make_feature_extractor(kind: ExtractorKind, data: &Dataset, seed: u64) -> Result<FeatureExtractor> {
    match kind {
        ExtractorKind::Identity => Ok(FeatureExtractor::Identity { dim: data.sample_len() }),
        ExtractorKind::TrainedClassifier => {
            if data.num_classes < 2 {
                return Err(Error::Build("a classifier needs at least two labelled classes".into()));
            }
            Ok(FeatureExtractor::Classifier(Box::new(Classifier::train(data, seed)?)))
        }
    }
}
