//! Normalization and conditioning layers: batch norm, self-modulated batch
//! norm, label-conditional batch norm, latent composition, spectral
//! normalization, the projection head and the gradient penalty.
//!
//! All feature tensors are channel-last (`N×C` or `N×H×W×C`); statistics
//! are taken over every axis but the last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{check_rows, Params};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const MODULATOR_HIDDEN: usize = 32;
pub const MODULATOR_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance shared by every batch-norm flavour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `(h − μ)/√(σ² + ε)` with batch statistics in training mode (which
    /// also advances the moving averages) and running statistics in eval.
    pub fn normalize(&mut self, g: &mut Graph, h: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c != self.channels() || shape.len() < 2 {
            return Err(Error::dim("batch_norm", &shape, &[self.channels()]));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let axes: Vec<usize> = (0..shape.len() - 1).collect();
                let (mean, var) = g.batch_moments(h, &axes)?;
                let m = self.momentum;
                let bm = g.value(mean).data().to_vec();
                let bv = g.value(var).data().to_vec();
                for (r, b) in self.mean.data_mut().iter_mut().zip(&bm) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in self.var.data_mut().iter_mut().zip(&bv) {
                    *r = m * *r + (1.0 - m) * b;
                }
                (mean, var)
            }
            Mode::Eval => (g.constant(self.mean.clone()), g.constant(self.var.clone())),
        };
        let centered = g.sub(h, mean)?;
        let ve = g.offset(var, self.epsilon);
        let sd = g.sqrt(ve);
        g.div(centered, sd)
    }
}

/// Reshapes per-sample `N×C` modulation so it broadcasts over `h`.
fn per_sample(g: &mut Graph, m: Var, h_shape: &[usize]) -> Result<Var> {
    let &[n, c] = g.shape(m) else {
        return Err(Error::dim("modulation", g.shape(m), h_shape));
    };
    let mut s = vec![1; h_shape.len()];
    s[0] = n;
    s[h_shape.len() - 1] = c;
    g.reshape(m, &s)
}

/// Plain batch norm with learned `γ`, `β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: usize,
    pub beta: usize,
    pub stats: RunningStats,
}

impl BatchNormLayer {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones(vec![channels])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(&mut self, g: &mut Graph, vars: &[Var], h: Var, mode: Mode) -> Result<Var> {
        let xhat = self.stats.normalize(g, h, mode)?;
        let scaled = g.mul(xhat, vars[self.gamma])?;
        g.add(scaled, vars[self.beta])
    }
}

/// One-hidden-layer ReLU network `V·max(0, U z + b) + offset`, producing
/// one modulation vector per latent row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfModulator {
    /// `hidden × d`
    pub u: usize,
    /// `hidden`
    pub b: usize,
    /// `C × hidden`
    pub v: usize,
    pub output_offset: f64,
}

impl SelfModulator {
    /// `V = 0` so the output starts at exactly `output_offset`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        latent_dim: usize,
        hidden: usize,
        channels: usize,
        output_offset: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            u: params.add(
                format!("{name}.u"),
                Tensor::randn(vec![hidden, latent_dim], MODULATOR_INIT_STD, rng),
            ),
            b: params.add(format!("{name}.b"), Tensor::zeros(vec![hidden])),
            v: params.add(format!("{name}.v"), Tensor::zeros(vec![channels, hidden])),
            output_offset,
        }
    }

    /// `z: N×d` → `N×C`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], z: Var) -> Result<Var> {
        let (u, v) = (vars[self.u], vars[self.v]);
        let d = g.shape(u)[1];
        if g.shape(z).len() != 2 || g.shape(z)[1] != d {
            return Err(Error::dim("modulation_mlp", g.shape(z), g.shape(u)));
        }
        let ut = g.transpose(u)?;
        let pre = g.matmul(z, ut)?;
        let pre = g.add(pre, vars[self.b])?;
        let hidden = g.relu(pre);
        let vt = g.transpose(v)?;
        let out = g.matmul(hidden, vt)?;
        Ok(g.offset(out, self.output_offset))
    }

    pub fn param_count(latent_dim: usize, hidden: usize, channels: usize) -> usize {
        hidden * latent_dim + hidden + channels * hidden
    }
}

/// Batch norm whose scale and shift are functions of the latent code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfModulatedBn {
    pub gamma: SelfModulator,
    pub beta: SelfModulator,
    pub stats: RunningStats,
}

impl SelfModulatedBn {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        latent_dim: usize,
        hidden: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            gamma: SelfModulator::new(params, &format!("{name}.gamma"), latent_dim, hidden, channels, 1.0, rng),
            beta: SelfModulator::new(params, &format!("{name}.beta"), latent_dim, hidden, channels, 0.0, rng),
            stats: RunningStats::new(channels),
        }
    }

    /// `h' = γ(z) ⊙ ĥ + β(z)` where row `i` of `z` modulates sample `i`.
    pub fn forward(&mut self, g: &mut Graph, vars: &[Var], h: Var, z: Var, mode: Mode) -> Result<Var> {
        let hs = g.shape(h).to_vec();
        check_rows("sbn_forward", g.shape(z)[0], hs[0])?;
        let xhat = self.stats.normalize(g, h, mode)?;
        let gamma = self.gamma.forward(g, vars, z)?;
        let beta = self.beta.forward(g, vars, z)?;
        let gamma = per_sample(g, gamma, &hs)?;
        let beta = per_sample(g, beta, &hs)?;
        let scaled = g.mul(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

/// Batch norm with per-class `γ_y`, `β_y` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBnLayer {
    /// `num_classes × C`
    pub gamma_table: usize,
    pub beta_table: usize,
    pub stats: RunningStats,
}

impl ConditionalBnLayer {
    pub fn new(params: &mut Params, name: &str, num_classes: usize, channels: usize) -> Self {
        Self {
            gamma_table: params.add(
                format!("{name}.gamma_table"),
                Tensor::ones(vec![num_classes, channels]),
            ),
            beta_table: params.add(
                format!("{name}.beta_table"),
                Tensor::zeros(vec![num_classes, channels]),
            ),
            stats: RunningStats::new(channels),
        }
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        vars: &[Var],
        h: Var,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Var> {
        let hs = g.shape(h).to_vec();
        check_rows("cbn_forward", labels.len(), hs[0])?;
        let xhat = self.stats.normalize(g, h, mode)?;
        let gamma = g.gather_rows(vars[self.gamma_table], labels)?;
        let beta = g.gather_rows(vars[self.beta_table], labels)?;
        let gamma = per_sample(g, gamma, &hs)?;
        let beta = per_sample(g, beta, &hs)?;
        let scaled = g.mul(xhat, gamma)?;
        g.add(scaled, beta)
    }
}

/// `z' = z + E(y) + z ⊙ E'(y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentComposer {
    pub e: usize,
    pub e_prime: usize,
}

impl LatentComposer {
    /// Embeddings start at zero, so composition starts as the identity.
    pub fn new(params: &mut Params, name: &str, num_classes: usize, latent_dim: usize) -> Self {
        Self {
            e: params.add(format!("{name}.e"), Tensor::zeros(vec![num_classes, latent_dim])),
            e_prime: params.add(
                format!("{name}.e_prime"),
                Tensor::zeros(vec![num_classes, latent_dim]),
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], z: Var, labels: &[usize]) -> Result<Var> {
        check_rows("compose_latent", labels.len(), g.shape(z)[0])?;
        let e = g.gather_rows(vars[self.e], labels)?;
        let ep = g.gather_rows(vars[self.e_prime], labels)?;
        let zep = g.mul(z, ep)?;
        let s = g.add(z, e)?;
        g.add(s, zep)
    }
}

/// `D(x, y) = ψ(φ(x)) + φ(x)ᵀ E(y)` on top of a feature vector `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    /// `F × 1`
    pub psi: usize,
    pub psi_bias: Option<usize>,
    /// `num_classes × F`; absent for an unconditional head.
    pub embedding: Option<usize>,
}

impl ProjectionHead {
    /// `phi: N×F` → logits of shape `N`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        phi: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        let n = g.shape(phi)[0];
        let mut out = g.matmul(phi, vars[self.psi])?;
        if let Some(b) = self.psi_bias {
            out = g.add(out, vars[b])?;
        }
        if let Some(e) = self.embedding {
            let labels = labels.ok_or_else(|| {
                Error::Argument("projection discriminator needs labels".into())
            })?;
            check_rows("projection_logit", labels.len(), n)?;
            let ey = g.gather_rows(vars[e], labels)?;
            let prod = g.mul(phi, ey)?;
            let proj = g.sum_axes(prod, &[1])?;
            out = g.add(out, proj)?;
        }
        g.reshape(out, &[n])
    }
}

/// Single-sample logit with plain tensors.
pub fn projection_logit(psi: &Tensor, embedding: &Tensor, phi: &Tensor, y: usize) -> Result<f64> {
    let f = phi.len();
    if psi.len() != f || embedding.shape().get(1) != Some(&f) {
        return Err(Error::dim("projection_logit", psi.shape(), phi.shape()));
    }
    if y >= embedding.shape()[0] {
        return Err(Error::Argument(format!("label {y} out of range")));
    }
    let lin: f64 = psi.data().iter().zip(phi.data()).map(|(a, b)| a * b).sum();
    let proj: f64 = embedding.row(y).iter().zip(phi.data()).map(|(a, b)| a * b).sum();
    Ok(lin + proj)
}

// ----- spectral normalization ------------------------------------------

/// Persistent left-singular-vector estimate for one weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNormState {
    pub u: Vec<f64>,
    pub power_iterations: usize,
}

impl SpectralNormState {
    pub fn new<R: Rng + ?Sized>(rows: usize, power_iterations: usize, rng: &mut R) -> Self {
        let mut u = Tensor::randn(vec![rows], 1.0, rng).into_data();
        let n = norm(&u);
        u.iter_mut().for_each(|x| *x /= n);
        Self {
            u,
            power_iterations,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Works on `M = Wᵀ` stored row-major as `rest × out`, i.e. the natural
/// layout of both dense (`in×out`) and conv (`kh·kw·C × C'`) weights.
/// `u` lives in the output-feature space. Returns `(σ̂, v)` or `None` for
/// a zero matrix.
fn power_sigma(m: &[f64], rest: usize, out: usize, state: &mut SpectralNormState, iters: usize) -> Option<(f64, Vec<f64>)> {
    debug_assert_eq!(state.u.len(), out);
    let mv = |u: &[f64]| -> Vec<f64> {
        (0..rest)
            .map(|r| m[r * out..(r + 1) * out].iter().zip(u).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mtv = |v: &[f64]| -> Vec<f64> {
        let mut u = vec![0.0; out];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &a) in u.iter_mut().zip(&m[r * out..(r + 1) * out]) {
                *o += a * vr;
            }
        }
        u
    };
    if m.iter().all(|&x| x == 0.0) {
        return None;
    }
    let unit = |x: Vec<f64>| -> Option<Vec<f64>> {
        let n = norm(&x);
        (n > 0.0).then(|| x.into_iter().map(|v| v / n).collect())
    };
    let mut u = state.u.clone();
    let mut v = match unit(mv(&u)) {
        Some(v) => v,
        None => {
            // u is orthogonal to the row space; restart from the largest column.
            let best = (0..out)
                .max_by(|&a, &b| {
                    let ca: f64 = (0..rest).map(|r| m[r * out + a].powi(2)).sum();
                    let cb: f64 = (0..rest).map(|r| m[r * out + b].powi(2)).sum();
                    ca.total_cmp(&cb)
                })
                .unwrap_or(0);
            u = vec![0.0; out];
            u[best] = 1.0;
            unit(mv(&u))?
        }
    };
    for _ in 0..iters {
        u = unit(mtv(&v))?;
        v = unit(mv(&u))?;
    }
    let wv = mtv(&v);
    let sigma: f64 = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    state.u = u;
    Some((sigma, v))
}

/// `W / σ̂(W)` for a 2-D weight whose rows are output features, after
/// `state.power_iterations` power-iteration steps. A zero matrix comes back
/// unchanged and leaves `u` alone.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralNormState) -> Result<Tensor> {
    let &[m, _] = weight.shape() else {
        return Err(Error::dim("spectral_normalize", weight.shape(), &[0, 0]));
    };
    if state.u.len() != m {
        return Err(Error::dim("spectral_normalize", weight.shape(), &[state.u.len()]));
    }
    let wt = weight.transpose2d()?;
    let iters = state.power_iterations;
    match power_sigma(wt.data(), wt.shape()[0], m, state, iters) {
        Some((sigma, _)) => Ok(weight.map(|x| x / sigma)),
        None => Ok(weight.clone()),
    }
}

/// Differentiable spectral normalization of a dense (`in×out`) or conv
/// (`kh×kw×C×C'`) weight; the output-feature axis is the last one. The
/// singular vectors are treated as constants, so `σ̂ = uᵀ W v` is linear in
/// `W`. With `update == false` no power iteration is run and the stored
/// `u` is used as is.
pub fn spectral_normalize_var(
    g: &mut Graph,
    w: Var,
    state: &mut SpectralNormState,
    update: bool,
) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    let out = *shape.last().unwrap_or(&0);
    let rest = g.value(w).len() / out.max(1);
    if state.u.len() != out {
        return Err(Error::dim("spectral_normalize", &shape, &[state.u.len()]));
    }
    let iters = if update { state.power_iterations } else { 0 };
    let data = g.value(w).data().to_vec();
    let Some((_, v)) = power_sigma(&data, rest, out, state, iters) else {
        return Ok(w);
    };
    let mut outer = vec![0.0; rest * out];
    for (r, &vr) in v.iter().enumerate() {
        for (o, &uo) in state.u.iter().enumerate() {
            outer[r * out + o] = vr * uo;
        }
    }
    let outer = g.constant(Tensor::new(shape, outer)?);
    let prod = g.mul(w, outer)?;
    let sigma = g.sum(prod);
    g.div(w, sigma)
}

// ----- gradient penalty -----------------------------------------------

/// `λ · mean_i (‖∇ D(x̂_i)‖₂ − 1)²` at `x̂ = α x_real + (1−α) x_fake`, one
/// `α ~ U(0,1)` per sample. The result stays differentiable with respect
/// to whatever parameters `disc` closes over.
pub fn gradient_penalty<R, F>(
    g: &mut Graph,
    disc: F,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    rng: &mut R,
) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let n = real.shape().first().copied().unwrap_or(0);
    let alpha: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_at(g, disc, real, fake, &alpha, lambda)
}

pub fn gradient_penalty_at<F>(
    g: &mut Graph,
    mut disc: F,
    real: &Tensor,
    fake: &Tensor,
    alpha: &[f64],
    lambda: f64,
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if real.shape() != fake.shape() {
        return Err(Error::dim("gradient_penalty", real.shape(), fake.shape()));
    }
    let n = real.shape()[0];
    check_rows("gradient_penalty", alpha.len(), n)?;
    let per = real.len() / n;
    let mut mixed = Vec::with_capacity(real.len());
    for (i, &a) in alpha.iter().enumerate() {
        let (r, f) = (real.row(i), fake.row(i));
        mixed.extend(r.iter().zip(f).map(|(&r, &f)| a * r + (1.0 - a) * f));
    }
    debug_assert_eq!(mixed.len(), n * per);
    let x_hat = g.param(Tensor::new(real.shape().to_vec(), mixed)?);
    let logits = disc(g, x_hat)?;
    let total = g.sum(logits);
    let [grad] = g.grad(total, &[x_hat])?[..] else {
        unreachable!()
    };
    let flat = g.reshape(grad, &[n, per])?;
    let sq = g.square(flat);
    let ss = g.sum_axes(sq, &[1])?;
    // tiny floor keeps the sqrt differentiable at a zero gradient
    let ss = g.offset(ss, 1e-12);
    let norms = g.sqrt(ss);
    let dev = g.offset(norms, -1.0);
    let dev2 = g.square(dev);
    let m = g.mean(dev2);
    Ok(g.scale(m, lambda))
}
