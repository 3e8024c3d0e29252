//! End-to-end acceptance checks, run without the libtest harness so the
//! report is always printed. Each criterion prints one PASS or FAIL line;
//! the binary exits non-zero if any criterion outside `KNOWN_UNATTAINABLE`
//! fails. Set `ACCEPTANCE_ONLY=1,3` to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfmod::architectures::{
    build_discriminator, build_generator, ArchSpec, Family, Generator, ModulationKind, ModulationSpec,
};
use selfmod::autodiff::{gradcheck, Graph, Var};
use selfmod::data::DatasetSpec;
use selfmod::error::Result as CoreResult;
use selfmod::losses::{hinge_loss_d, hinge_loss_g, ns_loss_d, ns_loss_g, LossKind};
use selfmod::metrics::{
    condition_number_score, frechet_distance, generator_jacobian, prd_curve, prd_from_histograms, prd_slopes,
    FeatureExtractor, GaussianStats, LatentMap, PrdConfig,
};
use selfmod::modulation::{gradient_penalty_at, spectral_normalize, spectral_normalize_var, Mode, SpectralNormState};
use selfmod::nn::Params;
use selfmod::tensor::{Padding, Tensor};
use selfmod::train::{run_experiment, train_gan, Evaluator, GanConfig, Lipschitz, RunRecord, TrainConfig};
use selfmod_harness::compare::{paired_compare, unpaired_compare, PolicyCounts};
use selfmod_harness::fixture;
use selfmod_harness::grid::{run_grid, Cell, Conditioning, GridSpec, OptimizerSetting};
use selfmod_harness::report::{emit_reports, read_csv};

/// Criteria expected to fail, with the reason.
const KNOWN_UNATTAINABLE: &[(usize, &str)] = &[(
    9,
    "the published ns-gp resnet CIFAR10 reduction (6.51) does not follow from the published FIDs \
     28.61 and 26.74, which give 6.54",
)];

type Outcome = std::result::Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ring() -> DatasetSpec {
    DatasetSpec::Ring {
        modes: 8,
        radius: 1.0,
        std: 0.05,
    }
}

fn identity_evaluator(latent_dim: usize, eval_samples: usize, cond_batch: usize, prd: Option<PrdConfig>) -> Evaluator {
    let data = ring().build(0).unwrap();
    let mut ev =
        Evaluator::new(FeatureExtractor::Identity { dim: 2 }, &data, latent_dim, eval_samples, cond_batch, 0).unwrap();
    ev.prd = prd;
    ev
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn randomize(params: &mut Params, rng: &mut ChaCha8Rng, std: f64) {
    for t in params.tensors_mut() {
        *t = Tensor::randn(t.shape().to_vec(), std, rng);
    }
}

// ----- 1: gradients --------------------------------------------------------

const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

type Op = fn(&mut Graph, &[Var]) -> CoreResult<Var>;

#[derive(Clone, Copy)]
enum Draw {
    Normal(&'static [usize]),
    Positive(&'static [usize]),
}

fn draw(d: Draw, rng: &mut ChaCha8Rng) -> Tensor {
    match d {
        Draw::Normal(s) => Tensor::randn(s.to_vec(), 1.0, rng),
        Draw::Positive(s) => Tensor::randn(s.to_vec(), 1.0, rng).map(|x| x.abs() + 0.5),
    }
}

fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> CoreResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Worst relative error over all seeds for one gradient check.
fn worst_over_seeds(mut check: impl FnMut(u64) -> CoreResult<f64>) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        worst = worst.max(check(seed).map_err(|e| e.to_string())?);
    }
    Ok(worst)
}

fn op_error(inputs: &[Draw], op: Op) -> std::result::Result<f64, String> {
    worst_over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Tensor> = inputs.iter().map(|d| draw(*d, &mut rng)).collect();
        gradcheck(&xs, GRAD_STEP, |g, v| {
            let out = op(g, v)?;
            weighted_sum(g, out, seed)
        })
    })
}

fn generator_error(spec: &ArchSpec, batch: usize) -> std::result::Result<f64, String> {
    worst_over_seeds(|seed| {
        let mut gen = build_generator(spec, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        randomize(&mut gen.params, &mut rng, 0.5);
        let z = Tensor::randn(vec![batch, spec.latent_dim], 1.0, &mut rng);
        let inputs = gen.params.tensors().to_vec();
        gradcheck(&inputs, GRAD_STEP, |g, v| {
            let zv = g.constant(z.clone());
            let out = gen.forward(g, v, zv, None)?;
            weighted_sum(g, out, seed)
        })
    })
}

fn penalty_error() -> std::result::Result<f64, String> {
    let spec = ArchSpec::mlp(2, 4, 1, 3);
    worst_over_seeds(|seed| {
        let mut disc = build_discriminator(&spec, false, false, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        randomize(&mut disc.params, &mut rng, 0.7);
        let real = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let fake = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let inputs = disc.params.tensors().to_vec();
        gradcheck(&inputs, GRAD_STEP, |g, v| {
            gradient_penalty_at(g, |g, x| disc.forward(g, v, x, None), &real, &fake, &alpha, 10.0)
        })
    })
}

fn critic_loss_error(hinge: bool) -> std::result::Result<f64, String> {
    let spec = ArchSpec::mlp(2, 4, 1, 3);
    worst_over_seeds(|seed| {
        let mut disc = build_discriminator(&spec, false, true, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let real = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let fake = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let inputs = disc.params.tensors().to_vec();
        gradcheck(&inputs, GRAD_STEP, |g, v| {
            let v = disc.prepare(g, v, false)?;
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let lr = disc.forward(g, &v, r, None)?;
            let lf = disc.forward(g, &v, f, None)?;
            Ok(if hinge {
                hinge_loss_d(g, lr, lf)
            } else {
                ns_loss_d(g, lr, lf)
            })
        })
    })
}

fn criterion_gradients() -> Outcome {
    use Draw::{Normal as N, Positive as P};
    let s: &[usize] = &[3, 4];
    let t: &[usize] = &[2, 3, 4];
    let x: &[usize] = &[2, 5, 5, 2];
    let k: &[usize] = &[3, 3, 2, 3];
    let e: &[usize] = &[2, 4, 4, 3];
    let l: &[usize] = &[6];
    let ops: Vec<(&str, Vec<Draw>, Op)> = vec![
        ("add", vec![N(s), N(&[4])], |g, v| g.add(v[0], v[1])),
        ("sub", vec![N(&[3, 1]), N(s)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![N(s), N(&[3, 1])], |g, v| g.mul(v[0], v[1])),
        ("div", vec![N(s), P(&[4])], |g, v| g.div(v[0], v[1])),
        ("neg", vec![N(s)], |g, v| Ok(g.neg(v[0]))),
        ("scale", vec![N(s)], |g, v| Ok(g.scale(v[0], -1.7))),
        ("offset", vec![N(s)], |g, v| Ok(g.offset(v[0], 0.3))),
        ("exp", vec![N(s)], |g, v| Ok(g.exp(v[0]))),
        ("ln", vec![P(s)], |g, v| Ok(g.ln(v[0]))),
        ("sqrt", vec![P(s)], |g, v| Ok(g.sqrt(v[0]))),
        ("square", vec![N(s)], |g, v| Ok(g.square(v[0]))),
        ("tanh", vec![N(s)], |g, v| Ok(g.tanh(v[0]))),
        ("sigmoid", vec![N(s)], |g, v| Ok(g.sigmoid(v[0]))),
        ("softplus", vec![N(s)], |g, v| Ok(g.softplus(v[0]))),
        ("relu", vec![N(s)], |g, v| Ok(g.relu(v[0]))),
        ("leaky_relu", vec![N(s)], |g, v| Ok(g.leaky_relu(v[0], 0.1))),
        ("sum", vec![N(t)], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![N(t)], |g, v| Ok(g.mean(v[0]))),
        ("sum_axes", vec![N(t)], |g, v| g.sum_axes(v[0], &[0, 2])),
        ("mean_axes", vec![N(t)], |g, v| g.mean_axes(v[0], &[1])),
        ("batch_moments", vec![N(t)], |g, v| {
            let (m, var) = g.batch_moments(v[0], &[0, 1])?;
            let sq = g.square(m);
            g.add(sq, var)
        }),
        ("broadcast_to", vec![N(&[3, 1])], |g, v| g.broadcast_to(v[0], &[2, 3, 4])),
        ("sum_to", vec![N(t)], |g, v| g.sum_to(v[0], &[3, 1])),
        ("reshape", vec![N(t)], |g, v| g.reshape(v[0], &[6, 4])),
        ("flatten", vec![N(t)], |g, v| g.flatten(v[0])),
        ("transpose", vec![N(&[3, 5])], |g, v| g.transpose(v[0])),
        ("matmul", vec![N(&[3, 5]), N(&[5, 2])], |g, v| g.matmul(v[0], v[1])),
        ("gather_rows", vec![N(&[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 3])),
        ("conv2d same", vec![N(x), N(k)], |g, v| g.conv2d(v[0], v[1], 1, Padding::Same)),
        ("conv2d stride 2", vec![N(x), N(k)], |g, v| g.conv2d(v[0], v[1], 2, Padding::Same)),
        ("conv2d valid", vec![N(x), N(k)], |g, v| g.conv2d(v[0], v[1], 1, Padding::Valid)),
        ("upsample_nearest", vec![N(e)], |g, v| g.upsample_nearest(v[0], 2)),
        ("sum_pool", vec![N(e)], |g, v| g.sum_pool(v[0], 2)),
        ("avg_pool", vec![N(e)], |g, v| g.avg_pool(v[0], 2)),
        ("global_sum_pool", vec![N(e)], |g, v| g.global_sum_pool(v[0])),
        ("grad of grad", vec![N(&[2, 3])], |g, v| {
            let th = g.tanh(v[0]);
            let s = g.sum(th);
            let [d] = g.grad(s, &[v[0]])?[..] else { unreachable!() };
            Ok(g.square(d))
        }),
        ("ns loss d", vec![N(l), N(l)], |g, v| Ok(ns_loss_d(g, v[0], v[1]))),
        ("ns loss g", vec![N(l)], |g, v| Ok(ns_loss_g(g, v[0]))),
        ("hinge loss d", vec![N(l), N(l)], |g, v| Ok(hinge_loss_d(g, v[0], v[1]))),
        ("hinge loss g", vec![N(l)], |g, v| Ok(hinge_loss_g(g, v[0]))),
    ];
    let mut results: Vec<(String, f64)> = Vec::new();
    for (name, inputs, op) in &ops {
        results.push((name.to_string(), op_error(inputs, *op)?));
    }
    results.push((
        "spectral normalization".into(),
        worst_over_seeds(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::randn(vec![5, 3], 1.0, &mut rng);
            let state = SpectralNormState::new(3, 1, &mut rng);
            gradcheck(&[w], GRAD_STEP, |g, v| {
                let out = spectral_normalize_var(g, v[0], &mut state.clone(), false)?;
                weighted_sum(g, out, seed)
            })
        })?,
    ));
    let sm = |hidden| ModulationSpec {
        hidden,
        ..ModulationSpec::new(ModulationKind::SelfMod)
    };
    results.push((
        "self-modulated mlp generator".into(),
        generator_error(&ArchSpec::mlp(3, 5, 1, 2).with_modulation(sm(4)), 16)?,
    ));
    results.push((
        "self-modulated dcgan-like generator".into(),
        generator_error(&ArchSpec::image(Family::DcganLike, 3, 2, 1, [4, 4, 1]).with_modulation(sm(4)), 8)?,
    ));
    results.push((
        "self-modulated resnet-like generator".into(),
        generator_error(&ArchSpec::image(Family::ResnetLike, 2, 2, 1, [4, 4, 1]).with_modulation(sm(3)), 8)?,
    ));
    results.push(("gradient penalty".into(), penalty_error()?));
    results.push(("ns loss through critic".into(), critic_loss_error(false)?));
    results.push(("hinge loss through critic".into(), critic_loss_error(true)?));

    let bad: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e <= GRAD_TOL))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    ensure!(bad.is_empty(), "relative error above {GRAD_TOL:e}: {}", bad.join(", "));
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!(
        "{} checks x {GRAD_SEEDS} seeds, worst relative error {worst:.2e}",
        results.len()
    ))
}

// ----- 2: reduction to the baseline ---------------------------------------

fn criterion_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let specs = [
        ArchSpec::mlp(6, 16, 2, 2),
        ArchSpec::image(Family::DcganLike, 6, 4, 2, [8, 8, 1]),
        ArchSpec::image(Family::ResnetLike, 6, 4, 2, [8, 8, 1]),
    ];
    for base in &specs {
        let sm = base.clone().with_modulation(ModulationSpec::new(ModulationKind::SelfMod));
        for seed in 0..5 {
            let z = Tensor::randn(vec![6, 6], 1.0, &mut rng);
            let mut a = build_generator(base, seed).map_err(|e| e.to_string())?;
            let mut b = build_generator(&sm, seed).map_err(|e| e.to_string())?;
            for mode in [Mode::Train, Mode::Eval] {
                a.set_mode(mode);
                b.set_mode(mode);
                let (ya, yb) = (a.generate(&z, None).unwrap(), b.generate(&z, None).unwrap());
                ensure!(
                    ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
                    "{:?} seed {seed} {mode:?}: outputs differ at initialization",
                    base.family
                );
            }
        }
    }

    // An all-false mask must track the baseline through training.
    let base = ArchSpec::mlp(4, 16, 2, 2);
    let sites = base.norm_sites();
    let masked = base.clone().with_modulation(ModulationSpec {
        layer_mask: Some(vec![false; sites]),
        ..ModulationSpec::new(ModulationKind::SelfMod)
    });
    let ev = identity_evaluator(4, 100, 4, None);
    let z = Tensor::randn(vec![16, 4], 1.0, &mut rng);
    for steps in [1, 10, 40] {
        let cfg = TrainConfig {
            total_steps: steps,
            eval_every: steps,
            batch_size: 16,
            eval_samples: 100,
            cond_batch: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let train = |spec: &ArchSpec| -> (Generator, RunRecord) {
            let mut gen = build_generator(spec, 3).unwrap();
            let mut disc = build_discriminator(spec, false, true, 3).unwrap();
            let mut data = ring().build(3).unwrap();
            let rec = train_gan(&mut gen, &mut disc, &mut data, &cfg, &ev).unwrap();
            (gen, rec)
        };
        let (mut ga, ra) = train(&base);
        let (mut gb, rb) = train(&masked);
        ensure!(ga.params == gb.params, "parameters differ after {steps} steps");
        ensure!(ra.trajectory == rb.trajectory, "trajectories differ after {steps} steps");
        for mode in [Mode::Train, Mode::Eval] {
            ga.set_mode(mode);
            gb.set_mode(mode);
            ensure!(
                ga.generate(&z, None).unwrap() == gb.generate(&z, None).unwrap(),
                "outputs differ after {steps} steps in {mode:?} mode"
            );
        }
    }
    Ok("3 families x 5 seeds identical at init; all-false mask identical after 1, 10, 40 steps".into())
}

// ----- 3: FID ---------------------------------------------------------------

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
    m.transpose() * m + DMatrix::identity(n, n) * 0.05
}

/// Cross term from the eigenvalues of the non-symmetric product.
fn fid_oracle(mu_a: &DVector<f64>, sa: &DMatrix<f64>, mu_b: &DVector<f64>, sb: &DMatrix<f64>) -> f64 {
    let cross: f64 = (sa * sb).complex_eigenvalues().iter().map(|c| c.sqrt().re).sum();
    (mu_a - mu_b).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross
}

fn gaussian(mu: Vec<f64>, sigma: Tensor) -> GaussianStats {
    GaussianStats { mu, sigma }
}

fn criterion_fid() -> Outcome {
    let one = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let s = from_na(&random_spd(3, &mut rng));
    let cases = [
        ("identical", gaussian(vec![0.3, -1.0, 2.0], s.clone()), gaussian(vec![0.3, -1.0, 2.0], s), 0.0),
        ("unit mean shift", gaussian(vec![0.0], one(1.0)), gaussian(vec![1.0], one(1.0)), 1.0),
        ("variance 4 vs 1", gaussian(vec![0.0], one(4.0)), gaussian(vec![0.0], one(1.0)), 1.0),
    ];
    for (name, a, b, want) in &cases {
        let got = frechet_distance(a, b).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 1e-8, "{name}: {got} vs {want}");
    }
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = 2 + i % 5;
        let (sa, sb) = (random_spd(n, &mut rng), random_spd(n, &mut rng));
        ensure!((&sa * &sb - &sb * &sa).norm() > 1e-3, "pair {i} commutes");
        let mu_a = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mu_b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ours = frechet_distance(
            &gaussian(mu_a.iter().copied().collect(), from_na(&sa)),
            &gaussian(mu_b.iter().copied().collect(), from_na(&sb)),
        )
        .map_err(|e| e.to_string())?;
        let diff = (ours - fid_oracle(&mu_a, &sa, &mu_b, &sb)).abs();
        worst = worst.max(diff);
    }
    ensure!(worst <= 1e-6, "oracle disagreement {worst:e}");
    Ok(format!("3 analytic cases within 1e-8; 100 SPD pairs, worst oracle gap {worst:.1e}"))
}

// ----- 4: condition number -------------------------------------------------

struct Linear(Tensor);

impl LatentMap for Linear {
    fn latent_dim(&self) -> usize {
        self.0.shape()[1]
    }
    fn is_eval(&self) -> bool {
        true
    }
    fn map(&mut self, g: &mut Graph, z: Var) -> CoreResult<Var> {
        let at = g.constant(self.0.transpose2d()?);
        g.matmul(z, at)
    }
}

fn fd_jacobian(gen: &mut Generator, z: &[f64]) -> DMatrix<f64> {
    let h = 1e-6;
    let d = z.len();
    let cols: Vec<DVector<f64>> = (0..d)
        .map(|j| {
            let (mut zp, mut zm) = (z.to_vec(), z.to_vec());
            zp[j] += h;
            zm[j] -= h;
            let out = gen.generate(&Tensor::new(vec![2, d], [zp, zm].concat()).unwrap(), None).unwrap();
            let m = out.len() / 2;
            DVector::from_iterator(m, (0..m).map(|i| (out.data()[i] - out.data()[m + i]) / (2.0 * h)))
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn criterion_condition_number() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let diag = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let zs = Tensor::randn(vec![4, 2], 1.0, &mut rng);
    let score = condition_number_score(&mut Linear(diag), &zs).map_err(|e| e.to_string())?;
    ensure!(
        (score.mean_log_cond - 2f64.ln()).abs() <= 1e-12,
        "diag(2,1): {}",
        score.mean_log_cond
    );
    for _ in 0..20 {
        let (out, d) = (rng.random_range(3..7), rng.random_range(2..4));
        let a = Tensor::randn(vec![out, d], 1.0, &mut rng);
        let sv = to_na(&a).singular_values();
        let want = (sv.max() / sv.min()).ln();
        let zs = Tensor::randn(vec![5, d], 1.0, &mut rng);
        let got = condition_number_score(&mut Linear(a), &zs).map_err(|e| e.to_string())?;
        ensure!(
            (got.mean_log_cond - want).abs() <= 1e-10 * want.max(1.0),
            "linear map: {} vs {want}",
            got.mean_log_cond
        );
    }

    // Finite differences resolve singular values only down to about 1e-7
    // of the largest; below that the oracle sees its own rounding noise,
    // and the score must then also report a badly conditioned Jacobian.
    let resolution = 1e-7;
    let (mut worst, mut compared, mut unresolved) = (0.0f64, 0, 0);
    for seed in 0..10u64 {
        let spec = ArchSpec::mlp(3, 16, 2, 4).with_modulation(ModulationSpec {
            hidden: 8,
            ..ModulationSpec::new(ModulationKind::SelfMod)
        });
        let mut gen = build_generator(&spec, seed).map_err(|e| e.to_string())?;
        randomize(&mut gen.params, &mut rng, 0.4);
        gen.set_mode(Mode::Eval);
        let zs = Tensor::randn(vec![8, 3], 1.0, &mut rng);
        let score = condition_number_score(&mut gen, &zs).map_err(|e| e.to_string())?;
        let mut oracle = Vec::new();
        for i in 0..8 {
            let z = zs.row(i).to_vec();
            let fd = fd_jacobian(&mut gen, &z);
            let exact = to_na(&generator_jacobian(&mut gen, &z).map_err(|e| e.to_string())?);
            ensure!(
                (&fd - &exact).norm() <= 1e-5 * exact.norm(),
                "seed {seed}: Jacobian differs from finite differences"
            );
            let sv = fd.singular_values();
            let got = score.per_sample[i];
            if sv.min() < resolution * sv.max() {
                unresolved += 1;
                ensure!(got >= -resolution.ln(), "seed {seed} sample {i}: {got} for a near-singular Jacobian");
                continue;
            }
            let want = (sv.max() / sv.min()).ln();
            oracle.push(want);
            compared += 1;
            worst = worst.max((got - want).abs() / want.abs().max(1e-12));
        }
        if oracle.len() == 8 {
            let want = oracle.iter().sum::<f64>() / 8.0;
            worst = worst.max((score.mean_log_cond - want).abs() / want.abs().max(1e-12));
        }
    }
    ensure!(worst <= 1e-3, "relative gap to the finite-difference SVD oracle {worst:e}");
    ensure!(compared >= 70, "only {compared} of 80 samples within oracle resolution");
    Ok(format!(
        "21 linear maps exact; 10 random generators, {compared} samples worst relative gap {worst:.1e}, \
         {unresolved} near-singular samples flagged"
    ))
}

// ----- 5: spectral normalization ------------------------------------------

fn criterion_spectral_norm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(2..16), rng.random_range(2..16));
        let w = Tensor::randn(vec![m, n], rng.random_range(0.1..10.0), &mut rng);
        let mut st = SpectralNormState::new(m, 30, &mut rng);
        let sn = spectral_normalize(&w, &mut st).map_err(|e| e.to_string())?;
        let s = to_na(&sn).singular_values().max();
        lo = lo.min(s);
        hi = hi.max(s);
    }
    ensure!(lo >= 0.99 && hi <= 1.01, "spectral norms in [{lo}, {hi}]");
    Ok(format!("100 matrices, 30 iterations, spectral norms in [{lo:.4}, {hi:.4}]"))
}

// ----- 6: precision and recall --------------------------------------------

fn criterion_prd() -> Outcome {
    let data = ring().build(61).map_err(|e| e.to_string())?;
    let real = data.test_samples.clone();
    let cfg = PrdConfig::default();
    let same = prd_curve(&real, &real, cfg).map_err(|e| e.to_string())?;
    ensure!(
        (same.f8 - 1.0).abs() <= 1e-9 && (same.f_inv8 - 1.0).abs() <= 1e-9,
        "identical sets: F8 {} F1/8 {}",
        same.f8,
        same.f_inv8
    );
    let far = real.map(|x| x + 100.0);
    let apart = prd_curve(&real, &far, cfg).map_err(|e| e.to_string())?;
    ensure!(
        apart.f8 <= 0.05 && apart.f_inv8 <= 0.05,
        "disjoint sets: F8 {} F1/8 {}",
        apart.f8,
        apart.f_inv8
    );

    // P = [.5, .5, 0], Q = [.5, 0, .5]: precision .5·min(λ, 1), recall .5·min(1, 1/λ).
    let angles = 1001;
    let r = prd_from_histograms(&[0.5, 0.5, 0.0], &[0.5, 0.0, 0.5], angles).map_err(|e| e.to_string())?;
    let slopes = prd_slopes(angles);
    ensure!(r.slopes == slopes, "curve slopes differ from the angular grid");
    let mut worst = 0.0f64;
    for (i, &l) in slopes.iter().enumerate() {
        let theta = l.atan();
        let expected_theta = 1e-10 + i as f64 / (angles - 1) as f64 * (std::f64::consts::FRAC_PI_2 - 2e-10);
        ensure!((theta - expected_theta).abs() <= 1e-12, "angle {i} off the uniform grid");
        worst = worst
            .max((r.precision[i] - 0.5 * l.min(1.0)).abs())
            .max((r.recall[i] - 0.5 * (1.0 / l).min(1.0)).abs());
    }
    let f = |b: f64| {
        (0..angles)
            .map(|i| {
                let (p, rc) = (0.5 * slopes[i].min(1.0), 0.5 * (1.0 / slopes[i]).min(1.0));
                (1.0 + b * b) * p * rc / (b * b * p + rc)
            })
            .fold(0.0, f64::max)
    };
    worst = worst.max((r.f8 - f(8.0)).abs()).max((r.f_inv8 - f(0.125)).abs());
    ensure!(worst <= 1e-10, "hand histogram gap {worst:e}");
    Ok(format!(
        "identical F8 {:.6}; disjoint F8 {:.4} F1/8 {:.4}; hand histogram gap {worst:.1e}",
        same.f8, apart.f8, apart.f_inv8
    ))
}

// ----- 7: training efficacy -----------------------------------------------

fn criterion_training() -> Outcome {
    let ev = identity_evaluator(16, 1000, 8, None);
    let mut lines = Vec::new();
    let mut good = 0;
    for seed in 0..5 {
        let cfg = GanConfig {
            arch: ArchSpec::mlp(16, 64, 2, 2).with_modulation(ModulationSpec::new(ModulationKind::SelfMod)),
            train: TrainConfig {
                loss: LossKind::Hinge,
                lipschitz: Lipschitz::Spectral,
                total_steps: 2000,
                eval_every: 250,
                eval_samples: 1000,
                cond_batch: 8,
                seed,
                ..TrainConfig::default()
            },
            projection: false,
        };
        let rec = run_experiment(&cfg, &ring(), &ev).map_err(|e| e.to_string())?;
        let ratio = match (&rec.init, rec.best_fid) {
            (Some(init), Some(best)) if rec.is_ok() => best / init.fid,
            _ => f64::INFINITY,
        };
        if ratio <= 0.2 {
            good += 1;
        }
        lines.push(format!("seed {seed} {:?} ratio {ratio:.4}", rec.status));
    }
    ensure!(good >= 4, "{good}/5 seeds reached 1/5 of the initial FID: {}", lines.join("; "));
    Ok(format!("{good}/5 seeds: {}", lines.join("; ")))
}

// ----- 8: grid pipeline ---------------------------------------------------

fn median_by_sort(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn counts_add_up(c: &PolicyCounts) -> bool {
    c.wins + c.ties + c.losses == c.settings
}

fn criterion_grid() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let template = GanConfig {
        arch: ArchSpec::mlp(16, 32, 2, 2),
        train: TrainConfig {
            total_steps: 300,
            eval_every: 100,
            eval_samples: 500,
            cond_batch: 8,
            ..TrainConfig::default()
        },
        projection: false,
    };
    let optimizers: Vec<OptimizerSetting> =
        ["0:0.9:1", "0:0.9:2", "0.5:0.999:1"].iter().map(|s| s.parse().unwrap()).collect();
    let grid = GridSpec {
        losses: vec![LossKind::Hinge, LossKind::Ns],
        archs: vec![Family::Mlp],
        lipschitz: vec![Lipschitz::Spectral],
        optimizers,
        conditionings: vec![Conditioning::Baseline, Conditioning::SelfMod],
        seeds: vec![0, 1, 2],
        template,
    };
    ensure!(grid.run_count() == 36, "grid has {} runs", grid.run_count());
    let prd = PrdConfig {
        num_runs: 2,
        num_angles: 201,
        ..PrdConfig::default()
    };
    let ev = identity_evaluator(16, 500, 8, Some(prd));
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let out = run_grid(&grid, &ring(), &ev, "acceptance", dir.path(), threads).map_err(|e| e.to_string())?;
    ensure!(
        out.records.len() + out.missing.len() == 36 && out.missing.is_empty(),
        "{} records, {} missing",
        out.records.len(),
        out.missing.len()
    );
    let rep = emit_reports(&out.records, out.missing.clone(), &dir.path().join("reports")).map_err(|e| e.to_string())?;
    let rows = read_csv(&dir.path().join("reports/report.csv")).map_err(|e| e.to_string())?;
    ensure!(rep.records == 36 && rows.len() == 36, "report has {} records, csv {} rows", rep.records, rows.len());

    let paired = paired_compare(&out.records).map_err(|e| e.to_string())?;
    ensure!(paired == rep.paired, "paired report differs from the aggregate");
    ensure!(paired.unmatched.is_empty(), "unmatched settings {:?}", paired.unmatched);
    ensure!(paired.sentinel.settings == 6, "{} paired settings", paired.sentinel.settings);
    ensure!(counts_add_up(&paired.sentinel), "sentinel counts {:?}", paired.sentinel);
    ensure!(counts_add_up(&paired.ok_median), "ok-median counts {:?}", paired.ok_median);
    ensure!(
        paired.ok_median.settings + paired.ok_median_excluded.len() == paired.sentinel.settings,
        "ok-median settings plus exclusions do not cover all settings"
    );

    // Independent recomputation of the unpaired minima.
    let mut groups: BTreeMap<(String, &str), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &out.records {
        let t = &r.config.train;
        let arm = if r.config.arch.modulation.kind == ModulationKind::None { "baseline" } else { "self" };
        let opt = format!("{}:{}:{}", t.beta1, t.beta2, t.disc_iters);
        let fids = groups.entry((format!("{:?}", t.loss), arm)).or_default().entry(opt).or_default();
        if r.is_ok() {
            fids.extend(r.best_fid);
        }
    }
    let unpaired = unpaired_compare(&out.records).map_err(|e| e.to_string())?;
    ensure!(unpaired.len() == 2, "{} unpaired rows", unpaired.len());
    for row in &unpaired {
        for (c, arm) in [(Conditioning::Baseline, "baseline"), (Conditioning::SelfMod, "self")] {
            let want = groups[&(format!("{:?}", row.loss), arm)]
                .values()
                .filter(|v| !v.is_empty())
                .map(|v| median_by_sort(v.clone()))
                .fold(f64::INFINITY, f64::min);
            let got = row.arm(c).map_or(f64::INFINITY, |a| a.fid);
            ensure!(got == want, "{:?} {arm}: minimum {got} vs recomputed {want}", row.loss);
        }
    }
    Ok(format!(
        "36 records, 6 paired settings ({}), unpaired minima recomputed for {} groups",
        paired.sentinel.summary(),
        unpaired.len()
    ))
}

// ----- 9: report fixtures -------------------------------------------------

fn table_cell(loss: LossKind, arch: Family, lip: Lipschitz, opt: &str, c: Conditioning) -> Cell {
    Cell {
        loss,
        arch,
        lipschitz: lip,
        optimizer: opt.parse().unwrap(),
        conditioning: c,
    }
}

/// Five seeds whose median is `m`, spread asymmetrically.
fn seeds_around(cell: &Cell, m: f64) -> Vec<RunRecord> {
    [m - 0.4, m - 0.1, m, m + 0.3, m + 2.0]
        .iter()
        .enumerate()
        .map(|(s, &f)| fixture::record(cell, s as u64, Some(f)))
        .collect()
}

fn criterion_fixtures() -> Outcome {
    // CIFAR10 resnet FIDs: (loss, lipschitz, self-mod, baseline, published reduction).
    let table = [
        (LossKind::Hinge, Lipschitz::GradientPenalty { lambda: 10.0 }, 26.93, 28.14, "4.30"),
        (LossKind::Ns, Lipschitz::GradientPenalty { lambda: 10.0 }, 26.74, 28.61, "6.51"),
        (LossKind::Hinge, Lipschitz::Spectral, 18.54, 20.08, "7.67"),
        (LossKind::Ns, Lipschitz::Spectral, 20.63, 23.81, "13.36"),
    ];
    let mut records = Vec::new();
    for (loss, lip, sm, base, _) in &table {
        for (c, fid) in [(Conditioning::SelfMod, *sm), (Conditioning::Baseline, *base)] {
            records.extend(seeds_around(&table_cell(*loss, Family::ResnetLike, *lip, "0:0.9:1", c), fid));
            // Worse settings that the minimum must skip.
            records.extend(seeds_around(&table_cell(*loss, Family::ResnetLike, *lip, "0.5:0.999:1", c), fid + 3.0));
            if let Lipschitz::GradientPenalty { .. } = lip {
                let gp1 = Lipschitz::GradientPenalty { lambda: 1.0 };
                records.extend(seeds_around(&table_cell(*loss, Family::ResnetLike, gp1, "0:0.9:2", c), fid + 1.0));
            }
        }
    }
    let rows = unpaired_compare(&records).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut mismatched = Vec::new();
    for (loss, lip, _, _, published) in &table {
        let family = if matches!(lip, Lipschitz::Spectral) { "sn" } else { "gp" };
        let row = rows
            .iter()
            .find(|r| r.loss == *loss && r.lipschitz == family)
            .ok_or_else(|| format!("no row for {loss:?}-{family}"))?;
        let got = format!("{:.2}", row.reduction_percent.unwrap_or(f64::NAN));
        lines.push(format!("{}-{family} {got} (published {published})", loss.as_str()));
        if got != *published {
            mismatched.push(format!("{}-{family}", loss.as_str()));
        }
    }

    // 144 paired settings: 36 per dataset over four datasets, 124 wins.
    let cells = GridSpec {
        losses: vec![LossKind::Hinge, LossKind::Ns],
        archs: vec![Family::ResnetLike, Family::DcganLike],
        lipschitz: vec![
            Lipschitz::Spectral,
            Lipschitz::GradientPenalty { lambda: 1.0 },
            Lipschitz::GradientPenalty { lambda: 10.0 },
        ],
        optimizers: ["0:0.9:1", "0:0.9:2", "0.5:0.999:1"].iter().map(|s| s.parse().unwrap()).collect(),
        conditionings: vec![Conditioning::Baseline, Conditioning::SelfMod],
        seeds: vec![0, 1, 2],
        template: fixture::template(),
    }
    .cells();
    let (mut wins, mut settings) = (0, 0);
    for dataset in 0..4 {
        let mut recs = Vec::new();
        let mut setting_index: BTreeMap<String, usize> = BTreeMap::new();
        for cell in &cells {
            let next = setting_index.len();
            let i = *setting_index.entry(cell.setting()).or_insert(next);
            let self_wins = i < 31;
            let base_fid = 30.0 + i as f64 + dataset as f64;
            for seed in 0..3 {
                let fid = match (cell.conditioning, self_wins) {
                    (Conditioning::Baseline, _) => Some(base_fid + seed as f64),
                    (Conditioning::SelfMod, true) => Some(base_fid - 1.0 + seed as f64),
                    // One losing setting per dataset has a fully diverged self-mod arm.
                    (Conditioning::SelfMod, false) if i == 35 => None,
                    (Conditioning::SelfMod, false) => Some(base_fid + 1.0 + seed as f64),
                };
                recs.push(fixture::record(cell, seed, fid));
            }
        }
        let rep = paired_compare(&recs).map_err(|e| e.to_string())?;
        ensure!(counts_add_up(&rep.sentinel), "dataset {dataset}: counts {:?}", rep.sentinel);
        wins += rep.sentinel.wins;
        settings += rep.sentinel.settings;
    }
    let rate = (100.0 * wins as f64 / settings as f64).round();
    ensure!(
        wins == 124 && settings == 144 && rate == 86.0,
        "win rate {wins}/{settings} ({rate}%)"
    );
    lines.push(format!("paired {wins}/{settings} ({rate}%)"));
    ensure!(
        mismatched.is_empty(),
        "reductions differ from the published table for {}: {}",
        mismatched.join(", "),
        lines.join("; ")
    );
    Ok(lines.join("; "))
}

// ----- 10: determinism ----------------------------------------------------

fn criterion_determinism() -> Outcome {
    let prd = PrdConfig {
        num_runs: 2,
        num_angles: 201,
        ..PrdConfig::default()
    };
    let ev = identity_evaluator(8, 300, 4, Some(prd));
    let configs = [
        (ModulationKind::SelfMod, LossKind::Hinge, Lipschitz::Spectral),
        (ModulationKind::None, LossKind::Ns, Lipschitz::GradientPenalty { lambda: 10.0 }),
    ];
    for (kind, loss, lipschitz) in configs {
        let cfg = GanConfig {
            arch: ArchSpec::mlp(8, 32, 2, 2).with_modulation(ModulationSpec::new(kind)),
            train: TrainConfig {
                loss,
                lipschitz,
                total_steps: 200,
                eval_every: 50,
                eval_samples: 300,
                cond_batch: 4,
                seed: 7,
                ..TrainConfig::default()
            },
            projection: false,
        };
        let run = || serde_json::to_vec(&run_experiment(&cfg, &ring(), &ev).unwrap()).unwrap();
        let (a, b) = (run(), run());
        ensure!(a == b, "{kind:?}/{loss:?}: record JSON differs between repeats");
    }
    Ok("2 configurations repeated, record JSON byte-identical".into())
}

// ----- runner -------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient integrity", criterion_gradients),
        (2, "reduction identity", criterion_reduction),
        (3, "FID analytic suite", criterion_fid),
        (4, "condition-number oracle", criterion_condition_number),
        (5, "spectral norm", criterion_spectral_norm),
        (6, "PRD suite", criterion_prd),
        (7, "desk-scale training efficacy", criterion_training),
        (8, "methodology pipeline", criterion_grid),
        (9, "report fidelity fixtures", criterion_fixtures),
        (10, "determinism", criterion_determinism),
    ];
    // `ACCEPTANCE_ONLY=4,9` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                println!("FAIL criterion {n} ({name}, {secs:.1}s): {detail}");
                match KNOWN_UNATTAINABLE.iter().find(|(k, _)| *k == n) {
                    Some((_, why)) => println!("     known unattainable: {why}"),
                    None => unexpected.push(n),
                }
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
