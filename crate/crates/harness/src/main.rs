use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use selfmod::architectures::{build_discriminator, build_generator, Generator};
use selfmod::modulation::Mode;
use selfmod::train::{train_gan, Lipschitz, MetricsHook};
use selfmod_harness::ablation::{layer_ablation, write_ablation};
use selfmod_harness::config::Config;
use selfmod_harness::grid::{collect_grid, run_grid};
use selfmod_harness::report::emit_reports;

#[derive(Parser)]
#[command(name = "selfmod", about = "Self-modulated GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides in `--key=value` form.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }

    fn has_override(&self, key: &str) -> bool {
        let prefix = format!("--{key}=");
        self.overrides.iter().any(|o| o.starts_with(&prefix))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration; `--seed=N` is required.
    Train(Common),
    /// Run every cell and seed of the grid, then write reports.
    Grid(Common),
    /// Run the all-layers and single-layer modulation masks.
    Ablate(Common),
    /// Re-aggregate the records of a grid already on disk.
    Report(Common),
    /// Evaluate a saved generator.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn train(args: &Common) -> Result<()> {
    if !args.has_override("seed") {
        bail!("train needs --seed=N");
    }
    let cfg = args.load()?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let spec = cfg.dataset()?;
    let gan = cfg.gan(&spec.build(cfg.get("eval_seed")?)?)?;
    let seed = gan.train.seed;
    let evaluator = cfg.evaluator()?;
    let mut data = spec.build(seed)?;
    let mut gen = build_generator(&gan.arch, seed)?;
    let spectral = matches!(gan.train.lipschitz, Lipschitz::Spectral);
    let mut disc = build_discriminator(&gan.arch, gan.projection, spectral, seed)?;
    let record = train_gan(&mut gen, &mut disc, &mut data, &gan.train, &evaluator)?;
    gen.set_mode(Mode::Eval);
    write_json(&out.join("record.json"), &record)?;
    write_json(&out.join("model.json"), &gen)?;
    println!(
        "status {:?}; best FID {:?} at step {:?}; records in {}",
        record.status,
        record.best_fid,
        record.best_step,
        out.display()
    );
    Ok(())
}

fn grid(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let out = cfg.out_dir();
    let grid = cfg.grid()?;
    let evaluator = cfg.evaluator()?;
    eprintln!("{} runs on {} threads", grid.run_count(), cfg.threads()?);
    let outcome = run_grid(&grid, &cfg.dataset()?, &evaluator, &cfg.evaluation_key()?, &out, cfg.threads()?)?;
    eprintln!("trained {}, loaded {}", outcome.trained, outcome.records.len() - outcome.trained);
    for m in &outcome.missing {
        eprintln!("missing {} seed {}: {}", m.label, m.seed, m.reason);
    }
    if outcome.records.is_empty() {
        bail!("no run produced a record");
    }
    let rep = emit_reports(&outcome.records, outcome.missing, &out.join("reports"))?;
    println!("paired (diverged = +inf): {}", rep.paired.sentinel.summary());
    println!("paired (ok runs only):    {}", rep.paired.ok_median.summary());
    Ok(())
}

fn report(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let out = cfg.out_dir();
    let outcome = collect_grid(&cfg.grid()?, &cfg.dataset()?, &cfg.evaluation_key()?, &out)?;
    if outcome.records.is_empty() {
        bail!("no records under {}", out.display());
    }
    let rep = emit_reports(&outcome.records, outcome.missing, &out.join("reports"))?;
    println!(
        "{} records ({} missing); paired {}",
        rep.records,
        rep.missing.len(),
        rep.paired.sentinel.summary()
    );
    Ok(())
}

fn ablate(args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let out = cfg.out_dir();
    let spec = cfg.dataset()?;
    let base = cfg.gan(&spec.build(cfg.get("eval_seed")?)?)?;
    let seeds: Vec<u64> = cfg
        .get::<String>("seeds")?
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .context("seeds")?;
    let evaluator = cfg.evaluator()?;
    let rep = layer_ablation(&base, &seeds, &spec, &evaluator, &cfg.evaluation_key()?, &out, cfg.threads()?)?;
    write_ablation(&rep, &out.join("reports"))?;
    for r in &rep.rows {
        println!("{:<8} median {:?} sem {:?} ({} ok)", r.mask, r.median, r.sem, r.ok_runs);
    }
    Ok(())
}

fn metrics(model: &PathBuf, args: &Common) -> Result<()> {
    let cfg = args.load()?;
    let bytes = std::fs::read(model).with_context(|| format!("reading {}", model.display()))?;
    let mut gen: Generator = serde_json::from_slice(&bytes)?;
    let evaluator = cfg.evaluator()?;
    let point = evaluator.evaluate(&mut gen, 0)?;
    let prd = evaluator.precision_recall(&mut gen)?;
    println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "eval": point, "prd": prd }))?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Grid(a) => grid(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::Metrics { model, common } => metrics(model, common),
    }
}
