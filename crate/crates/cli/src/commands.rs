use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nsmpp_core::checkpoint::{Checkpoint, CheckpointError};
use nsmpp_core::evaluator::{evaluate, export_figure_data, EvalGrid};
use nsmpp_core::io::{read_dataset, write_dataset, IoError};
use nsmpp_core::kernel::{mean_offspring, BasisKernel, CosineBasis, KernelError, KernelFamily, KernelModel, SpectralKernel};
use nsmpp_core::likelihood::MCIntegralConfig;
use nsmpp_core::net::NetSpec;
use nsmpp_core::rng::derive_seed;
use nsmpp_core::simulator::{simulate_dataset, SimConfig, SimError, SimStatus};
use nsmpp_core::trainer::{split_holdout, train_with_hook, TrainConfig, TrainError, TrainOutcome, TrainTrace};
use nsmpp_core::{Dataset, Domain};
use serde::Serialize;

use crate::config::{EvalSplit, Family, ModelSection, RunConfig, CONFIG_NAME};
use crate::CliError;

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_JSON: &str = "dataset.json";
pub const TRUE_MODEL: &str = "true_model.ckpt";
pub const MODEL: &str = "model.ckpt";
pub const LAST: &str = "last.ckpt";
pub const TRACE: &str = "trace.csv";
pub const EVAL_REPORT: &str = "eval.json";
pub const FIGURES: &str = "figures";

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Usage(format!("model: {e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Command::Simulate, Command::Train, Command::Eval].into_iter().find(|c| c.name() == s)
    }
}

/// Named seeds derived from the master seed, written to `seeds.json`.
#[derive(Debug, Serialize)]
struct Seeds {
    master: u64,
    simulation: u64,
    generator: u64,
    init: u64,
    train_mc: u64,
    holdout_mc: u64,
    eval_mc: u64,
}

impl Seeds {
    fn of(seed: u64) -> Self {
        let train = train_config(&RunConfig { seed, ..RunConfig::default() });
        Self {
            master: seed,
            simulation: seed,
            generator: derive_seed(seed, "generator", &[]),
            init: derive_seed(seed, "init", &[]),
            train_mc: train.mc.seed,
            holdout_mc: train.holdout_mc().seed,
            eval_mc: derive_seed(seed, "eval-mc", &[]),
        }
    }
}

pub fn out_dir(cfg: &RunConfig, cmd: Command) -> PathBuf {
    cfg.io.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("nsmpp-{}", cmd.name())))
}

/// Makes every input path absolute and records the command, so the config
/// written into a run directory can be replayed from anywhere.
pub fn resolve_paths(cfg: &mut RunConfig, cmd: Command) -> Result<(), CliError> {
    cfg.command = Some(cmd.name().to_string());
    for p in [&mut cfg.io.data, &mut cfg.io.checkpoint, &mut cfg.io.true_model].into_iter().flatten() {
        *p = fs::canonicalize(&*p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, cmd: Command, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut resolved = cfg.clone();
    resolved.io.out_dir = None;
    let text = toml::to_string(&resolved).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    write_file(&out.join(CONFIG_NAME), text.as_bytes())?;
    write_json(&out.join("seeds.json"), &Seeds::of(cfg.seed))?;
    match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::Train => train(cfg, out),
        Command::Eval => eval(cfg, out),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn domain(cfg: &RunConfig) -> Result<Domain, CliError> {
    let d = &cfg.domain;
    Domain::new(d.horizon, d.mark_lo.clone(), d.mark_hi.clone()).map_err(|e| CliError::Usage(format!("domain: {e}")))
}

/// A fresh model of the configured family. Spectral nets are initialized from `seed`.
pub fn build_model(m: &ModelSection, domain: &Domain, seed: u64) -> Result<KernelModel, CliError> {
    let model = match m.family {
        Family::Exp => KernelModel::exponential(m.alpha, m.beta)?,
        Family::Spectral => {
            let spec = NetSpec::for_domain(domain, m.rank)
                .with_trunk(m.trunk.clone())
                .with_branch_hidden(m.branch_hidden.clone())
                .with_output_scale(m.output_scale);
            spec.validate().map_err(|e| CliError::Usage(format!("model: {e}")))?;
            let nu = m.nu_init.unwrap_or_else(|| SpectralKernel::nu_for_branching(domain, &spec, m.branching));
            KernelModel::spectral(SpectralKernel::from_seed_with_gain(spec, seed, nu, m.gain)?)
        }
        Family::Basis => {
            if m.basis_size == 0 {
                return Err(CliError::Usage("model: basis_size must be at least 1".into()));
            }
            let basis = CosineBasis::new(domain, m.basis_size);
            let s = basis.size();
            KernelModel::basis(BasisKernel::dense(basis, vec![0.0; s * s])?)
        }
    };
    Ok(model.with_mu(m.mu)?.with_trainable_mu(m.mu_trainable)?)
}

#[derive(Serialize)]
struct SimSidecar<'a> {
    seed: u64,
    n_sequences: usize,
    max_events: usize,
    domain: &'a crate::config::DomainSection,
    model: ModelSummary,
    total_events: usize,
    mean_length: f64,
    exploded: usize,
    statuses: &'a [SimStatus],
}

#[derive(Serialize)]
struct ModelSummary {
    family: &'static str,
    shape: String,
    mu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nu: Option<Vec<f64>>,
    kernel_sup_bound: f64,
}

impl ModelSummary {
    fn of(m: &KernelModel) -> Self {
        let (alpha, beta) = match m.family() {
            KernelFamily::Exponential(k) => (Some(k.alpha), Some(k.beta)),
            _ => (None, None),
        };
        Self {
            family: m.family().name(),
            shape: nsmpp_core::checkpoint::shape(m),
            mu: m.mu(),
            alpha,
            beta,
            nu: m.spectrum(),
            kernel_sup_bound: m.kernel_sup_bound(),
        }
    }
}

/// Quadrature cells per axis for generator calibration, about 2000 points in all.
fn calibration_nodes(domain: &Domain) -> usize {
    (2000f64.powf(1.0 / domain.point_dim() as f64).floor() as usize).max(2)
}

/// A seeded spectral generator whose spectrum is scaled to the configured branching ratio.
fn spectral_generator(m: &ModelSection, domain: &Domain, seed: u64) -> Result<KernelModel, CliError> {
    let probe = build_model(m, domain, seed)?;
    if m.nu_init.is_some() {
        return Ok(probe);
    }
    let offspring = mean_offspring(&probe, domain, calibration_nodes(domain));
    if !(offspring > 0.0 && offspring.is_finite()) {
        return Err(CliError::Numeric(format!(
            "generator kernel is numerically zero (mean offspring {offspring}); try another seed or a smaller model.gain"
        )));
    }
    let KernelFamily::Spectral(k) = probe.family() else { unreachable!("built as spectral") };
    let nu = k.spectrum()[0] * m.branching / offspring;
    build_model(&ModelSection { nu_init: Some(nu), ..m.clone() }, domain, seed)
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let domain = domain(cfg)?;
    let seed = derive_seed(cfg.seed, "generator", &[]);
    let model = match cfg.model.family {
        Family::Spectral => spectral_generator(&cfg.model, &domain, seed)?,
        _ => build_model(&cfg.model, &domain, seed)?,
    };
    if cfg.sim.n == 0 || cfg.sim.max_events == 0 {
        return Err(CliError::Usage("sim.n and sim.max_events must be at least 1".into()));
    }
    let sim_cfg = SimConfig::new(model.clone(), domain, cfg.seed).with_max_events(cfg.sim.max_events);
    let sim = simulate_dataset(&sim_cfg, cfg.sim.n).map_err(|e| match e {
        SimError::BoundViolation { .. } | SimError::NonFinite { .. } => CliError::Numeric(format!("simulation: {e}")),
    })?;
    let ds = &sim.dataset;
    write_dataset(ds, &out.join(DATASET_CSV))?;
    write_dataset(ds, &out.join(DATASET_JSON))?;
    Checkpoint::new(model.clone()).save(&out.join(TRUE_MODEL))?;
    let total = ds.total_events();
    write_json(
        &out.join("sim.json"),
        &SimSidecar {
            seed: cfg.seed,
            n_sequences: ds.len(),
            max_events: cfg.sim.max_events,
            domain: &cfg.domain,
            model: ModelSummary::of(&model),
            total_events: total,
            mean_length: total as f64 / ds.len() as f64,
            exploded: sim.exploded(),
            statuses: &sim.statuses,
        },
    )?;
    println!("simulated {} sequences, {} events (mean length {:.2})", ds.len(), total, total as f64 / ds.len() as f64);
    if sim.exploded() > 0 {
        warn!("{} of {} sequences hit max_events = {} (explosive regime)", sim.exploded(), ds.len(), cfg.sim.max_events);
        println!("exploded: {} sequences reached max_events", sim.exploded());
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg.io.data.as_ref().ok_or_else(|| CliError::Usage("no data file (use --data or io.data)".into()))?;
    let domain = domain(cfg)?;
    Ok(read_dataset(path, Some(&domain))?)
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        learning_rate: t.learning_rate,
        batch_size: t.batch_size,
        iterations: t.iterations,
        mc: MCIntegralConfig {
            n_samples: t.mc_samples,
            seed: derive_seed(cfg.seed, "train-mc", &[]),
            resample_each_step: t.resample_each_step,
        },
        seed: cfg.seed,
        eval_every: t.eval_every,
        checkpoint_every: t.checkpoint_every,
        eval_holdout_fraction: t.holdout_fraction,
        grad_clip: t.grad_clip,
        adam_beta1: t.adam_beta1,
        adam_beta2: t.adam_beta2,
        adam_eps: t.adam_eps,
    }
}

fn write_trace(trace: &TrainTrace, out: &Path) -> Result<(), CliError> {
    let path = out.join(TRACE);
    let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    trace.write_csv(BufWriter::new(f)).map_err(|e| io_err(&path, e))?;
    if trace.records.first().is_some_and(|r| r.nu.is_some()) {
        let path = out.join("nu.csv");
        let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_err(&path, e))?);
        let r = trace.records[0].nu.as_ref().map_or(0, Vec::len);
        let header: Vec<String> = std::iter::once("iter".to_string()).chain((1..=r).map(|i| format!("nu_{i}"))).collect();
        let mut text = header.join(",") + "\n";
        for rec in &trace.records {
            let nu = rec.nu.as_deref().unwrap_or_default();
            text += &std::iter::once(rec.iter.to_string()).chain(nu.iter().map(f64::to_string)).collect::<Vec<_>>().join(",");
            text.push('\n');
        }
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    n_train: usize,
    n_holdout: usize,
    holdout: Vec<usize>,
    initial_holdout_ll: Option<f64>,
    best_iteration: usize,
    best_holdout_ll: Option<f64>,
    final_batch_ll: f64,
    model: ModelSummary,
    last: ModelSummary,
}

fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let model = build_model(&cfg.model, ds.domain(), derive_seed(cfg.seed, "init", &[]))?;
    let tc = train_config(cfg);
    let progress = out.join("progress.ckpt");
    let mut hook_err = None;
    let result = train_with_hook(model, &ds, &tc, |p| {
        let c = Checkpoint { model: p.model.clone(), optimizer: Some(p.optimizer.clone()) };
        if let Err(e) = c.save(&progress) {
            hook_err.get_or_insert(e);
        }
    });
    if let Some(e) = hook_err {
        return Err(e.into());
    }
    let TrainOutcome { model, last, optimizer, trace, split, best_iteration, best_holdout_ll } = match result {
        Ok(o) => o,
        Err(TrainError::NonFinite { iteration, what, last_finite, trace }) => {
            let path = out.join("last_finite.ckpt");
            Checkpoint::new(*last_finite).save(&path)?;
            write_trace(&trace, out)?;
            return Err(CliError::Numeric(format!(
                "non-finite {what} at iteration {iteration}; last finite parameters saved to {}",
                path.display()
            )));
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    Checkpoint::new(model.clone()).save(&out.join(MODEL))?;
    Checkpoint { model: last.clone(), optimizer: Some(optimizer) }.save(&out.join(LAST))?;
    write_trace(&trace, out)?;
    let summary = TrainSummary {
        iterations: trace.len(),
        n_train: split.train.len(),
        n_holdout: split.holdout.len(),
        holdout: split.holdout.clone(),
        initial_holdout_ll: trace.initial_holdout_ll,
        best_iteration,
        best_holdout_ll,
        final_batch_ll: trace.records.last().map_or(f64::NAN, |r| r.batch_ll),
        model: ModelSummary::of(&model),
        last: ModelSummary::of(&last),
    };
    write_json(&out.join("train.json"), &summary)?;
    info!("trained {} iterations on {} sequences", trace.len(), split.train.len());
    if let KernelFamily::Exponential(k) = model.family() {
        println!("fitted alpha = {}, beta = {}", k.alpha, k.beta);
    }
    match best_holdout_ll {
        Some(ll) => println!("holdout log-likelihood: {ll} (best iteration {best_iteration} of {})", trace.len()),
        None => println!("no holdout split; kept the last iterate"),
    }
    Ok(())
}

fn load_model(path: &Path, domain: &Domain) -> Result<KernelModel, CliError> {
    let m = Checkpoint::load(path)?.model;
    nsmpp_core::evaluator::check_model_domain("checkpoint", &m, domain)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(m)
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_data(cfg)?;
    let ckpt = cfg.io.checkpoint.as_ref().ok_or_else(|| CliError::Usage("no fitted model (use --checkpoint or io.checkpoint)".into()))?;
    let fitted = load_model(ckpt, ds.domain())?;
    let true_model = cfg.io.true_model.as_ref().map(|p| load_model(p, ds.domain())).transpose()?;
    let test = match cfg.eval.split {
        EvalSplit::All => ds,
        EvalSplit::Holdout => {
            let s = split_holdout(ds.len(), cfg.train.holdout_fraction, cfg.seed);
            if s.holdout.is_empty() {
                return Err(CliError::Usage("holdout split is empty".into()));
            }
            ds.subset(&s.holdout)
        }
    };
    let grid = EvalGrid { time_nodes: cfg.eval.time_nodes, mark_nodes: cfg.eval.mark_nodes };
    let mc = MCIntegralConfig {
        n_samples: cfg.eval.mc_samples,
        seed: derive_seed(cfg.seed, "eval-mc", &[]),
        resample_each_step: false,
    };
    if mc.n_samples == 0 {
        return Err(CliError::Usage("eval.mc_samples must be at least 1".into()));
    }
    let report = evaluate(&fitted, true_model.as_ref(), &test, &grid, &mc).map_err(|e| CliError::Data(e.to_string()))?;
    write_json(&out.join(EVAL_REPORT), &report)?;
    println!("predictive log-likelihood: {}", report.predictive_ll);
    if let Some(mae) = report.mae {
        println!("intensity MAE: {mae}");
    }
    if cfg.eval.export_figures {
        let mut models = vec![("fitted", &fitted)];
        if let Some(t) = &true_model {
            models.push(("true", t));
        }
        let manifest = export_figure_data(&models, &test, &cfg.eval.figures, &out.join(FIGURES))
            .map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote {} figure files to {}", manifest.files.len(), out.join(FIGURES).display());
    }
    Ok(())
}
