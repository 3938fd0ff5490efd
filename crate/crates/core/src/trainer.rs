//! Minibatch stochastic-gradient ascent on the log-likelihood.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Dataset;
use crate::kernel::KernelModel;
use crate::likelihood::{log_likelihood_at_step, log_likelihood_grad, MCIntegralConfig};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mc: MCIntegralConfig,
    pub seed: u64,
    /// Holdout evaluation period in iterations; the last iteration is always evaluated.
    pub eval_every: usize,
    /// Checkpoint hook period in iterations, 0 for none.
    pub checkpoint_every: usize,
    pub eval_holdout_fraction: f64,
    /// Gradient norm clip, `f64::INFINITY` to disable.
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            iterations: 1000,
            mc: MCIntegralConfig::default(),
            seed: 0,
            eval_every: 50,
            checkpoint_every: 0,
            eval_holdout_fraction: 0.2,
            grad_clip: 100.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.mc.n_samples == 0 {
            return bad("MC sample count must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.eval_holdout_fraction) {
            return bad("holdout fraction must lie in [0, 1)");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    /// Fixed MC samples for holdout scoring, shared by every evaluation.
    pub fn holdout_mc(&self) -> MCIntegralConfig {
        MCIntegralConfig {
            n_samples: self.mc.n_samples,
            seed: derive_seed(self.seed, "holdout-mc", &[]),
            resample_each_step: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty ({total} sequences, holdout fraction {fraction})")]
    EmptyTrainingSplit { total: usize, fraction: f64 },
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        what: &'static str,
        /// Parameters before the failing step.
        last_finite: Box<KernelModel>,
        trace: TrainTrace,
    },
}

/// Deterministic train/holdout partition of sequence indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Shuffles `0..n` with a seed-derived stream and holds out `round(n·fraction)`.
pub fn split_holdout(n: usize, fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, "split", &[]));
    let k = ((n as f64) * fraction).round() as usize;
    let mut holdout = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    Split { train, holdout }
}

/// Visiting order of the training sequences in one epoch; consecutive
/// chunks of the batch size form the batches, and a short tail is dropped.
pub fn epoch_order(train: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = train.to_vec();
    order.shuffle(&mut derived_rng(seed, "batch", &[epoch]));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub batch_ll: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub holdout_ll: Option<f64>,
    pub secs: f64,
    /// Spectrum after the step (spectral models only).
    pub nu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// Holdout ℓ of the initial parameters.
    pub initial_holdout_ll: Option<f64>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV `iter,batch_ll,grad_norm,holdout_ll,secs`; `holdout_ll` is empty
    /// on iterations without a holdout evaluation.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "batch_ll", "grad_norm", "holdout_ll", "secs"])?;
        for r in &self.records {
            w.write_record([
                r.iter.to_string(),
                r.batch_ll.to_string(),
                r.grad_norm.to_string(),
                r.holdout_ll.map(|v| v.to_string()).unwrap_or_default(),
                format!("{:.6}", r.secs),
            ])?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the best holdout ℓ (the last iterate without a holdout).
    pub model: KernelModel,
    /// Parameters after the final step.
    pub last: KernelModel,
    pub optimizer: Adam,
    pub trace: TrainTrace,
    pub split: Split,
    /// Iteration the returned model comes from (0 for the initial parameters).
    pub best_iteration: usize,
    pub best_holdout_ll: Option<f64>,
}

/// State handed to the checkpoint hook.
pub struct Progress<'a> {
    pub iteration: usize,
    pub model: &'a KernelModel,
    pub optimizer: &'a Adam,
}

pub fn train(model: KernelModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_hook(model, dataset, cfg, |_| {})
}

/// As [`train`], calling `hook` every `checkpoint_every` iterations.
pub fn train_with_hook<F>(
    mut model: KernelModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&Progress<'_>),
{
    cfg.validate()?;
    let split = split_holdout(dataset.len(), cfg.eval_holdout_fraction, cfg.seed);
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrainingSplit { total: dataset.len(), fraction: cfg.eval_holdout_fraction });
    }
    for i in &split.train {
        assert!(split.holdout.binary_search(i).is_err(), "sequence {i} is in both splits");
    }
    let holdout = (!split.holdout.is_empty()).then(|| dataset.subset(&split.holdout));
    let holdout_mc = cfg.holdout_mc();
    let score = |m: &KernelModel| holdout.as_ref().map(|h| log_likelihood_at_step(m, h, &holdout_mc, 0).mean);

    let mut params = model.params();
    let mut adam = Adam::new(cfg.adam(), params.len());
    let mut trace = TrainTrace { records: Vec::with_capacity(cfg.iterations), initial_holdout_ll: score(&model) };
    let mut best = (model.clone(), 0, trace.initial_holdout_ll);
    let batch = cfg.batch_size.min(split.train.len());
    let per_epoch = split.train.len() / batch;
    let mut order = Vec::new();
    let start = Instant::now();

    for it in 1..=cfg.iterations {
        let slot = (it - 1) % per_epoch;
        if slot == 0 {
            order = epoch_order(&split.train, cfg.seed, ((it - 1) / per_epoch) as u64);
        }
        let indices = &order[slot * batch..(slot + 1) * batch];
        let g = log_likelihood_grad(&model, dataset, indices, &cfg.mc, it as u64);
        let ll = g.value.mean;
        let norm = g.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let abort = |what, trace: TrainTrace, model: KernelModel| TrainError::NonFinite {
            iteration: it,
            what,
            last_finite: Box::new(model),
            trace,
        };
        if !ll.is_finite() {
            return Err(abort("log-likelihood", trace, model));
        }
        if !norm.is_finite() {
            return Err(abort("gradient", trace, model));
        }
        let mut grad = g.grad;
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|v| *v *= s);
        }
        let before = model.clone();
        adam.ascend(&mut params, &grad);
        if params.iter().any(|v| !v.is_finite()) {
            return Err(abort("parameters", trace, before));
        }
        model.set_params(&params).expect("parameter length is fixed");
        model.project();
        params = model.params();

        let holdout_ll = if it % cfg.eval_every == 0 || it == cfg.iterations { score(&model) } else { None };
        if let Some(h) = holdout_ll {
            if !h.is_finite() {
                return Err(abort("holdout log-likelihood", trace, before));
            }
            if best.2.is_none_or(|b| h > b) {
                best = (model.clone(), it, Some(h));
            }
        }
        trace.records.push(TraceRecord {
            iter: it,
            batch_ll: ll,
            grad_norm: norm,
            holdout_ll,
            secs: start.elapsed().as_secs_f64(),
            nu: model.spectrum(),
        });
        if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 {
            hook(&Progress { iteration: it, model: &model, optimizer: &adam });
        }
        if it % 100 == 0 {
            log::debug!("iter {it}: batch ll {ll:.4}, |g| {norm:.3e}");
        }
    }

    let (best_model, best_iteration, best_holdout_ll) =
        if holdout.is_some() { best } else { (model.clone(), cfg.iterations, None) };
    Ok(TrainOutcome {
        model: best_model,
        last: model,
        optimizer: adam,
        trace,
        split,
        best_iteration,
        best_holdout_ll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Domain, EventSequence};
    use crate::kernel::{BasisKernel, CosineBasis};
    use crate::simulator::{simulate_dataset, SimConfig};

    fn hawkes_data(n: usize, seed: u64) -> Dataset {
        let cfg = SimConfig::new(KernelModel::exponential(0.5, 1.0).unwrap(), Domain::temporal(50.0).unwrap(), seed);
        simulate_dataset(&cfg, n).unwrap().dataset
    }

    #[test]
    fn split_is_a_partition() {
        let s = split_holdout(103, 0.2, 5);
        assert_eq!(s.holdout.len(), 21);
        let mut all: Vec<usize> = s.train.iter().chain(&s.holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(s, split_holdout(103, 0.2, 5));
        assert_ne!(s, split_holdout(103, 0.2, 6));
    }

    #[test]
    fn single_iteration_gives_single_record() {
        let ds = hawkes_data(10, 1);
        let cfg = TrainConfig { iterations: 1, batch_size: 4, ..TrainConfig::default() };
        let start = KernelModel::exponential(0.2, 2.0).unwrap();
        let out = train(start.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.optimizer.t, 1);
        assert_ne!(out.last.params(), start.params());
        assert!(out.trace.records[0].holdout_ll.is_some());
    }

    #[test]
    fn zero_iterations_rejected() {
        let ds = hawkes_data(5, 1);
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        assert!(matches!(train(KernelModel::homogeneous(1.0).unwrap(), &ds, &cfg), Err(TrainError::Config(_))));
    }

    #[test]
    fn runs_are_deterministic_apart_from_wall_time() {
        let ds = hawkes_data(20, 2);
        let cfg = TrainConfig { iterations: 30, batch_size: 5, eval_every: 10, ..TrainConfig::default() };
        let m = KernelModel::exponential(0.2, 2.0).unwrap();
        let mut a = train(m.clone(), &ds, &cfg).unwrap();
        let mut b = train(m, &ds, &cfg).unwrap();
        for r in a.trace.records.iter_mut().chain(b.trace.records.iter_mut()) {
            r.secs = 0.0;
        }
        assert_eq!(a, b);
    }

    #[test]
    fn epochs_reshuffle_without_replacement() {
        let train: Vec<usize> = (0..40).map(|i| i * 2 + 1).collect();
        let e0 = epoch_order(&train, 3, 0);
        let e1 = epoch_order(&train, 3, 1);
        assert_ne!(e0, e1);
        for e in [e0, e1] {
            let mut s = e.clone();
            s.sort_unstable();
            assert_eq!(s, train);
        }
    }

    #[test]
    fn without_holdout_last_iterate_is_returned() {
        let ds = hawkes_data(12, 4);
        let cfg = TrainConfig { iterations: 5, batch_size: 4, eval_holdout_fraction: 0.0, ..TrainConfig::default() };
        let out = train(KernelModel::exponential(0.2, 2.0).unwrap(), &ds, &cfg).unwrap();
        assert!(out.split.holdout.is_empty());
        assert_eq!(out.best_holdout_ll, None);
        assert_eq!(out.best_iteration, 5);
        assert_eq!(out.model, out.last);
        assert!(out.trace.records.iter().all(|r| r.holdout_ll.is_none()));
    }

    #[test]
    fn diverging_run_aborts_with_last_finite_state() {
        // an absurd learning rate overflows the basis coefficients
        let d = Domain::temporal(10.0).unwrap();
        let ds = hawkes_data(8, 3);
        let short: Vec<EventSequence> = ds
            .sequences()
            .iter()
            .map(|s| EventSequence::new(s.events().iter().filter(|e| e.t < 10.0).cloned().collect(), d.clone()).unwrap())
            .collect();
        let ds = Dataset::new(d.clone(), short).unwrap();
        let m = KernelModel::basis(BasisKernel::dense(CosineBasis::new(&d, 2), vec![0.0; 4]).unwrap());
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 4,
            learning_rate: 1e308,
            grad_clip: f64::INFINITY,
            ..TrainConfig::default()
        };
        match train(m, &ds, &cfg) {
            Err(TrainError::NonFinite { iteration, last_finite, trace, .. }) => {
                assert!(last_finite.params().iter().all(|v| v.is_finite()));
                assert_eq!(trace.len(), iteration - 1);
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
