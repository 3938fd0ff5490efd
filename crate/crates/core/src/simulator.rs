//! Sequence generation by thinning.
//!
//! Candidates are proposed from a homogeneous process whose rate
//! `λ̄ = μ + B·n` (with `B` the kernel's certified sup bound and `n` the
//! number of accepted events so far) dominates the intensity until the next
//! acceptance. A candidate `x` is kept with probability `λ(x) / λ̄`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dataset, Domain, EventPoint, EventSequence};
use crate::kernel::KernelModel;
use crate::par;
use crate::rng::{derive_seed, rng_from};

pub const DEFAULT_MAX_EVENTS: usize = 100_000;

/// Relative slack allowed when checking `λ ≤ λ̄`, for rounding in the sums.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: KernelModel,
    pub domain: Domain,
    pub seed: u64,
    pub max_events: usize,
}

impl SimConfig {
    pub fn new(model: KernelModel, domain: Domain, seed: u64) -> Self {
        Self { model, domain, seed, max_events: DEFAULT_MAX_EVENTS }
    }

    pub fn with_max_events(mut self, max_events: usize) -> Self {
        assert!(max_events >= 1, "max_events must be at least 1");
        self.max_events = max_events;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Complete,
    /// Stopped at `max_events` before reaching the horizon.
    Exploded,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("intensity {lambda} exceeds thinning bound {bound} at t = {t} with {history} events in history")]
    BoundViolation { t: f64, lambda: f64, bound: f64, history: usize },
    #[error("non-finite intensity at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub sequence: EventSequence,
    pub status: SimStatus,
    /// Candidates drawn, accepted or not.
    pub proposals: usize,
}

/// One run seeded with `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutcome, SimError> {
    simulate_seeded(cfg, cfg.seed)
}

fn simulate_seeded(cfg: &SimConfig, seed: u64) -> Result<SimOutcome, SimError> {
    thin(cfg, seed, cfg.model.kernel_sup_bound())
}

fn thin(cfg: &SimConfig, seed: u64, b: f64) -> Result<SimOutcome, SimError> {
    let mut rng = rng_from(seed);
    let domain = &cfg.domain;
    let mu = cfg.model.mu();
    let mark_volume = domain.mark_volume();
    let horizon = domain.horizon();
    let mut state = cfg.model.kernel().history_state();
    let mut events: Vec<EventPoint> = Vec::new();
    let mut status = SimStatus::Complete;
    let mut proposals = 0;
    let mut t = 0.0;
    loop {
        let bound = mu + b * events.len() as f64;
        if bound <= 0.0 {
            break;
        }
        // inverse-CDF draw; 1 - u lies in (0, 1]
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / (bound * mark_volume);
        if t >= horizon {
            break;
        }
        if events.last().is_some_and(|e| t <= e.t) {
            // the step underflowed against an enormous bound
            continue;
        }
        let x = EventPoint::new(t, domain.sample_mark(&mut rng));
        proposals += 1;
        let lambda = mu + state.excitation(&x);
        if !lambda.is_finite() {
            return Err(SimError::NonFinite { t });
        }
        if lambda > bound * (1.0 + BOUND_SLACK) {
            return Err(SimError::BoundViolation { t, lambda, bound, history: events.len() });
        }
        let d: f64 = rng.random();
        if d * bound <= lambda && lambda > 0.0 {
            state.push(&x);
            events.push(x);
            if events.len() >= cfg.max_events {
                status = SimStatus::Exploded;
                break;
            }
        }
    }
    // times come from a strictly increasing cumulative sum inside [0, T)
    let sequence = EventSequence::new_unchecked(events, domain.clone());
    Ok(SimOutcome { sequence, status, proposals })
}

/// Seed of sequence `index` in a dataset generated from `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "sim", &[index as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub statuses: Vec<SimStatus>,
}

impl SimulatedDataset {
    pub fn exploded(&self) -> usize {
        self.statuses.iter().filter(|s| **s == SimStatus::Exploded).count()
    }
}

/// `n` independent runs, sequence `i` seeded with [`sequence_seed`]`(cfg.seed, i)`.
pub fn simulate_dataset(cfg: &SimConfig, n: usize) -> Result<SimulatedDataset, SimError> {
    assert!(n >= 1, "need at least one sequence");
    let runs = par::map_indexed(n, |i| simulate_seeded(cfg, sequence_seed(cfg.seed, i)));
    let mut sequences = Vec::with_capacity(n);
    let mut statuses = Vec::with_capacity(n);
    for r in runs {
        let r = r?;
        if r.status == SimStatus::Exploded {
            log::warn!("simulation hit max_events = {}", cfg.max_events);
        }
        sequences.push(r.sequence);
        statuses.push(r.status);
    }
    let dataset = Dataset::new(cfg.domain.clone(), sequences).expect("simulated sequences share the domain");
    Ok(SimulatedDataset { dataset, statuses })
}
