//! Influence kernels `k(x', x)` and the model wrapper that adds the
//! background rate.
//!
//! Three families share the [`InfluenceKernel`] interface:
//!
//! - [`SpectralKernel`]: `Σ_r ν_r ψ_r(x') φ_r(x)` with neural feature maps.
//! - [`ExpHawkesKernel`]: the stationary `α β e^{-β (t - t')}` baseline.
//! - [`BasisKernel`]: `b(x')ᵀ A b(x)` over a fixed cosine basis.
//!
//! Besides pointwise evaluation, every family implements a batched sweep
//! over one sequence ([`InfluenceKernel::excitation`]) that exploits its
//! structure (feature prefix sums, exponential recursions), and an
//! incremental [`HistoryState`] for simulation.

mod basis;
mod exponential;
mod grid;
mod spectral;

pub use basis::{BasisKernel, BasisMatrix, CosineBasis};
pub use exponential::ExpHawkesKernel;
pub use grid::{kernel_grid, mean_offspring, write_kernel_grid_csv, KernelGrid, KernelSlice};
pub use spectral::SpectralKernel;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EventPoint, EventSequence};
use crate::net::{sigmoid, softplus, softplus_inv, NetError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("non-causal pair: t' = {t_prev} is not before t = {t}")]
    NonCausal { t_prev: f64, t: f64 },
    #[error("parameter vector has length {found}, model needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("invalid kernel parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Common interface of the kernel families.
///
/// Parameter vectors passed to or returned from these methods cover only the
/// family's own trainable parameters (not `μ`).
pub trait InfluenceKernel: Send + Sync {
    /// `k(x', x)`; callers guarantee `t' < t`.
    fn eval(&self, x_prev: &EventPoint, x: &EventPoint) -> f64;

    /// Accumulates `upstream · ∂k(x', x)/∂θ` into `grad`.
    fn accumulate_grad(&self, x_prev: &EventPoint, x: &EventPoint, upstream: f64, grad: &mut [f64]);

    /// A certified bound on `|k|` over the whole domain.
    fn sup_bound(&self) -> f64;

    fn param_count(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);

    /// `Σ_{x' ∈ seq, t' < t(q)} k(x', q)` for every query `q`.
    fn excitation(&self, seq: &EventSequence, queries: &[EventPoint]) -> Vec<f64>;

    /// Accumulates `∂/∂θ Σ_q weights[q] · excitation(q)` into `grad`.
    fn accumulate_excitation_grad(
        &self,
        seq: &EventSequence,
        queries: &[EventPoint],
        weights: &[f64],
        grad: &mut [f64],
    );

    /// Incremental excitation for an event stream built in time order.
    fn history_state(&self) -> Box<dyn HistoryState + '_>;

    /// Whether `k ≥ 0` everywhere.
    fn is_nonnegative(&self) -> bool;
}

/// Running excitation `Σ_{pushed x'} k(x', x)` for queries after the last push.
pub trait HistoryState {
    fn push(&mut self, x: &EventPoint);
    fn excitation(&mut self, x: &EventPoint) -> f64;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tagged union over the kernel families.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    Spectral(SpectralKernel),
    Exponential(ExpHawkesKernel),
    Basis(BasisKernel),
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Spectral(_) => "spectral",
            KernelFamily::Exponential(_) => "exponential",
            KernelFamily::Basis(_) => "basis",
        }
    }
}

/// Lower/upper intensity bounds used for optional runtime validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBounds {
    pub c1: f64,
    pub c2: f64,
}

/// A kernel family plus the constant background rate `μ`.
///
/// The trainable parameter vector is the family's parameters followed, when
/// `μ` is trainable, by `softplus⁻¹(μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelModel {
    family: KernelFamily,
    mu: f64,
    mu_trainable: bool,
    bounds: Option<IntensityBounds>,
}

impl KernelModel {
    /// Wraps a family with fixed `μ = 1`.
    pub fn new(family: KernelFamily) -> Self {
        Self { family, mu: 1.0, mu_trainable: false, bounds: None }
    }

    pub fn spectral(k: SpectralKernel) -> Self {
        Self::new(KernelFamily::Spectral(k))
    }

    pub fn exponential(alpha: f64, beta: f64) -> Result<Self, KernelError> {
        Ok(Self::new(KernelFamily::Exponential(ExpHawkesKernel::new(alpha, beta)?)))
    }

    pub fn basis(k: BasisKernel) -> Self {
        Self::new(KernelFamily::Basis(k))
    }

    /// A homogeneous Poisson model: zero kernel, rate `mu`.
    pub fn homogeneous(mu: f64) -> Result<Self, KernelError> {
        Self::exponential(0.0, 1.0)?.with_mu(mu)
    }

    pub fn with_mu(mut self, mu: f64) -> Result<Self, KernelError> {
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(KernelError::InvalidParam(format!("mu must be >= 0, got {mu}")));
        }
        self.mu = mu;
        Ok(self)
    }

    /// Makes `μ` trainable through a softplus reparametrization.
    pub fn with_trainable_mu(mut self, trainable: bool) -> Result<Self, KernelError> {
        if trainable && self.mu <= 0.0 {
            return Err(KernelError::InvalidParam("trainable mu must start positive".into()));
        }
        self.mu_trainable = trainable;
        Ok(self)
    }

    pub fn with_bounds(mut self, bounds: Option<IntensityBounds>) -> Result<Self, KernelError> {
        if let Some(b) = bounds {
            if !(b.c1 > 0.0 && b.c1 <= b.c2) {
                return Err(KernelError::InvalidParam(format!("need 0 < c1 <= c2, got {b:?}")));
            }
        }
        self.bounds = bounds;
        Ok(self)
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    pub fn family_mut(&mut self) -> &mut KernelFamily {
        &mut self.family
    }

    pub fn kernel(&self) -> &dyn InfluenceKernel {
        match &self.family {
            KernelFamily::Spectral(k) => k,
            KernelFamily::Exponential(k) => k,
            KernelFamily::Basis(k) => k,
        }
    }

    fn kernel_mut(&mut self) -> &mut dyn InfluenceKernel {
        match &mut self.family {
            KernelFamily::Spectral(k) => k,
            KernelFamily::Exponential(k) => k,
            KernelFamily::Basis(k) => k,
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn mu_trainable(&self) -> bool {
        self.mu_trainable
    }

    pub fn bounds(&self) -> Option<IntensityBounds> {
        self.bounds
    }

    pub fn param_count(&self) -> usize {
        self.kernel().param_count() + usize::from(self.mu_trainable)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel().params();
        if self.mu_trainable {
            p.push(softplus_inv(self.mu));
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), KernelError> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(KernelError::ParamLength { expected, found: params.len() });
        }
        let nk = self.kernel().param_count();
        self.kernel_mut().set_params(&params[..nk]);
        if self.mu_trainable {
            self.mu = softplus(params[nk]);
        }
        Ok(())
    }

    /// Maps parameters back into their admissible set after an update.
    /// Only the exponential family is constrained directly.
    pub fn project(&mut self) {
        if let KernelFamily::Exponential(k) = &mut self.family {
            k.project();
        }
    }

    /// `k(x', x)`.
    pub fn kernel_eval(&self, x_prev: &EventPoint, x: &EventPoint) -> Result<f64, KernelError> {
        check_causal(x_prev, x)?;
        Ok(self.kernel().eval(x_prev, x))
    }

    /// `d(upstream · k(x', x))/dθ` over all trainable parameters.
    pub fn kernel_grad(&self, x_prev: &EventPoint, x: &EventPoint, upstream: f64) -> Result<Vec<f64>, KernelError> {
        check_causal(x_prev, x)?;
        let mut g = vec![0.0; self.param_count()];
        if upstream != 0.0 {
            self.kernel().accumulate_grad(x_prev, x, upstream, &mut g);
        }
        Ok(g)
    }

    pub fn kernel_sup_bound(&self) -> f64 {
        self.kernel().sup_bound()
    }

    /// `λ(q)` for each query, conditioned on the events of `seq` strictly before `t(q)`.
    pub fn intensities(&self, seq: &EventSequence, queries: &[EventPoint]) -> Vec<f64> {
        let mut v = self.kernel().excitation(seq, queries);
        for l in &mut v {
            *l += self.mu;
        }
        if let Some(b) = self.bounds {
            let outside = v.iter().filter(|&&l| l < b.c1 || l > b.c2).count();
            if outside > 0 {
                log::warn!("{outside} intensity values outside [{}, {}]", b.c1, b.c2);
            }
        }
        v
    }

    /// Accumulates `∂/∂θ Σ_q weights[q] · λ(q)` into `grad` (all trainable parameters).
    pub fn accumulate_intensity_grad(
        &self,
        seq: &EventSequence,
        queries: &[EventPoint],
        weights: &[f64],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(queries.len(), weights.len());
        debug_assert_eq!(grad.len(), self.param_count());
        let nk = self.kernel().param_count();
        self.kernel().accumulate_excitation_grad(seq, queries, weights, &mut grad[..nk]);
        if self.mu_trainable {
            let raw = softplus_inv(self.mu);
            grad[nk] += weights.iter().sum::<f64>() * sigmoid(raw);
        }
    }

    /// Spectrum values `ν_r` for spectral models.
    pub fn spectrum(&self) -> Option<Vec<f64>> {
        match &self.family {
            KernelFamily::Spectral(k) => Some(k.spectrum()),
            _ => None,
        }
    }
}

fn check_causal(x_prev: &EventPoint, x: &EventPoint) -> Result<(), KernelError> {
    if x_prev.t < x.t {
        Ok(())
    } else {
        Err(KernelError::NonCausal { t_prev: x_prev.t, t: x.t })
    }
}

/// For each query, the number of events strictly before it.
pub(crate) fn history_counts(seq: &EventSequence, queries: &[EventPoint]) -> Vec<usize> {
    queries.iter().map(|q| seq.history_len(q.t)).collect()
}
