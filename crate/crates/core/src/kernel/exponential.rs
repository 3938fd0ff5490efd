use crate::domain::{EventPoint, EventSequence};

use super::{history_counts, HistoryState, InfluenceKernel, KernelError};

/// Stationary Hawkes kernel `k(t', t) = α β e^{-β (t - t')}`, mark-independent.
///
/// `α` is the branching ratio. Trainable parameters are `[α, β]` directly;
/// [`ExpHawkesKernel::project`] restores `α ≥ 0`, `β > 0` after an update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpHawkesKernel {
    pub alpha: f64,
    pub beta: f64,
}

const MIN_BETA: f64 = 1e-8;

impl ExpHawkesKernel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, KernelError> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(KernelError::InvalidParam(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(KernelError::InvalidParam(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn project(&mut self) {
        self.alpha = self.alpha.max(0.0);
        self.beta = self.beta.max(MIN_BETA);
    }

    /// Per-event recursions over the sequence: `a[i] = Σ_{j≤i} e^{-β(t_i - t_j)}`
    /// and `b[i] = Σ_{j≤i} (t_i - t_j) e^{-β(t_i - t_j)}`.
    fn recursions(&self, seq: &EventSequence) -> (Vec<f64>, Vec<f64>) {
        let ev = seq.events();
        let mut a = Vec::with_capacity(ev.len());
        let mut b = Vec::with_capacity(ev.len());
        for (i, x) in ev.iter().enumerate() {
            if i == 0 {
                a.push(1.0);
                b.push(0.0);
            } else {
                let dt = x.t - ev[i - 1].t;
                let e = (-self.beta * dt).exp();
                b.push(e * (b[i - 1] + dt * a[i - 1]));
                a.push(1.0 + e * a[i - 1]);
            }
        }
        (a, b)
    }
}

impl InfluenceKernel for ExpHawkesKernel {
    fn eval(&self, x_prev: &EventPoint, x: &EventPoint) -> f64 {
        self.alpha * self.beta * (-self.beta * (x.t - x_prev.t)).exp()
    }

    fn accumulate_grad(&self, x_prev: &EventPoint, x: &EventPoint, upstream: f64, grad: &mut [f64]) {
        let dt = x.t - x_prev.t;
        let e = (-self.beta * dt).exp();
        grad[0] += upstream * self.beta * e;
        grad[1] += upstream * self.alpha * e * (1.0 - self.beta * dt);
    }

    fn sup_bound(&self) -> f64 {
        self.alpha * self.beta
    }

    fn param_count(&self) -> usize {
        2
    }

    fn params(&self) -> Vec<f64> {
        vec![self.alpha, self.beta]
    }

    fn set_params(&mut self, params: &[f64]) {
        self.alpha = params[0];
        self.beta = params[1];
    }

    fn excitation(&self, seq: &EventSequence, queries: &[EventPoint]) -> Vec<f64> {
        let (a, _) = self.recursions(seq);
        let ev = seq.events();
        history_counts(seq, queries)
            .into_iter()
            .zip(queries)
            .map(|(k, q)| {
                if k == 0 {
                    0.0
                } else {
                    let d = q.t - ev[k - 1].t;
                    self.alpha * self.beta * (-self.beta * d).exp() * a[k - 1]
                }
            })
            .collect()
    }

    fn accumulate_excitation_grad(
        &self,
        seq: &EventSequence,
        queries: &[EventPoint],
        weights: &[f64],
        grad: &mut [f64],
    ) {
        let (a, b) = self.recursions(seq);
        let ev = seq.events();
        let (mut ga, mut gb) = (0.0, 0.0);
        for ((k, q), &w) in history_counts(seq, queries).into_iter().zip(queries).zip(weights) {
            if k == 0 {
                continue;
            }
            let d = q.t - ev[k - 1].t;
            let e = (-self.beta * d).exp();
            // Σ e^{-βΔ} and Σ Δ e^{-βΔ} over the history of q
            let s0 = e * a[k - 1];
            let s1 = e * (b[k - 1] + d * a[k - 1]);
            ga += w * self.beta * s0;
            gb += w * self.alpha * (s0 - self.beta * s1);
        }
        grad[0] += ga;
        grad[1] += gb;
    }

    fn history_state(&self) -> Box<dyn HistoryState + '_> {
        Box::new(ExpState { kernel: *self, last_t: 0.0, acc: 0.0, count: 0 })
    }

    fn is_nonnegative(&self) -> bool {
        self.alpha >= 0.0
    }
}

struct ExpState {
    kernel: ExpHawkesKernel,
    last_t: f64,
    /// `Σ e^{-β(last_t - t_i)}` over pushed events.
    acc: f64,
    count: usize,
}

impl HistoryState for ExpState {
    fn push(&mut self, x: &EventPoint) {
        self.acc = if self.count == 0 { 1.0 } else { 1.0 + self.acc * (-self.kernel.beta * (x.t - self.last_t)).exp() };
        self.last_t = x.t;
        self.count += 1;
    }

    fn excitation(&mut self, x: &EventPoint) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let k = self.kernel;
        k.alpha * k.beta * self.acc * (-k.beta * (x.t - self.last_t)).exp()
    }

    fn len(&self) -> usize {
        self.count
    }
}
