use crate::domain::{Domain, EventPoint, EventSequence};
use crate::net::{sigmoid, softplus, softplus_inv, Heads, Mlp, NetError, NetSpec, ParamVector, Workspace};

use super::{history_counts, HistoryState, InfluenceKernel, KernelError};

/// Finite-rank neural kernel `k(x', x) = Σ_r ν_r ψ_r(x') φ_r(x)`.
///
/// `ν_r = softplus(ρ_r)` keeps the spectrum nonnegative under unconstrained
/// updates. Trainable parameters are the network weights followed by `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralKernel {
    net: Mlp,
    params: ParamVector,
    spectrum_raw: Vec<f64>,
}

impl SpectralKernel {
    pub fn new(spec: NetSpec, params: ParamVector, spectrum_raw: Vec<f64>) -> Result<Self, KernelError> {
        let net = Mlp::new(spec)?;
        net.check_params(params.as_slice())?;
        if spectrum_raw.len() != net.rank() {
            return Err(KernelError::InvalidParam(format!(
                "spectrum has {} entries for rank {}",
                spectrum_raw.len(),
                net.rank()
            )));
        }
        if spectrum_raw.iter().chain(params.as_slice()).any(|v| !v.is_finite()) {
            return Err(KernelError::InvalidParam("non-finite parameter".into()));
        }
        Ok(Self { net, params, spectrum_raw })
    }

    /// Glorot-initialized network with every `ν_r = nu`.
    pub fn from_seed(spec: NetSpec, seed: u64, nu: f64) -> Result<Self, KernelError> {
        Self::from_seed_with_gain(spec, seed, nu, 1.0)
    }

    /// As [`SpectralKernel::from_seed`], with initial weight bounds scaled by
    /// `gain` (larger gains give more strongly varying features).
    pub fn from_seed_with_gain(spec: NetSpec, seed: u64, nu: f64, gain: f64) -> Result<Self, KernelError> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(KernelError::InvalidParam(format!("initial spectrum must be positive, got {nu}")));
        }
        let net = Mlp::new(spec)?;
        let params = net.init_params_with_gain(seed, gain);
        let spectrum_raw = vec![softplus_inv(nu); net.rank()];
        Ok(Self { net, params, spectrum_raw })
    }

    /// Spectrum giving an initial kernel of roughly `branching / |X|` at
    /// mid-range features, so one event spawns about `branching` children.
    pub fn nu_for_branching(domain: &Domain, spec: &NetSpec, branching: f64) -> f64 {
        let mid = 0.5 * spec.output_scale;
        branching / (domain.volume() * spec.rank() as f64 * mid * mid)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn spec(&self) -> &NetSpec {
        self.net.spec()
    }

    pub fn rank(&self) -> usize {
        self.net.rank()
    }

    pub fn net_params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_net_params(&mut self, p: Vec<f64>) {
        assert_eq!(p.len(), self.net.param_count());
        self.params = ParamVector(p);
    }

    pub fn spectrum_raw(&self) -> &[f64] {
        &self.spectrum_raw
    }

    pub fn spectrum(&self) -> Vec<f64> {
        self.spectrum_raw.iter().map(|&r| softplus(r)).collect()
    }

    fn features(&self, ws: &mut Workspace, x: &EventPoint, heads: Heads) {
        self.net.forward_point(self.params.as_slice(), x, heads, ws);
    }

    pub fn try_features(&self, x: &EventPoint) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let out = self.net.forward(self.params.as_slice(), x)?;
        Ok((out.psi, out.phi))
    }
}

impl InfluenceKernel for SpectralKernel {
    fn eval(&self, x_prev: &EventPoint, x: &EventPoint) -> f64 {
        let r = self.rank();
        let mut ws = self.net.workspace();
        self.features(&mut ws, x_prev, Heads::Psi);
        let psi = ws.outputs()[..r].to_vec();
        self.features(&mut ws, x, Heads::Phi);
        let phi = &ws.outputs()[r..];
        self.spectrum().iter().zip(&psi).zip(phi).map(|((n, p), f)| n * p * f).sum()
    }

    fn accumulate_grad(&self, x_prev: &EventPoint, x: &EventPoint, upstream: f64, grad: &mut [f64]) {
        let r = self.rank();
        let nu = self.spectrum();
        let np = self.net.param_count();
        let mut ws = self.net.workspace();
        let mut up = vec![0.0; 2 * r];

        self.features(&mut ws, x, Heads::Phi);
        let phi = ws.outputs()[r..].to_vec();
        self.features(&mut ws, x_prev, Heads::Psi);
        let psi = ws.outputs()[..r].to_vec();

        for j in 0..r {
            up[j] = upstream * nu[j] * phi[j];
        }
        self.net.backward_into(self.params.as_slice(), &mut ws, &up, &mut grad[..np]);

        up.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..r {
            up[r + j] = upstream * nu[j] * psi[j];
        }
        self.features(&mut ws, x, Heads::Phi);
        self.net.backward_into(self.params.as_slice(), &mut ws, &up, &mut grad[..np]);

        for j in 0..r {
            grad[np + j] += upstream * sigmoid(self.spectrum_raw[j]) * psi[j] * phi[j];
        }
    }

    fn sup_bound(&self) -> f64 {
        let s = self.spec().output_scale;
        self.spectrum().iter().sum::<f64>() * s * s
    }

    fn param_count(&self) -> usize {
        self.net.param_count() + self.rank()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.params.0.clone();
        p.extend_from_slice(&self.spectrum_raw);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let np = self.net.param_count();
        self.params.0.copy_from_slice(&params[..np]);
        self.spectrum_raw.copy_from_slice(&params[np..]);
    }

    fn excitation(&self, seq: &EventSequence, queries: &[EventPoint]) -> Vec<f64> {
        let r = self.rank();
        let nu = self.spectrum();
        let mut ws = self.net.workspace();
        let prefix = self.psi_prefix(seq, &mut ws);
        history_counts(seq, queries)
            .into_iter()
            .zip(queries)
            .map(|(k, q)| {
                if k == 0 {
                    return 0.0;
                }
                self.features(&mut ws, q, Heads::Phi);
                let phi = &ws.outputs()[r..];
                let pk = &prefix[k * r..(k + 1) * r];
                (0..r).map(|j| nu[j] * phi[j] * pk[j]).sum()
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
        let r = self.rank();
        let n = seq.len();
        let np = self.net.param_count();
        let nu = self.spectrum();
        let params = self.params.as_slice();
        let mut ws = self.net.workspace();
        let prefix = self.psi_prefix(seq, &mut ws);
        // bucket[k] collects w_q φ(q) for queries with exactly k earlier events
        let mut bucket = vec![0.0; (n + 1) * r];
        let mut g_rho = vec![0.0; r];
        let mut up = vec![0.0; 2 * r];
        for ((k, q), &w) in history_counts(seq, queries).into_iter().zip(queries).zip(weights) {
            if k == 0 || w == 0.0 {
                continue;
            }
            self.features(&mut ws, q, Heads::Phi);
            let pk = &prefix[k * r..(k + 1) * r];
            for j in 0..r {
                let phi = ws.outputs()[r + j];
                up[r + j] = w * nu[j] * pk[j];
                g_rho[j] += w * phi * pk[j];
                bucket[k * r + j] += w * phi;
            }
            self.net.backward_into(params, &mut ws, &up, &mut grad[..np]);
        }
        // event i influences every query with k >= i + 1
        up.iter_mut().for_each(|v| *v = 0.0);
        let mut suffix = vec![0.0; r];
        for i in (0..n).rev() {
            for j in 0..r {
                suffix[j] += bucket[(i + 1) * r + j];
                up[j] = nu[j] * suffix[j];
            }
            if up[..r].iter().all(|&v| v == 0.0) {
                continue;
            }
            self.features(&mut ws, &seq.events()[i], Heads::Psi);
            self.net.backward_into(params, &mut ws, &up, &mut grad[..np]);
        }
        for j in 0..r {
            grad[np + j] += g_rho[j] * sigmoid(self.spectrum_raw[j]);
        }
    }

    fn history_state(&self) -> Box<dyn HistoryState + '_> {
        Box::new(SpectralState {
            kernel: self,
            nu: self.spectrum(),
            prefix: vec![0.0; self.rank()],
            ws: self.net.workspace(),
            count: 0,
        })
    }

    fn is_nonnegative(&self) -> bool {
        true
    }
}

impl SpectralKernel {
    /// Row `k` holds `Σ_{i<k} ψ(x_i)`, for `k = 0..=n`, flattened.
    fn psi_prefix(&self, seq: &EventSequence, ws: &mut Workspace) -> Vec<f64> {
        let r = self.rank();
        let n = seq.len();
        let mut prefix = vec![0.0; (n + 1) * r];
        for (i, x) in seq.events().iter().enumerate() {
            self.features(ws, x, Heads::Psi);
            for j in 0..r {
                prefix[(i + 1) * r + j] = prefix[i * r + j] + ws.outputs()[j];
            }
        }
        prefix
    }
}

struct SpectralState<'a> {
    kernel: &'a SpectralKernel,
    nu: Vec<f64>,
    prefix: Vec<f64>,
    ws: Workspace,
    count: usize,
}

impl HistoryState for SpectralState<'_> {
    fn push(&mut self, x: &EventPoint) {
        self.kernel.features(&mut self.ws, x, Heads::Psi);
        for (p, v) in self.prefix.iter_mut().zip(self.ws.outputs()) {
            *p += v;
        }
        self.count += 1;
    }

    fn excitation(&mut self, x: &EventPoint) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let r = self.nu.len();
        self.kernel.features(&mut self.ws, x, Heads::Phi);
        let phi = &self.ws.outputs()[r..];
        (0..r).map(|j| self.nu[j] * phi[j] * self.prefix[j]).sum()
    }

    fn len(&self) -> usize {
        self.count
    }
}
