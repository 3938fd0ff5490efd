//! Multi-branch feedforward network producing the feature maps `ψ_r`, `φ_r`.
//!
//! A shared trunk embeds the (rescaled) input point; `2R` independent branch
//! heads map the embedding to one scalar each. Heads `0..R` are the `ψ`
//! features, heads `R..2R` the `φ` features. Hidden layers use softplus and
//! every head ends in `s · sigmoid`, so features live in `(0, s)`.
//!
//! Parameters are one flat `f64` vector; [`ParamLayout`] maps
//! `(layer, row, col)` to offsets. Weights are stored row-major
//! `[fan_out][fan_in]` followed by the bias of that layer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Domain, EventPoint};
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has length {found}, spec needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("input has dimension {found}, network expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("upstream gradient has length {found}, expected {expected}")]
    UpstreamLength { expected: usize, found: usize },
}

/// Architecture of the feature network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// `1 + mark_dim`.
    pub input_dim: usize,
    /// Widths of the shared layers; the last one is the embedding width.
    pub trunk: Vec<usize>,
    /// `2R` heads.
    pub branch_count: usize,
    /// Hidden widths inside every head.
    pub branch_hidden: Vec<usize>,
    /// `s` in the output activation `s · sigmoid(z)`.
    pub output_scale: f64,
    /// Inputs enter the net as `(x - offset) · scale`.
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl NetSpec {
    /// Defaults: trunk `[128, 128, 10]`, heads `[32, 32]`, `s = 100`.
    pub fn new(input_dim: usize, rank: usize) -> Self {
        Self {
            input_dim,
            trunk: vec![128, 128, 10],
            branch_count: 2 * rank,
            branch_hidden: vec![32, 32],
            output_scale: 100.0,
            input_offset: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        }
    }

    /// Same defaults, with inputs rescaled so the domain maps onto `[0, 1]`.
    pub fn for_domain(domain: &Domain, rank: usize) -> Self {
        let mut spec = Self::new(domain.point_dim(), rank);
        spec.set_unit_inputs(domain);
        spec
    }

    pub fn set_unit_inputs(&mut self, domain: &Domain) {
        let ranges = domain.axis_ranges();
        self.input_offset = ranges.iter().map(|r| r.0).collect();
        self.input_scale = ranges.iter().map(|r| 1.0 / r.1).collect();
    }

    pub fn with_trunk(mut self, widths: Vec<usize>) -> Self {
        self.trunk = widths;
        self
    }

    pub fn with_branch_hidden(mut self, widths: Vec<usize>) -> Self {
        self.branch_hidden = widths;
        self
    }

    pub fn with_output_scale(mut self, s: f64) -> Self {
        self.output_scale = s;
        self
    }

    pub fn rank(&self) -> usize {
        self.branch_count / 2
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidSpec(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.trunk.is_empty() {
            return bad("trunk needs at least one layer");
        }
        if self.trunk.iter().chain(&self.branch_hidden).any(|&w| w == 0) {
            return bad("all layer widths must be >= 1");
        }
        if self.branch_count == 0 || !self.branch_count.is_multiple_of(2) {
            return bad("branch_count must be even and positive (2R)");
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad("output_scale must be positive");
        }
        if self.input_offset.len() != self.input_dim || self.input_scale.len() != self.input_dim {
            return bad("input transform length must equal input_dim");
        }
        if self.input_scale.iter().chain(&self.input_offset).any(|v| !v.is_finite()) {
            return bad("input transform must be finite");
        }
        Ok(())
    }
}

/// Offsets of one dense layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub weights: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSlot {
    fn end(&self) -> usize {
        self.bias + self.fan_out
    }
}

/// Index map from `(layer, weight/bias)` to flat offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    trunk: Vec<LayerSlot>,
    branches: Vec<Vec<LayerSlot>>,
    len: usize,
}

impl ParamLayout {
    pub fn new(spec: &NetSpec) -> Self {
        let mut off = 0;
        let mut slot = |fan_in: usize, fan_out: usize| {
            let s = LayerSlot { weights: off, bias: off + fan_in * fan_out, fan_in, fan_out };
            off = s.end();
            s
        };
        let mut trunk = Vec::with_capacity(spec.trunk.len());
        let mut prev = spec.input_dim;
        for &w in &spec.trunk {
            trunk.push(slot(prev, w));
            prev = w;
        }
        let embed = prev;
        let mut branches = Vec::with_capacity(spec.branch_count);
        for _ in 0..spec.branch_count {
            let mut layers = Vec::with_capacity(spec.branch_hidden.len() + 1);
            let mut p = embed;
            for &w in &spec.branch_hidden {
                layers.push(slot(p, w));
                p = w;
            }
            layers.push(slot(p, 1));
            branches.push(layers);
        }
        Self { trunk, branches, len: off }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All layers, trunk first then each branch in order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSlot> {
        self.trunk.iter().chain(self.branches.iter().flatten())
    }

    pub fn trunk(&self) -> &[LayerSlot] {
        &self.trunk
    }

    pub fn branch(&self, b: usize) -> &[LayerSlot] {
        &self.branches[b]
    }

    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        let s = self.layers().nth(layer).expect("layer index");
        assert!(row < s.fan_out && col < s.fan_in);
        s.weights + row * s.fan_in + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        let s = self.layers().nth(layer).expect("layer index");
        assert!(row < s.fan_out);
        s.bias + row
    }
}

/// Flat trainable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ψ_r(x)` and `φ_r(x)`, each in `(0, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutput {
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Which heads to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    All,
    Psi,
    Phi,
}

impl Heads {
    fn includes(self, head: usize, rank: usize) -> bool {
        match self {
            Heads::All => true,
            Heads::Psi => head < rank,
            Heads::Phi => head >= rank,
        }
    }
}

// Output pre-activations are clamped so `s · sigmoid` stays strictly inside
// (0, s) in f64; sigmoid(35) is still below 1 and sigmoid(-700) above 0.
const OUT_Z_MIN: f64 = -700.0;
const OUT_Z_MAX: f64 = 35.0;

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs y > 0");
    if y > 30.0 {
        y
    } else {
        // ln(e^y - 1), stable for small y
        y + (-(-y).exp()).ln_1p()
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    input: Vec<f64>,
    trunk_pre: Vec<Vec<f64>>,
    trunk_act: Vec<Vec<f64>>,
    branch_pre: Vec<Vec<Vec<f64>>>,
    branch_act: Vec<Vec<Vec<f64>>>,
    /// Head outputs, `ψ` then `φ`.
    out: Vec<f64>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    d_embed: Vec<f64>,
    evaluated: Heads,
}

impl Workspace {
    /// Head outputs of the last forward pass, `ψ_0..ψ_R` then `φ_0..φ_R`.
    pub fn outputs(&self) -> &[f64] {
        &self.out
    }
}

/// The feature network: a validated spec plus its parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    layout: ParamLayout,
}

impl Mlp {
    pub fn new(spec: NetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let layout = ParamLayout::new(&spec);
        Ok(Self { spec, layout })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn rank(&self) -> usize {
        self.spec.rank()
    }

    pub fn workspace(&self) -> Workspace {
        let max_w = self
            .spec
            .trunk
            .iter()
            .chain(&self.spec.branch_hidden)
            .copied()
            .chain([self.spec.input_dim, 1])
            .max()
            .unwrap_or(1);
        Workspace {
            input: vec![0.0; self.spec.input_dim],
            trunk_pre: self.layout.trunk.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            trunk_act: self.layout.trunk.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            branch_pre: self
                .layout
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0.0; l.fan_out]).collect())
                .collect(),
            branch_act: self
                .layout
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0.0; l.fan_out]).collect())
                .collect(),
            out: vec![0.0; self.spec.branch_count],
            delta: vec![0.0; max_w],
            delta_next: vec![0.0; max_w],
            d_embed: vec![0.0; *self.spec.trunk.last().unwrap()],
            evaluated: Heads::All,
        }
    }

    pub fn check_params(&self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.layout.len {
            return Err(NetError::ParamLength { expected: self.layout.len, found: params.len() });
        }
        Ok(())
    }

    /// Evaluates all heads at `x`.
    pub fn forward(&self, params: &[f64], x: &EventPoint) -> Result<FeatureOutput, NetError> {
        self.check_params(params)?;
        let found = 1 + x.m.len();
        if found != self.spec.input_dim {
            return Err(NetError::InputDim { expected: self.spec.input_dim, found });
        }
        let mut ws = self.workspace();
        self.forward_point(params, x, Heads::All, &mut ws);
        let r = self.rank();
        Ok(FeatureOutput { psi: ws.out[..r].to_vec(), phi: ws.out[r..].to_vec() })
    }

    /// Gradient of `Σ_r up_psi[r]·ψ_r(x) + up_phi[r]·φ_r(x)` w.r.t. the parameters.
    pub fn backward(
        &self,
        params: &[f64],
        x: &EventPoint,
        up_psi: &[f64],
        up_phi: &[f64],
    ) -> Result<ParamVector, NetError> {
        self.check_params(params)?;
        let found = 1 + x.m.len();
        if found != self.spec.input_dim {
            return Err(NetError::InputDim { expected: self.spec.input_dim, found });
        }
        let r = self.rank();
        for up in [up_psi, up_phi] {
            if up.len() != r {
                return Err(NetError::UpstreamLength { expected: r, found: up.len() });
            }
        }
        let mut ws = self.workspace();
        self.forward_point(params, x, Heads::All, &mut ws);
        let upstream: Vec<f64> = up_psi.iter().chain(up_phi).copied().collect();
        let mut grad = vec![0.0; self.layout.len];
        self.backward_into(params, &mut ws, &upstream, &mut grad);
        Ok(ParamVector(grad))
    }

    /// Forward pass into `ws` without allocation. Dimensions are not rechecked.
    pub fn forward_point(&self, params: &[f64], x: &EventPoint, heads: Heads, ws: &mut Workspace) {
        ws.input[0] = (x.t - self.spec.input_offset[0]) * self.spec.input_scale[0];
        for (i, &m) in x.m.iter().enumerate() {
            ws.input[i + 1] = (m - self.spec.input_offset[i + 1]) * self.spec.input_scale[i + 1];
        }
        for (l, slot) in self.layout.trunk.iter().enumerate() {
            let (before, rest) = ws.trunk_act.split_at_mut(l);
            let input: &[f64] = if l == 0 { &ws.input } else { &before[l - 1] };
            dense(params, slot, input, &mut ws.trunk_pre[l]);
            for (a, &z) in rest[0].iter_mut().zip(&ws.trunk_pre[l]) {
                *a = softplus(z);
            }
        }
        let embed = ws.trunk_act.last().unwrap();
        let rank = self.rank();
        let s = self.spec.output_scale;
        for (b, layers) in self.layout.branches.iter().enumerate() {
            if !heads.includes(b, rank) {
                continue;
            }
            let last = layers.len() - 1;
            for (l, slot) in layers.iter().enumerate() {
                let (before, rest) = ws.branch_act[b].split_at_mut(l);
                let input: &[f64] = if l == 0 { embed } else { &before[l - 1] };
                let pre = &mut ws.branch_pre[b][l];
                dense(params, slot, input, pre);
                if l == last {
                    rest[0][0] = s * sigmoid(pre[0].clamp(OUT_Z_MIN, OUT_Z_MAX));
                } else {
                    for (a, &z) in rest[0].iter_mut().zip(pre.iter()) {
                        *a = softplus(z);
                    }
                }
            }
            ws.out[b] = ws.branch_act[b][last][0];
        }
        ws.evaluated = heads;
    }

    /// Accumulates `d(Σ_h upstream[h]·head_h)/dθ` into `grad` using the
    /// activations left in `ws` by [`Mlp::forward_point`]. Heads with zero
    /// upstream are skipped.
    pub fn backward_into(&self, params: &[f64], ws: &mut Workspace, upstream: &[f64], grad: &mut [f64]) {
        let rank = self.rank();
        let s = self.spec.output_scale;
        ws.d_embed.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for (b, layers) in self.layout.branches.iter().enumerate() {
            let up = upstream[b];
            if up == 0.0 {
                continue;
            }
            debug_assert!(ws.evaluated.includes(b, rank), "backward through a head that was not evaluated");
            any = true;
            let last = layers.len() - 1;
            // d out / d z = s σ (1 - σ) = out (1 - out / s); zero where clamped
            let out = ws.branch_act[b][last][0];
            let z = ws.branch_pre[b][last][0];
            ws.delta[0] = if (OUT_Z_MIN..=OUT_Z_MAX).contains(&z) { up * out * (1.0 - out / s) } else { 0.0 };
            for l in (0..layers.len()).rev() {
                let slot = &layers[l];
                let input: &[f64] = if l == 0 { ws.trunk_act.last().unwrap() } else { &ws.branch_act[b][l - 1] };
                let delta = &ws.delta[..slot.fan_out];
                accumulate_weight_grad(slot, input, delta, grad);
                if l == 0 {
                    back_through(params, slot, delta, &mut ws.d_embed);
                } else {
                    let dn = &mut ws.delta_next[..slot.fan_in];
                    dn.iter_mut().for_each(|v| *v = 0.0);
                    back_through(params, slot, delta, dn);
                    // softplus' = sigmoid of the pre-activation
                    for (d, &z) in dn.iter_mut().zip(&ws.branch_pre[b][l - 1]) {
                        *d *= sigmoid(z);
                    }
                    std::mem::swap(&mut ws.delta, &mut ws.delta_next);
                }
            }
        }
        if !any {
            return;
        }
        let nt = self.layout.trunk.len();
        let w = ws.d_embed.len();
        for (d, (e, &z)) in ws.delta[..w].iter_mut().zip(ws.d_embed.iter().zip(&ws.trunk_pre[nt - 1])) {
            *d = e * sigmoid(z);
        }
        for l in (0..nt).rev() {
            let slot = &self.layout.trunk[l];
            let input: &[f64] = if l == 0 { &ws.input } else { &ws.trunk_act[l - 1] };
            let delta = &ws.delta[..slot.fan_out];
            accumulate_weight_grad(slot, input, delta, grad);
            if l > 0 {
                let dn = &mut ws.delta_next[..slot.fan_in];
                dn.iter_mut().for_each(|v| *v = 0.0);
                back_through(params, slot, delta, dn);
                for (d, &z) in dn.iter_mut().zip(&ws.trunk_pre[l - 1]) {
                    *d *= sigmoid(z);
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            }
        }
    }

    /// Glorot-uniform weights, zero biases, reproducible from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.init_params_with_gain(seed, 1.0)
    }

    /// As [`Mlp::init_params`] with every weight bound multiplied by `gain`.
    pub fn init_params_with_gain(&self, seed: u64, gain: f64) -> ParamVector {
        let mut rng = derived_rng(seed, "net-init", &[]);
        let mut p = vec![0.0; self.layout.len];
        for slot in self.layout.layers() {
            let a = gain * (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut p[slot.weights..slot.bias] {
                *w = rng.random_range(-a..a);
            }
        }
        ParamVector(p)
    }
}

/// Free-function form of [`Mlp::init_params`].
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParamVector, NetError> {
    Ok(Mlp::new(spec.clone())?.init_params(seed))
}

/// Free-function form of [`Mlp::forward`].
pub fn forward(spec: &NetSpec, params: &ParamVector, x: &EventPoint) -> Result<FeatureOutput, NetError> {
    Mlp::new(spec.clone())?.forward(params.as_slice(), x)
}

/// Free-function form of [`Mlp::backward`]; `upstream` is `ψ` part then `φ` part.
pub fn backward(
    spec: &NetSpec,
    params: &ParamVector,
    x: &EventPoint,
    upstream: &[f64],
) -> Result<ParamVector, NetError> {
    let net = Mlp::new(spec.clone())?;
    let r = net.rank();
    if upstream.len() != 2 * r {
        return Err(NetError::UpstreamLength { expected: 2 * r, found: upstream.len() });
    }
    net.backward(params.as_slice(), x, &upstream[..r], &upstream[r..])
}

#[inline]
fn dense(params: &[f64], slot: &LayerSlot, input: &[f64], out: &mut [f64]) {
    let w = &params[slot.weights..slot.bias];
    let b = &params[slot.bias..slot.bias + slot.fan_out];
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(slot.fan_in).zip(b)) {
        *o = bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
    }
}

#[inline]
fn accumulate_weight_grad(slot: &LayerSlot, input: &[f64], delta: &[f64], grad: &mut [f64]) {
    let (gw, gb) = grad[slot.weights..slot.bias + slot.fan_out].split_at_mut(slot.fan_in * slot.fan_out);
    for ((row, gbias), &d) in gw.chunks_exact_mut(slot.fan_in).zip(gb.iter_mut()).zip(delta) {
        if d == 0.0 {
            continue;
        }
        *gbias += d;
        for (g, &x) in row.iter_mut().zip(input) {
            *g += d * x;
        }
    }
}

/// `d_in += Wᵀ delta`.
#[inline]
fn back_through(params: &[f64], slot: &LayerSlot, delta: &[f64], d_in: &mut [f64]) {
    let w = &params[slot.weights..slot.bias];
    for (row, &d) in w.chunks_exact(slot.fan_in).zip(delta) {
        if d == 0.0 {
            continue;
        }
        for (g, &a) in d_in.iter_mut().zip(row) {
            *g += d * a;
        }
    }
}
