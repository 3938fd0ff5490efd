use std::f64::consts::PI;

use crate::domain::{Domain, EventPoint, EventSequence};

use super::{history_counts, HistoryState, InfluenceKernel, KernelError};

/// Tensor-product cosine basis `b_j(x) = Π_a cos(j_a π u_a)` on coordinates
/// `u` rescaled to `[0, 1]`, enumerated by total degree and then
/// lexicographically. `b_0 ≡ 1` and `sup |b_j| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineBasis {
    lo: Vec<f64>,
    extent: Vec<f64>,
    index: Vec<Vec<u32>>,
}

impl CosineBasis {
    pub fn new(domain: &Domain, size: usize) -> Self {
        let ranges = domain.axis_ranges();
        Self::from_ranges(ranges.iter().map(|r| r.0).collect(), ranges.iter().map(|r| r.1).collect(), size)
    }

    /// Basis over the box with per-axis (time first) lower corners and extents.
    pub fn from_ranges(lo: Vec<f64>, extent: Vec<f64>, size: usize) -> Self {
        assert!(size >= 1, "basis needs at least one function");
        assert!(!lo.is_empty() && lo.len() == extent.len(), "one range per axis");
        assert!(extent.iter().all(|e| *e > 0.0), "extents must be positive");
        let dims = lo.len();
        let mut index = Vec::with_capacity(size);
        let mut degree = 0u32;
        while index.len() < size {
            let mut current = vec![0u32; dims];
            compositions(degree, 0, &mut current, &mut index, size);
            degree += 1;
        }
        Self { lo, extent, index }
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn extent(&self) -> &[f64] {
        &self.extent
    }

    pub fn size(&self) -> usize {
        self.index.len()
    }

    pub fn multi_index(&self, j: usize) -> &[u32] {
        &self.index[j]
    }

    /// Writes `b(x)` into `out` (length `size`).
    pub fn eval_into(&self, x: &EventPoint, out: &mut [f64]) {
        let u: Vec<f64> = x.coords().zip(self.lo.iter().zip(&self.extent)).map(|(v, (lo, e))| (v - lo) / e).collect();
        for (o, idx) in out.iter_mut().zip(&self.index) {
            *o = idx.iter().zip(&u).map(|(&j, &ua)| if j == 0 { 1.0 } else { (f64::from(j) * PI * ua).cos() }).product();
        }
    }

    pub fn eval(&self, x: &EventPoint) -> Vec<f64> {
        let mut v = vec![0.0; self.size()];
        self.eval_into(x, &mut v);
        v
    }
}

// all tuples with entries summing to `remaining` over axes `axis..`, lexicographic
fn compositions(remaining: u32, axis: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>, cap: usize) {
    if out.len() >= cap {
        return;
    }
    if axis + 1 == current.len() {
        current[axis] = remaining;
        out.push(current.clone());
        return;
    }
    for v in 0..=remaining {
        current[axis] = v;
        compositions(remaining - v, axis + 1, current, out, cap);
    }
}

/// Coefficient matrix `A` (S × S, row-major), optionally kept in factored form.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisMatrix {
    Dense(Vec<f64>),
    /// `A_pq = Σ_r ν_r Ψ_rp Φ_rq`; `psi` and `phi` are `R × S` row-major.
    Factored { psi: Vec<f64>, nu: Vec<f64>, phi: Vec<f64> },
}

/// `k_A(x', x) = b(x')ᵀ A b(x)`. May be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisKernel {
    basis: CosineBasis,
    matrix: BasisMatrix,
    dense: Vec<f64>,
}

impl BasisKernel {
    pub fn dense(basis: CosineBasis, a: Vec<f64>) -> Result<Self, KernelError> {
        let s = basis.size();
        if a.len() != s * s {
            return Err(KernelError::InvalidParam(format!("A has {} entries, expected {}", a.len(), s * s)));
        }
        Ok(Self { basis, dense: a.clone(), matrix: BasisMatrix::Dense(a) })
    }

    pub fn factored(basis: CosineBasis, psi: Vec<f64>, nu: Vec<f64>, phi: Vec<f64>) -> Result<Self, KernelError> {
        let s = basis.size();
        let r = nu.len();
        if r == 0 || psi.len() != r * s || phi.len() != r * s {
            return Err(KernelError::InvalidParam(format!("factors must be {r} x {s} with rank >= 1")));
        }
        let mut dense = vec![0.0; s * s];
        for p in 0..s {
            for q in 0..s {
                dense[p * s + q] = (0..r).map(|j| nu[j] * psi[j * s + p] * phi[j * s + q]).sum();
            }
        }
        Ok(Self { basis, dense, matrix: BasisMatrix::Factored { psi, nu, phi } })
    }

    pub fn basis(&self) -> &CosineBasis {
        &self.basis
    }

    pub fn matrix(&self) -> &BasisMatrix {
        &self.matrix
    }

    /// `A`, row-major.
    pub fn dense_matrix(&self) -> &[f64] {
        &self.dense
    }

    pub fn size(&self) -> usize {
        self.basis.size()
    }

    fn bilinear(&self, left: &[f64], right: &[f64]) -> f64 {
        let s = self.size();
        self.dense
            .chunks_exact(s)
            .zip(left)
            .map(|(row, &l)| l * row.iter().zip(right).map(|(a, r)| a * r).sum::<f64>())
            .sum()
    }

    /// Row `k` holds `Σ_{i<k} b(x_i)`, for `k = 0..=n`.
    fn basis_prefix(&self, seq: &EventSequence) -> Vec<f64> {
        let s = self.size();
        let mut prefix = vec![0.0; (seq.len() + 1) * s];
        let mut b = vec![0.0; s];
        for (i, x) in seq.events().iter().enumerate() {
            self.basis.eval_into(x, &mut b);
            for p in 0..s {
                prefix[(i + 1) * s + p] = prefix[i * s + p] + b[p];
            }
        }
        prefix
    }
}

impl InfluenceKernel for BasisKernel {
    fn eval(&self, x_prev: &EventPoint, x: &EventPoint) -> f64 {
        self.bilinear(&self.basis.eval(x_prev), &self.basis.eval(x))
    }

    fn accumulate_grad(&self, x_prev: &EventPoint, x: &EventPoint, upstream: f64, grad: &mut [f64]) {
        let s = self.size();
        let (bp, bq) = (self.basis.eval(x_prev), self.basis.eval(x));
        for p in 0..s {
            for q in 0..s {
                grad[p * s + q] += upstream * bp[p] * bq[q];
            }
        }
    }

    fn sup_bound(&self) -> f64 {
        // every cosine basis function is bounded by 1
        self.dense.iter().map(|a| a.abs()).sum()
    }

    fn param_count(&self) -> usize {
        self.dense.len()
    }

    fn params(&self) -> Vec<f64> {
        self.dense.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        self.dense.copy_from_slice(params);
        self.matrix = BasisMatrix::Dense(self.dense.clone());
    }

    fn excitation(&self, seq: &EventSequence, queries: &[EventPoint]) -> Vec<f64> {
        let s = self.size();
        let prefix = self.basis_prefix(seq);
        let mut b = vec![0.0; s];
        history_counts(seq, queries)
            .into_iter()
            .zip(queries)
            .map(|(k, q)| {
                if k == 0 {
                    return 0.0;
                }
                self.basis.eval_into(q, &mut b);
                self.bilinear(&prefix[k * s..(k + 1) * s], &b)
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
        let s = self.size();
        let prefix = self.basis_prefix(seq);
        let mut b = vec![0.0; s];
        for ((k, q), &w) in history_counts(seq, queries).into_iter().zip(queries).zip(weights) {
            if k == 0 || w == 0.0 {
                continue;
            }
            self.basis.eval_into(q, &mut b);
            let c = &prefix[k * s..(k + 1) * s];
            for p in 0..s {
                let wc = w * c[p];
                for (g, &bq) in grad[p * s..(p + 1) * s].iter_mut().zip(&b) {
                    *g += wc * bq;
                }
            }
        }
    }

    fn history_state(&self) -> Box<dyn HistoryState + '_> {
        let s = self.size();
        Box::new(BasisState { kernel: self, sum: vec![0.0; s], scratch: vec![0.0; s], count: 0 })
    }

    fn is_nonnegative(&self) -> bool {
        false
    }
}

struct BasisState<'a> {
    kernel: &'a BasisKernel,
    sum: Vec<f64>,
    scratch: Vec<f64>,
    count: usize,
}

impl HistoryState for BasisState<'_> {
    fn push(&mut self, x: &EventPoint) {
        self.kernel.basis.eval_into(x, &mut self.scratch);
        for (s, b) in self.sum.iter_mut().zip(&self.scratch) {
            *s += b;
        }
        self.count += 1;
    }

    fn excitation(&mut self, x: &EventPoint) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.kernel.basis.eval_into(x, &mut self.scratch);
        self.kernel.bilinear(&self.sum, &self.scratch)
    }

    fn len(&self) -> usize {
        self.count
    }
}
