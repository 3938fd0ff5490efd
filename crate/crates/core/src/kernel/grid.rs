use std::io::Write;

use crate::domain::{Domain, EventPoint};
use crate::intensity::{grid_points, midpoint_nodes};
use crate::par;

use super::KernelModel;

/// Kernel values on a rectangular set of `(x', x)` pairs, row-major.
/// Non-causal cells (`t' ≥ t`) hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<(EventPoint, EventPoint, Option<f64>)>,
}

impl KernelGrid {
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.cells[row * self.cols + col].2
    }
}

/// Evaluates `k(prev[i], points[j])` for every pair.
pub fn kernel_grid(model: &KernelModel, prev: &[EventPoint], points: &[EventPoint]) -> KernelGrid {
    let cells = prev
        .iter()
        .flat_map(|a| points.iter().map(move |b| (a, b)))
        .map(|(a, b)| (a.clone(), b.clone(), model.kernel_eval(a, b).ok()))
        .collect();
    KernelGrid { rows: prev.len(), cols: points.len(), cells }
}

/// Expected direct offspring of one event placed uniformly in the window,
/// `(1/|X|) ∫_X ∫_{t > t'} k(x', x) dx dx'`, by midpoint quadrature with
/// `nodes` cells per axis. Costs `nodes^(2·(1 + mark_dim))` kernel evaluations.
pub fn mean_offspring(model: &KernelModel, domain: &Domain, nodes: usize) -> f64 {
    assert!(nodes >= 1, "need at least one cell per axis");
    let times = midpoint_nodes(0.0, domain.horizon(), nodes);
    let axes: Vec<Vec<f64>> =
        domain.mark_lo().iter().zip(domain.mark_hi()).map(|(lo, hi)| midpoint_nodes(*lo, hi - lo, nodes)).collect();
    let points = grid_points(&times, &axes);
    let cell = domain.volume() / points.len() as f64;
    let per_source = par::map_slice(&points, |xp| {
        points.iter().filter(|x| x.t > xp.t).map(|x| model.kernel_eval(xp, x).expect("causal pair")).sum::<f64>()
    });
    per_source.iter().sum::<f64>() * cell / points.len() as f64
}

/// A two-dimensional slice through the kernel: every coordinate of
/// `(t', m', t, m)` is pinned by `base_prev`/`base` except `axis_a` and
/// `axis_b`, which sweep their value lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSlice {
    pub base_prev: EventPoint,
    pub base: EventPoint,
    pub axis_a: usize,
    pub values_a: Vec<f64>,
    pub axis_b: usize,
    pub values_b: Vec<f64>,
}

impl KernelSlice {
    pub fn evaluate(&self, model: &KernelModel) -> KernelGrid {
        let dim = 1 + self.base.m.len();
        let set = |x: &mut EventPoint, axis: usize, v: f64| {
            if axis == 0 {
                x.t = v;
            } else {
                x.m[axis - 1] = v;
            }
        };
        let mut cells = Vec::with_capacity(self.values_a.len() * self.values_b.len());
        for &va in &self.values_a {
            for &vb in &self.values_b {
                let mut xp = self.base_prev.clone();
                let mut x = self.base.clone();
                for (axis, v) in [(self.axis_a, va), (self.axis_b, vb)] {
                    if axis < dim {
                        set(&mut xp, axis, v);
                    } else {
                        set(&mut x, axis - dim, v);
                    }
                }
                let k = model.kernel_eval(&xp, &x).ok();
                cells.push((xp, x, k));
            }
        }
        KernelGrid { rows: self.values_a.len(), cols: self.values_b.len(), cells }
    }
}

/// CSV `t_prev,m1_prev,...,t,m1,...,k`; non-causal cells leave `k` empty.
pub fn write_kernel_grid_csv<W: Write>(grid: &KernelGrid, out: W) -> std::io::Result<()> {
    let d = grid.cells.first().map_or(0, |c| c.0.m.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t_prev".to_string()];
    header.extend((1..=d).map(|i| format!("m{i}_prev")));
    header.push("t".into());
    header.extend((1..=d).map(|i| format!("m{i}")));
    header.push("k".into());
    w.write_record(&header)?;
    for (a, b, k) in &grid.cells {
        let mut row: Vec<String> = a.coords().chain(b.coords()).map(|v| v.to_string()).collect();
        row.push(k.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()
}
