//! Conditional intensity `λ(x) = μ + Σ_{x' ∈ H_t(x)} k(x', x)`.
//!
//! [`lambda_at`] is the direct pairwise sum over the history and serves as
//! the reference route; grid traces go through the batched per-family
//! sweeps in [`KernelModel::intensities`].

use std::io::Write;

use thiserror::Error;

use crate::domain::{Domain, EventPoint, EventSequence, ViolationKind};
use crate::kernel::KernelModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntensityError {
    #[error("query point (t = {t}) lies outside the domain: {kind:?}")]
    OutsideDomain { t: f64, kind: ViolationKind },
}

/// `λ(x)` given the events of `seq` strictly before `t(x)`.
pub fn lambda_at(model: &KernelModel, seq: &EventSequence, x: &EventPoint) -> Result<f64, IntensityError> {
    seq.domain().check_point(x).map_err(|kind| IntensityError::OutsideDomain { t: x.t, kind })?;
    let excitation: f64 = seq
        .history(x.t)
        .iter()
        .map(|xp| model.kernel_eval(xp, x).expect("history is strictly earlier"))
        .sum();
    Ok(model.mu() + excitation)
}

/// Cell midpoints of `n` equal cells over `[lo, lo + extent)`.
pub fn midpoint_nodes(lo: f64, extent: f64, n: usize) -> Vec<f64> {
    let h = extent / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// The cartesian product of time nodes and per-axis mark nodes, time-major.
pub fn grid_points(times: &[f64], mark_axes: &[Vec<f64>]) -> Vec<EventPoint> {
    let mut marks: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in mark_axes {
        marks = marks
            .iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut m = prefix.clone();
                    m.push(v);
                    m
                })
            })
            .collect();
    }
    times.iter().flat_map(|&t| marks.iter().map(move |m| EventPoint::new(t, m.clone()))).collect()
}

/// `λ` evaluated on a grid, conditioned on the full sequence as history.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    pub points: Vec<EventPoint>,
    pub values: Vec<f64>,
}

/// Evaluates `λ` at every node of `times × mark_axes`. Nodes exactly at an
/// event time exclude that event.
pub fn lambda_trace(
    model: &KernelModel,
    seq: &EventSequence,
    times: &[f64],
    mark_axes: &[Vec<f64>],
) -> Result<IntensityTrace, IntensityError> {
    let points = grid_points(times, mark_axes);
    check_points(seq.domain(), &points)?;
    let values = model.intensities(seq, &points);
    Ok(IntensityTrace { points, values })
}

fn check_points(domain: &Domain, points: &[EventPoint]) -> Result<(), IntensityError> {
    for x in points {
        domain.check_point(x).map_err(|kind| IntensityError::OutsideDomain { t: x.t, kind })?;
    }
    Ok(())
}

/// CSV `t,m1,...,md,lambda`, one row per node.
pub fn write_trace_csv<W: Write>(trace: &IntensityTrace, out: W) -> std::io::Result<()> {
    let d = trace.points.first().map_or(0, |p| p.m.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("m{i}")));
    header.push("lambda".into());
    w.write_record(&header)?;
    for (x, l) in trace.points.iter().zip(&trace.values) {
        let mut row: Vec<String> = x.coords().map(|v| v.to_string()).collect();
        row.push(l.to_string());
        w.write_record(&row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SpectralKernel;
    use crate::net::NetSpec;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn seq(ts: &[f64], d: &Domain) -> EventSequence {
        EventSequence::new(ts.iter().map(|&t| EventPoint::temporal(t)).collect(), d.clone()).unwrap()
    }

    #[test]
    fn empty_history_gives_mu() {
        let d = Domain::temporal(10.0).unwrap();
        let m = KernelModel::exponential(0.5, 1.0).unwrap();
        assert_eq!(lambda_at(&m, &EventSequence::empty(d), &EventPoint::temporal(3.0)).unwrap(), 1.0);
    }

    #[test]
    fn single_event_closed_form() {
        let d = Domain::temporal(10.0).unwrap();
        let m = KernelModel::exponential(0.5, 1.0).unwrap();
        let l = lambda_at(&m, &seq(&[0.0], &d), &EventPoint::temporal(1.0)).unwrap();
        assert!((l - (1.0 + 0.5 * (-1.0f64).exp())).abs() < 1e-15);
        assert!((l - 1.18394).abs() < 1e-5);
    }

    #[test]
    fn additivity_over_events() {
        let d = Domain::temporal(10.0).unwrap();
        let m = KernelModel::exponential(0.7, 0.4).unwrap();
        let x = EventPoint::temporal(5.0);
        let both = lambda_at(&m, &seq(&[1.0, 2.5], &d), &x).unwrap();
        let a = lambda_at(&m, &seq(&[1.0], &d), &x).unwrap();
        let b = lambda_at(&m, &seq(&[2.5], &d), &x).unwrap();
        assert!((both - (a + b - m.mu())).abs() < 1e-14);
    }

    #[test]
    fn query_outside_domain_is_error() {
        let d = Domain::temporal(10.0).unwrap();
        let m = KernelModel::homogeneous(1.0).unwrap();
        assert!(lambda_at(&m, &EventSequence::empty(d), &EventPoint::temporal(10.0)).is_err());
    }

    #[test]
    fn trace_without_events_is_constant_mu() {
        let d = Domain::new(10.0, vec![0.0], vec![1.0]).unwrap();
        let m = KernelModel::exponential(0.5, 1.0).unwrap().with_mu(2.5).unwrap();
        let tr = lambda_trace(&m, &EventSequence::empty(d), &midpoint_nodes(0.0, 10.0, 7), &[vec![0.0, 0.5, 1.0]])
            .unwrap();
        assert_eq!(tr.points.len(), 21);
        assert!(tr.values.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn trace_node_matches_lambda_at_and_excludes_event_at_node() {
        let d = Domain::temporal(10.0).unwrap();
        let m = KernelModel::exponential(0.5, 1.0).unwrap();
        let s = seq(&[1.0, 4.0], &d);
        let tr = lambda_trace(&m, &s, &[4.0, 6.3], &[]).unwrap();
        for (x, v) in tr.points.iter().zip(&tr.values) {
            assert!((v - lambda_at(&m, &s, x).unwrap()).abs() < 1e-14);
        }
        let only_first = lambda_at(&m, &seq(&[1.0], &d), &EventPoint::temporal(4.0)).unwrap();
        assert!((tr.values[0] - only_first).abs() < 1e-15);
    }

    #[test]
    fn trace_jumps_by_alpha_beta_at_events() {
        let d = Domain::temporal(20.0).unwrap();
        let (alpha, beta) = (0.5, 1.3);
        let m = KernelModel::exponential(alpha, beta).unwrap();
        let s = seq(&[2.0, 7.0, 7.5], &d);
        let eps = 1e-9;
        for &te in &[2.0, 7.0, 7.5] {
            let tr = lambda_trace(&m, &s, &[te - eps, te + eps], &[]).unwrap();
            let jump = tr.values[1] - tr.values[0];
            assert!((jump - alpha * beta).abs() < 1e-6, "jump {jump}");
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let d = Domain::new(10.0, vec![0.0], vec![1.0]).unwrap();
        let m = KernelModel::homogeneous(1.0).unwrap();
        let tr = lambda_trace(&m, &EventSequence::empty(d), &[1.0], &[vec![0.5]]).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&tr, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,m1,lambda\n1,0.5,1\n");
    }

    fn spectral_model(d: &Domain) -> KernelModel {
        let spec = NetSpec::for_domain(d, 2).with_trunk(vec![6, 3]).with_branch_hidden(vec![4]);
        KernelModel::spectral(SpectralKernel::from_seed_with_gain(spec, 21, 0.01, 2.0).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn causality_and_monotone_growth(seed in 0u64..10_000, n in 1usize..15) {
            let d = Domain::new(50.0, vec![0.0], vec![1.0]).unwrap();
            let mut rng = rng_from(seed);
            let mut ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
            ts.sort_by(f64::total_cmp);
            ts.dedup();
            let events: Vec<EventPoint> = ts.iter().map(|&t| EventPoint::new(t, d.sample_mark(&mut rng))).collect();
            let x = d.sample_point(&mut rng);
            for m in [KernelModel::exponential(0.6, 0.5).unwrap(), spectral_model(&d)] {
                let s = EventSequence::new(events.clone(), d.clone()).unwrap();
                let base = lambda_at(&m, &s, &x).unwrap();
                prop_assert!(base >= m.mu());
                // moving or dropping events at or after t(x) changes nothing
                let mut mutated: Vec<EventPoint> = events.iter().filter(|e| e.t < x.t).cloned().collect();
                if x.t + 1.0 < 50.0 {
                    mutated.push(EventPoint::new(x.t + 0.5 * (50.0 - x.t), d.sample_mark(&mut rng)));
                }
                let s2 = EventSequence::new(mutated, d.clone()).unwrap();
                prop_assert_eq!(lambda_at(&m, &s2, &x).unwrap(), base);
                // adding an earlier event never decreases λ(x)
                if x.t > 0.0 {
                    let t_new = x.t * rng.random::<f64>();
                    let mut grown = events.clone();
                    if !grown.iter().any(|e| e.t == t_new) {
                        grown.push(EventPoint::new(t_new, d.sample_mark(&mut rng)));
                        grown.sort_by(|a, b| a.t.total_cmp(&b.t));
                        let s3 = EventSequence::new(grown, d.clone()).unwrap();
                        prop_assert!(lambda_at(&m, &s3, &x).unwrap() >= base * (1.0 - 1e-14));
                    }
                }
            }
        }
    }
}
