//! Intensity MAE against a known kernel, predictive log-likelihood, and
//! numeric exports of kernels and intensities for plotting.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dataset, Domain, EventPoint, EventSequence};
use crate::intensity::{grid_points, lambda_trace, midpoint_nodes, write_trace_csv, IntensityError};
use crate::kernel::{write_kernel_grid_csv, KernelFamily, KernelModel, KernelSlice};
use crate::likelihood::{log_likelihood, LogLikResult, MCIntegralConfig};
use crate::par;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{which} model does not fit the evaluation domain: {reason}")]
    DomainMismatch { which: &'static str, reason: String },
    #[error("grid needs at least {min} nodes per axis, got {got}")]
    Grid { min: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error("no sequence with index {0}")]
    NoSuchSequence(usize),
    #[error("slice source {0:?} is not a point of the domain")]
    BadSliceSource(Vec<f64>),
}

/// Quadrature grid: `time_nodes` equal cells over `[0, T)` and `mark_nodes`
/// per mark axis, each evaluated at its midpoint with the cell volume as
/// weight. Nodes never coincide with cell edges, and constants integrate
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalGrid {
    pub time_nodes: usize,
    pub mark_nodes: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self { time_nodes: 1000, mark_nodes: 50 }
    }
}

impl EvalGrid {
    fn check(&self, domain: &Domain) -> Result<(), EvalError> {
        let got = if domain.mark_dim() > 0 { self.time_nodes.min(self.mark_nodes) } else { self.time_nodes };
        if got < 2 {
            return Err(EvalError::Grid { min: 2, got });
        }
        Ok(())
    }

    pub fn times(&self, domain: &Domain) -> Vec<f64> {
        midpoint_nodes(0.0, domain.horizon(), self.time_nodes)
    }

    pub fn mark_axes(&self, domain: &Domain) -> Vec<Vec<f64>> {
        domain
            .mark_lo()
            .iter()
            .zip(domain.mark_hi())
            .map(|(lo, hi)| midpoint_nodes(*lo, hi - lo, self.mark_nodes))
            .collect()
    }

    pub fn points(&self, domain: &Domain) -> Vec<EventPoint> {
        grid_points(&self.times(domain), &self.mark_axes(domain))
    }

    /// Volume of one cell.
    pub fn cell_volume(&self, domain: &Domain) -> f64 {
        let nodes = self.time_nodes as f64 * (self.mark_nodes as f64).powi(domain.mark_dim() as i32);
        domain.volume() / nodes
    }
}

/// Rejects models whose shape cannot be evaluated on `domain`.
pub fn check_model_domain(which: &'static str, model: &KernelModel, domain: &Domain) -> Result<(), EvalError> {
    let mismatch = |reason: String| Err(EvalError::DomainMismatch { which, reason });
    match model.family() {
        KernelFamily::Spectral(k) if k.spec().input_dim != domain.point_dim() => {
            mismatch(format!("network takes {} inputs, domain points have {}", k.spec().input_dim, domain.point_dim()))
        }
        KernelFamily::Basis(k) => {
            let ranges = domain.axis_ranges();
            let lo: Vec<f64> = ranges.iter().map(|r| r.0).collect();
            let ext: Vec<f64> = ranges.iter().map(|r| r.1).collect();
            if k.basis().lo() != lo.as_slice() || k.basis().extent() != ext.as_slice() {
                mismatch(format!("basis box {:?}+{:?} differs from domain box {lo:?}+{ext:?}", k.basis().lo(), k.basis().extent()))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeResult {
    pub per_sequence: Vec<f64>,
    pub mean: f64,
}

/// `∫ |λ_true − λ_fitted| dx` per sequence on `grid`, both intensities
/// conditioned on the sequence's own events; averaged over sequences.
pub fn intensity_mae(
    true_model: &KernelModel,
    fitted: &KernelModel,
    test: &Dataset,
    grid: &EvalGrid,
) -> Result<MaeResult, EvalError> {
    let domain = test.domain();
    check_model_domain("true", true_model, domain)?;
    check_model_domain("fitted", fitted, domain)?;
    grid.check(domain)?;
    let points = grid.points(domain);
    let w = grid.cell_volume(domain);
    let seqs = test.sequences();
    let per_sequence = par::map_indexed(seqs.len(), |j| sequence_mae(true_model, fitted, &seqs[j], &points, w));
    let mean = mean(&per_sequence);
    Ok(MaeResult { per_sequence, mean })
}

fn sequence_mae(a: &KernelModel, b: &KernelModel, seq: &EventSequence, points: &[EventPoint], w: f64) -> f64 {
    let la = a.intensities(seq, points);
    let lb = b.intensities(seq, points);
    la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).sum::<f64>() * w
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Log-likelihood of held-out sequences under the fitted model.
pub fn predictive_loglik(model: &KernelModel, test: &Dataset, cfg: &MCIntegralConfig) -> LogLikResult {
    log_likelihood(model, test, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_sequences: usize,
    pub family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_per_sequence: Option<Vec<f64>>,
    pub predictive_ll: f64,
    pub predictive_ll_per_sequence: Vec<f64>,
    pub event_term: f64,
    pub integral_term: f64,
    pub floored: usize,
    pub grid: EvalGrid,
    pub mc: MCIntegralConfig,
}

pub fn evaluate(
    fitted: &KernelModel,
    true_model: Option<&KernelModel>,
    test: &Dataset,
    grid: &EvalGrid,
    mc: &MCIntegralConfig,
) -> Result<EvalReport, EvalError> {
    check_model_domain("fitted", fitted, test.domain())?;
    let ll = predictive_loglik(fitted, test, mc);
    let mae = true_model.map(|t| intensity_mae(t, fitted, test, grid)).transpose()?;
    Ok(EvalReport {
        n_sequences: test.len(),
        family: fitted.family().name().to_string(),
        mae: mae.as_ref().map(|m| m.mean),
        mae_per_sequence: mae.map(|m| m.per_sequence),
        predictive_ll: ll.mean,
        predictive_ll_per_sequence: ll.per_sequence.iter().map(|s| s.loglik).collect(),
        event_term: ll.mean_event_term,
        integral_term: ll.mean_integral_term,
        floored: ll.floored,
        grid: *grid,
        mc: *mc,
    })
}

/// What to export. Node counts are per axis and use cell midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FigureConfig {
    /// Nodes per axis of the `t' × t` kernel grid (marks pinned at the box centre).
    pub kernel_nodes: usize,
    pub trace_time_nodes: usize,
    pub trace_mark_nodes: usize,
    /// Test sequences to trace.
    pub trace_sequences: Vec<usize>,
    /// Source points `x'` of the `(t, m1)` kernel slices for marked data.
    /// Empty means one source at `t' = T/4` and the box centre.
    pub slice_sources: Vec<Vec<f64>>,
    pub slice_nodes: usize,
}

impl Default for FigureConfig {
    fn default() -> Self {
        Self {
            kernel_nodes: 100,
            trace_time_nodes: 500,
            trace_mark_nodes: 20,
            trace_sequences: vec![0],
            slice_sources: Vec::new(),
            slice_nodes: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub model: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: FigureConfig,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes kernel grids, intensity traces and (for marked data) kernel slices
/// for each model into `out_dir`, plus `manifest.json` listing them.
pub fn export_figure_data(
    models: &[(&str, &KernelModel)],
    test: &Dataset,
    cfg: &FigureConfig,
    out_dir: &Path,
) -> Result<Manifest, EvalError> {
    let domain = test.domain();
    for (name, m) in models {
        check_model_domain(if *name == "true" { "true" } else { "fitted" }, m, domain)?;
    }
    fs::create_dir_all(out_dir).map_err(|source| EvalError::Io { path: out_dir.to_path_buf(), source })?;
    let mut files = Vec::new();
    let centre: Vec<f64> = domain.mark_lo().iter().zip(domain.mark_hi()).map(|(l, h)| 0.5 * (l + h)).collect();
    let dim = domain.point_dim();
    let t_nodes = midpoint_nodes(0.0, domain.horizon(), cfg.kernel_nodes);

    for (name, m) in models {
        let grid = KernelSlice {
            base_prev: EventPoint::new(0.0, centre.clone()),
            base: EventPoint::new(0.0, centre.clone()),
            axis_a: 0,
            values_a: t_nodes.clone(),
            axis_b: dim,
            values_b: t_nodes.clone(),
        }
        .evaluate(m);
        let file = format!("kernel_{name}.csv");
        write_file(out_dir, &file, |w| write_kernel_grid_csv(&grid, w))?;
        files.push(ManifestEntry { path: file, kind: "kernel_grid".into(), model: name.to_string(), rows: grid.cells.len() });
    }

    if domain.mark_dim() > 0 {
        let sources: Vec<EventPoint> = if cfg.slice_sources.is_empty() {
            vec![EventPoint::new(0.25 * domain.horizon(), centre.clone())]
        } else {
            let mut v = Vec::with_capacity(cfg.slice_sources.len());
            for c in &cfg.slice_sources {
                let x = (c.len() == dim).then(|| EventPoint::new(c[0], c[1..].to_vec()));
                match x {
                    Some(x) if domain.contains(&x) => v.push(x),
                    _ => return Err(EvalError::BadSliceSource(c.clone())),
                }
            }
            v
        };
        let (lo, hi) = (domain.mark_lo()[0], domain.mark_hi()[0]);
        for (i, src) in sources.iter().enumerate() {
            for (name, m) in models {
                let slice = KernelSlice {
                    base_prev: src.clone(),
                    base: EventPoint::new(0.0, centre.clone()),
                    axis_a: dim,
                    values_a: midpoint_nodes(0.0, domain.horizon(), cfg.slice_nodes),
                    axis_b: dim + 1,
                    values_b: midpoint_nodes(lo, hi - lo, cfg.slice_nodes),
                }
                .evaluate(m);
                let file = format!("slice{i}_{name}.csv");
                write_file(out_dir, &file, |w| write_kernel_grid_csv(&slice, w))?;
                files.push(ManifestEntry { path: file, kind: "kernel_slice".into(), model: name.to_string(), rows: slice.cells.len() });
            }
        }
    }

    let times = midpoint_nodes(0.0, domain.horizon(), cfg.trace_time_nodes);
    let marks: Vec<Vec<f64>> = domain
        .mark_lo()
        .iter()
        .zip(domain.mark_hi())
        .map(|(lo, hi)| midpoint_nodes(*lo, hi - lo, cfg.trace_mark_nodes))
        .collect();
    for &j in &cfg.trace_sequences {
        let seq = test.sequences().get(j).ok_or(EvalError::NoSuchSequence(j))?;
        for (name, m) in models {
            let tr = lambda_trace(m, seq, &times, &marks)?;
            let file = format!("trace_seq{j}_{name}.csv");
            write_file(out_dir, &file, |w| write_trace_csv(&tr, w))?;
            files.push(ManifestEntry { path: file, kind: "intensity_trace".into(), model: name.to_string(), rows: tr.values.len() });
        }
    }

    let manifest = Manifest { config: cfg.clone(), files };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(out_dir, MANIFEST_NAME, |w| w.write_all(json.as_bytes()))?;
    Ok(manifest)
}

fn write_file<F>(dir: &Path, name: &str, f: F) -> Result<(), EvalError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = dir.join(name);
    let io = |source| EvalError::Io { path: path.clone(), source };
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_grid, BasisKernel, CosineBasis, SpectralKernel};
    use crate::net::NetSpec;
    use crate::simulator::{simulate_dataset, SimConfig};

    fn hawkes_test_set(n: usize) -> Dataset {
        let cfg = SimConfig::new(KernelModel::exponential(0.5, 1.0).unwrap(), Domain::temporal(100.0).unwrap(), 5);
        simulate_dataset(&cfg, n).unwrap().dataset
    }

    #[test]
    fn identical_models_have_zero_mae() {
        let ds = hawkes_test_set(3);
        let m = KernelModel::exponential(0.5, 1.0).unwrap();
        let r = intensity_mae(&m, &m, &ds, &EvalGrid::default()).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn constant_difference_integrates_exactly() {
        let ds = hawkes_test_set(2);
        let a = KernelModel::homogeneous(1.0).unwrap();
        let b = KernelModel::homogeneous(1.5).unwrap();
        let r = intensity_mae(&a, &b, &ds, &EvalGrid::default()).unwrap();
        assert!((r.mean - 50.0).abs() < 1e-9, "{}", r.mean);
        let marked = Dataset::from_events(Domain::new(100.0, vec![0.0], vec![1.0]).unwrap(), vec![vec![]]).unwrap();
        let r = intensity_mae(&a, &b, &marked, &EvalGrid { time_nodes: 200, mark_nodes: 7 }).unwrap();
        assert!((r.mean - 50.0).abs() < 1e-9);
    }

    #[test]
    fn mae_satisfies_triangle_inequality() {
        let ds = hawkes_test_set(4);
        let g = EvalGrid { time_nodes: 400, mark_nodes: 2 };
        let a = KernelModel::exponential(0.5, 1.0).unwrap();
        let b = KernelModel::exponential(0.3, 2.0).unwrap();
        let c = KernelModel::exponential(0.8, 0.5).unwrap().with_mu(1.2).unwrap();
        let ac = intensity_mae(&a, &c, &ds, &g).unwrap().mean;
        let ab = intensity_mae(&a, &b, &ds, &g).unwrap().mean;
        let bc = intensity_mae(&b, &c, &ds, &g).unwrap().mean;
        assert!(ac <= ab + bc + 1e-12);
    }

    #[test]
    fn refinement_changes_mae_by_under_one_percent() {
        let ds = hawkes_test_set(3);
        let a = KernelModel::exponential(0.5, 1.0).unwrap();
        let b = KernelModel::exponential(0.4, 1.5).unwrap();
        let coarse = intensity_mae(&a, &b, &ds, &EvalGrid { time_nodes: 1000, mark_nodes: 50 }).unwrap().mean;
        let fine = intensity_mae(&a, &b, &ds, &EvalGrid { time_nodes: 2000, mark_nodes: 50 }).unwrap().mean;
        assert!(((coarse - fine) / fine).abs() < 0.01, "{coarse} vs {fine}");
    }

    #[test]
    fn predictive_ll_delegates_and_breakdown_reproduces_headline() {
        let d = Domain::temporal(10.0).unwrap();
        let ev = (1..=5).map(|i| EventPoint::temporal(i as f64)).collect();
        let ds = Dataset::from_events(d, vec![ev]).unwrap();
        let m = KernelModel::homogeneous(2.0).unwrap();
        let mc = MCIntegralConfig::default();
        assert!((predictive_loglik(&m, &ds, &mc).mean - (5.0 * 2f64.ln() - 20.0)).abs() < 1e-12);

        let test = hawkes_test_set(6);
        let fitted = KernelModel::exponential(0.4, 1.2).unwrap();
        let truth = KernelModel::exponential(0.5, 1.0).unwrap();
        let r = evaluate(&fitted, Some(&truth), &test, &EvalGrid::default(), &mc).unwrap();
        assert_eq!(r.predictive_ll, log_likelihood(&fitted, &test, &mc).mean);
        let ll = &r.predictive_ll_per_sequence;
        assert_eq!(r.predictive_ll, ll.iter().sum::<f64>() / ll.len() as f64);
        let mae = r.mae_per_sequence.as_ref().unwrap();
        assert_eq!(r.mae.unwrap(), mae.iter().sum::<f64>() / mae.len() as f64);
        let no_truth = evaluate(&fitted, None, &test, &EvalGrid::default(), &mc).unwrap();
        assert!(no_truth.mae.is_none());
        assert!(!serde_json::to_string(&no_truth).unwrap().contains("mae"));
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let ds = hawkes_test_set(1);
        let other = Domain::new(100.0, vec![0.0], vec![1.0]).unwrap();
        let spec = NetSpec::for_domain(&other, 1).with_trunk(vec![3]).with_branch_hidden(vec![2]);
        let s = KernelModel::spectral(SpectralKernel::from_seed(spec, 1, 1e-4).unwrap());
        let h = KernelModel::homogeneous(1.0).unwrap();
        assert!(matches!(intensity_mae(&h, &s, &ds, &EvalGrid::default()), Err(EvalError::DomainMismatch { .. })));
        let b = KernelModel::basis(BasisKernel::dense(CosineBasis::new(&Domain::temporal(50.0).unwrap(), 1), vec![0.1]).unwrap());
        assert!(matches!(intensity_mae(&b, &h, &ds, &EvalGrid::default()), Err(EvalError::DomainMismatch { .. })));
    }

    #[test]
    fn exports_are_listed_and_reproducible() {
        let d = Domain::new(20.0, vec![0.0], vec![4.0]).unwrap();
        let truth = KernelModel::exponential(0.5, 1.0).unwrap();
        let test = simulate_dataset(&SimConfig::new(truth.clone(), d.clone(), 1), 2).unwrap().dataset;
        let spec = NetSpec::for_domain(&d, 2).with_trunk(vec![4, 3]).with_branch_hidden(vec![3]);
        let fitted = KernelModel::spectral(SpectralKernel::from_seed(spec, 2, 1e-4).unwrap());
        let cfg = FigureConfig { kernel_nodes: 10, trace_time_nodes: 30, trace_mark_nodes: 4, slice_nodes: 8, ..FigureConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let models = [("true", &truth), ("fitted", &fitted)];
        let man = export_figure_data(&models, &test, &cfg, dir.path()).unwrap();
        let mut listed: Vec<String> = man.files.iter().map(|f| f.path.clone()).collect();
        listed.push(MANIFEST_NAME.to_string());
        listed.sort();
        let mut on_disk: Vec<String> =
            fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        on_disk.sort();
        assert_eq!(listed, on_disk);
        assert!(man.files.iter().any(|f| f.kind == "kernel_slice"));
        let first: Vec<Vec<u8>> = on_disk.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        assert!(first.iter().all(|b| !b.is_empty()));
        export_figure_data(&models, &test, &cfg, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = on_disk.iter().map(|f| fs::read(dir.path().join(f)).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn slice_at_fixed_source_matches_kernel_grid() {
        let d = Domain::new(20.0, vec![0.0], vec![4.0]).unwrap();
        let spec = NetSpec::for_domain(&d, 2).with_trunk(vec![4, 3]).with_branch_hidden(vec![3]);
        let m = KernelModel::spectral(SpectralKernel::from_seed_with_gain(spec, 2, 1e-4, 2.0).unwrap());
        let src = EventPoint::new(3.0, vec![1.0]);
        let ts = midpoint_nodes(0.0, 20.0, 5);
        let ms = midpoint_nodes(0.0, 4.0, 3);
        let slice = KernelSlice {
            base_prev: src.clone(),
            base: EventPoint::new(0.0, vec![2.0]),
            axis_a: 2,
            values_a: ts.clone(),
            axis_b: 3,
            values_b: ms.clone(),
        }
        .evaluate(&m);
        let g = kernel_grid(&m, &[src], &grid_points(&ts, &[ms]));
        let a: Vec<Option<f64>> = slice.cells.iter().map(|c| c.2).collect();
        let b: Vec<Option<f64>> = g.cells.iter().map(|c| c.2).collect();
        assert_eq!(a, b);
    }
}
