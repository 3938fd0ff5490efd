//! Acceptance criteria AC1–AC9, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance -- AC3 AC5` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nsmpp_core::evaluator::{intensity_mae, predictive_loglik, EvalGrid};
use nsmpp_core::kernel::{mean_offspring, BasisKernel, CosineBasis, KernelFamily, KernelModel, SpectralKernel};
use nsmpp_core::likelihood::{draw_samples, log_likelihood, log_likelihood_grad, mc_integral_estimate, MCIntegralConfig};
use nsmpp_core::net::NetSpec;
use nsmpp_core::rng::derive_seed;
use nsmpp_core::simulator::{simulate_dataset, SimConfig, SimError};
use nsmpp_core::trainer::{train, TrainConfig};
use nsmpp_core::{Dataset, Domain, EventPoint, EventSequence};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn ac1() -> Outcome {
    let d = Domain::temporal(10.0).unwrap();
    let m = KernelModel::homogeneous(2.0).unwrap();
    let ev = [1.0, 2.0, 3.5, 7.0, 9.0].map(EventPoint::temporal).to_vec();
    let ds = Dataset::from_events(d, vec![ev]).unwrap();
    let ll = log_likelihood(&m, &ds, &MCIntegralConfig::with_samples(17, 1)).mean;
    let want = 5.0 * 2f64.ln() - 20.0;
    let err = (ll - want).abs();
    check(err <= 1e-12, format!("ℓ = {ll:.15}, 5 ln 2 − 20 = {want:.15}, |diff| = {err:.1e} (tol 1e-12)"))
}

fn ac2() -> Outcome {
    let d = Domain::temporal(10.0).unwrap();
    let spec = NetSpec::for_domain(&d, 2).with_trunk(vec![8, 8, 4]);
    let nu = SpectralKernel::nu_for_branching(&d, &spec, 0.5);
    let k = SpectralKernel::from_seed_with_gain(spec, 21, nu, 2.0).unwrap();
    let m = KernelModel::spectral(k).with_trainable_mu(true).unwrap();
    let ev = [1.3, 4.2, 7.9].map(EventPoint::temporal).to_vec();
    let ds = Dataset::from_events(d, vec![ev]).unwrap();
    let cfg = MCIntegralConfig { n_samples: 200, seed: 99, resample_each_step: false };
    let g = log_likelihood_grad(&m, &ds, &[0], &cfg, 0).grad;
    let p0 = m.params();
    let mut worst = (0.0f64, 0usize);
    for c in 0..p0.len() {
        // five-point stencil: a 1e-5 step loses the ~1e-7 entries to cancellation
        let h = 1e-3 * p0[c].abs().max(1.0);
        let at = |v: f64| {
            let mut p = p0.clone();
            p[c] = v;
            let mut mp = m.clone();
            mp.set_params(&p).unwrap();
            log_likelihood(&mp, &ds, &cfg).mean
        };
        let fd = (8.0 * (at(p0[c] + h) - at(p0[c] - h)) - (at(p0[c] + 2.0 * h) - at(p0[c] - 2.0 * h))) / (12.0 * h);
        let err = (fd - g[c]).abs() / g[c].abs().max(1e-6);
        if err > worst.0 || err.is_nan() {
            worst = (err, c);
        }
    }
    check(
        worst.0 < 1e-4,
        format!("{} parameters, max relative error {:.2e} at coordinate {} (tol 1e-4)", p0.len(), worst.0, worst.1),
    )
}

fn ac3() -> Outcome {
    let m = KernelModel::exponential(0.5, 1.0).unwrap();
    let s = EventSequence::new(vec![EventPoint::temporal(0.0)], Domain::temporal(100.0).unwrap()).unwrap();
    let est = mc_integral_estimate(&m, &s, &MCIntegralConfig::with_samples(1_000_000, 2024), 0, 0);
    let want = 100.0 + 0.5 * (1.0 - (-100f64).exp());
    let z = (est.value - want) / est.std_error;
    check(z.abs() < 3.0, format!("estimate {:.5} ± {:.5}, closed form {want:.5}, z = {z:.2} (|z| < 3)", est.value, est.std_error))
}

fn ac4() -> Outcome {
    let d = Domain::temporal(100.0).unwrap();
    let run = |m: KernelModel, seed| simulate_dataset(&SimConfig::new(m, d.clone(), seed), 500);
    let mut notes = Vec::new();
    let mut ok = true;
    let mut violations = 0;

    match run(KernelModel::homogeneous(3.0).unwrap(), 41) {
        Ok(out) => {
            let c: Vec<f64> = out.dataset.sequences().iter().map(|s| s.len() as f64).collect();
            let (mean, var) = mean_var(&c);
            let tol = 3.0 * (300f64 / 500.0).sqrt();
            ok &= (mean - 300.0).abs() <= tol && (var - 300.0).abs() <= 0.15 * 300.0;
            notes.push(format!("(a) mean {mean:.2} (300 ± {tol:.2}), var {var:.1} (300 ± 15%)"));
        }
        Err(SimError::BoundViolation { .. }) => violations += 1,
        Err(e) => return Err(format!("(a) {e}")),
    }
    match run(KernelModel::exponential(0.5, 1.0).unwrap(), 42) {
        Ok(out) => {
            let c: Vec<f64> = out.dataset.sequences().iter().map(|s| s.len() as f64).collect();
            let (mean, var) = mean_var(&c);
            let se = (var / c.len() as f64).sqrt();
            ok &= (mean - 200.0).abs() <= 3.0 * se && out.exploded() == 0;
            notes.push(format!("(b) mean {mean:.2} (200 ± 3·{se:.2})"));
        }
        Err(SimError::BoundViolation { .. }) => violations += 1,
        Err(e) => return Err(format!("(b) {e}")),
    }
    ok &= violations == 0;
    notes.push(format!("(c) bound violations {violations}"));
    check(ok, notes.join("; "))
}

fn ac5() -> Outcome {
    let truth = KernelModel::exponential(0.5, 1.0).unwrap();
    let ds = simulate_dataset(&SimConfig::new(truth, Domain::temporal(100.0).unwrap(), 5), 200).unwrap().dataset;
    let cfg = TrainConfig { iterations: 2000, seed: 55, ..TrainConfig::default() };
    let out = train(KernelModel::exponential(0.2, 2.0).unwrap(), &ds, &cfg).map_err(|e| e.to_string())?;
    let KernelFamily::Exponential(k) = out.model.family() else { unreachable!() };
    let (ra, rb) = ((k.alpha - 0.5).abs() / 0.5, (k.beta - 1.0).abs());
    check(
        ra <= 0.1 && rb <= 0.1,
        format!("α̂ = {:.4} ({:.1}%), β̂ = {:.4} ({:.1}%) from start (0.2, 2.0) (tol 10%)", k.alpha, 100.0 * ra, k.beta, 100.0 * rb),
    )
}

/// One repetition of the kernel-recovery comparison. Returns
/// (ℓ spectral, ℓ exponential, MAE spectral, MAE exponential).
fn ac6_rep(rep: u64) -> (f64, f64, f64, f64) {
    let d = Domain::temporal(100.0).unwrap();
    let spec = NetSpec::for_domain(&d, 2).with_trunk(vec![16, 16, 4]).with_branch_hidden(vec![8, 8]);
    let init_nu = SpectralKernel::nu_for_branching(&d, &spec, 0.5);
    // random feature net, spectrum rescaled so an event has 0.5 expected children
    let gen_seed = derive_seed(6, "ac6-truth", &[rep]);
    let probe = KernelModel::spectral(SpectralKernel::from_seed(spec.clone(), gen_seed, 1e-6).unwrap());
    let gen_nu = 1e-6 * 0.5 / mean_offspring(&probe, &d, 200);
    let truth = KernelModel::spectral(SpectralKernel::from_seed(spec.clone(), gen_seed, gen_nu).unwrap());
    let sim = simulate_dataset(&SimConfig::new(truth.clone(), d.clone(), derive_seed(6, "ac6-data", &[rep])), 200).unwrap();
    assert_eq!(sim.exploded(), 0);
    let ds = sim.dataset;

    let cfg = TrainConfig {
        iterations: 600,
        mc: MCIntegralConfig::with_samples(300, derive_seed(6, "ac6-mc", &[rep])),
        seed: derive_seed(6, "ac6-train", &[rep]),
        ..TrainConfig::default()
    };
    let fresh = SpectralKernel::from_seed(spec, derive_seed(6, "ac6-init", &[rep]), init_nu).unwrap();
    let spectral = train(KernelModel::spectral(fresh), &ds, &cfg).unwrap();
    let exp = train(KernelModel::exponential(0.2, 1.0).unwrap(), &ds, &cfg).unwrap();
    assert_eq!(spectral.split, exp.split);

    let test = ds.subset(&spectral.split.holdout);
    let mc = MCIntegralConfig { n_samples: 2000, seed: derive_seed(6, "ac6-eval", &[rep]), resample_each_step: false };
    let grid = EvalGrid::default();
    (
        predictive_loglik(&spectral.model, &test, &mc).mean,
        predictive_loglik(&exp.model, &test, &mc).mean,
        intensity_mae(&truth, &spectral.model, &test, &grid).unwrap().mean,
        intensity_mae(&truth, &exp.model, &test, &grid).unwrap().mean,
    )
}

fn ac6() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for rep in 0..10 {
        let (ls, le, ms, me) = ac6_rep(rep);
        let win = ls > le && ms < me;
        wins += usize::from(win);
        rows.push(format!("[{rep}] ℓ {ls:.2} vs {le:.2}, MAE {ms:.2} vs {me:.2}{}", if win { "" } else { " ✗" }));
        eprintln!("  AC6 {}", rows.last().unwrap());
    }
    check(wins >= 9, format!("spectral beats exponential on both metrics in {wins}/10 (need ≥ 9)"))
}

fn ac7() -> Outcome {
    let truth = KernelModel::exponential(0.5, 1.0).unwrap();
    let d = Domain::temporal(50.0).unwrap();
    let cfg = MCIntegralConfig { n_samples: 1000, seed: 71, resample_each_step: false };
    let mut wins = [0usize; 2];
    for rep in 0..100u64 {
        let test = simulate_dataset(&SimConfig::new(truth.clone(), d.clone(), derive_seed(7, "ac7", &[rep])), 100)
            .unwrap()
            .dataset;
        let base = log_likelihood(&truth, &test, &cfg).mean;
        for (w, delta) in wins.iter_mut().zip([-0.2, 0.2]) {
            let other = KernelModel::exponential(0.5 + delta, 1.0).unwrap();
            *w += usize::from(base > log_likelihood(&other, &test, &cfg).mean);
        }
    }
    check(wins.iter().all(|&w| w >= 95), format!("true α wins vs α−0.2: {}/100, vs α+0.2: {}/100 (need ≥ 95)", wins[0], wins[1]))
}

fn ac8() -> Outcome {
    let d = Domain::new(20.0, vec![0.0], vec![1.0]).unwrap();
    let basis = CosineBasis::new(&d, 4);
    let s = basis.size();
    let a: Vec<f64> = (0..s * s).map(|i| 0.004 * ((i * 7 % 5) as f64) - 0.003).collect();
    let m = KernelModel::basis(BasisKernel::dense(basis.clone(), a).unwrap());
    let ds = simulate_dataset(&SimConfig::new(m.clone(), d.clone(), 88), 20).map_err(|e| e.to_string())?.dataset;
    let n_mc = 300;
    let cfg = MCIntegralConfig::with_samples(n_mc, 808);
    let step = 4;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let got = log_likelihood_grad(&m, &ds, &idx, &cfg, step).grad;

    // brute force: λ and η_pq from explicit double sums over the history
    let a_mat = m.params();
    let lambda = |seq: &EventSequence, x: &EventPoint| -> f64 {
        let bx = basis.eval(x);
        let mut v = m.mu();
        for xp in seq.history(x.t) {
            let bp = basis.eval(xp);
            for p in 0..s {
                for q in 0..s {
                    v += bp[p] * a_mat[p * s + q] * bx[q];
                }
            }
        }
        v
    };
    let eta = |seq: &EventSequence, x: &EventPoint| -> Vec<f64> {
        let bx = basis.eval(x);
        let mut e = vec![0.0; s * s];
        for xp in seq.history(x.t) {
            let bp = basis.eval(xp);
            for p in 0..s {
                for q in 0..s {
                    e[p * s + q] += bp[p] * bx[q];
                }
            }
        }
        e
    };
    let mut want = vec![0.0; s * s];
    for (j, seq) in ds.sequences().iter().enumerate() {
        for x in seq.events() {
            let lam = lambda(seq, x);
            for (w, e) in want.iter_mut().zip(eta(seq, x)) {
                *w += e / lam;
            }
        }
        for x in draw_samples(&d, n_mc, cfg.sample_seed(j, step)) {
            for (w, e) in want.iter_mut().zip(eta(seq, &x)) {
                *w -= d.volume() * e / n_mc as f64;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (g, w) in got.iter().zip(&mut want) {
        *w /= ds.len() as f64;
        worst = worst.max((g - *w).abs() / w.abs().max(1e-300));
    }
    check(
        worst <= 1e-10 && got.len() == s * s,
        format!("{} events, {}×{} entries, max relative difference {worst:.2e} (tol 1e-10)", ds.total_events(), s, s),
    )
}

fn nsmpp(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nsmpp")).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("nsmpp {} failed: {}{}", args.join(" "), stdout, String::from_utf8_lossy(&out.stderr)))
    }
}

fn ac9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name).to_string_lossy().into_owned();
    let (sim, exp, spec, ev) = (p("sim"), p("train-exp"), p("train-spectral"), p("eval"));
    let data = Path::new(&sim).join("dataset.csv").to_string_lossy().into_owned();
    let truth = Path::new(&sim).join("true_model.ckpt").to_string_lossy().into_owned();
    let fitted = Path::new(&spec).join("model.ckpt").to_string_lossy().into_owned();
    nsmpp(&["simulate", "--model", "exp", "--mu", "1", "--alpha", "0.5", "--beta", "1", "--T", "100", "--n", "60", "--seed", "7", "--out", &sim])?;
    nsmpp(&["train", "--model", "exp", "--alpha", "0.2", "--data", &data, "--train.iterations", "100", "--train.eval_every", "10", "--out", &exp])?;
    nsmpp(&[
        "train", "--model", "spectral", "--rank", "2", "--model.trunk", "[8, 8, 4]", "--model.branch_hidden", "[8]", "--data", &data,
        "--train.iterations", "30", "--train.mc_samples", "100", "--train.checkpoint_every", "10", "--out", &spec,
    ])?;
    nsmpp(&["eval", "--data", &data, "--checkpoint", &fitted, "--true-model", &truth, "--eval.time_nodes", "200", "--export-figures", "--out", &ev])?;
    let mut notes = Vec::new();
    for dir in [&sim, &exp, &spec, &ev] {
        let out = nsmpp(&["repro", dir])?;
        let name = Path::new(dir).file_name().unwrap().to_string_lossy().into_owned();
        notes.push(format!("{name}: {}", out.lines().last().unwrap_or("").trim()));
    }
    Ok(notes.join("; "))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("AC1", ac1, Duration::from_secs(1)),
        ("AC2", ac2, Duration::from_secs(30)),
        ("AC3", ac3, Duration::from_secs(60)),
        ("AC4", ac4, Duration::from_secs(120)),
        ("AC5", ac5, Duration::from_secs(600)),
        ("AC6", ac6, Duration::from_secs(7200)),
        ("AC7", ac7, Duration::from_secs(600)),
        ("AC8", ac8, Duration::from_secs(60)),
        ("AC9", ac9, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| x == name) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", budget.as_secs())),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("{name} {} {detail} [{:.2}s]", if pass { "PASS" } else { "FAIL" }, secs.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
