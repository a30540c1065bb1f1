//! Acceptance checks. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity and runtime, then asserts.
//!
//! Tests hold a shared lock so that runtimes are measured without
//! competing for the CPU.

use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lepski_huber::dataset::Dataset;
use lepski_huber::experiments::{
    log_log_slope, run_consistency, run_coverage, run_mom_mad_checks, EstimatorKind, ExperimentSpec,
};
use lepski_huber::glasso::{graphical_lasso, kkt_residual, objective, CovMatrix};
use lepski_huber::huber::{fit_huber, HuberConfig, WeightSpec};
use lepski_huber::inference::{efficiency_identity_check, one_step};
use lepski_huber::lepski::select;
use lepski_huber::rng::Rng;
use lepski_huber::score::ScoreFunction;
use lepski_huber::glasso::PrecisionEstimate;
use nalgebra::{DMatrix, DVector};

static LOCK: Mutex<()> = Mutex::new(());

fn report(id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    println!(
        "[criterion {id:2}] {} {name}: {detail} ({:.2} s, limit {} s)",
        if pass && in_time { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
    assert!(in_time, "criterion {id} ({name}) exceeded {limit:?}: {elapsed:?}");
}

fn random_data(rng: &mut Rng, n: usize, p: usize) -> Dataset {
    let x = DMatrix::from_fn(n, p, |_, _| rng.normal());
    let beta = DVector::from_fn(p, |_, _| if rng.uniform() < 0.5 { 0.0 } else { 2.0 * rng.normal() });
    let y = &x * beta + DVector::from_fn(n, |_, _| rng.student_t(3));
    Dataset::new(x, y).unwrap()
}

// Reference objective written out directly from the definition.
fn oracle_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, tau: f64, lambda: f64, b: f64) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let row = x.row(i);
        let w = (b / row.norm()).min(1.0);
        let u = ((row * beta)[0] - y[i]) * w;
        let l = if u.abs() <= tau { 0.5 * u * u } else { tau * u.abs() - 0.5 * tau * tau };
        total += l * w;
    }
    total / n as f64 + lambda * tau * beta.iter().map(|v| v.abs()).sum::<f64>()
}

// Plain subgradient descent with diminishing steps, keeping the best value.
fn subgradient_oracle(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, lambda: f64, b: f64, iters: usize) -> f64 {
    let (n, p) = (x.nrows(), x.ncols());
    let w: Vec<f64> = (0..n).map(|i| (b / x.row(i).norm()).min(1.0)).collect();
    let mut beta = DVector::zeros(p);
    let mut best = oracle_objective(x, y, &beta, tau, lambda, b);
    let scale = (0..n).map(|i| w[i] * w[i] * x.row(i).norm_squared()).sum::<f64>() / n as f64;
    for t in 0..iters {
        let mut g = DVector::zeros(p);
        for i in 0..n {
            let u = ((x.row(i) * &beta)[0] - y[i]) * w[i];
            let d = u.clamp(-tau, tau) * w[i] * w[i];
            g += x.row(i).transpose() * (d / n as f64);
        }
        for j in 0..p {
            g[j] += lambda * tau * if beta[j] > 0.0 { 1.0 } else if beta[j] < 0.0 { -1.0 } else { 0.0 };
        }
        let step = 1.0 / (scale.max(1e-12) * (1.0 + t as f64).sqrt());
        beta -= g * step;
        best = best.min(oracle_objective(x, y, &beta, tau, lambda, b));
    }
    best
}

#[test]
fn criterion_01_solver_correctness() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt: f64 = 0.0;
    for _ in 0..50 {
        let n = 5 + rng.below(16);
        let p = 2 + rng.below(19);
        let data = random_data(&mut rng, n, p);
        let tau = 0.2 + 2.0 * rng.uniform();
        let lambda = 0.01 + 0.2 * rng.uniform();
        let cfg = HuberConfig::new(tau, lambda).with_weights(WeightSpec::identity(1.0));
        let est = fit_huber(&data, &cfg, None).unwrap();
        let ours = oracle_objective(data.x(), data.y(), &est.beta, tau, lambda, 1.0);
        let oracle = subgradient_oracle(data.x(), data.y(), tau, lambda, 1.0, 5000);
        worst_gap = worst_gap.max(ours - oracle);
        worst_kkt = worst_kkt.max(if est.converged { est.kkt_residual } else { f64::INFINITY });
    }
    report(
        1,
        "solver vs subgradient oracle",
        worst_gap <= 1e-6 && worst_kkt <= 1e-8,
        &format!("max objective excess {worst_gap:.3e}, max KKT residual {worst_kkt:.3e}"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_02_ols_reduction() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = Rng::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, p) = (30 + rng.below(20), 2 + rng.below(6));
        let data = random_data(&mut rng, n, p);
        let cfg = HuberConfig::new(1e6, 0.0).with_weights(WeightSpec::unweighted());
        let est = fit_huber(&data, &cfg, None).unwrap();
        let xtx = data.x().tr_mul(data.x());
        let xty = data.x().tr_mul(data.y());
        let ols = xtx.cholesky().unwrap().solve(&xty);
        worst = worst.max((est.beta - ols).amax());
    }
    report(
        2,
        "OLS reduction",
        worst <= 1e-6,
        &format!("max |beta - beta_ols| = {worst:.3e}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_03_scale_equivariance() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = Rng::new(303);
    let data = random_data(&mut rng, 40, 6);
    let (tau, lambda) = (0.8, 0.05);
    let tight = |tau: f64| HuberConfig {
        tol: 1e-15,
        kkt_tol: 1e-12,
        max_iter: 200_000,
        ..HuberConfig::new(tau, lambda)
    };
    let base = fit_huber(&data, &tight(tau), None).unwrap();
    let mut worst: f64 = 0.0;
    for c in [0.5, 3.0] {
        let scaled = Dataset::new(data.x().clone(), data.y() * c).unwrap();
        let est = fit_huber(&scaled, &tight(c * tau), None).unwrap();
        worst = worst.max((est.beta - &base.beta * c).amax());
    }
    report(
        3,
        "scale equivariance",
        worst <= 1e-8,
        &format!("max |fit(cy, c tau) - c fit(y, tau)| = {worst:.3e}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_04_lepski_rule() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dv = |v: &[f64]| DVector::from_row_slice(v);
    let hand = select(&[(2.0, dv(&[10.0, 0.0])), (4.0, dv(&[0.0, 0.0])), (8.0, dv(&[0.1, 0.0]))], 1.0, 1, 100, 100).unwrap();
    let same: Vec<_> = (0..5).map(|j| (0.5 * 2f64.powi(j), dv(&[1.0, 2.0, 3.0]))).collect();
    let equal = select(&same, 20.0, 2, 50, 20).unwrap();
    report(
        4,
        "Lepski rule",
        hand.j_star == Some(2) && hand.beta == Some(vec![0.0, 0.0]) && equal.j_star == Some(1),
        &format!("hand example j* = {:?}, all-equal j* = {:?}", hand.j_star, equal.j_star),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_05_debiased_lasso_reduction() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = Rng::new(505);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, p) = (20 + rng.below(30), 2 + rng.below(8));
        let data = random_data(&mut rng, n, p);
        let beta = DVector::from_fn(p, |_, _| rng.normal());
        let a = DMatrix::from_fn(p, p, |_, _| rng.normal());
        let theta = PrecisionEstimate::fixed(a.tr_mul(&a) + DMatrix::identity(p, p)).unwrap();
        let est = one_step(&data, &beta, &theta, &ScoreFunction::gaussian()).unwrap();
        let r = data.y() - data.x() * &beta;
        let expected = &beta + &theta.theta_hat * data.x().tr_mul(&r) / n as f64;
        let got = DVector::from_vec(est.b_psi);
        worst = worst.max((got - expected).amax());
    }
    report(
        5,
        "debiased Lasso reduction",
        worst <= 1e-10,
        &format!("max deviation {worst:.3e}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_06_graphical_lasso() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = Rng::new(606);
    let mut notes = Vec::new();

    let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.2, 0.6, 1.5, -0.4, 0.2, -0.4, 1.0]);
    let cov = CovMatrix::new(s.clone()).unwrap();
    let inv_err = (graphical_lasso(&cov, 0.0, 1e-10, 500).unwrap().theta_hat - s.try_inverse().unwrap()).amax();
    notes.push(format!("inverse error {inv_err:.1e}"));

    let eye = CovMatrix::new(DMatrix::identity(5, 5)).unwrap();
    let fixed = graphical_lasso(&eye, 0.3, 1e-8, 500).unwrap().theta_hat == DMatrix::identity(5, 5);

    let mut worst_kkt: f64 = 0.0;
    for _ in 0..20 {
        let p = 2 + rng.below(29);
        let m = p + 5 + rng.below(40);
        let a = DMatrix::from_fn(m, p, |_, _| rng.normal());
        let s = a.tr_mul(&a) / m as f64 + DMatrix::identity(p, p) * 0.05;
        let lambda = 0.02 + 0.2 * rng.uniform();
        let cov = CovMatrix::new(s).unwrap();
        let est = graphical_lasso(&cov, lambda, 1e-8, 500).unwrap();
        let kkt = kkt_residual(&cov, &est.theta_hat, lambda).unwrap();
        worst_kkt = worst_kkt.max(if est.converged { kkt } else { f64::INFINITY });
    }
    notes.push(format!("max KKT {worst_kkt:.1e} over 20 matrices"));

    // brute force over the 2x2 positive definite cone
    let cov2 = CovMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
    let lam = 0.1;
    let est = graphical_lasso(&cov2, lam, 1e-8, 500).unwrap();
    let ours = objective(&cov2, &est.theta_hat, lam).unwrap();
    let f = |a: f64, b: f64, d: f64| a + d + b - (a * d - b * b).ln() + 2.0 * lam * b.abs();
    let mut brute = f64::INFINITY;
    for i in 0..100 {
        for j in 0..100 {
            for k in 0..100 {
                let (a, b, d) = (0.6 + 1.2 * i as f64 / 99.0, -0.9 + 0.9 * j as f64 / 99.0, 0.6 + 1.2 * k as f64 / 99.0);
                if a * d > b * b {
                    brute = brute.min(f(a, b, d));
                }
            }
        }
    }
    notes.push(format!("2x2 objective {ours:.9} vs brute force {brute:.9}"));

    report(
        6,
        "graphical Lasso",
        inv_err <= 1e-8 && fixed && worst_kkt <= 1e-8 && est.kkt_residual <= 1e-8 && ours <= brute + 1e-6,
        &notes.join(", "),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_07_efficiency_identity() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (v1, v2) = efficiency_identity_check(3, 1e-10).unwrap();
    report(
        7,
        "efficiency identity",
        (v1 - 1.5).abs() <= 1e-6 && (v1 - v2).abs() / v1 <= 1e-6,
        &format!("V1 = {v1:.10}, V2 = {v2:.10}"),
        start.elapsed(),
        Duration::from_secs(1),
    );
}

#[test]
fn criterion_08_coverage() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let pooled = |spec: &ExperimentSpec, score: &str| {
        let rep = run_coverage(spec).unwrap();
        rep
            .summary_for(spec.n_grid[0], EstimatorKind::OneStep, Some(score))
            .and_then(|s| s.pooled_coverage)
            .unwrap()
    };
    let spec = ExperimentSpec::coverage(10, 100, 0.1, 200, 1);
    let rep = run_coverage(&spec).unwrap();
    let get = |score: &str| {
        rep
            .summary_for(100, EstimatorKind::OneStep, Some(score))
            .and_then(|s| s.pooled_coverage)
            .unwrap()
    };
    let (t3, gauss) = (get("t3"), get("gaussian"));
    let high_dim = pooled(&ExperimentSpec::coverage(50, 100, 0.1, 100, 1), "t3");
    report(
        8,
        "interval coverage",
        (0.85..=0.95).contains(&t3) && gauss >= t3 - 0.05 && high_dim < 0.90,
        &format!("p=10: t3 {t3:.3}, gaussian {gauss:.3}; p=50: t3 {high_dim:.3}"),
        start.elapsed(),
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_09_consistency_scaling() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let rep = run_consistency(&ExperimentSpec::fig1(1)).unwrap();
    let curve = rep.mean_l2_curve(EstimatorKind::Lepski);
    let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
    let slope = log_log_slope(&curve);
    let errors: Vec<String> = curve.iter().map(|(n, e)| format!("{n}:{e:.2e}")).collect();
    report(
        9,
        "consistency scaling",
        decreasing && (-0.8..=-0.2).contains(&slope),
        &format!("mean l2 errors [{}], decreasing {decreasing}, log-log slope {slope:.3}", errors.join(" ")),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_10_variance_reduction() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut spec = ExperimentSpec::fig1(1);
    spec.n_grid = vec![400];
    spec.trials = 30;
    let rep = run_consistency(&spec).unwrap();
    let lep = rep.summary_for(400, EstimatorKind::Lepski, None).unwrap();
    let one = rep.summary_for(400, EstimatorKind::OneStep, None).unwrap();
    let wins = (0..4).filter(|&c| one.variances[c] <= lep.variances[c]).count();
    let ratios: Vec<String> = (0..4).map(|c| format!("{:.3}", one.variances[c] / lep.variances[c])).collect();
    report(
        10,
        "one-step variance reduction",
        wins >= 3,
        &format!("{wins}/4 coordinates reduced, variance ratios [{}]", ratios.join(" ")),
        start.elapsed(),
        Duration::from_secs(600),
    );
}

#[test]
fn criterion_11_mom_mad_monte_carlo() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let r = run_mom_mad_checks(1000, 1).unwrap();
    report(
        11,
        "median-of-means and MAD Monte Carlo",
        r.mom_failure_rate <= r.delta + 0.02 && r.mad_dominance,
        &format!(
            "MoM failure rate {:.3}, MAD(X+Y) - MAD(X) = {:.4} (se {:.4})",
            r.mom_failure_rate, r.mad_gap_mean, r.mad_gap_se
        ),
        start.elapsed(),
        Duration::from_secs(120),
    );
}

#[test]
fn criterion_12_determinism() {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let status = Command::new(env!("CARGO_BIN_EXE_lepski-huber"))
            .args(["simulate", "--scenario", "fig1", "--trials", "2", "--n-grid", "100", "--seed", "1", "--out-dir"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(out.join("fig1_seed1.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    report(
        12,
        "simulate determinism",
        !a.is_empty() && a == b,
        &format!("{} bytes, identical {}", a.len(), a == b),
        start.elapsed(),
        Duration::from_secs(60),
    );
}
