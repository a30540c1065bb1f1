//! Simulation harness: error-versus-n sweeps for the Lepski and one-step
//! estimators, interval coverage, and Monte Carlo checks of the
//! median-of-means and MAD scale estimates.
//!
//! Trial `t` at sample size `n` draws its data from the seed
//! `derive_seed(seed, [n, t])`, so any single trial can be replayed in
//! isolation and results do not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, CovariateDist, ErrorDist, SimSpec};
use crate::error::{Error, Result};
use crate::glasso::{graphical_lasso, sample_cov, GlassoConfig, PrecisionEstimate};
use crate::inference::{confidence_region, one_step};
use crate::lepski::{adaptive_fit, LepskiConfig};
use crate::rng::{derive_seed, Rng};
use crate::scale::{mad, median_of_means, MoMConfig};
use crate::score::ScoreFunction;

const SIM_K: usize = 4;
const ERROR_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// Gaussian covariates, t3 errors times 0.01, p = 200, k = 4.
    Fig1,
    /// t3 covariates and t3 errors times 0.01, p = 100, k = 4.
    Fig2,
    /// t3 covariates and errors as in `Fig2`, with intervals at level
    /// `1 - alpha` for every nonzero coefficient.
    Coverage { p: usize, alpha: f64 },
    /// Any generator setting; `n` and `seed` are overwritten per trial.
    Custom { spec: SimSpec },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Fig1 => "fig1",
            Scenario::Fig2 => "fig2",
            Scenario::Coverage { .. } => "coverage",
            Scenario::Custom { .. } => "custom",
        }
    }

    pub fn sim_spec(&self, n: usize, seed: u64) -> SimSpec {
        let t3 = ErrorDist::StudentT {
            df: 3,
            scale: ERROR_SCALE,
        };
        let base = |p: usize, covariate_dist| SimSpec {
            n,
            p,
            k: SIM_K,
            beta_values: vec![1.0; SIM_K],
            covariate_dist,
            error_dist: t3,
            seed,
        };
        match self {
            Scenario::Fig1 => base(200, CovariateDist::GaussianIdentity),
            Scenario::Fig2 => base(100, CovariateDist::StudentT { df: 3 }),
            Scenario::Coverage { p, .. } => base(*p, CovariateDist::StudentT { df: 3 }),
            Scenario::Custom { spec } => SimSpec {
                n,
                seed,
                ..spec.clone()
            },
        }
    }
}

/// Overrides applied on top of [`LepskiConfig::for_problem`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LepskiOverrides {
    pub c: Option<f64>,
    pub depth: Option<u32>,
    pub lambda: Option<f64>,
    pub b: Option<f64>,
    pub fallback: bool,
}

impl LepskiOverrides {
    pub fn apply(&self, k: usize, n: usize, p: usize) -> LepskiConfig {
        let mut cfg = LepskiConfig::for_problem(k, n, p);
        if let Some(b) = self.b {
            cfg.template.weights.b = b;
            cfg.template.lambda = crate::huber::HuberConfig::default_lambda(cfg.template.weights.b_prime(), n, p);
        }
        if let Some(c) = self.c {
            cfg.c = c;
        }
        cfg.depth = self.depth.or(cfg.depth);
        if let Some(l) = self.lambda {
            cfg.template.lambda = l;
        }
        cfg.fallback = self.fallback;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lepski: LepskiOverrides,
    #[serde(default)]
    pub mom: MoMConfig,
    #[serde(default)]
    pub glasso: GlassoConfig,
}

fn default_trials() -> usize {
    10
}

impl ExperimentSpec {
    pub fn fig1(seed: u64) -> Self {
        Self::new(Scenario::Fig1, vec![100, 200, 400, 800], 10, seed)
    }

    pub fn fig2(seed: u64) -> Self {
        Self::new(Scenario::Fig2, vec![100, 200, 400, 800], 10, seed)
    }

    pub fn coverage(p: usize, n: usize, alpha: f64, trials: usize, seed: u64) -> Self {
        Self::new(Scenario::Coverage { p, alpha }, vec![n], trials, seed)
    }

    pub fn new(scenario: Scenario, n_grid: Vec<usize>, trials: usize, seed: u64) -> Self {
        ExperimentSpec {
            scenario,
            n_grid,
            trials,
            seed,
            lepski: LepskiOverrides::default(),
            mom: MoMConfig::default(),
            glasso: GlassoConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| n < 2) {
            return Err(Error::config("n_grid must list sample sizes of at least 2"));
        }
        if let Scenario::Coverage { p, alpha } = self.scenario {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::config("alpha must lie in (0, 1)"));
            }
            if p < SIM_K {
                return Err(Error::config(format!("coverage needs p >= {SIM_K}")));
            }
        }
        self.scenario.sim_spec(self.n_grid[0], 0).validate()?;
        self.mom.validate()
    }

    /// `<scenario>_seed<seed>`, the stem shared by the report files.
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}", self.scenario.name(), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Lepski,
    OneStep,
}

impl EstimatorKind {
    fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Lepski => "lepski",
            EstimatorKind::OneStep => "one_step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub trial: usize,
    pub estimator: EstimatorKind,
    /// Score used by the one-step correction.
    pub score: Option<String>,
    pub j_star: Option<usize>,
    pub l2_error: f64,
    pub l1_error: f64,
    /// Estimates on the support of the true coefficient vector.
    pub coefficients: Vec<f64>,
    /// One entry per support coordinate in coverage runs.
    pub covered: Vec<bool>,
    pub error: Option<String>,
}

impl ReportRow {
    fn failed(n: usize, trial: usize, estimator: EstimatorKind, score: Option<String>, msg: String) -> Self {
        ReportRow {
            n,
            trial,
            estimator,
            score,
            j_star: None,
            l2_error: f64::NAN,
            l1_error: f64::NAN,
            coefficients: Vec::new(),
            covered: Vec::new(),
            error: Some(msg),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: EstimatorKind,
    pub score: Option<String>,
    pub successes: usize,
    pub failures: usize,
    pub mean_l2_error: f64,
    pub mean_l1_error: f64,
    /// Unbiased variance across trials, per support coordinate.
    pub variances: Vec<f64>,
    /// Coverage rate per support coordinate (coverage runs only).
    pub coverage: Vec<f64>,
    /// Coverage over all intervals of all successful trials.
    pub pooled_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub seed: u64,
    /// 1-based indices of the nonzero true coefficients.
    pub support: Vec<usize>,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn summary_for(&self, n: usize, estimator: EstimatorKind, score: Option<&str>) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.n == n && s.estimator == estimator && (score.is_none() || s.score.as_deref() == score))
    }

    /// `(n, mean l2 error)` pairs for one estimator, in grid order.
    pub fn mean_l2_curve(&self, estimator: EstimatorKind) -> Vec<(usize, f64)> {
        self.summary
            .iter()
            .filter(|s| s.estimator == estimator)
            .map(|s| (s.n, s.mean_l2_error))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,n,trial,estimator,score,j_star,l2_error,l1_error");
        for j in &self.support {
            let _ = write!(out, ",coef_{j}");
        }
        let with_cover = self.rows.iter().any(|r| !r.covered.is_empty());
        if with_cover {
            for j in &self.support {
                let _ = write!(out, ",covered_{j}");
            }
        }
        out.push_str(",error\n");
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.scenario,
                r.n,
                r.trial,
                r.estimator.as_str(),
                r.score.as_deref().unwrap_or(""),
                r.j_star.map(|j| j.to_string()).unwrap_or_default(),
                r.l2_error,
                r.l1_error
            );
            for k in 0..self.support.len() {
                out.push(',');
                if let Some(v) = r.coefficients.get(k) {
                    let _ = write!(out, "{v}");
                }
            }
            if with_cover {
                for k in 0..self.support.len() {
                    out.push(',');
                    if let Some(c) = r.covered.get(k) {
                        out.push_str(if *c { "1" } else { "0" });
                    }
                }
            }
            out.push(',');
            if let Some(e) = &r.error {
                out.push('"');
                out.push_str(&e.replace('"', "'"));
                out.push('"');
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>_summary.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))?;
        let json = dir.join(format!("{stem}_summary.json"));
        let body = serde_json::json!({
            "scenario": self.scenario,
            "seed": self.seed,
            "support": self.support,
            "summary": self.summary,
        });
        let mut text = serde_json::to_string_pretty(&body)?;
        text.push('\n');
        fs::write(&json, text).map_err(io_err(&json))?;
        Ok((csv, json))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn score_for(errors: &ErrorDist) -> ScoreFunction {
    match *errors {
        ErrorDist::Gaussian { .. } => ScoreFunction::gaussian(),
        ErrorDist::StudentT { df: 3, .. } => ScoreFunction::t3(),
        ErrorDist::StudentT { df, .. } => ScoreFunction::student_t(df as f64),
    }
}

fn errors_and_support(b: &DVector<f64>, truth: &DVector<f64>, support: &[usize]) -> (f64, f64, Vec<f64>) {
    let d = b - truth;
    (d.norm(), d.lp_norm(1), support.iter().map(|&j| b[j]).collect())
}

struct TrialOutput {
    rows: Vec<ReportRow>,
}

fn run_trial(spec: &ExperimentSpec, n: usize, trial: usize, alpha: Option<f64>) -> TrialOutput {
    let sim = spec.scenario.sim_spec(n, derive_seed(spec.seed, &[n as u64, trial as u64]));
    let truth = sim.beta_star();
    let support: Vec<usize> = (0..sim.p).filter(|&j| truth[j] != 0.0).collect();
    let scores: Vec<ScoreFunction> = match alpha {
        Some(_) => vec![ScoreFunction::t3(), ScoreFunction::gaussian()],
        None => vec![score_for(&sim.error_dist)],
    };
    let fail_all = |msg: String| {
        let mut rows = vec![ReportRow::failed(n, trial, EstimatorKind::Lepski, None, msg.clone())];
        for s in &scores {
            rows.push(ReportRow::failed(n, trial, EstimatorKind::OneStep, Some(s.name().into()), msg.clone()));
        }
        TrialOutput { rows }
    };

    let data = match generate(&sim) {
        Ok(d) => d,
        Err(e) => return fail_all(e.to_string()),
    };
    let lep = spec.lepski.apply(sim.k, n, sim.p);
    let fit = match adaptive_fit(&data, &lep, &spec.mom) {
        Ok(f) => f,
        Err(e) => return fail_all(e.to_string()),
    };
    let beta = fit.beta_vector().expect("selected fit has coefficients");
    let (l2, l1, coefs) = errors_and_support(&beta, &truth, &support);
    let mut rows = vec![ReportRow {
        n,
        trial,
        estimator: EstimatorKind::Lepski,
        score: None,
        j_star: fit.j_star,
        l2_error: l2,
        l1_error: l1,
        coefficients: coefs,
        covered: Vec::new(),
        error: None,
    }];

    let theta: Result<PrecisionEstimate> = {
        let lambda = spec.glasso.resolve_lambda(n, sim.p);
        graphical_lasso(&sample_cov(&data), lambda, spec.glasso.tol, spec.glasso.max_iter).and_then(|t| {
            if t.converged {
                Ok(t)
            } else {
                Err(Error::Degenerate(format!(
                    "graphical lasso stopped after {} sweeps with KKT residual {:e}",
                    t.iterations, t.kkt_residual
                )))
            }
        })
    };
    for score in &scores {
        let name = Some(score.name().to_string());
        let row = theta.as_ref().map_err(|e| e.to_string()).and_then(|theta| {
            let est = one_step(&data, &beta, theta, score).map_err(|e| e.to_string())?;
            let b = est.b_vector();
            let (l2, l1, coefs) = errors_and_support(&b, &truth, &support);
            let mut covered = Vec::new();
            if let Some(alpha) = alpha {
                for &j in &support {
                    let reg = confidence_region(&data, &est, theta, score, &[j], alpha).map_err(|e| e.to_string())?;
                    let (lo, hi) = reg.intervals[0];
                    covered.push(lo <= truth[j] && truth[j] <= hi);
                }
            }
            Ok(ReportRow {
                n,
                trial,
                estimator: EstimatorKind::OneStep,
                score: name.clone(),
                j_star: fit.j_star,
                l2_error: l2,
                l1_error: l1,
                coefficients: coefs,
                covered,
                error: None,
            })
        });
        rows.push(row.unwrap_or_else(|msg| ReportRow::failed(n, trial, EstimatorKind::OneStep, name, msg)));
    }
    TrialOutput { rows }
}

fn summarize(rows: &[ReportRow], n_grid: &[usize], k: usize) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, EstimatorKind, Option<String>)> = Vec::new();
    for &n in n_grid {
        for r in rows.iter().filter(|r| r.n == n) {
            let key = (n, r.estimator, r.score.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.into_iter()
        .map(|(n, estimator, score)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.n == n && r.estimator == estimator && r.score == score)
                .collect();
            let ok: Vec<&&ReportRow> = group.iter().filter(|r| r.is_ok()).collect();
            let m = ok.len() as f64;
            let mean = |f: &dyn Fn(&ReportRow) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / m
                }
            };
            let variances = (0..k)
                .map(|c| {
                    if ok.len() < 2 {
                        return f64::NAN;
                    }
                    let mu = ok.iter().map(|r| r.coefficients[c]).sum::<f64>() / m;
                    ok.iter().map(|r| (r.coefficients[c] - mu).powi(2)).sum::<f64>() / (m - 1.0)
                })
                .collect();
            let with_cover: Vec<&&&ReportRow> = ok.iter().filter(|r| r.covered.len() == k).collect();
            let (coverage, pooled_coverage) = if with_cover.is_empty() {
                (Vec::new(), None)
            } else {
                let t = with_cover.len() as f64;
                let per: Vec<f64> = (0..k)
                    .map(|c| with_cover.iter().filter(|r| r.covered[c]).count() as f64 / t)
                    .collect();
                let pooled = per.iter().sum::<f64>() / k as f64;
                (per, Some(pooled))
            };
            SummaryRow {
                n,
                estimator,
                score,
                successes: ok.len(),
                failures: group.len() - ok.len(),
                mean_l2_error: mean(&|r| r.l2_error),
                mean_l1_error: mean(&|r| r.l1_error),
                variances,
                coverage,
                pooled_coverage,
            }
        })
        .collect()
}

fn run(spec: &ExperimentSpec, alpha: Option<f64>) -> Result<ExperimentReport> {
    spec.validate()?;
    let probe = spec.scenario.sim_spec(spec.n_grid[0], 0);
    let support: Vec<usize> = {
        let b = probe.beta_star();
        (0..probe.p).filter(|&j| b[j] != 0.0).collect()
    };
    let jobs: Vec<(usize, usize)> = spec
        .n_grid
        .iter()
        .flat_map(|&n| (0..spec.trials).map(move |t| (n, t)))
        .collect();
    let outputs: Vec<TrialOutput> = jobs
        .par_iter()
        .map(|&(n, t)| run_trial(spec, n, t, alpha))
        .collect();
    let rows: Vec<ReportRow> = outputs.into_iter().flat_map(|o| o.rows).collect();
    let summary = summarize(&rows, &spec.n_grid, support.len());
    Ok(ExperimentReport {
        scenario: spec.scenario.name().to_string(),
        seed: spec.seed,
        support: support.iter().map(|j| j + 1).collect(),
        rows,
        summary,
    })
}

/// Lepski fit and one-step correction for every `(n, trial)`. Failures
/// are recorded in their rows and never stop the sweep.
pub fn run_consistency(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if matches!(spec.scenario, Scenario::Coverage { .. }) {
        return Err(Error::config("run_consistency does not take the coverage scenario"));
    }
    run(spec, None)
}

/// Per trial, intervals for each nonzero coefficient under both the t3
/// and the Gaussian score, recording whether each contains the truth.
pub fn run_coverage(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    match spec.scenario {
        Scenario::Coverage { alpha, .. } => run(spec, Some(alpha)),
        _ => Err(Error::config("run_coverage needs the coverage scenario")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomMadReport {
    pub trials: usize,
    pub sample_size: usize,
    pub delta: f64,
    /// Deviation allowed by the median-of-means concentration bound.
    pub mom_bound: f64,
    pub mom_failure_rate: f64,
    /// Mean of `MAD(X + Y) - MAD(X)` over trials, X normal, Y t3.
    pub mad_gap_mean: f64,
    pub mad_gap_se: f64,
    /// `MAD(X) <= MAD(X + Y) + 3 SE` in the Monte Carlo average.
    pub mad_dominance: bool,
    /// `MAD(X + 0) == MAD(X)` on every trial.
    pub mad_zero_exact: bool,
}

impl MomMadReport {
    pub fn passed(&self) -> bool {
        self.mom_failure_rate <= self.delta + 0.02 && self.mad_dominance && self.mad_zero_exact
    }
}

/// Monte Carlo of the median-of-means deviation bound on t3 samples
/// (`delta = 0.05`, n = 200, variance 3) and of MAD dominance
/// `MAD(X) <= MAD(X + Y)` for standard normal X and independent t3 Y.
pub fn run_mom_mad_checks(trials: usize, seed: u64) -> Result<MomMadReport> {
    if trials < 100 {
        return Err(Error::config("the Monte Carlo checks need at least 100 trials"));
    }
    let n = 200;
    let delta = 0.05;
    let cfg = MoMConfig::new(delta);
    // (12 v)^{1/2} (16 ln(e^{1/8} / delta) / n)^{1/2} with v = E X^2 = 3
    let log_term = (0.125f64.exp() / delta).ln();
    let mom_bound = (12.0 * 3.0f64).sqrt() * (16.0 * log_term / n as f64).sqrt();

    let per_trial: Vec<Result<(bool, f64, bool)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::new(derive_seed(seed, &[t as u64]));
            let sample: Vec<f64> = (0..n).map(|_| rng.student_t(3)).collect();
            let fail = median_of_means(&sample, &cfg)?.abs() > mom_bound;
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let xy: Vec<f64> = x.iter().map(|v| v + rng.student_t(3)).collect();
            let x0: Vec<f64> = x.iter().map(|v| v + 0.0).collect();
            let mad_x = mad(&x)?;
            Ok((fail, mad(&xy)? - mad_x, mad(&x0)? == mad_x))
        })
        .collect();
    let per_trial: Vec<(bool, f64, bool)> = per_trial.into_iter().collect::<Result<_>>()?;
    let m = trials as f64;
    let failures = per_trial.iter().filter(|r| r.0).count();
    let gap_mean = per_trial.iter().map(|r| r.1).sum::<f64>() / m;
    let gap_var = per_trial.iter().map(|r| (r.1 - gap_mean).powi(2)).sum::<f64>() / (m - 1.0);
    let gap_se = (gap_var / m).sqrt();
    Ok(MomMadReport {
        trials,
        sample_size: n,
        delta,
        mom_bound,
        mom_failure_rate: failures as f64 / m,
        mad_gap_mean: gap_mean,
        mad_gap_se: gap_se,
        mad_dominance: gap_mean >= -3.0 * gap_se,
        mad_zero_exact: per_trial.iter().all(|r| r.2),
    })
}
