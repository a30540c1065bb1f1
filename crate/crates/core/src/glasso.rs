//! Sample covariance and the graphical Lasso
//!
//! ```text
//! min_{Theta > 0}  tr(Theta S) - log det Theta + lambda sum_{i != j} |Theta_ij|
//! ```
//!
//! solved by primal block coordinate descent: each sweep re-optimizes one
//! row/column of `Theta` at a time through the dual box-constrained QP
//! of that block. Every block update is an exact minimization, so the
//! objective never increases and the iterate stays positive definite.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovMatrix {
    pub sigma_hat: DMatrix<f64>,
}

impl CovMatrix {
    pub fn new(sigma_hat: DMatrix<f64>) -> Result<Self> {
        if !sigma_hat.is_square() || sigma_hat.nrows() == 0 {
            return Err(Error::dim("covariance must be a non-empty square matrix"));
        }
        let p = sigma_hat.nrows();
        for i in 0..p {
            for j in 0..p {
                let (a, b) = (sigma_hat[(i, j)], sigma_hat[(j, i)]);
                if !a.is_finite() || (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::config("covariance must be finite and symmetric"));
                }
            }
        }
        Ok(CovMatrix { sigma_hat })
    }

    pub fn dim(&self) -> usize {
        self.sigma_hat.nrows()
    }
}

/// Uncentred `X'X / n`.
pub fn sample_cov(data: &Dataset) -> CovMatrix {
    let x = data.x();
    let mut s = x.tr_mul(x) / data.n() as f64;
    // exact symmetry regardless of summation order
    for i in 0..s.nrows() {
        for j in 0..i {
            s[(j, i)] = s[(i, j)];
        }
    }
    CovMatrix { sigma_hat: s }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlassoConfig {
    /// `None` means `0.5 sqrt(ln p / n)`.
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        GlassoConfig {
            lambda: None,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

impl GlassoConfig {
    pub fn default_lambda(n: usize, p: usize) -> f64 {
        0.5 * ((p as f64).ln() / n as f64).sqrt()
    }

    pub fn resolve_lambda(&self, n: usize, p: usize) -> f64 {
        self.lambda.unwrap_or_else(|| Self::default_lambda(n, p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionEstimate {
    pub theta_hat: DMatrix<f64>,
    pub lambda_theta: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl PrecisionEstimate {
    /// Wraps a known precision matrix (for example the population one).
    pub fn fixed(theta: DMatrix<f64>) -> Result<Self> {
        if !theta.is_square() || Cholesky::new(theta.clone()).is_none() {
            return Err(Error::config("precision matrix must be square and positive definite"));
        }
        Ok(PrecisionEstimate {
            theta_hat: theta,
            lambda_theta: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
            objective_trace: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.nrows()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = self.dim();
        write_lines(path.as_ref(), (0..p).map(|i| {
            (0..p)
                .map(|j| self.theta_hat[(i, j)].to_string())
                .collect::<Vec<_>>()
                .join(",")
        }))
    }

    /// Nonzero entries as `i,j,value` rows with 1-based indices.
    pub fn write_triplets(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = self.dim();
        let header = std::iter::once("i,j,value".to_string());
        let rows = (0..p).flat_map(move |i| (0..p).map(move |j| (i, j))).filter_map(|(i, j)| {
            let v = self.theta_hat[(i, j)];
            (v != 0.0).then(|| format!("{},{},{}", i + 1, j + 1, v))
        });
        write_lines(path.as_ref(), header.chain(rows))
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for line in lines {
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn inverse_spd(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(theta.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Degenerate("precision matrix is not positive definite".into()))
}

pub fn objective(cov: &CovMatrix, theta: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let chol = Cholesky::new(theta.clone())
        .ok_or_else(|| Error::Degenerate("precision matrix is not positive definite".into()))?;
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = theta.component_mul(&cov.sigma_hat).sum();
    let p = theta.nrows();
    let mut off = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                off += theta[(i, j)].abs();
            }
        }
    }
    Ok(trace - log_det + lambda * off)
}

/// Largest violation of the stationarity condition
/// `S - Theta^{-1} + lambda Z = 0`, `Z` a subgradient of the off-diagonal
/// l1 norm.
pub fn kkt_residual(cov: &CovMatrix, theta: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if theta.shape() != cov.sigma_hat.shape() {
        return Err(Error::dim("precision and covariance shapes differ"));
    }
    let w = inverse_spd(theta)?;
    Ok(kkt_with_inverse(cov, theta, &w, lambda))
}

fn kkt_with_inverse(cov: &CovMatrix, theta: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> f64 {
    let p = theta.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let g = cov.sigma_hat[(i, j)] - w[(i, j)];
            let t = theta[(i, j)];
            let v = if i == j {
                g.abs()
            } else if t != 0.0 {
                (g + lambda * t.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
    }
    worst
}

pub fn graphical_lasso(cov: &CovMatrix, lambda: f64, tol: f64, max_iter: usize) -> Result<PrecisionEstimate> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config("lambda_theta must be finite and nonnegative"));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::config("tol must be positive and max_iter at least 1"));
    }
    let s = &cov.sigma_hat;
    let p = s.nrows();
    if let Some(i) = (0..p).find(|&i| !(s[(i, i)] > 0.0)) {
        return Err(Error::Degenerate(format!(
            "covariance diagonal entry {} is not positive",
            i + 1
        )));
    }
    if lambda == 0.0 && Cholesky::new(s.clone()).is_none() {
        return Err(Error::Degenerate(
            "covariance is singular and lambda_theta = 0; the problem has no solution".into(),
        ));
    }

    let mut theta = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 / s[(i, i)] } else { 0.0 });
    // dual variables, gamma[(k, j)] for off-diagonal k of column j
    let mut gamma = DMatrix::from_fn(p, p, |k, j| if k == j { 0.0 } else { (-s[(k, j)]).clamp(-lambda, lambda) });

    let mut trace = vec![objective(cov, &theta, lambda)?];
    let mut kkt = kkt_residual(cov, &theta, lambda)?;
    let mut iterations = 0;
    let mut ws = Workspace::new(p);
    while kkt > tol && iterations < max_iter {
        for j in 0..p {
            update_block(s, &mut theta, &mut gamma, j, lambda, &mut ws);
        }
        iterations += 1;
        trace.push(objective(cov, &theta, lambda)?);
        kkt = kkt_residual(cov, &theta, lambda)?;
    }
    Ok(PrecisionEstimate {
        theta_hat: theta,
        lambda_theta: lambda,
        kkt_residual: kkt,
        iterations,
        converged: kkt <= tol,
        objective_trace: trace,
    })
}

struct Workspace {
    idx: Vec<usize>,
    v: DVector<f64>,
    u: DVector<f64>,
}

impl Workspace {
    fn new(p: usize) -> Self {
        Workspace {
            idx: Vec::with_capacity(p),
            v: DVector::zeros(p),
            u: DVector::zeros(p),
        }
    }
}

/// Exact minimization over row/column `j` of `Theta`.
///
/// With `Theta_11` the block without `j`, the optimal off-diagonal column
/// is `-Theta_11 (s_12 + gamma) / s_22`, where `gamma` solves
/// `min_{|gamma|_inf <= lambda} (s_12 + gamma)' Theta_11 (s_12 + gamma)`.
fn update_block(s: &DMatrix<f64>, theta: &mut DMatrix<f64>, gamma: &mut DMatrix<f64>, j: usize, lambda: f64, ws: &mut Workspace) {
    let p = s.nrows();
    ws.idx.clear();
    ws.idx.extend((0..p).filter(|&k| k != j));
    let idx = &ws.idx;
    let s22 = s[(j, j)];

    // v = s12 + gamma, u = Theta_11 v
    for &k in idx {
        ws.v[k] = s[(k, j)] + gamma[(k, j)];
    }
    for &a in idx {
        ws.u[a] = idx.iter().map(|&b| theta[(a, b)] * ws.v[b]).sum();
    }

    let scale = idx.iter().map(|&k| s[(k, j)].abs()).fold(lambda, f64::max).max(f64::MIN_POSITIVE);
    for _ in 0..10_000 {
        let mut biggest: f64 = 0.0;
        for &k in idx {
            let g = gamma[(k, j)];
            let target = (g - ws.u[k] / theta[(k, k)]).clamp(-lambda, lambda);
            let delta = target - g;
            if delta != 0.0 {
                gamma[(k, j)] = target;
                ws.v[k] += delta;
                for &a in idx {
                    ws.u[a] += theta[(a, k)] * delta;
                }
                biggest = biggest.max(delta.abs());
            }
        }
        if biggest <= 1e-14 * scale {
            break;
        }
    }

    let quad: f64 = idx.iter().map(|&k| ws.v[k] * ws.u[k]).sum();
    for &k in idx {
        // interior dual coordinates have zero gradient at the optimum,
        // which makes the primal entry exactly zero
        let interior = gamma[(k, j)].abs() < lambda;
        let t = if interior { 0.0 } else { -ws.u[k] / s22 };
        theta[(k, j)] = t;
        theta[(j, k)] = t;
        gamma[(j, k)] = gamma[(k, j)];
    }
    theta[(j, j)] = 1.0 / s22 + quad / (s22 * s22);
}
