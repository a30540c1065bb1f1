//! Weighted l1-penalized Huber regression solved by composite (proximal)
//! gradient descent with soft thresholding.
//!
//! The program is
//!
//! ```text
//! min_beta  (1/n) sum_i l_tau((x_i' beta - y_i) w(x_i)) w(x_i) + lambda tau ||beta||_1
//! ```
//!
//! with `w(x) = min(1, b / ||B x||_2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub fn huber_loss(u: f64, tau: f64) -> f64 {
    let a = u.abs();
    if a <= tau {
        0.5 * u * u
    } else {
        tau * a - 0.5 * tau * tau
    }
}

/// Derivative of [`huber_loss`]: `u` clipped to `[-tau, tau]`.
pub fn huber_deriv(u: f64, tau: f64) -> f64 {
    u.clamp(-tau, tau)
}

/// Componentwise `sign(v_j) max(|v_j| - t, 0)`.
pub fn soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| soft(x, t))
}

#[inline]
fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Leverage weights `w(x) = min(1, b / ||B x||_2)`.
///
/// `matrix = None` stands for `B = I`. An infinite `b` switches weighting off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<DMatrix<f64>>,
}

impl WeightSpec {
    pub fn identity(b: f64) -> Self {
        WeightSpec { b, matrix: None }
    }

    /// `w == 1` for every covariate vector.
    pub fn unweighted() -> Self {
        WeightSpec::identity(f64::INFINITY)
    }

    pub fn with_matrix(b: f64, matrix: DMatrix<f64>) -> Result<Self> {
        let spec = WeightSpec {
            b,
            matrix: Some(matrix),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::config("weight constant b must be positive"));
        }
        if let Some(m) = &self.matrix {
            if !m.is_square() {
                return Err(Error::dim("weight matrix B must be square"));
            }
            let asym = (m - m.transpose()).amax();
            if asym > 1e-12 * m.amax().max(1.0) {
                return Err(Error::config("weight matrix B must be symmetric"));
            }
            if self.min_eigenvalue() <= 0.0 {
                return Err(Error::config("weight matrix B must be positive definite"));
            }
        }
        Ok(())
    }

    fn min_eigenvalue(&self) -> f64 {
        match &self.matrix {
            None => 1.0,
            Some(m) => m.clone().symmetric_eigenvalues().min(),
        }
    }

    /// `b' = b / lambda_min(B)`, the bound on `||w(x) x||_2`.
    pub fn b_prime(&self) -> f64 {
        self.b / self.min_eigenvalue()
    }
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::identity(1.0)
    }
}

pub fn weight<'a>(x: impl IntoIterator<Item = &'a f64>, spec: &WeightSpec) -> Result<f64> {
    let x: Vec<f64> = x.into_iter().copied().collect();
    let norm = match &spec.matrix {
        None => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Some(m) => {
            if m.ncols() != x.len() {
                return Err(Error::dim(format!(
                    "x has length {} but B is {}x{}",
                    x.len(),
                    m.nrows(),
                    m.ncols()
                )));
            }
            (m * DVector::from_vec(x)).norm()
        }
    };
    if norm == 0.0 {
        return Ok(1.0);
    }
    Ok((spec.b / norm).min(1.0))
}

/// Step-size rule for the proximal gradient iteration. The step is `1/eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Fixed { eta: f64 },
    /// Start from `eta0` (or a power-iteration Lipschitz estimate when
    /// `None`) and divide by `shrink` until sufficient decrease holds.
    Backtracking { eta0: Option<f64>, shrink: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            eta0: None,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuberConfig {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub step: StepRule,
    /// Relative objective decrease below which the run may stop.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Required first-order optimality residual at termination.
    #[serde(default = "default_kkt_tol")]
    pub kkt_tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Nesterov momentum with objective-based restart.
    #[serde(default = "default_accelerate")]
    pub accelerate: bool,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_kkt_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    20_000
}
fn default_accelerate() -> bool {
    true
}

impl HuberConfig {
    pub fn new(tau: f64, lambda: f64) -> Self {
        HuberConfig {
            tau,
            lambda,
            weights: WeightSpec::default(),
            step: StepRule::default(),
            tol: default_tol(),
            kkt_tol: default_kkt_tol(),
            max_iter: default_max_iter(),
            accelerate: default_accelerate(),
        }
    }

    pub fn with_weights(mut self, weights: WeightSpec) -> Self {
        self.weights = weights;
        self
    }

    /// `lambda = 0.005 b' sqrt(log p / n)`.
    pub fn default_lambda(b_prime: f64, n: usize, p: usize) -> f64 {
        0.005 * b_prime * ((p as f64).ln() / n as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        match self.step {
            StepRule::Fixed { eta } if !(eta > 0.0) => {
                return Err(Error::config("fixed step eta must be positive"))
            }
            StepRule::Backtracking { eta0, shrink } => {
                if !(shrink > 0.0 && shrink < 1.0) {
                    return Err(Error::config("backtracking shrink must lie in (0, 1)"));
                }
                if matches!(eta0, Some(e) if !(e > 0.0)) {
                    return Err(Error::config("eta0 must be positive"));
                }
            }
            _ => {}
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: DVector<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

impl Estimate {
    pub fn objective_final(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Serialize, Deserialize)]
struct EstimateJson {
    beta: Vec<f64>,
    iterations: usize,
    converged: bool,
    kkt_residual: f64,
    objective_final: f64,
}

impl Serialize for Estimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EstimateJson {
            beta: self.beta.as_slice().to_vec(),
            iterations: self.iterations,
            converged: self.converged,
            kkt_residual: self.kkt_residual,
            objective_final: self.objective_final(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Estimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = EstimateJson::deserialize(d)?;
        Ok(Estimate {
            beta: DVector::from_vec(j.beta),
            objective_trace: vec![j.objective_final],
            iterations: j.iterations,
            converged: j.converged,
            kkt_residual: j.kkt_residual,
        })
    }
}

/// Dataset plus precomputed leverage weights; shared by every fit that
/// uses the same `WeightSpec` (e.g. a whole Lepski grid).
#[derive(Debug, Clone)]
pub struct HuberProblem<'a> {
    data: &'a Dataset,
    w: DVector<f64>,
    w_sq: DVector<f64>,
    lipschitz: f64,
}

impl<'a> HuberProblem<'a> {
    pub fn new(data: &'a Dataset, weights: &WeightSpec) -> Result<Self> {
        weights.validate()?;
        let x = data.x();
        let mut w = DVector::zeros(data.n());
        for i in 0..data.n() {
            w[i] = weight(x.row(i).iter(), weights)?;
        }
        let w_sq = w.map(|v| v * v);
        let w_cube = w.map(|v| v * v * v);
        let lipschitz = power_iteration(x, &w_cube, 50);
        Ok(HuberProblem {
            data,
            w,
            w_sq,
            lipschitz,
        })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.w
    }

    /// Power-iteration estimate of the largest eigenvalue of
    /// `(1/n) sum_i w_i^3 x_i x_i'`, a Lipschitz constant for the gradient.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    fn residual(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.data.x() * beta - self.data.y()
    }

    fn smooth_from_residual(&self, r: &DVector<f64>, tau: f64) -> f64 {
        let n = self.data.n() as f64;
        r.iter()
            .zip(self.w.iter())
            .map(|(&ri, &wi)| huber_loss(ri * wi, tau) * wi)
            .sum::<f64>()
            / n
    }

    fn gradient_from_residual(&self, r: &DVector<f64>, tau: f64) -> DVector<f64> {
        let n = self.data.n() as f64;
        let mut s = DVector::zeros(r.len());
        for i in 0..r.len() {
            s[i] = huber_deriv(r[i] * self.w[i], tau) * self.w_sq[i] / n;
        }
        self.data.x().tr_mul(&s)
    }

    pub fn smooth_loss(&self, beta: &DVector<f64>, tau: f64) -> f64 {
        self.smooth_from_residual(&self.residual(beta), tau)
    }

    pub fn gradient(&self, beta: &DVector<f64>, tau: f64) -> DVector<f64> {
        self.gradient_from_residual(&self.residual(beta), tau)
    }

    pub fn objective(&self, beta: &DVector<f64>, cfg: &HuberConfig) -> f64 {
        self.smooth_loss(beta, cfg.tau) + cfg.lambda * cfg.tau * beta.lp_norm(1)
    }

    pub fn kkt(&self, beta: &DVector<f64>, cfg: &HuberConfig) -> f64 {
        kkt_from_gradient(beta, &self.gradient(beta, cfg.tau), cfg.lambda * cfg.tau)
    }

    pub fn fit(&self, cfg: &HuberConfig, init: Option<&DVector<f64>>) -> Result<Estimate> {
        cfg.validate()?;
        let p = self.data.p();
        let mut x = match init {
            Some(b) => {
                self.data.check_beta(b)?;
                b.clone()
            }
            None => DVector::zeros(p),
        };
        let tau = cfg.tau;
        let pen = cfg.lambda * tau;
        let penalty = |b: &DVector<f64>| pen * b.lp_norm(1);

        let mut rx = self.residual(&x);
        let mut fx = self.smooth_from_residual(&rx, tau) + penalty(&x);
        if !fx.is_finite() {
            return Err(Error::NonFinite { iteration: 0 });
        }
        let mut trace = vec![fx];
        let mut kkt = kkt_from_gradient(&x, &self.gradient_from_residual(&rx, tau), pen);
        if kkt <= cfg.kkt_tol {
            return Ok(Estimate {
                beta: x,
                objective_trace: trace,
                iterations: 0,
                converged: true,
                kkt_residual: kkt,
            });
        }

        let (mut eta, shrink, backtrack) = match cfg.step {
            StepRule::Fixed { eta } => (eta, 1.0, false),
            StepRule::Backtracking { eta0, shrink } => (
                eta0.unwrap_or_else(|| self.lipschitz.max(1e-300)),
                shrink,
                true,
            ),
        };

        let mut y = x.clone();
        let mut ry = rx.clone();
        let mut t = 1.0f64;
        let mut converged = false;
        let mut iterations = 0;

        while iterations < cfg.max_iter {
            iterations += 1;
            let smooth_y = self.smooth_from_residual(&ry, tau);
            let grad_y = self.gradient_from_residual(&ry, tau);
            let (z, rz, smooth_z) = loop {
                let z = (&y - &grad_y / eta).map(|v| soft(v, pen / eta));
                let rz = self.residual(&z);
                let smooth_z = self.smooth_from_residual(&rz, tau);
                if !backtrack {
                    break (z, rz, smooth_z);
                }
                let d = &z - &y;
                let model = smooth_y + grad_y.dot(&d) + 0.5 * eta * d.norm_squared();
                if smooth_z <= model + 1e-15 * smooth_y.abs() || eta > 1e300 {
                    break (z, rz, smooth_z);
                }
                eta /= shrink;
            };
            let fz = smooth_z + penalty(&z);
            if !fz.is_finite() {
                return Err(Error::NonFinite {
                    iteration: iterations,
                });
            }

            if fz > fx && backtrack {
                if t > 1.0 {
                    // momentum overshot: restart from the last accepted point
                    t = 1.0;
                    y.copy_from(&x);
                    ry.copy_from(&rx);
                    continue;
                }
                // a plain step from x failed to descend: we are at the
                // floating-point floor, keep x
                kkt = kkt_from_gradient(&x, &self.gradient_from_residual(&rx, tau), pen);
                converged = kkt <= cfg.kkt_tol;
                break;
            }

            let decrease = fx - fz;
            if cfg.accelerate {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let momentum = (t - 1.0) / t_next;
                y = &z + (&z - &x) * momentum;
                ry = &rz + (&rz - &rx) * momentum;
                t = t_next;
            } else {
                y.copy_from(&z);
                ry.copy_from(&rz);
            }
            x = z;
            rx = rz;
            fx = fz;
            trace.push(fx);

            if decrease <= cfg.tol * fx.abs().max(1.0) || iterations % 25 == 0 {
                kkt = kkt_from_gradient(&x, &self.gradient_from_residual(&rx, tau), pen);
                if kkt <= cfg.kkt_tol && decrease <= cfg.tol * fx.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
        }
        if !converged {
            kkt = kkt_from_gradient(&x, &self.gradient_from_residual(&rx, tau), pen);
            // Objective differences vanish in floating point before the
            // iterate does; finish with exact Newton steps on the active set.
            for _ in 0..5 {
                let Some((z, rz, kz)) = self.polish(&x, &rx, cfg) else { break };
                if kz >= kkt {
                    break;
                }
                x = z;
                rx = rz;
                kkt = kz;
                if kkt <= cfg.kkt_tol {
                    converged = true;
                    break;
                }
            }
        }
        Ok(Estimate {
            beta: x,
            objective_trace: trace,
            iterations,
            converged,
            kkt_residual: kkt,
        })
    }

    /// One Newton step with the support and the set of quadratic-regime
    /// residuals held fixed. Returns `None` if the step would change a sign
    /// or the restricted Hessian is singular.
    fn polish(
        &self,
        x: &DVector<f64>,
        rx: &DVector<f64>,
        cfg: &HuberConfig,
    ) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let tau = cfg.tau;
        let pen = cfg.lambda * tau;
        let support: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let design = self.data.x();
        let n = self.data.n() as f64;
        let k = support.len();
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..rx.len() {
            let wi = self.w[i];
            if (rx[i] * wi).abs() > tau {
                continue;
            }
            let c = wi * wi * wi / n;
            for (a, &ja) in support.iter().enumerate() {
                for (b, &jb) in support.iter().enumerate() {
                    hess[(a, b)] += c * design[(i, ja)] * design[(i, jb)];
                }
            }
        }
        let grad = self.gradient_from_residual(rx, tau);
        let rhs = DVector::from_iterator(k, support.iter().map(|&j| -(grad[j] + pen * x[j].signum())));
        let step = hess.cholesky()?.solve(&rhs);
        let mut z = x.clone();
        for (a, &j) in support.iter().enumerate() {
            z[j] += step[a];
            if z[j].signum() != x[j].signum() {
                return None;
            }
        }
        let rz = self.residual(&z);
        let kz = kkt_from_gradient(&z, &self.gradient_from_residual(&rz, tau), pen);
        kz.is_finite().then_some((z, rz, kz))
    }
}

fn power_iteration(x: &DMatrix<f64>, w_cube: &DVector<f64>, steps: usize) -> f64 {
    let (n, p) = (x.nrows(), x.ncols());
    let mut v = DVector::from_element(p, 1.0 / (p as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..steps {
        let xv = x * &v;
        let scaled = xv.component_mul(w_cube) / n as f64;
        let next = x.tr_mul(&scaled);
        lambda = next.norm();
        if lambda == 0.0 {
            return 0.0;
        }
        v = next / lambda;
    }
    lambda
}

fn kkt_from_gradient(beta: &DVector<f64>, grad: &DVector<f64>, pen: f64) -> f64 {
    beta.iter()
        .zip(grad.iter())
        .map(|(&b, &g)| {
            if b != 0.0 {
                (g + pen * b.signum()).abs()
            } else {
                (g.abs() - pen).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn objective(beta: &DVector<f64>, data: &Dataset, cfg: &HuberConfig) -> Result<f64> {
    data.check_beta(beta)?;
    Ok(HuberProblem::new(data, &cfg.weights)?.objective(beta, cfg))
}

/// Gradient of the smooth (unpenalized) part of the objective.
pub fn gradient(beta: &DVector<f64>, data: &Dataset, cfg: &HuberConfig) -> Result<DVector<f64>> {
    data.check_beta(beta)?;
    Ok(HuberProblem::new(data, &cfg.weights)?.gradient(beta, cfg.tau))
}

/// First-order optimality residual of the penalized program at `beta`.
pub fn kkt_check(beta: &DVector<f64>, data: &Dataset, cfg: &HuberConfig) -> Result<f64> {
    data.check_beta(beta)?;
    Ok(HuberProblem::new(data, &cfg.weights)?.kkt(beta, cfg))
}

pub fn fit_huber(data: &Dataset, cfg: &HuberConfig, init: Option<&DVector<f64>>) -> Result<Estimate> {
    HuberProblem::new(data, &cfg.weights)?.fit(cfg, init)
}
