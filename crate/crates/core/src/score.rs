//! Score functions `psi` (with derivative `psi'`) used by the one-step
//! correction, plus the residual scale estimate and `A_hat(psi)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ScoreFunction {
    name: String,
    psi: ScalarFn,
    psi_prime: ScalarFn,
    psi_second: Option<ScalarFn>,
}

impl fmt::Debug for ScoreFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoreFunction").field("name", &self.name).finish()
    }
}

impl ScoreFunction {
    /// Registers a user score. `psi_prime` must agree with central finite
    /// differences of `psi` on a 1000-point lattice over `[-10, 10]`.
    pub fn custom(
        name: impl Into<String>,
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        psi_prime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let score = ScoreFunction {
            name: name.into(),
            psi: Arc::new(psi),
            psi_prime: Arc::new(psi_prime),
            psi_second: None,
        };
        let worst = score.derivative_mismatch();
        if !(worst <= 1e-6) {
            return Err(Error::config(format!(
                "score {:?}: psi_prime disagrees with finite differences of psi (relative error {worst:e})",
                score.name
            )));
        }
        Ok(score)
    }

    pub fn with_second_derivative(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.psi_second = Some(Arc::new(f));
        self
    }

    /// `psi(t) = t`: the score of the standard normal.
    pub fn gaussian() -> Self {
        ScoreFunction {
            name: "gaussian".into(),
            psi: Arc::new(|t| t),
            psi_prime: Arc::new(|_| 1.0),
            psi_second: Some(Arc::new(|_| 0.0)),
        }
    }

    /// Location score of the unit-scale t distribution with `df` degrees of
    /// freedom: `psi(t) = (df + 1) t / (df + t^2)`.
    pub fn student_t(df: f64) -> Self {
        ScoreFunction {
            name: format!("t{df}"),
            psi: Arc::new(move |t| (df + 1.0) * t / (df + t * t)),
            psi_prime: Arc::new(move |t| {
                let d = df + t * t;
                (df + 1.0) * (df - t * t) / (d * d)
            }),
            psi_second: Some(Arc::new(move |t| {
                let d = df + t * t;
                2.0 * (df + 1.0) * t * (t * t - 3.0 * df) / (d * d * d)
            })),
        }
    }

    /// `psi(t) = 4t / (3 + t^2)`, `psi'(t) = (12 - 4t^2) / (3 + t^2)^2`.
    pub fn t3() -> Self {
        ScoreFunction {
            name: "t3".into(),
            psi: Arc::new(|t| 4.0 * t / (3.0 + t * t)),
            psi_prime: Arc::new(|t| {
                let d = 3.0 + t * t;
                (-4.0 * t * t + 12.0) / (d * d)
            }),
            psi_second: Some(Arc::new(|t| {
                let d = 3.0 + t * t;
                8.0 * t * (t * t - 9.0) / (d * d * d)
            })),
        }
    }

    /// Built-in lookup: `"gaussian"` or `"t3"`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Self::gaussian()),
            "t3" => Ok(Self::t3()),
            other => Err(Error::config(format!(
                "unknown score {other:?}; expected \"gaussian\" or \"t3\""
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn psi(&self, t: f64) -> f64 {
        (self.psi)(t)
    }

    pub fn psi_prime(&self, t: f64) -> f64 {
        (self.psi_prime)(t)
    }

    pub fn psi_second(&self, t: f64) -> Option<f64> {
        self.psi_second.as_ref().map(|f| f(t))
    }

    /// Largest relative gap between `psi'` and central differences of
    /// `psi` on the lattice.
    pub fn derivative_mismatch(&self) -> f64 {
        let h = 1e-5;
        (0..1000)
            .map(|i| -10.0 + 20.0 * i as f64 / 999.0)
            .map(|t| {
                let fd = (self.psi(t + h) - self.psi(t - h)) / (2.0 * h);
                let exact = self.psi_prime(t);
                (fd - exact).abs() / exact.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    pub a_hat: f64,
    /// `(1/n) sum psi^2(r_i / sigma_hat)`.
    pub psi_sq_mean: f64,
    pub sigma_hat: f64,
}

/// Root mean squared residual `sqrt((1/n) sum (y_i - x_i' beta)^2)`.
///
/// This is a standard deviation: it divides residuals before they enter
/// `psi`, so it must carry the units of `y`.
pub fn residual_scale(data: &Dataset, beta: &DVector<f64>) -> Result<f64> {
    let r = data.residuals(beta)?;
    scale_of(&r)
}

fn scale_of(r: &DVector<f64>) -> Result<f64> {
    let s = (r.norm_squared() / r.len() as f64).sqrt();
    if !(s > 0.0) {
        return Err(Error::Degenerate(
            "all residuals are zero; the residual scale is undefined".into(),
        ));
    }
    Ok(s)
}

/// `A_hat = (1 / (n sigma_hat)) sum psi'((y_i - x_i' beta) / sigma_hat)`.
pub fn a_hat(data: &Dataset, beta: &DVector<f64>, sigma_hat: f64, score: &ScoreFunction) -> Result<f64> {
    let r = data.residuals(beta)?;
    a_hat_from_residuals(&r, sigma_hat, score)
}

pub(crate) fn a_hat_from_residuals(r: &DVector<f64>, sigma_hat: f64, score: &ScoreFunction) -> Result<f64> {
    if !(sigma_hat > 0.0) {
        return Err(Error::config("sigma_hat must be positive"));
    }
    let total: f64 = r.iter().map(|&ri| score.psi_prime(ri / sigma_hat)).sum();
    Ok(total / (r.len() as f64 * sigma_hat))
}

pub fn diagnostics(data: &Dataset, beta: &DVector<f64>, score: &ScoreFunction) -> Result<ScoreDiagnostics> {
    let r = data.residuals(beta)?;
    let sigma_hat = scale_of(&r)?;
    let a_hat = a_hat_from_residuals(&r, sigma_hat, score)?;
    let psi_sq_mean = r
        .iter()
        .map(|&ri| score.psi(ri / sigma_hat).powi(2))
        .sum::<f64>()
        / r.len() as f64;
    Ok(ScoreDiagnostics {
        a_hat,
        psi_sq_mean,
        sigma_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, CovariateDist, ErrorDist, SimSpec};
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn lattice() -> impl Iterator<Item = f64> {
        (0..1000).map(|i| -10.0 + 20.0 * i as f64 / 999.0)
    }

    #[test]
    fn t3_values() {
        let s = ScoreFunction::t3();
        assert_eq!(s.psi(0.0), 0.0);
        assert_eq!(s.psi(1.0), 1.0);
        assert!((s.psi_prime(0.0) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_values() {
        let s = ScoreFunction::gaussian();
        assert_eq!(s.psi(2.5), 2.5);
        assert_eq!(s.psi_prime(-7.0), 1.0);
        for t in lattice() {
            assert_eq!(s.psi(-t), -s.psi(t));
        }
    }

    #[test]
    fn builtins_odd_and_differentiable() {
        for s in [ScoreFunction::gaussian(), ScoreFunction::t3(), ScoreFunction::student_t(5.0)] {
            for t in lattice() {
                assert!((s.psi(-t) + s.psi(t)).abs() <= 1e-12);
            }
            assert!(s.derivative_mismatch() <= 1e-6, "{}", s.name());
            let h = 1e-5;
            for t in lattice() {
                let fd = (s.psi_prime(t + h) - s.psi_prime(t - h)) / (2.0 * h);
                assert!((fd - s.psi_second(t).unwrap()).abs() <= 1e-6);
            }
        }
        let t3 = ScoreFunction::t3();
        let general = ScoreFunction::student_t(3.0);
        for t in lattice() {
            assert!((t3.psi(t) - general.psi(t)).abs() < 1e-15);
        }
    }

    #[test]
    fn t3_matches_density_ratio() {
        // f(t) = 6 sqrt(3) / (pi (3 + t^2)^2), f'(t) = -24 sqrt(3) t / (pi (3 + t^2)^3)
        let s = ScoreFunction::t3();
        let s3 = 3f64.sqrt();
        for t in lattice() {
            let f = 6.0 * s3 / (PI * (3.0 + t * t).powi(2));
            let fp = -24.0 * s3 / PI * t / (3.0 + t * t).powi(3);
            assert!((s.psi(t) + fp / f).abs() <= 1e-10);
        }
    }

    #[test]
    fn t3_bounded() {
        let s = ScoreFunction::t3();
        let bound = 2.0 / 3f64.sqrt();
        assert!((s.psi(3f64.sqrt()) - bound).abs() < 1e-15);
        for i in 0..100_001 {
            let t = -50.0 + i as f64 * 1e-3;
            assert!(s.psi(t).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn custom_scores_are_checked() {
        assert!(ScoreFunction::custom("tanh", |t: f64| t.tanh(), |t: f64| 1.0 / t.cosh().powi(2)).is_ok());
        assert!(ScoreFunction::custom("bad", |t: f64| t.tanh(), |_| 1.0).is_err());
        assert!(ScoreFunction::by_name("cauchy").is_err());
        assert_eq!(ScoreFunction::by_name("t3").unwrap().name(), "t3");
    }

    fn residual_data(r: &[f64]) -> Dataset {
        // X = 0 column so residuals equal y for any beta
        Dataset::new(DMatrix::zeros(r.len(), 1), DVector::from_row_slice(r)).unwrap()
    }

    #[test]
    fn residual_scale_examples() {
        let d = residual_data(&[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(residual_scale(&d, &DVector::zeros(1)).unwrap(), 2.5);
        let d = residual_data(&[0.0, 0.0]);
        assert!(residual_scale(&d, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn residual_scale_of_t3_noise() {
        let spec = SimSpec {
            n: 100_000,
            p: 2,
            k: 1,
            beta_values: vec![1.0],
            covariate_dist: CovariateDist::GaussianIdentity,
            error_dist: ErrorDist::StudentT { df: 3, scale: 0.01 },
            seed: 31,
        };
        let d = generate(&spec).unwrap();
        let s = residual_scale(&d, &spec.beta_star()).unwrap();
        let target = 0.01 * 3f64.sqrt();
        assert!((s - target).abs() <= 0.02 * target, "{s}");
    }

    #[test]
    fn a_hat_examples() {
        let d = residual_data(&[0.3, -1.2, 5.0]);
        let b = DVector::zeros(1);
        assert_eq!(a_hat(&d, &b, 2.0, &ScoreFunction::gaussian()).unwrap(), 0.5);
        let zeros = residual_data(&[0.0, 0.0, 0.0]);
        assert!((a_hat(&zeros, &b, 1.0, &ScoreFunction::t3()).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let d = residual_data(&[1.0, -1.0]);
        assert!((a_hat(&d, &b, 1.0, &ScoreFunction::t3()).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_a_hat_is_inverse_scale() {
        let d = residual_data(&[0.1, 2.0, -3.0, 0.7]);
        let b = DVector::zeros(1);
        let diag = diagnostics(&d, &b, &ScoreFunction::gaussian()).unwrap();
        assert_eq!(diag.a_hat, 1.0 / diag.sigma_hat);
        assert!((diag.psi_sq_mean - 1.0).abs() < 1e-14);
    }
}
