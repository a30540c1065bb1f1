//! One-step score correction of a consistent estimate, and confidence
//! regions built from it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::glasso::PrecisionEstimate;
use crate::quad::integrate_real_line;
use crate::score::{diagnostics, ScoreDiagnostics, ScoreFunction};

/// Largest index set accepted by [`confidence_region`].
pub const MAX_REGION_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepEstimate {
    pub b_psi: Vec<f64>,
    pub base_beta: Vec<f64>,
    pub diagnostics: ScoreDiagnostics,
}

impl OneStepEstimate {
    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.b_psi)
    }
}

/// `b = beta + Theta (1/n) sum psi(r_i / sigma_hat) x_i / A_hat`.
pub fn one_step(data: &Dataset, beta: &DVector<f64>, theta: &PrecisionEstimate, score: &ScoreFunction) -> Result<OneStepEstimate> {
    data.check_beta(beta)?;
    if theta.dim() != data.p() {
        return Err(Error::dim(format!(
            "precision matrix is {0}x{0} but the design has {1} columns",
            theta.dim(),
            data.p()
        )));
    }
    let diag = diagnostics(data, beta, score)?;
    if diag.a_hat.abs() <= 1e-12 {
        return Err(Error::Degenerate(format!(
            "A_hat = {:e} is zero for score {:?}",
            diag.a_hat,
            score.name()
        )));
    }
    let r = data.residuals(beta)?;
    let psi = r.map(|ri| score.psi(ri / diag.sigma_hat));
    let g = data.x().tr_mul(&psi) / data.n() as f64;
    let b = beta + (&theta.theta_hat * g) / diag.a_hat;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("one-step estimate is not finite".into()));
    }
    Ok(OneStepEstimate {
        b_psi: b.as_slice().to_vec(),
        base_beta: beta.as_slice().to_vec(),
        diagnostics: diag,
    })
}

/// Inverse standard normal cdf (Wichura's AS241, about 1e-16 relative).
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("normal quantile needs 0 < q < 1, got {q}")));
    }
    let r = q - 0.5;
    if r.abs() <= 0.425 {
        let t = 0.180625 - r * r;
        let num = (((((((2.509_080_928_730_122_7e3 * t + 3.343_057_558_358_813e4) * t
            + 6.726_577_092_700_87e4)
            * t
            + 4.592_195_393_154_987e4)
            * t
            + 1.373_169_376_550_946e4)
            * t
            + 1.971_590_950_306_551_4e3)
            * t
            + 1.331_416_678_917_843_8e2)
            * t
            + 3.387_132_872_796_366_5)
            * r;
        let den = ((((((5.226_495_278_852_854_5e3 * t + 2.872_908_573_572_194_3e4) * t
            + 3.930_789_580_009_271e4)
            * t
            + 2.121_379_430_158_659_7e4)
            * t
            + 5.394_196_021_424_751e3)
            * t
            + 6.871_870_074_920_579e2)
            * t
            + 4.231_333_070_160_091e1)
            * t
            + 1.0;
        return Ok(num / den);
    }
    let tail = if r < 0.0 { q } else { 1.0 - q };
    let mut t = (-tail.ln()).sqrt();
    let z = if t <= 5.0 {
        t -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * t + 2.272_384_498_926_918_4e-2) * t
            + 2.417_807_251_774_506e-1)
            * t
            + 1.270_458_252_452_368_4)
            * t
            + 3.647_848_324_763_204_5)
            * t
            + 5.769_497_221_460_691)
            * t
            + 4.630_337_846_156_546)
            * t
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * t + 5.475_938_084_995_345e-4) * t
            + 1.519_866_656_361_645_7e-2)
            * t
            + 1.481_039_764_274_800_8e-1)
            * t
            + 6.897_673_349_851e-1)
            * t
            + 1.676_384_830_183_803_8)
            * t
            + 2.053_191_626_637_759)
            * t
            + 1.0;
        num / den
    } else {
        t -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * t + 2.711_555_568_743_487_6e-5) * t
            + 1.242_660_947_388_078_4e-3)
            * t
            + 2.653_218_952_657_612_4e-2)
            * t
            + 2.965_605_718_285_048_7e-1)
            * t
            + 1.784_826_539_917_291_3)
            * t
            + 5.463_784_911_164_114)
            * t
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * t + 1.421_511_758_316_446e-7) * t
            + 1.846_318_317_510_054_8e-5)
            * t
            + 7.868_691_311_456_133e-4)
            * t
            + 1.487_536_129_085_061_5e-2)
            * t
            + 1.369_298_809_227_358e-1)
            * t
            + 5.998_322_065_558_879e-1)
            * t
            + 1.0;
        num / den
    };
    Ok(if r < 0.0 { -z } else { z })
}

/// Quantile used for each side of an `m`-dimensional box of total
/// coverage `1 - alpha`: `Phi^{-1}((1 + (1 - alpha)^{1/m}) / 2)`.
pub fn box_quantile(alpha: f64, m: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if m == 0 {
        return Err(Error::config("box dimension must be positive"));
    }
    normal_quantile(0.5 * (1.0 + (1.0 - alpha).powf(1.0 / m as f64)))
}

/// The region `centers + H [-q, q]^m` with `H = s Theta_JJ^{1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion {
    /// Zero-based coordinates, sorted.
    pub j: Vec<usize>,
    pub alpha: f64,
    pub centers: Vec<f64>,
    pub half_width_matrix: DMatrix<f64>,
    pub quantile: f64,
    /// Projections of the region onto each coordinate in `j`.
    pub intervals: Vec<(f64, f64)>,
    pub scale_s: f64,
    pub a_hat: f64,
    pub psi_sq_mean: f64,
}

impl ConfidenceRegion {
    pub fn contains(&self, beta_j: &[f64]) -> Result<bool> {
        let m = self.j.len();
        if beta_j.len() != m {
            return Err(Error::dim("point has the wrong dimension"));
        }
        let d = DVector::from_fn(m, |i, _| beta_j[i] - self.centers[i]);
        let eig = SymmetricEigen::new(self.half_width_matrix.clone());
        let tol = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        // coordinates in the box basis; a singular direction only admits 0
        let proj = eig.eigenvectors.tr_mul(&d);
        let mut z = DVector::zeros(m);
        for k in 0..m {
            let lam = eig.eigenvalues[k];
            if lam > tol {
                z[k] = proj[k] / lam;
            } else if proj[k].abs() > 1e-12 {
                return Ok(false);
            }
        }
        let z = &eig.eigenvectors * z;
        Ok(z.iter().all(|v| v.abs() <= self.quantile * (1.0 + 1e-12)))
    }
}

impl Serialize for ConfidenceRegion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ConfidenceRegion", 9)?;
        let one_based: Vec<usize> = self.j.iter().map(|j| j + 1).collect();
        st.serialize_field("J", &one_based)?;
        st.serialize_field("alpha", &self.alpha)?;
        st.serialize_field("centers", &self.centers)?;
        let iv: Vec<[f64; 2]> = self.intervals.iter().map(|&(a, b)| [a, b]).collect();
        st.serialize_field("intervals", &iv)?;
        st.serialize_field("scale_s", &self.scale_s)?;
        st.serialize_field("a_hat", &self.a_hat)?;
        st.serialize_field("psi_sq_mean", &self.psi_sq_mean)?;
        st.serialize_field("quantile", &self.quantile)?;
        let rows: Vec<Vec<f64>> = self
            .half_width_matrix
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        st.serialize_field("half_width_matrix", &rows)?;
        st.end()
    }
}

/// Symmetric PSD square root by eigendecomposition, clamping eigenvalues
/// in `[-1e-10, 0)` to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-10) {
        return Err(Error::Degenerate(format!(
            "matrix has a negative eigenvalue {bad:e}"
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&root) * v.transpose();
    for i in 0..out.nrows() {
        for k in 0..i {
            let m = 0.5 * (out[(i, k)] + out[(k, i)]);
            out[(i, k)] = m;
            out[(k, i)] = m;
        }
    }
    Ok(out)
}

/// `j` holds zero-based coordinates; it is sorted before use and must
/// contain between 1 and [`MAX_REGION_DIM`] distinct indices.
pub fn confidence_region(
    data: &Dataset,
    one_step: &OneStepEstimate,
    theta: &PrecisionEstimate,
    score: &ScoreFunction,
    j: &[usize],
    alpha: f64,
) -> Result<ConfidenceRegion> {
    let p = data.p();
    let mut j = j.to_vec();
    j.sort_unstable();
    j.dedup();
    if j.is_empty() || j.len() > MAX_REGION_DIM {
        return Err(Error::config(format!(
            "the index set must hold 1 to {MAX_REGION_DIM} distinct coordinates"
        )));
    }
    if let Some(&bad) = j.iter().find(|&&k| k >= p) {
        return Err(Error::config(format!("coordinate {} exceeds p = {p}", bad + 1)));
    }
    if one_step.b_psi.len() != p || theta.dim() != p {
        return Err(Error::dim("one-step estimate or precision matrix does not match the data"));
    }
    let m = j.len();
    let quantile = box_quantile(alpha, m)?;
    let beta = DVector::from_column_slice(&one_step.base_beta);
    let diag = diagnostics(data, &beta, score)?;
    if diag.a_hat.abs() <= 1e-12 {
        return Err(Error::Degenerate("A_hat is zero".into()));
    }
    let scale_s = diag.psi_sq_mean.sqrt() / diag.a_hat / (data.n() as f64).sqrt();
    let block = DMatrix::from_fn(m, m, |a, b| theta.theta_hat[(j[a], j[b])]);
    let half_width_matrix = psd_sqrt(&block)? * scale_s;
    let centers: Vec<f64> = j.iter().map(|&k| one_step.b_psi[k]).collect();
    let intervals = (0..m)
        .map(|a| {
            let w = if m == 1 {
                scale_s.abs() * block[(0, 0)].max(0.0).sqrt() * quantile
            } else {
                quantile * half_width_matrix.row(a).iter().map(|v| v.abs()).sum::<f64>()
            };
            (centers[a] - w, centers[a] + w)
        })
        .collect();
    Ok(ConfidenceRegion {
        j,
        alpha,
        centers,
        half_width_matrix,
        quantile,
        intervals,
        scale_s,
        a_hat: diag.a_hat,
        psi_sq_mean: diag.psi_sq_mean,
    })
}

fn half_integer_gamma(two_x: u32) -> f64 {
    // Gamma(two_x / 2) for two_x >= 1
    let (mut g, mut x) = if two_x.is_multiple_of(2) {
        (1.0, 1.0)
    } else {
        (std::f64::consts::PI.sqrt(), 0.5)
    };
    while 2.0 * x < two_x as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Density of the unit-scale t distribution and its derivative.
pub fn student_t_density(df: u32) -> (impl Fn(f64) -> f64, impl Fn(f64) -> f64) {
    let nu = df as f64;
    let c = half_integer_gamma(df + 1) / ((nu * std::f64::consts::PI).sqrt() * half_integer_gamma(df));
    let e = -(nu + 1.0) / 2.0;
    let f = move |t: f64| c * (1.0 + t * t / nu).powf(e);
    let fp = move |t: f64| c * e * (2.0 * t / nu) * (1.0 + t * t / nu).powf(e - 1.0);
    (f, fp)
}

/// Returns `(v1, v2)` with `v1 = 1 / E[(f'/f)^2]` and
/// `v2 = E[psi^2] / E[psi']^2` under the density `f`.
pub fn efficiency_terms(
    f: impl Fn(f64) -> f64,
    f_prime: impl Fn(f64) -> f64,
    score: &ScoreFunction,
    quad_tol: f64,
) -> Result<(f64, f64)> {
    let fisher = integrate_real_line(
        |t| {
            let d = f(t);
            if d > 0.0 {
                f_prime(t).powi(2) / d
            } else {
                0.0
            }
        },
        quad_tol,
    )?;
    let psi_sq = integrate_real_line(|t| score.psi(t).powi(2) * f(t), quad_tol)?;
    let psi_prime = integrate_real_line(|t| score.psi_prime(t) * f(t), quad_tol)?;
    Ok((1.0 / fisher, psi_sq / (psi_prime * psi_prime)))
}

/// Checks that the efficient score of the t distribution attains the
/// information bound: returns `(v1, v2)`, which agree at the optimum.
pub fn efficiency_identity_check(df: u32, quad_tol: f64) -> Result<(f64, f64)> {
    if df < 3 {
        return Err(Error::config("df must be at least 3"));
    }
    if !(quad_tol > 0.0) {
        return Err(Error::config("quadrature tolerance must be positive"));
    }
    let (f, fp) = student_t_density(df);
    efficiency_terms(f, fp, &ScoreFunction::student_t(df as f64), quad_tol)
}
