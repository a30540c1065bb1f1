//! Adaptive Gauss-Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
// Gauss weights for the odd-indexed Kronrod nodes
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrates `f` over `[a, b]` to relative tolerance `rel_tol` by
/// repeatedly bisecting the interval with the largest error estimate.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    const MAX_INTERVALS: usize = 5000;
    let mut parts = vec![(a, b, kronrod(&f, a, b))];
    loop {
        let total: f64 = parts.iter().map(|p| p.2 .0).sum();
        let err: f64 = parts.iter().map(|p| p.2 .1).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Quadrature { tol: rel_tol, err: f64::NAN });
        }
        if err <= rel_tol * total.abs() || err == 0.0 {
            return Ok(total);
        }
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::Quadrature {
                tol: rel_tol,
                err: err / total.abs(),
            });
        }
        let worst = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        parts.push((lo, mid, kronrod(&f, lo, mid)));
        parts.push((mid, hi, kronrod(&f, mid, hi)));
    }
}

/// Integral over the real line via `t = tan(u)`.
pub fn integrate_real_line(f: impl Fn(f64) -> f64, rel_tol: f64) -> Result<f64> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    integrate(
        |u| {
            let c = u.cos();
            f(u.tan()) / (c * c)
        },
        -half_pi,
        half_pi,
        rel_tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomials_exact() {
        let v = integrate(|x| x.powi(5) - 3.0 * x * x + 1.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((v - (64.0 / 6.0 - 8.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn known_integrals() {
        let g = integrate_real_line(|t| (-0.5 * t * t).exp(), 1e-12).unwrap();
        assert!((g - (2.0 * PI).sqrt()).abs() < 1e-10);
        let c = integrate_real_line(|t| 1.0 / (1.0 + t * t), 1e-12).unwrap();
        assert!((c - PI).abs() < 1e-10);
        let s = integrate(|x: f64| x.sqrt(), 0.0, 1.0, 1e-10).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn reports_failure() {
        assert!(integrate(|x: f64| 1.0 / x, -1.0, 1.0, 1e-10).is_err());
    }
}
