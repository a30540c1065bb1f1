//! Rough scale bracketing: median of means, MAD, and the geometric grid of
//! candidate scales used by Lepski's method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Median with the even-count convention of averaging the central pair.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Median absolute deviation from the median (unscaled).
pub fn mad(values: &[f64]) -> Result<f64> {
    let med = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoMConfig {
    pub delta: f64,
    /// Number of groups; derived from `delta` when absent.
    #[serde(default)]
    pub groups: Option<usize>,
}

impl Default for MoMConfig {
    fn default() -> Self {
        MoMConfig {
            delta: 0.05,
            groups: None,
        }
    }
}

impl MoMConfig {
    pub fn new(delta: f64) -> Self {
        MoMConfig {
            delta,
            groups: None,
        }
    }

    pub fn with_groups(groups: usize) -> Self {
        MoMConfig {
            delta: 0.05,
            groups: Some(groups),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_none() && !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("MoM delta must lie in (0, 1)"));
        }
        if self.groups == Some(0) {
            return Err(Error::config("MoM needs at least one group"));
        }
        Ok(())
    }

    /// `K = floor(min(8 log(e^{1/8} / delta), n / 2))`, at least 1, unless
    /// overridden.
    pub fn group_count(&self, n: usize) -> usize {
        if let Some(k) = self.groups {
            return k;
        }
        let from_delta = 8.0 * (0.125 - self.delta.ln());
        let k = from_delta.min(n as f64 / 2.0).floor();
        (k as usize).max(1)
    }
}

/// Splits `values` into `K` consecutive blocks of `floor(n / K)` (dropping
/// the remainder) and returns the median of the block means.
pub fn median_of_means(values: &[f64], cfg: &MoMConfig) -> Result<f64> {
    cfg.validate()?;
    let n = values.len();
    let k = cfg.group_count(n);
    if n < k || n == 0 {
        return Err(Error::config(format!(
            "median of means needs n >= K (n = {n}, K = {k})"
        )));
    }
    let block = n / k;
    let means: Vec<f64> = values[..block * k]
        .chunks(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect();
    median(&means)
}

/// Geometric grid `sigma_j = sigma_min 2^j` for `j >= 1` with
/// `sigma_j < 2 sigma_max`, where `sigma_min = sigma_max / 2^M`.
///
/// `sigma_min` itself is a bracket endpoint and never a grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(rename = "M")]
    pub depth: u32,
    pub sigmas: Vec<f64>,
    pub indices: Vec<usize>,
}

impl ScaleGrid {
    pub fn from_bounds(sigma_max: f64, depth: u32) -> Result<Self> {
        if !(sigma_max > 0.0) || !sigma_max.is_finite() {
            return Err(Error::Degenerate(format!(
                "sigma_max must be positive and finite, got {sigma_max}"
            )));
        }
        if depth == 0 {
            return Err(Error::config("grid depth M must be at least 1"));
        }
        let sigma_min = sigma_max / 2f64.powi(depth as i32);
        let mut sigmas = Vec::new();
        let mut indices = Vec::new();
        let mut j = 1;
        loop {
            let s = sigma_min * 2f64.powi(j);
            if s >= 2.0 * sigma_max {
                break;
            }
            if s >= sigma_min {
                sigmas.push(s);
                indices.push(j as usize);
            }
            j += 1;
        }
        Ok(ScaleGrid {
            sigma_min,
            sigma_max,
            depth,
            sigmas,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }
}

/// `M = ceil(2 n^{1/3})`.
pub fn default_depth(n: usize) -> u32 {
    (2.0 * (n as f64).cbrt()).ceil() as u32
}

/// `sigma_max = sqrt(2 MoM(y^2))`, `sigma_min = sigma_max / 2^M`.
pub fn sigma_bounds(y: &[f64], cfg: &MoMConfig, depth: u32) -> Result<ScaleGrid> {
    let squares: Vec<f64> = y.iter().map(|v| v * v).collect();
    let mom = median_of_means(&squares, cfg)?;
    if !(mom > 0.0) {
        return Err(Error::Degenerate(
            "median of means of y^2 is zero; cannot bracket the scale".into(),
        ));
    }
    ScaleGrid::from_bounds((2.0 * mom).sqrt(), depth)
}

/// Alternative upper scale bracket from the MAD of `y`, usable without
/// second moments.
pub fn sigma_max_mad(y: &[f64]) -> Result<f64> {
    mad(y)
}
