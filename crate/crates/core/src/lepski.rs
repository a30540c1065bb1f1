//! Lepski's pairwise-comparison rule for choosing the Huber parameter, and
//! the adaptive pipeline: scale bracketing, one Huber fit per grid point
//! (`tau = 3 sigma_j`), selection.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::huber::{Estimate, HuberConfig, HuberProblem};
use crate::scale::{default_depth, sigma_bounds, MoMConfig, ScaleGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LepskiConfig {
    /// Comparison constant `C`.
    pub c: f64,
    /// Sparsity level entering the thresholds.
    pub k: usize,
    /// Grid depth `M`; `ceil(2 n^{1/3})` when absent.
    pub depth: Option<u32>,
    /// Solver settings for every grid fit. `tau` is replaced by `3 sigma_j`.
    pub template: HuberConfig,
    /// Return the largest grid index instead of failing when no index
    /// passes its comparisons.
    pub fallback: bool,
}

impl LepskiConfig {
    /// `C = 20`, `b = 1`, `B = I` and `lambda = 0.005 b' sqrt(log p / n)`.
    pub fn for_problem(k: usize, n: usize, p: usize) -> Self {
        let template = HuberConfig::new(1.0, 0.0);
        let lambda = HuberConfig::default_lambda(template.weights.b_prime(), n, p);
        LepskiConfig {
            c: 20.0,
            k,
            depth: None,
            template: HuberConfig { lambda, ..template },
            fallback: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::config("Lepski constant C must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("sparsity k must be at least 1"));
        }
        if self.depth == Some(0) {
            return Err(Error::config("grid depth M must be at least 1"));
        }
        Ok(())
    }
}

/// `(l2, l1)` comparison thresholds for a grid scale `sigma`.
pub fn thresholds(sigma: f64, c: f64, k: usize, n: usize, p: usize) -> (f64, f64) {
    let rate = ((p as f64).ln() / n as f64).sqrt();
    let k = k as f64;
    (6.0 * c * sigma * k.sqrt() * rate, 24.0 * c * sigma * k * rate)
}

/// One estimate entering the comparison rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub sigma: f64,
    pub beta: DVector<f64>,
    /// Ineligible candidates (e.g. unconverged fits) take part in every
    /// comparison but cannot be selected.
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub j: usize,
    pub i: usize,
    pub l2_distance: f64,
    pub l1_distance: f64,
    pub l2_threshold: f64,
    pub l1_threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFit {
    pub index: usize,
    pub sigma: f64,
    pub tau: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LepskiResult {
    pub j_star: Option<usize>,
    pub beta: Option<Vec<f64>>,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ScaleGrid>,
    pub per_grid: Vec<GridFit>,
    pub comparison_log: Vec<Comparison>,
}

impl LepskiResult {
    pub fn beta_vector(&self) -> Option<DVector<f64>> {
        self.beta.as_ref().map(|b| DVector::from_vec(b.clone()))
    }

    /// CSV rows `(index, sigma, l2 distance to the selected beta, objective,
    /// converged)`.
    pub fn write_grid_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,sigma,l2_to_selected,objective,converged")?;
        let selected = self.beta_vector();
        for g in &self.per_grid {
            let dist = selected
                .as_ref()
                .map(|b| (&g.estimate.beta - b).norm())
                .unwrap_or(f64::NAN);
            writeln!(
                out,
                "{},{},{},{},{}",
                g.index,
                g.sigma,
                dist,
                g.estimate.objective_final(),
                g.estimate.converged
            )?;
        }
        Ok(())
    }
}

/// Smallest eligible `j` such that for every `i > j` both
/// `||b_i - b_j||_2 <= 6 C sigma_i sqrt(k log p / n)` and
/// `||b_i - b_j||_1 <= 24 C sigma_i k sqrt(log p / n)`.
///
/// Candidates must be ordered by increasing scale.
pub fn select_candidates(
    candidates: &[Candidate],
    c: f64,
    k: usize,
    n: usize,
    p: usize,
) -> Result<(Option<usize>, Vec<Comparison>)> {
    if candidates.is_empty() {
        return Err(Error::Empty("Lepski grid is empty".into()));
    }
    if n < 2 || p < 2 {
        return Err(Error::config("Lepski thresholds need n >= 2 and p >= 2"));
    }
    if candidates.windows(2).any(|w| !(w[0].sigma < w[1].sigma)) {
        return Err(Error::config("grid scales must be strictly increasing"));
    }
    let mut log = Vec::new();
    let mut j_star = None;
    for (a, cj) in candidates.iter().enumerate() {
        let mut all_pass = true;
        for ci in &candidates[a + 1..] {
            let diff = &ci.beta - &cj.beta;
            let (l2_threshold, l1_threshold) = thresholds(ci.sigma, c, k, n, p);
            let l2_distance = diff.norm();
            let l1_distance = diff.lp_norm(1);
            let pass = l2_distance <= l2_threshold && l1_distance <= l1_threshold;
            all_pass &= pass;
            log.push(Comparison {
                j: cj.index,
                i: ci.index,
                l2_distance,
                l1_distance,
                l2_threshold,
                l1_threshold,
                pass,
            });
        }
        if all_pass && cj.eligible && j_star.is_none() {
            j_star = Some(a);
        }
    }
    Ok((j_star.map(|a| candidates[a].index), log))
}

/// Applies the rule to `(sigma_j, beta_j)` pairs indexed `1, 2, ...`.
pub fn select(
    estimates: &[(f64, DVector<f64>)],
    c: f64,
    k: usize,
    n: usize,
    p: usize,
) -> Result<LepskiResult> {
    let candidates: Vec<Candidate> = estimates
        .iter()
        .enumerate()
        .map(|(a, (sigma, beta))| Candidate {
            index: a + 1,
            sigma: *sigma,
            beta: beta.clone(),
            eligible: true,
        })
        .collect();
    let (j_star, comparison_log) = select_candidates(&candidates, c, k, n, p)?;
    let beta = j_star.map(|j| candidates[j - 1].beta.as_slice().to_vec());
    Ok(LepskiResult {
        j_star,
        beta,
        fallback_used: false,
        grid: None,
        per_grid: Vec::new(),
        comparison_log,
    })
}

/// Fits every grid point and applies the rule, without enforcing that an
/// index was selected. Fits run from the largest scale down, each one
/// warm-started at its neighbour's solution.
pub fn fit_grid(data: &Dataset, lep: &LepskiConfig, mom: &MoMConfig) -> Result<LepskiResult> {
    lep.validate()?;
    let depth = lep.depth.unwrap_or_else(|| default_depth(data.n()));
    let grid = sigma_bounds(data.y().as_slice(), mom, depth)?;
    let problem = HuberProblem::new(data, &lep.template.weights)?;

    let mut fits: Vec<GridFit> = Vec::with_capacity(grid.len());
    let mut warm: Option<DVector<f64>> = None;
    for (&index, &sigma) in grid.indices.iter().zip(grid.sigmas.iter()).rev() {
        let cfg = HuberConfig {
            tau: 3.0 * sigma,
            ..lep.template.clone()
        };
        let estimate = problem.fit(&cfg, warm.as_ref())?;
        warm = Some(estimate.beta.clone());
        fits.push(GridFit {
            index,
            sigma,
            tau: cfg.tau,
            estimate,
        });
    }
    fits.reverse();

    let candidates: Vec<Candidate> = fits
        .iter()
        .map(|g| Candidate {
            index: g.index,
            sigma: g.sigma,
            beta: g.estimate.beta.clone(),
            eligible: g.estimate.converged,
        })
        .collect();
    let (mut j_star, comparison_log) =
        select_candidates(&candidates, lep.c, lep.k, data.n(), data.p())?;
    let mut fallback_used = false;
    if j_star.is_none() && lep.fallback {
        j_star = candidates.last().map(|c| c.index);
        fallback_used = true;
    }
    let beta = j_star.and_then(|j| {
        fits.iter()
            .find(|g| g.index == j)
            .map(|g| g.estimate.beta.as_slice().to_vec())
    });
    Ok(LepskiResult {
        j_star,
        beta,
        fallback_used,
        grid: Some(grid),
        per_grid: fits,
        comparison_log,
    })
}

/// The full adaptive pipeline; fails with [`Error::NoSelection`] when no
/// grid index qualifies and fallback is off.
pub fn adaptive_fit(data: &Dataset, lep: &LepskiConfig, mom: &MoMConfig) -> Result<LepskiResult> {
    let result = fit_grid(data, lep, mom)?;
    if result.j_star.is_none() {
        return Err(Error::NoSelection);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, CovariateDist, ErrorDist, SimSpec};
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn hand_enumerated_three_point_grid() {
        let est = vec![
            (2.0, dv(&[10.0, 0.0])),
            (4.0, dv(&[0.0, 0.0])),
            (8.0, dv(&[0.1, 0.0])),
        ];
        let r = select(&est, 1.0, 1, 100, 100).unwrap();
        assert_eq!(r.j_star, Some(2));
        assert_eq!(r.beta.unwrap(), vec![0.0, 0.0]);
        assert_eq!(r.comparison_log.len(), 3);
        let c12 = &r.comparison_log[0];
        assert_eq!((c12.j, c12.i), (1, 2));
        assert!((c12.l2_threshold - 5.150).abs() < 1e-3);
        assert!((c12.l1_threshold - 20.60).abs() < 1e-2);
        assert!(!c12.pass);
        let c23 = r.comparison_log.iter().find(|c| c.j == 2 && c.i == 3).unwrap();
        assert!((c23.l2_threshold - 10.30).abs() < 1e-2);
        assert!((c23.l1_threshold - 41.21).abs() < 1e-2);
        assert!(c23.pass);
    }

    #[test]
    fn identical_estimates_pick_smallest_index() {
        let b = dv(&[1.0, -2.0, 0.5]);
        let est: Vec<_> = (0..6).map(|j| (0.1 * 2f64.powi(j), b.clone())).collect();
        let r = select(&est, 20.0, 2, 50, 30).unwrap();
        assert_eq!(r.j_star, Some(1));
        assert_eq!(r.comparison_log.len(), 15);
    }

    #[test]
    fn single_point_grid_is_vacuous() {
        let r = select(&[(1.0, dv(&[3.0, 4.0]))], 1.0, 1, 10, 10).unwrap();
        assert_eq!(r.j_star, Some(1));
        assert!(r.comparison_log.is_empty());
        assert!(select(&[], 1.0, 1, 10, 10).is_err());
    }

    #[test]
    fn ineligible_candidates_are_skipped() {
        let b = dv(&[1.0, 1.0]);
        let cands = vec![
            Candidate { index: 1, sigma: 1.0, beta: b.clone(), eligible: false },
            Candidate { index: 2, sigma: 2.0, beta: b.clone(), eligible: true },
        ];
        let (j, _) = select_candidates(&cands, 1.0, 1, 10, 10).unwrap();
        assert_eq!(j, Some(2));
        let cands: Vec<_> = cands.into_iter().map(|c| Candidate { eligible: false, ..c }).collect();
        let (j, _) = select_candidates(&cands, 1.0, 1, 10, 10).unwrap();
        assert_eq!(j, None);
    }

    fn noiseless(n: usize, p: usize, seed: u64) -> Dataset {
        generate(&SimSpec {
            n,
            p,
            k: 2,
            beta_values: vec![1.0, -1.0],
            covariate_dist: CovariateDist::GaussianIdentity,
            error_dist: ErrorDist::Gaussian { sd: 0.0 },
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_pipeline_selects_first_index() {
        let data = noiseless(60, 10, 3);
        let mut lep = LepskiConfig::for_problem(2, 60, 10);
        lep.depth = Some(4);
        lep.template.lambda = 1e-10;
        let r = adaptive_fit(&data, &lep, &MoMConfig::default()).unwrap();
        assert_eq!(r.j_star, Some(1));
        let b0 = &r.per_grid[0].estimate.beta;
        for g in &r.per_grid {
            assert!(g.estimate.converged);
            assert!((&g.estimate.beta - b0).amax() < 1e-6);
        }
        let truth = dv(&data.truth().unwrap().beta_star);
        assert!((r.beta_vector().unwrap() - truth).amax() < 1e-6);
    }

    #[test]
    fn pipeline_is_deterministic_and_fallback_works() {
        let data = noiseless(40, 8, 9);
        let mut lep = LepskiConfig::for_problem(2, 40, 8);
        lep.depth = Some(3);
        let a = fit_grid(&data, &lep, &MoMConfig::default()).unwrap();
        let b = fit_grid(&data, &lep, &MoMConfig::default()).unwrap();
        assert_eq!(a.comparison_log, b.comparison_log);

        lep.template.max_iter = 1;
        assert!(matches!(
            adaptive_fit(&data, &lep, &MoMConfig::default()),
            Err(Error::NoSelection)
        ));
        lep.fallback = true;
        let r = adaptive_fit(&data, &lep, &MoMConfig::default()).unwrap();
        assert!(r.fallback_used);
        assert_eq!(r.j_star, Some(3));
    }

    #[test]
    fn result_json_and_csv() {
        let data = noiseless(30, 5, 1);
        let mut lep = LepskiConfig::for_problem(2, 30, 5);
        lep.depth = Some(2);
        let r = adaptive_fit(&data, &lep, &MoMConfig::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["comparison_log"].is_array());
        assert!(v["grid"]["sigmas"].is_array());
        let mut buf = Vec::new();
        r.write_grid_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn selection_invariant_under_joint_scaling(
            seed in 0u64..500,
            scale in 0.01f64..100.0,
        ) {
            let mut rng = crate::rng::Rng::new(seed);
            let est: Vec<(f64, DVector<f64>)> = (0..5)
                .map(|j| (0.3 * 2f64.powi(j), DVector::from_fn(4, |_, _| 0.5 * rng.normal())))
                .collect();
            let scaled: Vec<_> = est.iter().map(|(s, b)| (s * scale, b * scale)).collect();
            let a = select(&est, 1.0, 2, 50, 20).unwrap();
            let b = select(&scaled, 1.0, 2, 50, 20).unwrap();
            prop_assert_eq!(a.j_star, b.j_star);
            // minimality and monotone thresholds
            if let Some(j) = a.j_star {
                prop_assert!(a.comparison_log.iter().filter(|c| c.j == j).all(|c| c.pass));
                if j > 1 {
                    prop_assert!(a.comparison_log.iter().any(|c| c.j == j - 1 && !c.pass));
                }
            }
            let mut th: Vec<(usize, f64)> = a.comparison_log.iter().map(|c| (c.i, c.l2_threshold)).collect();
            th.sort_by_key(|x| x.0);
            for w in th.windows(2) {
                if w[0].0 < w[1].0 { prop_assert!(w[0].1 < w[1].1); }
            }
        }
    }
}
