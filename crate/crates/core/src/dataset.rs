//! Data model for the linear model `y = X beta* + eps`, CSV input/output and
//! seeded synthetic generation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta_star: Vec<f64>,
    /// Standard deviation of the additive error (0 for noiseless data).
    pub sigma_star: f64,
}

/// Design matrix `x` (n x p), response `y` and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    truth: Option<Truth>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Empty("design matrix needs n >= 1 and p >= 1".into()));
        }
        if y.len() != x.nrows() {
            return Err(Error::dim(format!(
                "y has length {} but X has {} rows",
                y.len(),
                x.nrows()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("dataset contains NaN or infinite entries".into()));
        }
        Ok(Dataset { x, y, truth: None })
    }

    pub fn with_truth(mut self, truth: Truth) -> Result<Self> {
        if truth.beta_star.len() != self.p() {
            return Err(Error::dim(format!(
                "beta_star has length {}, expected {}",
                truth.beta_star.len(),
                self.p()
            )));
        }
        if !(truth.sigma_star >= 0.0) || !truth.sigma_star.is_finite() {
            return Err(Error::config("sigma_star must be finite and nonnegative"));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Residuals `y - X beta`.
    pub fn residuals(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        Ok(&self.y - &self.x * beta)
    }

    pub(crate) fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.p() {
            return Err(Error::dim(format!(
                "beta has length {}, expected p = {}",
                beta.len(),
                self.p()
            )));
        }
        Ok(())
    }
}

/// Which CSV column holds the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    /// Zero-based column index.
    Index(usize),
    Last,
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a numeric CSV file. A first row containing any non-numeric cell is
/// treated as a header; otherwise columns are named `x1, x2, ...`.
pub fn load_csv(path: impl AsRef<Path>, y_column: &ColumnRef) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);

    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
        })?;
        // skip blank lines
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(records.len() + 1);
        records.push((line, rec));
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("{} contains no rows", path.display())));
    }

    let width = records[0].1.len();
    let has_header = records[0].1.iter().any(|c| parse_cell(c).is_none());
    let names: Vec<String> = if has_header {
        records[0].1.iter().map(|c| c.trim().to_string()).collect()
    } else {
        (1..=width).map(|j| format!("x{j}")).collect()
    };
    let body = if has_header { &records[1..] } else { &records[..] };
    if body.is_empty() {
        return Err(Error::Empty(format!("{} has a header but no data rows", path.display())));
    }

    let y_idx = match y_column {
        ColumnRef::Name(name) => names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::config(format!("column {name:?} not found in {}", path.display())))?,
        ColumnRef::Index(i) if *i < width => *i,
        ColumnRef::Index(i) => {
            return Err(Error::config(format!(
                "column index {i} out of range for {width} columns"
            )))
        }
        ColumnRef::Last => width - 1,
    };
    if width < 2 {
        return Err(Error::dim("need at least one covariate column besides y"));
    }

    let n = body.len();
    let p = width - 1;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, (line, rec)) in body.iter().enumerate() {
        if rec.len() != width {
            return Err(Error::Ragged {
                row: *line,
                found: rec.len(),
                expected: width,
            });
        }
        let mut col = 0;
        for (j, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| Error::Parse {
                row: *line,
                column: names[j].clone(),
                value: cell.to_string(),
            })?;
            if j == y_idx {
                y[i] = v;
            } else {
                x[(i, col)] = v;
                col += 1;
            }
        }
    }
    Dataset::new(x, y)
}

/// Writes `X` columns (named `x1..xp`) followed by `y`, with a header row.
/// Values use the shortest representation that round-trips exactly.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> = (1..=data.p()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = (0..data.p()).map(|j| data.x[(i, j)].to_string()).collect();
        row.push(data.y[i].to_string());
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDist {
    GaussianIdentity,
    StudentT { df: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    Gaussian { sd: f64 },
    StudentT { df: u32, scale: f64 },
}

impl ErrorDist {
    /// Population standard deviation; `Var(t_df) = df / (df - 2)`.
    pub fn std_dev(&self) -> f64 {
        match *self {
            ErrorDist::Gaussian { sd } => sd,
            ErrorDist::StudentT { df, scale } => {
                let df = df as f64;
                scale * (df / (df - 2.0)).sqrt()
            }
        }
    }
}

/// Simulation design. Nonzero coefficients sit on the first `k` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub beta_values: Vec<f64>,
    pub covariate_dist: CovariateDist,
    pub error_dist: ErrorDist,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.k == 0 {
            return Err(Error::config("n, p and k must be positive"));
        }
        if self.k > self.p {
            return Err(Error::config(format!("k = {} exceeds p = {}", self.k, self.p)));
        }
        if self.beta_values.len() != self.k {
            return Err(Error::config(format!(
                "beta_values has {} entries, expected k = {}",
                self.beta_values.len(),
                self.k
            )));
        }
        if self.beta_values.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("beta_values must be finite"));
        }
        if let CovariateDist::StudentT { df } = self.covariate_dist {
            if df < 3 {
                return Err(Error::config(format!(
                    "covariate t distribution needs df >= 3 for finite variance, got {df}"
                )));
            }
        }
        match self.error_dist {
            ErrorDist::StudentT { df, scale } => {
                if df < 3 {
                    return Err(Error::config(format!(
                        "error t distribution needs df >= 3 for finite variance, got {df}"
                    )));
                }
                if !(scale >= 0.0) || !scale.is_finite() {
                    return Err(Error::config("error scale must be finite and nonnegative"));
                }
            }
            ErrorDist::Gaussian { sd } => {
                if !(sd >= 0.0) || !sd.is_finite() {
                    return Err(Error::config("error sd must be finite and nonnegative"));
                }
            }
        }
        Ok(())
    }

    pub fn beta_star(&self) -> DVector<f64> {
        let mut beta = DVector::zeros(self.p);
        for (j, &b) in self.beta_values.iter().enumerate() {
            beta[j] = b;
        }
        beta
    }
}

/// Draws a dataset from `spec`. The covariates are drawn first, row by row,
/// then the `n` errors, all from one stream seeded by `spec.seed`.
pub fn generate(spec: &SimSpec) -> Result<Dataset> {
    let (data, _) = generate_with_errors(spec)?;
    Ok(data)
}

/// Like [`generate`], also returning the error vector that was drawn.
pub fn generate_with_errors(spec: &SimSpec) -> Result<(Dataset, DVector<f64>)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (n, p) = (spec.n, spec.p);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = match spec.covariate_dist {
                CovariateDist::GaussianIdentity => rng.normal(),
                CovariateDist::StudentT { df } => rng.student_t(df),
            };
        }
    }
    let eps = DVector::from_fn(n, |_, _| match spec.error_dist {
        ErrorDist::Gaussian { sd } => sd * rng.normal(),
        ErrorDist::StudentT { df, scale } => scale * rng.student_t(df),
    });
    let beta = spec.beta_star();
    let y = &x * &beta + &eps;
    let data = Dataset::new(x, y)?.with_truth(Truth {
        beta_star: beta.as_slice().to_vec(),
        sigma_star: spec.error_dist.std_dev(),
    })?;
    Ok((data, eps))
}
