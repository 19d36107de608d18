//! Synthetic spatial data generators on a regular lattice.
//!
//! Four processes — a plain linear model, a spatially lagged target (SL),
//! spatially lagged covariates (SLX), and both combined (Durbin) — crossed
//! with two covariate samplers: i.i.d. uniform draws and a
//! spatially-autocorrelated field built by Gaussian-smoothing lattice noise.
//!
//! The lagged-target processes solve `(I − ρW)y = rhs` exactly with a dense
//! LU factorization; `W` is Queen contiguity, row-normalized so that
//! `|ρ| < 1` guarantees invertibility.

use crate::seeding::derive_seed;
use crate::spatial::{queen_adjacency, SpatialError, WeightMatrix};
use crate::table::GeoTable;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DgpError {
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error("|rho| must be < 1 for lagged-target processes, got {0}")]
    RhoOutOfRange(f64),
    #[error("(I - rho W) is singular")]
    SingularSystem,
}

/// Which spatial process generates the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    Lin,
    Sl,
    Slx,
    Durbin,
}

impl Process {
    pub fn uses_lagged_target(self) -> bool {
        matches!(self, Process::Sl | Process::Durbin)
    }

    pub fn uses_lagged_covariates(self) -> bool {
        matches!(self, Process::Slx | Process::Durbin)
    }
}

/// How the two covariates are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateSampler {
    /// i.i.d. U(−1, 1), independent of location.
    Uniform,
    /// Gaussian-smoothed lattice noise (σ = 3 cells), standardized to
    /// mean 0 / std 1: a stand-in elevation field with strong spatial
    /// autocorrelation.
    CorrelatedField,
}

/// Regression-coefficient surface evaluated over the lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefficientSurface {
    Constant { value: f64 },
    /// Linear in the first coordinate, `min` at the west edge, `max` at
    /// the east edge.
    LinearGradient { min: f64, max: f64 },
    /// `base + amp·exp(−(d/(falloff·side))²)` with `d` the distance to the
    /// lattice center and `side` the longest lattice side.
    RadialBowl { base: f64, amp: f64, falloff: f64 },
    /// Explicit per-cell values, row-major.
    CustomGrid { values: Vec<f64> },
}

impl CoefficientSurface {
    /// Evaluate at lattice cell (row, col).
    pub fn eval(&self, row: usize, col: usize, rows: usize, cols: usize) -> f64 {
        match self {
            CoefficientSurface::Constant { value } => *value,
            CoefficientSurface::LinearGradient { min, max } => {
                let t = if cols > 1 {
                    col as f64 / (cols - 1) as f64
                } else {
                    0.0
                };
                min + (max - min) * t
            }
            CoefficientSurface::RadialBowl { base, amp, falloff } => {
                let cy = (rows - 1) as f64 / 2.0;
                let cx = (cols - 1) as f64 / 2.0;
                let side = ((rows - 1).max(cols - 1)) as f64;
                let d2 = (row as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
                let scale = falloff * side;
                base + amp * (-d2 / (scale * scale)).exp()
            }
            CoefficientSurface::CustomGrid { values } => values[row * cols + col],
        }
    }

    /// Evaluate over the whole lattice, row-major.
    pub fn eval_lattice(&self, rows: usize, cols: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.eval(r, c, rows, cols));
            }
        }
        out
    }
}

/// The intercept and two slope surfaces used by default. These are this
/// generator's own choices: a constant intercept, a west-east gradient,
/// and a radial bump peaking at the lattice center.
pub fn default_surfaces() -> [CoefficientSurface; 3] {
    [
        CoefficientSurface::Constant { value: 3.0 },
        CoefficientSurface::LinearGradient { min: 1.0, max: 5.0 },
        CoefficientSurface::RadialBowl {
            base: 2.0,
            amp: 3.0,
            falloff: 0.4,
        },
    ]
}

/// Full definition of one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpSpec {
    pub process: Process,
    pub rho: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub surfaces: [CoefficientSurface; 3],
    pub noise_std: f64,
    pub sampler: CovariateSampler,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(process: Process, sampler: CovariateSampler, seed: u64) -> Self {
        DgpSpec {
            process,
            rho: 0.5,
            theta1: 0.5,
            theta2: 0.5,
            surfaces: default_surfaces(),
            noise_std: 1.0,
            sampler,
            rows: 50,
            cols: 50,
            seed,
        }
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self) -> Result<(), DgpError> {
        if self.rows < 2 || self.cols < 2 {
            return Err(SpatialError::LatticeTooSmall {
                rows: self.rows,
                cols: self.cols,
            }
            .into());
        }
        if self.process.uses_lagged_target() && self.rho.abs() >= 1.0 {
            return Err(DgpError::RhoOutOfRange(self.rho));
        }
        Ok(())
    }
}

/// A generated dataset plus the pieces needed to check it against its
/// defining equation: the realized noise and the weight matrix.
#[derive(Debug, Clone)]
pub struct Generated {
    pub table: GeoTable,
    pub epsilon: Vec<f64>,
    pub weights: WeightMatrix,
    pub beta: [Vec<f64>; 3],
}

/// Draw the two covariate fields for `spec`, row-major over the lattice.
pub fn sample_covariates(spec: &DgpSpec) -> Result<(Vec<f64>, Vec<f64>), DgpError> {
    spec.validate()?;
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "covariates"));
    match spec.sampler {
        CovariateSampler::Uniform => {
            let x1 = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x2 = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok((x1, x2))
        }
        CovariateSampler::CorrelatedField => {
            let x1 = smoothed_field(&mut rng, spec.rows, spec.cols, 3.0);
            let x2 = smoothed_field(&mut rng, spec.rows, spec.cols, 3.0);
            Ok((x1, x2))
        }
    }
}

/// White noise convolved with a separable Gaussian (kernel truncated at 3σ),
/// standardized to mean 0 / std 1 over the lattice.
fn smoothed_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();

    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();

    // Horizontal then vertical pass, clamping at the lattice edge.
    let mut horizontal = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols as i64 {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let cc = (c + ki as i64 - radius).clamp(0, cols as i64 - 1) as usize;
                acc += kv * noise[r * cols + cc];
            }
            horizontal[r * cols + c as usize] = acc;
        }
    }
    let mut smooth = vec![0.0; rows * cols];
    for r in 0..rows as i64 {
        for c in 0..cols {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let rr = (r + ki as i64 - radius).clamp(0, rows as i64 - 1) as usize;
                acc += kv * horizontal[rr * cols + c];
            }
            smooth[(r as usize) * cols + c] = acc;
        }
    }

    let n = smooth.len() as f64;
    let mean = smooth.iter().sum::<f64>() / n;
    let var = smooth.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    smooth.iter().map(|v| (v - mean) / std).collect()
}

/// Generate the dataset defined by `spec`.
///
/// Lattice cell (row, col) sits at location (col, row); the returned table
/// is row-major over the lattice.
pub fn generate(spec: &DgpSpec) -> Result<Generated, DgpError> {
    spec.validate()?;
    let n = spec.n();
    let (x1, x2) = sample_covariates(spec)?;

    let beta0 = spec.surfaces[0].eval_lattice(spec.rows, spec.cols);
    let beta1 = spec.surfaces[1].eval_lattice(spec.rows, spec.cols);
    let beta2 = spec.surfaces[2].eval_lattice(spec.rows, spec.cols);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "noise"));
    let normal = Normal::new(0.0, spec.noise_std).expect("noise std >= 0");
    let epsilon: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let weights = queen_adjacency(spec.rows, spec.cols)?.row_normalize()?;

    // rhs = β₀ + β₁x₁ + β₂x₂ + ε (+ θ₁Wx₁ + θ₂Wx₂ when covariate lags apply)
    let mut rhs: Vec<f64> = (0..n)
        .map(|i| beta0[i] + beta1[i] * x1[i] + beta2[i] * x2[i] + epsilon[i])
        .collect();
    if spec.process.uses_lagged_covariates() {
        if spec.theta1 != 0.0 {
            let wx1 = weights.matvec(&x1);
            for i in 0..n {
                rhs[i] += spec.theta1 * wx1[i];
            }
        }
        if spec.theta2 != 0.0 {
            let wx2 = weights.matvec(&x2);
            for i in 0..n {
                rhs[i] += spec.theta2 * wx2[i];
            }
        }
    }

    // y = rhs, or the exact solution of (I − ρW)y = rhs for lagged targets.
    // ρ = 0 keeps the plain path so the reduction to Lin is bit-exact.
    let y = if spec.process.uses_lagged_target() && spec.rho != 0.0 {
        let mut a = weights.to_dense();
        a *= -spec.rho;
        for i in 0..n {
            a[(i, i)] += 1.0;
        }
        let b = nalgebra::DVector::from_column_slice(&rhs);
        let lu = a.lu();
        let sol = lu.solve(&b).ok_or(DgpError::SingularSystem)?;
        sol.as_slice().to_vec()
    } else {
        rhs
    };

    let mut covariates = Vec::with_capacity(n * 2);
    let mut locations = Vec::with_capacity(n * 2);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let i = r * spec.cols + c;
            covariates.push(x1[i]);
            covariates.push(x2[i]);
            locations.push(c as f64);
            locations.push(r as f64);
        }
    }
    Ok(Generated {
        table: GeoTable::new(2, covariates, locations, Some(y)),
        epsilon,
        weights,
        beta: [beta0, beta1, beta2],
    })
}
