use rayon::prelude::*;

use super::{euler_integrate, path_cost, CoefficientSet, ControlPolicy};
use crate::error::{invalid, Result};
use crate::stats::{Estimate, RunningStats};
use crate::subdiffusion::{sample_subdiffusion_path, SubdiffusionPath};
use crate::subordinator::SubordinatorSpec;

/// Row-major `paths x times` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> GridMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        GridMatrix { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, path: usize, j: usize) -> T {
        self.data[path * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, path: usize, j: usize, v: T) {
        self.data[path * self.cols + j] = v;
    }

    pub fn row(&self, path: usize) -> &[T] {
        &self.data[path * self.cols..(path + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Everything needed to regenerate the drivers of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleSetup {
    pub spec: SubordinatorSpec,
    pub grid: Vec<f64>,
    pub x0: f64,
    pub a: f64,
    pub seed: u64,
    pub n_paths: usize,
}

impl BundleSetup {
    pub fn new(spec: SubordinatorSpec, grid: Vec<f64>, x0: f64, a: f64, seed: u64, n_paths: usize) -> Result<Self> {
        spec.validate()?;
        if grid.len() < 2 || grid[0] != 0.0 {
            return Err(invalid("grid", "need at least two points starting at 0"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("grid", "must be strictly increasing"));
        }
        if !(a >= 0.0) {
            return Err(invalid("a", "must be non-negative"));
        }
        if n_paths == 0 {
            return Err(invalid("n_paths", "must be positive"));
        }
        Ok(BundleSetup { spec, grid, x0, a, seed, n_paths })
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn driver(&self, index: usize) -> Result<SubdiffusionPath> {
        sample_subdiffusion_path(&self.spec, self.x0, self.a, &self.grid, self.seed, index as u64)
    }

    pub fn with_paths(&self, n_paths: usize) -> Self {
        BundleSetup { n_paths, ..self.clone() }
    }
}

struct PathRecord {
    x: Vec<f64>,
    l: Vec<f64>,
    age: Vec<f64>,
    flat: Vec<bool>,
    state: Vec<f64>,
    control: Vec<f64>,
    dl: Vec<f64>,
    db: Vec<f64>,
    cost: f64,
}

fn record(coeffs: &CoefficientSet, policy: &ControlPolicy, driver: &SubdiffusionPath) -> Result<PathRecord> {
    let tr = euler_integrate(coeffs, policy, driver)?;
    let feats = driver.features();
    let cost = path_cost(coeffs, driver.times(), &tr.x, &tr.u);
    let c = &driver.inverse.caller;
    let m = c.len();
    let mut rec = PathRecord {
        x: Vec::with_capacity(m),
        l: Vec::with_capacity(m),
        age: Vec::with_capacity(m),
        flat: Vec::with_capacity(m),
        state: Vec::with_capacity(m),
        control: Vec::with_capacity(m),
        dl: Vec::with_capacity(m),
        db: Vec::with_capacity(m),
        cost,
    };
    for (j, &k) in c.iter().enumerate() {
        rec.x.push(driver.x[k]);
        rec.l.push(driver.inverse.l[k]);
        rec.age.push(feats[k].age_of_flat);
        rec.flat.push(driver.inverse.flat[k]);
        rec.state.push(tr.x[k]);
        rec.control.push(tr.u[k]);
        if j + 1 < m {
            rec.dl.push(driver.inverse.l[c[j + 1]] - driver.inverse.l[k]);
            rec.db.push(driver.db[k..c[j + 1]].iter().sum());
        } else {
            rec.dl.push(0.0);
            rec.db.push(0.0);
        }
    }
    Ok(rec)
}

/// Controlled trajectories of a whole bundle, stored on the caller grid.
/// Refined drivers are not kept; [`BundleSetup::driver`] regenerates them
/// bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub setup: BundleSetup,
    pub coefficients: String,
    pub policy: String,
    /// Uncontrolled sub-diffusion `X`.
    pub x: GridMatrix,
    pub l: GridMatrix,
    pub age: GridMatrix,
    /// `R_t > 0`.
    pub flat: GridMatrix<bool>,
    pub state: GridMatrix,
    pub control: GridMatrix,
    /// Increments to the next caller time; the last column is zero.
    pub dl: GridMatrix,
    pub db: GridMatrix,
    pub cost_samples: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn simulate(coeffs: &CoefficientSet, policy: &ControlPolicy, setup: BundleSetup) -> Result<Self> {
        let recs: Vec<PathRecord> = (0..setup.n_paths)
            .into_par_iter()
            .map(|i| record(coeffs, policy, &setup.driver(i)?))
            .collect::<Result<_>>()?;
        let (n, m) = (setup.n_paths, setup.grid.len());
        let mut b = TrajectoryBundle {
            coefficients: coeffs.name.clone(),
            policy: policy.name.clone(),
            x: GridMatrix::zeros(n, m),
            l: GridMatrix::zeros(n, m),
            age: GridMatrix::zeros(n, m),
            flat: GridMatrix::zeros(n, m),
            state: GridMatrix::zeros(n, m),
            control: GridMatrix::zeros(n, m),
            dl: GridMatrix::zeros(n, m),
            db: GridMatrix::zeros(n, m),
            cost_samples: Vec::with_capacity(n),
            setup,
        };
        for (i, r) in recs.into_iter().enumerate() {
            for j in 0..m {
                b.x.set(i, j, r.x[j]);
                b.l.set(i, j, r.l[j]);
                b.age.set(i, j, r.age[j]);
                b.flat.set(i, j, r.flat[j]);
                b.state.set(i, j, r.state[j]);
                b.control.set(i, j, r.control[j]);
                b.dl.set(i, j, r.dl[j]);
                b.db.set(i, j, r.db[j]);
            }
            b.cost_samples.push(r.cost);
        }
        Ok(b)
    }

    /// Same drivers, different coefficients or policy.
    pub fn reevaluate(&self, coeffs: &CoefficientSet, policy: &ControlPolicy) -> Result<Self> {
        TrajectoryBundle::simulate(coeffs, policy, self.setup.clone())
    }

    pub fn n_paths(&self) -> usize {
        self.setup.n_paths
    }

    pub fn times(&self) -> &[f64] {
        &self.setup.grid
    }

    pub fn drift(&self) -> f64 {
        self.setup.spec.effective_drift()
    }

    pub fn cost_estimate(&self) -> Estimate {
        self.cost_samples.iter().copied().collect::<RunningStats>().estimate()
    }

    /// Index of the first caller time strictly after the offset.
    pub fn first_random_step(&self) -> usize {
        self.times().iter().position(|&t| t > self.setup.a).unwrap_or(self.times().len())
    }
}
