//! Sub-diffusion paths `X_t = x0 + B_{L_{(t-a)^+}}` and their observable features.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::rng::{path_rng, Stream};
use crate::stats::{Estimate, RunningStats};
use crate::subordinator::{invert_on_grid, sample_to_level, SubordinatorSpec};
use crate::InversePath;

/// One sampled trajectory on the knots of its inverse path.
#[derive(Debug, Clone, PartialEq)]
pub struct SubdiffusionPath {
    pub inverse: InversePath,
    pub x0: f64,
    /// `X` at every knot.
    pub x: Vec<f64>,
    /// `ΔB` over every knot step, `N(0, ΔL)`.
    pub db: Vec<f64>,
}

/// Quantities an `F'_t`-adapted rule may look at.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObservableFeatures {
    pub t: f64,
    pub x: f64,
    /// Quadratic variation of X up to t.
    pub l: f64,
    /// Time since X last moved.
    pub age_of_flat: f64,
}

pub fn uniform_grid(horizon: f64, n_steps: usize) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=n_steps).map(|i| horizon * i as f64 / n_steps as f64).collect();
    g[n_steps] = horizon;
    g
}

/// Sample path `index` under `seed`. Subordinator and Brownian draws come from
/// separate streams.
pub fn sample_subdiffusion_path(
    spec: &SubordinatorSpec,
    x0: f64,
    a: f64,
    grid: &[f64],
    seed: u64,
    index: u64,
) -> Result<SubdiffusionPath> {
    if !x0.is_finite() {
        return Err(invalid("x0", "must be finite"));
    }
    let t_end = *grid.last().ok_or_else(|| invalid("grid", "empty"))?;
    let sub = sample_to_level(spec, (t_end - a).max(0.0), seed, index)?;
    let inverse = invert_on_grid(&sub, grid, &a)?;
    let mut rng = path_rng(seed, Stream::Brownian, index);
    let n = inverse.len();
    let mut x = Vec::with_capacity(n);
    let mut db = Vec::with_capacity(n - 1);
    x.push(x0);
    for k in 0..n - 1 {
        let dl = inverse.l[k + 1] - inverse.l[k];
        let step = if inverse.flat[k] || dl <= 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            dl.sqrt() * z
        };
        db.push(step);
        x.push(x[k] + step);
    }
    Ok(SubdiffusionPath { inverse, x0, x, db })
}

pub fn sample_subdiffusion(
    spec: &SubordinatorSpec,
    x0: f64,
    a: f64,
    grid: &[f64],
    seed: u64,
) -> Result<SubdiffusionPath> {
    sample_subdiffusion_path(spec, x0, a, grid, seed, 0)
}

impl SubdiffusionPath {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.inverse.grid
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.inverse.grid[k + 1] - self.inverse.grid[k]
    }

    pub fn dl(&self, k: usize) -> f64 {
        self.inverse.l[k + 1] - self.inverse.l[k]
    }

    /// Observable features at every knot.
    pub fn features(&self) -> Vec<ObservableFeatures> {
        observe(&self.inverse.grid, &self.x, &self.inverse.l)
    }

    /// Knot index of a caller grid time, if `t` is one.
    pub fn knot_at(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * t.abs().max(1.0);
        self.inverse.caller.iter().copied().find(|&k| (self.inverse.grid[k] - t).abs() <= tol)
    }
}

/// Feature extraction from the X-path and its quadratic variation only. The
/// overshoot is deliberately not an input.
pub fn observe(times: &[f64], x: &[f64], qv: &[f64]) -> Vec<ObservableFeatures> {
    let mut out = Vec::with_capacity(times.len());
    let mut age = 0.0;
    for k in 0..times.len() {
        if k > 0 {
            age = if x[k] == x[k - 1] { age + (times[k] - times[k - 1]) } else { 0.0 };
        }
        out.push(ObservableFeatures { t: times[k], x: x[k], l: qv[k], age_of_flat: age });
    }
    out
}

/// Result of a martingale check on `X`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleCheck {
    pub mean_increment: Estimate,
    /// `E[(ΔX)^2 - ΔL]`.
    pub isometry_residual: Estimate,
}

/// `E[X_{t+s} - X_t]` and the isometry residual over a set of paths. Both times
/// must be caller grid points.
pub fn martingale_check(paths: &[SubdiffusionPath], t: f64, s: f64) -> Result<MartingaleCheck> {
    if !(t >= 0.0 && s > 0.0) {
        return Err(invalid("t", "need 0 <= t < t + s"));
    }
    let mut inc = RunningStats::new();
    let mut iso = RunningStats::new();
    for p in paths {
        let i = p.knot_at(t).ok_or_else(|| invalid("t", "not a grid time"))?;
        let j = p.knot_at(t + s).ok_or_else(|| invalid("s", "t + s not a grid time"))?;
        let dx = p.x[j] - p.x[i];
        inc.push(dx);
        iso.push(dx * dx - (p.inverse.l[j] - p.inverse.l[i]));
    }
    Ok(MartingaleCheck { mean_increment: inc.estimate(), isometry_residual: iso.estimate() })
}

/// Exact solution `S0 exp(σ B_L + μ t - σ² L / 2)` on every knot.
pub fn geometric_subdiffusion(path: &SubdiffusionPath, s0: f64, mu: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(s0 > 0.0) {
        return Err(invalid("s0", "must be positive"));
    }
    Ok(path
        .x
        .iter()
        .zip(&path.inverse.grid)
        .zip(&path.inverse.l)
        .map(|((x, t), l)| s0 * (sigma * (x - path.x0) + mu * t - 0.5 * sigma * sigma * l).exp())
        .collect())
}
