//! Controlled forward SDEs on sub-diffusion drivers, linear SDEs in closed
//! form, and cost estimation.

mod bundle;
mod coefficients;
mod policy;

pub use bundle::{BundleSetup, GridMatrix, TrajectoryBundle};
pub use coefficients::{fd_step, presets, CoefficientSet, Partials};
pub use policy::{ControlDomain, ControlPolicy, PolicyInput};

use crate::error::{invalid, Error, Result};
use crate::stats::Estimate;
use crate::subdiffusion::SubdiffusionPath;
use crate::subordinator::SubordinatorSpec;

/// States and applied controls on the knots of one driver.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

fn check(v: f64, what: &'static str, step: usize, t: f64, x: f64, u: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, step, t, x, u })
    }
}

/// One explicit Euler step with left-point coefficients.
#[inline]
pub fn euler_step(coeffs: &CoefficientSet, t: f64, x: f64, u: f64, dt: f64, db: f64, step: usize) -> Result<f64> {
    let b = check((coeffs.b)(t, x, u), "drift", step, t, x, u)?;
    let s = check((coeffs.sigma)(t, x, u), "diffusion", step, t, x, u)?;
    check(x + b * dt + s * db, "state", step, t, x, u)
}

/// Euler–Maruyama under a feedback policy on every knot of `driver`.
pub fn euler_integrate(coeffs: &CoefficientSet, policy: &ControlPolicy, driver: &SubdiffusionPath) -> Result<Trajectory> {
    let feats = driver.features();
    let n = driver.len();
    let mut x = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    x.push(driver.x0);
    for k in 0..n {
        let uk = policy.value(&PolicyInput { features: feats[k], state: x[k] });
        u.push(uk);
        if k + 1 < n {
            let next = euler_step(coeffs, feats[k].t, x[k], uk, driver.dt(k), driver.db[k], k)?;
            x.push(next);
        }
    }
    Ok(Trajectory { x, u })
}

/// Euler–Maruyama with a prescribed control value on every knot.
pub fn euler_open_loop(coeffs: &CoefficientSet, controls: &[f64], driver: &SubdiffusionPath) -> Result<Vec<f64>> {
    if controls.len() != driver.len() {
        return Err(invalid("controls", "one value per knot required"));
    }
    let t = driver.times();
    let mut x = Vec::with_capacity(driver.len());
    x.push(driver.x0);
    for k in 0..driver.len() - 1 {
        let next = euler_step(coeffs, t[k], x[k], controls[k], driver.dt(k), driver.db[k], k)?;
        x.push(next);
    }
    Ok(x)
}

/// Trapezoid rule for the running cost plus the terminal cost.
pub fn path_cost(coeffs: &CoefficientSet, times: &[f64], x: &[f64], u: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut prev = (coeffs.f)(times[0], x[0], u[0]);
    for k in 0..times.len() - 1 {
        let next = (coeffs.f)(times[k + 1], x[k + 1], u[k + 1]);
        acc += 0.5 * (prev + next) * (times[k + 1] - times[k]);
        prev = next;
    }
    acc + (coeffs.h)(x[x.len() - 1])
}

/// Trapezoid weights on a knot sequence.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let half = 0.5 * (times[k + 1] - times[k]);
        w[k] += half;
        w[k + 1] += half;
    }
    w
}

/// Coefficient streams of `dY = (aY + α)dt + (bY + β)dB_L` on the knots of a driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStreams {
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LinearStreams {
    pub fn constant(n: usize, a: f64, alpha: f64, b: f64, beta: f64) -> Self {
        LinearStreams { a: vec![a; n], alpha: vec![alpha; n], b: vec![b; n], beta: vec![beta; n] }
    }
}

/// Linear SDE through its stochastic exponential:
/// `Y = E(M) [Y0 + ∫ E(M)^{-1} (α dt + β dB_L - bβ dL)]`, `M = ∫a dt + ∫b dB_L`.
/// The `-bβ dL` term is the covariation correction for multiplicative noise.
pub fn exact_linear_solve(streams: &LinearStreams, y0: f64, driver: &SubdiffusionPath, bound: f64) -> Result<Vec<f64>> {
    let n = driver.len();
    for (name, s) in [("a", &streams.a), ("alpha", &streams.alpha), ("b", &streams.b), ("beta", &streams.beta)] {
        if s.len() != n {
            return Err(invalid("streams", format!("{name} needs one value per knot")));
        }
    }
    for (name, s) in [("a", &streams.a), ("b", &streams.b)] {
        if let Some((index, v)) = s.iter().enumerate().find(|(_, v)| !(v.abs() <= bound)) {
            return Err(Error::Unbounded { name, index, value: v.abs(), bound });
        }
    }
    let mut log_e: f64 = 0.0;
    let mut acc = 0.0;
    let mut y = Vec::with_capacity(n);
    y.push(y0);
    for k in 0..n - 1 {
        let (dt, db, dl) = (driver.dt(k), driver.db[k], driver.dl(k));
        let inv_e = (-log_e).exp();
        acc += inv_e * (streams.alpha[k] * dt + streams.beta[k] * db - streams.b[k] * streams.beta[k] * dl);
        log_e += streams.a[k] * dt + streams.b[k] * db - 0.5 * streams.b[k] * streams.b[k] * dl;
        y.push(log_e.exp() * (y0 + acc));
    }
    Ok(y)
}

/// Monte Carlo cost of `policy`, keeping the bundle for coupled re-evaluation.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle_size: usize,
    grid: &[f64],
    spec: &SubordinatorSpec,
    x0: f64,
    a: f64,
    seed: u64,
) -> Result<(Estimate, TrajectoryBundle)> {
    if bundle_size < 2 {
        return Err(invalid("bundle_size", "need at least two paths"));
    }
    let setup = BundleSetup::new(spec.clone(), grid.to_vec(), x0, a, seed, bundle_size)?;
    let bundle = TrajectoryBundle::simulate(coeffs, policy, setup)?;
    Ok((bundle.cost_estimate(), bundle))
}
