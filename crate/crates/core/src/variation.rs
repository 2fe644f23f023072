//! Spike and convex perturbations of a control, their variational processes,
//! and the first and second variations of the cost.
//!
//! The base control is replayed as a process: perturbed runs reuse the values
//! `u_bar` took along the base trajectory, knot by knot, on the same driver.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::forward_sde::{path_cost, BundleSetup, CoefficientSet, ControlPolicy, GridMatrix, PolicyInput, TrajectoryBundle, Trajectory};
use crate::bsde::BsdeSolution;
use crate::stats::{fit_loglog, Estimate, RunningStats};
use crate::subdiffusion::{ObservableFeatures, SubdiffusionPath};
use crate::forward_sde::euler_integrate;

/// Paths per work unit; partial sums are combined in unit order so results do
/// not depend on the thread count.
const CHUNK: usize = 256;

pub(crate) fn chunked<A, F, G>(n: usize, init: impl Fn() -> A + Sync, f: F, combine: G) -> Result<A>
where
    A: Send,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
    G: Fn(&mut A, A),
{
    let parts: Vec<Result<A>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(&mut acc, i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut out = init();
    for p in parts {
        combine(&mut out, p?);
    }
    Ok(out)
}

/// Test directions for convex perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Direction {
    Constant(f64),
    /// `t / T`.
    Ramp,
    /// `1{t > T/2}`.
    Step,
    /// `X_t`.
    FeatureLinear,
}

impl Direction {
    pub fn library() -> Vec<Direction> {
        vec![Direction::Constant(1.0), Direction::Ramp, Direction::Step, Direction::FeatureLinear]
    }

    pub fn name(&self) -> String {
        match self {
            Direction::Constant(c) => format!("constant({c})"),
            Direction::Ramp => "ramp".into(),
            Direction::Step => "step".into(),
            Direction::FeatureLinear => "feature-linear".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s.trim() {
            "ramp" => Ok(Direction::Ramp),
            "step" => Ok(Direction::Step),
            "feature-linear" | "feature" => Ok(Direction::FeatureLinear),
            other => {
                let c = other
                    .strip_prefix("constant(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or(other.strip_prefix("constant:"))
                    .ok_or_else(|| invalid("direction", format!("unknown direction {other:?}")))?;
                c.parse().map(Direction::Constant).map_err(|_| invalid("direction", format!("bad constant {c:?}")))
            }
        }
    }

    pub fn value(&self, f: &ObservableFeatures, horizon: f64) -> f64 {
        match *self {
            Direction::Constant(c) => c,
            Direction::Ramp => f.t / horizon,
            Direction::Step => (f.t > 0.5 * horizon) as u8 as f64,
            Direction::FeatureLinear => f.x,
        }
    }
}

/// Base control `u_bar` perturbed along `direction`.
#[derive(Debug, Clone)]
pub struct ConvexSpec {
    pub base: ControlPolicy,
    pub direction: Direction,
    pub epsilons: Vec<f64>,
}

impl ConvexSpec {
    pub fn new(base: ControlPolicy, direction: Direction, epsilons: Vec<f64>) -> Self {
        ConvexSpec { base, direction, epsilons }
    }
}

/// `u_eps = v` on `[t_bar, t_bar + eps)` and `u_bar` elsewhere.
#[derive(Debug, Clone)]
pub struct SpikeSpec {
    pub base: ControlPolicy,
    pub alternative: ControlPolicy,
    pub t_bar: f64,
}

impl SpikeSpec {
    pub fn new(base: ControlPolicy, alternative: ControlPolicy, t_bar: f64) -> Self {
        SpikeSpec { base, alternative, t_bar }
    }

    fn check(&self, eps: f64, horizon: f64) -> Result<()> {
        if !(eps >= 0.0) || !(self.t_bar >= 0.0) || self.t_bar + eps > horizon * (1.0 + 1e-12) {
            return Err(invalid("epsilon", "window must lie in [0, T] with eps >= 0"));
        }
        Ok(())
    }

    fn in_window(&self, t: f64, eps: f64) -> bool {
        t >= self.t_bar && t < self.t_bar + eps
    }
}

struct Base {
    driver: SubdiffusionPath,
    tr: Trajectory,
    feats: Vec<ObservableFeatures>,
}

fn base(coeffs: &CoefficientSet, policy: &ControlPolicy, setup: &BundleSetup, i: usize) -> Result<Base> {
    let driver = setup.driver(i)?;
    let tr = euler_integrate(coeffs, policy, &driver)?;
    let feats = driver.features();
    Ok(Base { driver, tr, feats })
}

fn check_run(coeffs: &CoefficientSet, policy: &ControlPolicy, bundle: &TrajectoryBundle) -> Result<()> {
    if bundle.coefficients != coeffs.name || bundle.policy != policy.name {
        return Err(Error::Precondition(format!(
            "bundle was simulated with ({}, {}), not ({}, {})",
            bundle.coefficients, bundle.policy, coeffs.name, policy.name
        )));
    }
    Ok(())
}

/// Euler with the given control on every knot.
fn replay(coeffs: &CoefficientSet, d: &SubdiffusionPath, u: &[f64]) -> Result<Vec<f64>> {
    crate::forward_sde::euler_open_loop(coeffs, u, d)
}

// Spike variation

/// Per-path spike processes on the caller grid.
#[derive(Debug, Clone)]
pub struct SpikePaths {
    pub x_bar: GridMatrix,
    pub x_eps: GridMatrix,
    pub y_eps: GridMatrix,
    pub z_eps: GridMatrix,
}

struct SpikeRun {
    x_eps: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
}

fn spike_run(coeffs: &CoefficientSet, spike: &SpikeSpec, b: &Base, eps: f64) -> Result<SpikeRun> {
    let d = &b.driver;
    let t = d.times();
    let n = d.len();
    let mut u = b.tr.u.clone();
    let mut v = vec![0.0; n];
    for k in 0..n {
        if spike.in_window(t[k], eps) {
            v[k] = spike.alternative.value(&PolicyInput { features: b.feats[k], state: b.tr.x[k] });
            u[k] = v[k];
        }
    }
    let x_eps = replay(coeffs, d, &u)?;
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    for k in 0..n - 1 {
        let (x, ub) = (b.tr.x[k], b.tr.u[k]);
        let p = coeffs.partials_at(t[k], x, ub);
        let (dt, db) = (d.dt(k), d.db[k]);
        let (mut db_, mut ds, mut dsx) = (0.0, 0.0, 0.0);
        if spike.in_window(t[k], eps) {
            db_ = (coeffs.b)(t[k], x, v[k]) - (coeffs.b)(t[k], x, ub);
            ds = (coeffs.sigma)(t[k], x, v[k]) - (coeffs.sigma)(t[k], x, ub);
            dsx = coeffs.partials_at(t[k], x, v[k]).s_x - p.s_x;
        }
        let yk = y[k];
        y[k + 1] = yk + p.b_x * yk * dt + (p.s_x * yk + ds) * db;
        let zk = z[k];
        z[k + 1] = zk
            + (p.b_x * zk + 0.5 * p.b_xx * yk * yk + db_) * dt
            + (p.s_x * zk + 0.5 * p.s_xx * yk * yk + dsx * yk) * db;
    }
    Ok(SpikeRun { x_eps, y, z })
}

pub fn simulate_spike_processes(
    coeffs: &CoefficientSet,
    spike: &SpikeSpec,
    bundle: &TrajectoryBundle,
    eps: f64,
) -> Result<SpikePaths> {
    check_run(coeffs, &spike.base, bundle)?;
    spike.check(eps, bundle.setup.horizon())?;
    let (n, m) = (bundle.n_paths(), bundle.times().len());
    let runs: Vec<(Vec<usize>, Vec<f64>, SpikeRun)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let b = base(coeffs, &spike.base, &bundle.setup, i)?;
            let r = spike_run(coeffs, spike, &b, eps)?;
            Ok((b.driver.inverse.caller.clone(), b.tr.x, r))
        })
        .collect::<Result<_>>()?;
    let mut out = SpikePaths {
        x_bar: GridMatrix::zeros(n, m),
        x_eps: GridMatrix::zeros(n, m),
        y_eps: GridMatrix::zeros(n, m),
        z_eps: GridMatrix::zeros(n, m),
    };
    for (i, (caller, xb, r)) in runs.iter().enumerate() {
        for (j, &k) in caller.iter().enumerate() {
            out.x_bar.set(i, j, xb[k]);
            out.x_eps.set(i, j, r.x_eps[k]);
            out.y_eps.set(i, j, r.y[k]);
            out.z_eps.set(i, j, r.z[k]);
        }
    }
    Ok(out)
}

/// Log-log fits of `sup_t E|R|^{2k}` against `eps` for the remainders
/// `x_eps - x_bar`, `x_eps - x_bar - y_eps` and `x_eps - x_bar - y_eps - z_eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeScaling {
    pub epsilons: Vec<f64>,
    pub k: u32,
    /// `moments[r][e]` for remainder `r` and epsilon `e`.
    pub moments: [Vec<f64>; 3],
    /// `+inf` when the remainder sits at round-off for every epsilon.
    pub slopes: [f64; 3],
    pub r_squared: [f64; 3],
    /// Set when a finite fit has `R^2 < 0.9`: more paths are needed.
    pub noisy: bool,
}

pub fn spike_remainder_scaling(
    coeffs: &CoefficientSet,
    spike: &SpikeSpec,
    bundle: &TrajectoryBundle,
    epsilons: &[f64],
    k: u32,
) -> Result<SpikeScaling> {
    check_run(coeffs, &spike.base, bundle)?;
    spike_remainder_scaling_on(coeffs, spike, &bundle.setup, epsilons, k)
}

/// As [`spike_remainder_scaling`], regenerating the base run from `setup`
/// path by path instead of reading a stored bundle.
pub fn spike_remainder_scaling_on(
    coeffs: &CoefficientSet,
    spike: &SpikeSpec,
    setup: &BundleSetup,
    epsilons: &[f64],
    k: u32,
) -> Result<SpikeScaling> {
    if !(k == 1 || k == 2) {
        return Err(invalid("k", "must be 1 or 2"));
    }
    if epsilons.len() < 2 {
        return Err(invalid("epsilons", "need at least two values"));
    }
    for &e in epsilons {
        spike.check(e, setup.horizon())?;
        if !(e > 0.0) {
            return Err(invalid("epsilons", "must be positive"));
        }
    }
    let (n, m, ne) = (setup.n_paths, setup.grid.len(), epsilons.len());
    // sums[(r * ne + e) * m + j]; index 3 holds the scale |x_eps - x_bar| + |y| + |z|.
    let sums = chunked(
        n,
        || vec![0.0; 4 * ne * m],
        |acc, i| {
            let b = base(coeffs, &spike.base, setup, i)?;
            for (e, &eps) in epsilons.iter().enumerate() {
                let r = spike_run(coeffs, spike, &b, eps)?;
                for (j, &kk) in b.driver.inverse.caller.iter().enumerate() {
                    let d0 = r.x_eps[kk] - b.tr.x[kk];
                    let d1 = d0 - r.y[kk];
                    let d2 = d1 - r.z[kk];
                    let scale = r.x_eps[kk].abs() + b.tr.x[kk].abs() + r.y[kk].abs() + r.z[kk].abs();
                    for (ri, d) in [d0, d1, d2, scale].into_iter().enumerate() {
                        acc[(ri * ne + e) * m + j] += d.abs().powi(2 * k as i32);
                    }
                }
            }
            Ok(())
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
    )?;
    let nf = n as f64;
    let sup = |ri: usize, e: usize| (0..m).map(|j| sums[(ri * ne + e) * m + j] / nf).fold(0.0, f64::max);
    let moments: [Vec<f64>; 3] = std::array::from_fn(|ri| (0..ne).map(|e| sup(ri, e)).collect());
    let floor: Vec<f64> = (0..ne).map(|e| (64.0 * f64::EPSILON).powi(2 * k as i32) * sup(3, e)).collect();
    let mut slopes = [0.0; 3];
    let mut r2 = [1.0; 3];
    let mut noisy = false;
    for ri in 0..3 {
        let pts: Vec<(f64, f64)> =
            (0..ne).filter(|&e| moments[ri][e] > floor[e]).map(|e| (epsilons[e], moments[ri][e])).collect();
        if pts.len() < 2 {
            slopes[ri] = f64::INFINITY;
            continue;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = fit_loglog(&xs, &ys).ok_or_else(|| invalid("epsilons", "degenerate fit"))?;
        slopes[ri] = fit.slope;
        r2[ri] = fit.r_squared;
        noisy |= fit.r_squared < 0.9;
    }
    Ok(SpikeScaling { epsilons: epsilons.to_vec(), k, moments, slopes, r_squared: r2, noisy })
}

// Convex variation

struct Tangent {
    x1: Vec<f64>,
    x2: Vec<f64>,
    v: Vec<f64>,
    j1: f64,
    j2: f64,
}

fn directions(dir: Direction, b: &Base, horizon: f64) -> Vec<f64> {
    b.feats.iter().map(|f| dir.value(f, horizon)).collect()
}

/// Euler on the first and second order tangent equations, on the base knots.
fn tangent(coeffs: &CoefficientSet, b: &Base, v: Vec<f64>) -> Tangent {
    let d = &b.driver;
    let t = d.times();
    let n = d.len();
    let mut x1 = vec![0.0; n];
    let mut x2 = vec![0.0; n];
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    for k in 0..n {
        let p = coeffs.partials_at(t[k], b.tr.x[k], b.tr.u[k]);
        let (a1, a2, vk) = (x1[k], x2[k], v[k]);
        g1[k] = p.f_x * a1 + p.f_u * vk;
        g2[k] = 0.5 * p.f_xx * a1 * a1 + p.f_xu * a1 * vk + 0.5 * p.f_uu * vk * vk + p.f_x * a2;
        if k + 1 < n {
            let (dt, db) = (d.dt(k), d.db[k]);
            x1[k + 1] = a1 + (p.b_x * a1 + p.b_u * vk) * dt + (p.s_x * a1 + p.s_u * vk) * db;
            let drift = p.b_x * a2 + 0.5 * p.b_xx * a1 * a1 + p.b_xu * a1 * vk + 0.5 * p.b_uu * vk * vk;
            let diff = p.s_x * a2 + 0.5 * p.s_xx * a1 * a1 + p.s_xu * a1 * vk + 0.5 * p.s_uu * vk * vk;
            x2[k + 1] = a2 + drift * dt + diff * db;
        }
    }
    let trap = |g: &[f64]| (0..n - 1).map(|k| 0.5 * (g[k] + g[k + 1]) * (t[k + 1] - t[k])).sum::<f64>();
    let (hx, hxx) = coeffs.terminal_partials_at(b.tr.x[n - 1]);
    let j1 = trap(&g1) + hx * x1[n - 1];
    let j2 = trap(&g2) + 0.5 * hxx * x1[n - 1] * x1[n - 1] + hx * x2[n - 1];
    Tangent { x1, x2, v, j1, j2 }
}

fn check_domain(policy: &ControlPolicy, u: &[f64]) -> Result<()> {
    if let Some(bad) = u.iter().find(|x| !policy.domain.contains(**x)) {
        return Err(Error::Precondition(format!("perturbed control {bad} leaves the control domain")));
    }
    Ok(())
}

/// `(x1, x2)` on the caller grid: `x_bar + eps x1 + eps^2 x2` is the
/// second-order expansion of the perturbed state.
pub fn simulate_convex_variations(
    coeffs: &CoefficientSet,
    convex: &ConvexSpec,
    bundle: &TrajectoryBundle,
) -> Result<(GridMatrix, GridMatrix)> {
    check_run(coeffs, &convex.base, bundle)?;
    let (n, m) = (bundle.n_paths(), bundle.times().len());
    let horizon = bundle.setup.horizon();
    let runs: Vec<(Vec<usize>, Tangent)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let b = base(coeffs, &convex.base, &bundle.setup, i)?;
            let v = directions(convex.direction, &b, horizon);
            Ok((b.driver.inverse.caller.clone(), tangent(coeffs, &b, v)))
        })
        .collect::<Result<_>>()?;
    let mut x1 = GridMatrix::zeros(n, m);
    let mut x2 = GridMatrix::zeros(n, m);
    for (i, (caller, tg)) in runs.iter().enumerate() {
        for (j, &k) in caller.iter().enumerate() {
            x1.set(i, j, tg.x1[k]);
            x2.set(i, j, tg.x2[k]);
        }
    }
    Ok((x1, x2))
}

/// Direct and adjoint estimators of one cost variation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationEstimate {
    pub direct: Estimate,
    pub adjoint: Estimate,
    /// Time-discretization error of the backward solves propagated into the
    /// adjoint estimator; zero when the solutions carry no estimate.
    pub solver_error: f64,
}

impl VariationEstimate {
    /// Standard error of the adjoint estimator combined with the solver error.
    pub fn adjoint_error(&self) -> f64 {
        self.adjoint.std_error.hypot(self.solver_error)
    }

    pub fn combined_std_error(&self) -> f64 {
        self.direct.std_error.hypot(self.adjoint_error())
    }

    /// Direct and adjoint agree within `sigmas` combined standard errors.
    pub fn agree(&self, sigmas: f64) -> bool {
        (self.direct.value - self.adjoint.value).abs() <= sigmas * self.combined_std_error()
    }

    /// Disagreement beyond five standard errors flags solver bias.
    pub fn duality_violation(&self) -> bool {
        !self.agree(5.0)
    }
}

fn caller_features(bundle: &TrajectoryBundle, p: usize, j: usize) -> ObservableFeatures {
    ObservableFeatures { t: bundle.times()[j], x: bundle.x.get(p, j), l: bundle.l.get(p, j), age_of_flat: bundle.age.get(p, j) }
}

fn check_adjoint(sol: &BsdeSolution, bundle: &TrajectoryBundle) -> Result<()> {
    if sol.times.len() != bundle.times().len() || sol.n_paths() != bundle.n_paths() {
        return Err(Error::Precondition("adjoint was solved on a different bundle".into()));
    }
    Ok(())
}

#[derive(Default)]
struct Pair {
    direct: RunningStats,
    adjoint: RunningStats,
    /// Sum over paths of `sum_j err_j |weight_j|`.
    solver: f64,
}

fn merge_pair(a: &mut Pair, b: Pair) {
    a.direct.merge(&b.direct);
    a.adjoint.merge(&b.adjoint);
    a.solver += b.solver;
}

/// `J1` directly from the tangent and through the first adjoint:
/// `E int (f_u - b_u p) v dt - E int sigma_u q v dL`.
pub fn first_variation_j(
    coeffs: &CoefficientSet,
    convex: &ConvexSpec,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
) -> Result<VariationEstimate> {
    check_run(coeffs, &convex.base, bundle)?;
    check_adjoint(first, bundle)?;
    let horizon = bundle.setup.horizon();
    let tm = bundle.times();
    let acc = chunked(
        bundle.n_paths(),
        Pair::default,
        |acc, i| {
            let b = base(coeffs, &convex.base, &bundle.setup, i)?;
            let v = directions(convex.direction, &b, horizon);
            let tg = tangent(coeffs, &b, v);
            acc.direct.push(tg.j1);
            let mut s = 0.0;
            for j in 0..tm.len() - 1 {
                let vj = convex.direction.value(&caller_features(bundle, i, j), horizon);
                let d = coeffs.partials_at(tm[j], bundle.state.get(i, j), bundle.control.get(i, j));
                let (p, q) = (first.y.get(i, j), first.z.get(i, j));
                let dt = tm[j + 1] - tm[j];
                s += (d.f_u - d.b_u * p) * vj * dt - d.s_u * q * vj * bundle.dl.get(i, j);
                acc.solver += first.discretization_error[j] * (d.b_u * vj).abs() * dt;
            }
            acc.adjoint.push(s);
            Ok(())
        },
        merge_pair,
    )?;
    let solver_error = acc.solver / bundle.n_paths() as f64;
    Ok(VariationEstimate { direct: acc.direct.estimate(), adjoint: acc.adjoint.estimate(), solver_error })
}

/// `J2` directly and through `(p, q)` and `(eta, gamma)`:
/// `E int (f_xu x1 v + f_uu v^2/2 - p b_xu x1 v - p b_uu v^2/2 + eta x1 b_u v) dt
///  + E int (eta sigma_x sigma_u x1 v + eta sigma_u^2 v^2/2 + gamma x1 sigma_u v
///  - q sigma_xu x1 v - q sigma_uu v^2/2) dL`.
pub fn second_variation_j(
    coeffs: &CoefficientSet,
    convex: &ConvexSpec,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
    eta: &BsdeSolution,
) -> Result<VariationEstimate> {
    check_run(coeffs, &convex.base, bundle)?;
    check_adjoint(first, bundle)?;
    check_adjoint(eta, bundle)?;
    let horizon = bundle.setup.horizon();
    let tm = bundle.times();
    let acc = chunked(
        bundle.n_paths(),
        Pair::default,
        |acc, i| {
            let b = base(coeffs, &convex.base, &bundle.setup, i)?;
            let v = directions(convex.direction, &b, horizon);
            let tg = tangent(coeffs, &b, v);
            acc.direct.push(tg.j2);
            let caller = &b.driver.inverse.caller;
            let mut s = 0.0;
            for j in 0..tm.len() - 1 {
                let vj = convex.direction.value(&caller_features(bundle, i, j), horizon);
                let x1 = tg.x1[caller[j]];
                let d = coeffs.partials_at(tm[j], bundle.state.get(i, j), bundle.control.get(i, j));
                let (p, q) = (first.y.get(i, j), first.z.get(i, j));
                let (e, g) = (eta.y.get(i, j), eta.z.get(i, j));
                let dt_part = d.f_xu * x1 * vj + 0.5 * d.f_uu * vj * vj - p * d.b_xu * x1 * vj - 0.5 * p * d.b_uu * vj * vj
                    + e * x1 * d.b_u * vj;
                let dl_part = e * d.s_x * d.s_u * x1 * vj + 0.5 * e * d.s_u * d.s_u * vj * vj + g * x1 * d.s_u * vj
                    - q * d.s_xu * x1 * vj
                    - 0.5 * q * d.s_uu * vj * vj;
                let dt = tm[j + 1] - tm[j];
                s += dt_part * dt + dl_part * bundle.dl.get(i, j);
                let sens = (0.5 * d.b_uu * vj * vj + d.b_xu * x1 * vj).abs() * first.discretization_error[j]
                    + (x1 * d.b_u * vj).abs() * eta.discretization_error[j];
                acc.solver += sens * dt;
            }
            acc.adjoint.push(s);
            Ok(())
        },
        merge_pair,
    )?;
    let solver_error = acc.solver / bundle.n_paths() as f64;
    Ok(VariationEstimate { direct: acc.direct.estimate(), adjoint: acc.adjoint.estimate(), solver_error })
}

/// Coupled costs of `u_bar` and `u_bar + eps v` on the same drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledComparison {
    pub epsilon: f64,
    pub base: Estimate,
    pub perturbed: Estimate,
    /// Pathwise `J(u_bar + eps v) - J(u_bar)`.
    pub difference: Estimate,
}

pub fn coupled_costs(
    coeffs: &CoefficientSet,
    convex: &ConvexSpec,
    bundle: &TrajectoryBundle,
) -> Result<Vec<CoupledComparison>> {
    check_run(coeffs, &convex.base, bundle)?;
    coupled_costs_on(coeffs, convex, &bundle.setup)
}

/// As [`coupled_costs`], without a stored bundle.
pub fn coupled_costs_on(coeffs: &CoefficientSet, convex: &ConvexSpec, setup: &BundleSetup) -> Result<Vec<CoupledComparison>> {
    let horizon = setup.horizon();
    let ne = convex.epsilons.len();
    let acc = chunked(
        setup.n_paths,
        || (RunningStats::new(), vec![(RunningStats::new(), RunningStats::new()); ne]),
        |acc, i| {
            let b = base(coeffs, &convex.base, setup, i)?;
            let v = directions(convex.direction, &b, horizon);
            let t = b.driver.times();
            let j0 = path_cost(coeffs, t, &b.tr.x, &b.tr.u);
            acc.0.push(j0);
            for (e, &eps) in convex.epsilons.iter().enumerate() {
                let u: Vec<f64> = b.tr.u.iter().zip(&v).map(|(u, v)| u + eps * v).collect();
                check_domain(&convex.base, &u)?;
                let x = replay(coeffs, &b.driver, &u)?;
                let j = path_cost(coeffs, t, &x, &u);
                acc.1[e].0.push(j);
                acc.1[e].1.push(j - j0);
            }
            Ok(())
        },
        |a, b| {
            a.0.merge(&b.0);
            for (x, y) in a.1.iter_mut().zip(b.1) {
                x.0.merge(&y.0);
                x.1.merge(&y.1);
            }
        },
    )?;
    Ok(convex
        .epsilons
        .iter()
        .zip(&acc.1)
        .map(|(&epsilon, (j, d))| CoupledComparison {
            epsilon,
            base: acc.0.estimate(),
            perturbed: j.estimate(),
            difference: d.estimate(),
        })
        .collect())
}

/// `|mean(J(u_bar + eps v) - J(u_bar) - eps J1 - eps^2 J2)|` per epsilon, with
/// `J1`, `J2` the direct estimators on the same paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionStudy {
    pub epsilons: Vec<f64>,
    pub remainders: Vec<f64>,
    pub j0: Estimate,
    pub j1: Estimate,
    pub j2: Estimate,
    /// `+inf` when every remainder is at round-off level.
    pub slope: f64,
    pub r_squared: f64,
}

impl ExpansionStudy {
    pub fn exact(&self) -> bool {
        self.slope.is_infinite()
    }
}

pub fn expansion_study(coeffs: &CoefficientSet, convex: &ConvexSpec, bundle: &TrajectoryBundle) -> Result<ExpansionStudy> {
    check_run(coeffs, &convex.base, bundle)?;
    expansion_study_on(coeffs, convex, &bundle.setup)
}

/// As [`expansion_study`], without a stored bundle.
pub fn expansion_study_on(coeffs: &CoefficientSet, convex: &ConvexSpec, setup: &BundleSetup) -> Result<ExpansionStudy> {
    if convex.epsilons.len() < 2 || convex.epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("epsilons", "need at least two positive values"));
    }
    let horizon = setup.horizon();
    let ne = convex.epsilons.len();
    let acc = chunked(
        setup.n_paths,
        || (RunningStats::new(), RunningStats::new(), RunningStats::new(), vec![0.0; ne], 0.0),
        |acc, i| {
            let b = base(coeffs, &convex.base, setup, i)?;
            let v = directions(convex.direction, &b, horizon);
            let t = b.driver.times();
            let j0 = path_cost(coeffs, t, &b.tr.x, &b.tr.u);
            let tg = tangent(coeffs, &b, v);
            acc.0.push(j0);
            acc.1.push(tg.j1);
            acc.2.push(tg.j2);
            acc.4 += j0.abs() + tg.j1.abs() + tg.j2.abs();
            for (e, &eps) in convex.epsilons.iter().enumerate() {
                let u: Vec<f64> = b.tr.u.iter().zip(&tg.v).map(|(u, v)| u + eps * v).collect();
                check_domain(&convex.base, &u)?;
                let x = replay(coeffs, &b.driver, &u)?;
                let j = path_cost(coeffs, t, &x, &u);
                acc.3[e] += j - j0 - eps * tg.j1 - eps * eps * tg.j2;
            }
            Ok(())
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1.merge(&b.1);
            a.2.merge(&b.2);
            a.3.iter_mut().zip(b.3).for_each(|(x, y)| *x += y);
            a.4 += b.4;
        },
    )?;
    let nf = setup.n_paths as f64;
    let remainders: Vec<f64> = acc.3.iter().map(|s| (s / nf).abs()).collect();
    let floor = 64.0 * f64::EPSILON * acc.4 / nf;
    let pts: Vec<(f64, f64)> =
        convex.epsilons.iter().zip(&remainders).filter(|(_, r)| **r > floor).map(|(e, r)| (*e, *r)).collect();
    let (slope, r_squared) = if pts.len() < 2 {
        (f64::INFINITY, 1.0)
    } else {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = fit_loglog(&xs, &ys).ok_or_else(|| invalid("epsilons", "degenerate fit"))?;
        (fit.slope, fit.r_squared)
    };
    Ok(ExpansionStudy {
        epsilons: convex.epsilons.clone(),
        remainders,
        j0: acc.0.estimate(),
        j1: acc.1.estimate(),
        j2: acc.2.estimate(),
        slope,
        r_squared,
    })
}

/// `J1 = 0` within `sigmas` and `J2 > 0` beyond `sigmas` for every direction.
pub fn strict_local_optimality_evidence(first: &[VariationEstimate], second: &[VariationEstimate], sigmas: f64) -> bool {
    !first.is_empty()
        && first.len() == second.len()
        && first.iter().all(|j| j.direct.within(0.0, sigmas) && j.adjoint.value.abs() <= sigmas * j.adjoint_error())
        && second.iter().all(|j| j.direct.value > sigmas * j.direct.std_error && j.adjoint.value > sigmas * j.adjoint_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{solve_eta, solve_first_adjoint, BsdeOptions};
    use crate::forward_sde::{presets, BundleSetup, ControlDomain};
    use crate::lq::LqClosedForm;
    use crate::subdiffusion::uniform_grid;
    use crate::subordinator::SubordinatorSpec;

    fn cp() -> SubordinatorSpec {
        SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap()
    }

    fn zero() -> ControlPolicy {
        ControlPolicy::constant(0.0, ControlDomain::real_line()).unwrap()
    }

    fn run(coeffs: &CoefficientSet, pol: &ControlPolicy, n: usize, steps: usize, a: f64) -> TrajectoryBundle {
        let setup = BundleSetup::new(cp(), uniform_grid(1.0, steps), 0.0, a, 21, n).unwrap();
        TrajectoryBundle::simulate(coeffs, pol, setup).unwrap()
    }

    #[test]
    fn direction_parsing() {
        assert_eq!(Direction::parse("ramp").unwrap(), Direction::Ramp);
        assert_eq!(Direction::parse("constant(0.5)").unwrap(), Direction::Constant(0.5));
        assert_eq!(Direction::parse("constant:2").unwrap(), Direction::Constant(2.0));
        assert!(Direction::parse("wiggle").is_err());
        for d in Direction::library() {
            assert_eq!(Direction::parse(&d.name()).unwrap(), d);
        }
    }

    #[test]
    fn zero_spike_is_trivial() {
        let m = presets::nonlinear();
        let b = run(&m, &zero(), 50, 32, 0.0);
        let s = SpikeSpec::new(zero(), ControlPolicy::constant(1.0, ControlDomain::real_line()).unwrap(), 0.5);
        let sp = simulate_spike_processes(&m, &s, &b, 0.0).unwrap();
        for p in 0..50 {
            for j in 0..33 {
                assert_eq!(sp.y_eps.get(p, j), 0.0);
                assert_eq!(sp.z_eps.get(p, j), 0.0);
                assert_eq!(sp.x_eps.get(p, j), sp.x_bar.get(p, j));
                assert_eq!(sp.x_bar.get(p, j), b.state.get(p, j));
            }
        }
    }

    #[test]
    fn control_free_noise_gives_no_first_order_spike() {
        let m = presets::lq();
        let b = run(&m, &zero(), 50, 32, 0.0);
        let s = SpikeSpec::new(zero(), ControlPolicy::constant(1.0, ControlDomain::real_line()).unwrap(), 0.25);
        let sp = simulate_spike_processes(&m, &s, &b, 0.25).unwrap();
        for p in 0..50 {
            for j in 0..33 {
                assert_eq!(sp.y_eps.get(p, j), 0.0);
                // Linear dynamics: the second-order process is the whole difference.
                let d = sp.x_eps.get(p, j) - sp.x_bar.get(p, j);
                assert!((d - sp.z_eps.get(p, j)).abs() < 1e-14);
            }
        }
        let sc = spike_remainder_scaling(&m, &s, &b, &[0.25, 0.125, 0.0625], 1).unwrap();
        assert!(sc.slopes[2].is_infinite());
    }

    #[test]
    fn spike_scaling_with_controlled_noise() {
        let m = CoefficientSet::new(
            "noise-control",
            |_, x, _| 0.5 * x.sin(),
            |_, x, u| 0.4 + 0.2 * x.cos() + u,
            |_, _, u| 0.5 * u * u,
            |x| x * x,
            1.0,
        );
        let b = run(&m, &zero(), 4000, 256, 0.0);
        let s = SpikeSpec::new(zero(), ControlPolicy::constant(1.5, ControlDomain::real_line()).unwrap(), 0.5);
        let eps: Vec<f64> = (3..=6).map(|k| 0.5f64.powi(k)).collect();
        let sc = spike_remainder_scaling(&m, &s, &b, &eps, 1).unwrap();
        assert!((sc.slopes[0] - 1.0).abs() < 0.2, "{sc:?}");
        assert!((sc.slopes[1] - 2.0).abs() < 0.3, "{sc:?}");
        assert!(sc.slopes[2] > 1.8, "{sc:?}");
    }

    #[test]
    fn lq_tangent_with_constant_direction() {
        let m = presets::lq();
        let b = run(&m, &zero(), 20, 2000, 0.0);
        let c = ConvexSpec::new(zero(), Direction::Constant(1.0), vec![]);
        let (x1, x2) = simulate_convex_variations(&m, &c, &b).unwrap();
        for p in 0..20 {
            for j in (0..=2000).step_by(250) {
                let t = b.times()[j];
                assert!((x1.get(p, j) - (t.exp() - 1.0)).abs() < 2e-3, "{t}");
                assert_eq!(x2.get(p, j), 0.0);
            }
        }
        let z = ConvexSpec::new(zero(), Direction::Constant(0.0), vec![]);
        let (x1, x2) = simulate_convex_variations(&m, &z, &b).unwrap();
        assert!(x1.row(3).iter().chain(x2.row(3)).all(|v| *v == 0.0));
    }

    // Difference quotients converge to x1 at rate eps in mean square.
    #[test]
    fn difference_quotient_converges() {
        let m = presets::nonlinear();
        let pol = zero();
        let b = run(&m, &pol, 200, 64, 0.0);
        let horizon = 1.0;
        let mut errs = Vec::new();
        let eps = [0.1, 0.05, 0.025];
        for &e in &eps {
            let mut s = RunningStats::new();
            for i in 0..200 {
                let bs = base(&m, &pol, &b.setup, i).unwrap();
                let v = directions(Direction::Ramp, &bs, horizon);
                let tg = tangent(&m, &bs, v.clone());
                let u: Vec<f64> = bs.tr.u.iter().zip(&v).map(|(u, v)| u + e * v).collect();
                let x = replay(&m, &bs.driver, &u).unwrap();
                let n = x.len() - 1;
                s.push(((x[n] - bs.tr.x[n]) / e - tg.x1[n]).powi(2));
            }
            errs.push(s.mean().sqrt());
        }
        let fit = fit_loglog(&eps, &errs).unwrap();
        assert!((fit.slope - 1.0).abs() < 0.1, "{errs:?}");
    }

    #[test]
    fn exact_linear_oracle_matches_tangent() {
        use crate::forward_sde::{exact_linear_solve, LinearStreams};
        let m = presets::geometric(0.3, 0.4);
        let pol = zero();
        let b = run(&m, &pol, 30, 1024, 0.0);
        let mut worst: f64 = 0.0;
        for i in 0..30 {
            let bs = base(&m, &pol, &b.setup, i).unwrap();
            let v = directions(Direction::Constant(1.0), &bs, 1.0);
            let tg = tangent(&m, &bs, v.clone());
            let n = bs.driver.len();
            let mut st = LinearStreams::constant(n, 0.0, 0.0, 0.0, 0.0);
            for k in 0..n {
                let d = m.partials_at(bs.driver.times()[k], bs.tr.x[k], bs.tr.u[k]);
                st.a[k] = d.b_x;
                st.alpha[k] = d.b_u * v[k];
                st.b[k] = d.s_x;
                st.beta[k] = d.s_u * v[k];
            }
            let ex = exact_linear_solve(&st, 0.0, &bs.driver, 10.0).unwrap();
            worst = worst.max((ex[n - 1] - tg.x1[n - 1]).abs());
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn trivial_first_and_second_variations() {
        let m = presets::lq();
        let b = run(&m, &zero(), 200, 32, 0.0);
        let opts = BsdeOptions { richardson: false, ..BsdeOptions::degree(2) };
        let p = solve_first_adjoint(&m, &zero(), &b, &opts).unwrap();
        let eta = solve_eta(&m, &zero(), &b, &p, &opts).unwrap();
        let c = ConvexSpec::new(zero(), Direction::Constant(0.0), vec![]);
        let j1 = first_variation_j(&m, &c, &b, &p).unwrap();
        assert_eq!((j1.direct.value, j1.adjoint.value), (0.0, 0.0));
        let j2 = second_variation_j(&m, &c, &b, &p, &eta).unwrap();
        assert_eq!((j2.direct.value, j2.adjoint.value), (0.0, 0.0));
    }

    #[test]
    fn lq_variations_at_and_off_the_optimum() {
        let m = presets::lq();
        let form = LqClosedForm::new(1.0, 0.25, 0.0).unwrap();
        let opt = form.policy();
        let b = run(&m, &opt, 4000, 400, 0.25);
        let coarse = run(&m, &opt, 4000, 100, 0.25);
        let opts = BsdeOptions::degree(2);
        let p = solve_first_adjoint(&m, &opt, &b, &opts).unwrap();
        let eta = solve_eta(&m, &opt, &b, &p, &opts).unwrap();
        let pc = solve_first_adjoint(&m, &opt, &coarse, &opts).unwrap();
        let mut firsts = Vec::new();
        let mut seconds = Vec::new();
        for d in Direction::library() {
            let c = ConvexSpec::new(opt.clone(), d, vec![]);
            let mut j1 = first_variation_j(&m, &c, &b, &p).unwrap();
            // The closed-form optimum is stationary for the continuous problem;
            // on a grid the adjoint estimator carries a first-order bias.
            let jc = first_variation_j(&m, &c, &coarse, &pc).unwrap();
            assert!(j1.adjoint.value.abs() < 0.4 * jc.adjoint.value.abs() + 1e-5, "{d:?} {j1:?} {jc:?}");
            j1.solver_error = j1.solver_error.hypot((jc.adjoint.value - j1.adjoint.value) / 3.0);
            let j2 = second_variation_j(&m, &c, &b, &p, &eta).unwrap();
            assert!(j1.direct.within(0.0, 3.0) && j1.adjoint.value.abs() <= 3.0 * j1.adjoint_error(), "{d:?} {j1:?}");
            assert!(j2.direct.value > 0.0 && j2.adjoint.value > 0.0, "{d:?} {j2:?}");
            assert!(j2.agree(3.0) || (j2.direct.value - j2.adjoint.value).abs() < 0.02 * j2.direct.value, "{d:?} {j2:?}");
            firsts.push(j1);
            seconds.push(j2);
        }
        assert!(strict_local_optimality_evidence(&firsts, &seconds, 3.0));

        // Off the optimum: J1 against a coupled central difference.
        let shifted = opt.shifted(0.1);
        let b2 = run(&m, &shifted, 4000, 100, 0.25);
        let p2 = solve_first_adjoint(&m, &shifted, &b2, &opts).unwrap();
        let h = 1e-3;
        let c = ConvexSpec::new(shifted.clone(), Direction::Constant(1.0), vec![h, -h]);
        let j1 = first_variation_j(&m, &c, &b2, &p2).unwrap();
        let cc = coupled_costs(&m, &c, &b2).unwrap();
        let fd = (cc[0].difference.value - cc[1].difference.value) / (2.0 * h);
        assert!((j1.direct.value - fd).abs() < 1e-6, "{} {fd}", j1.direct.value);
        assert!((j1.adjoint.value - fd).abs() < 3.0 * j1.combined_std_error() + 0.01 * fd.abs(), "{j1:?} {fd}");
    }

    #[test]
    fn expansion_remainder_is_third_order() {
        let m = presets::nonlinear();
        let pol = ControlPolicy::new("lin", ControlDomain::real_line(), 0.0, |i| -0.5 * i.state, |_| 0.0).unwrap();
        let b = run(&m, &pol, 500, 64, 0.0);
        let eps: Vec<f64> = (2..=5).map(|k| 0.5f64.powi(k)).collect();
        let c = ConvexSpec::new(pol, Direction::Ramp, eps);
        let st = expansion_study(&m, &c, &b).unwrap();
        assert!(st.slope > 2.5, "{st:?}");
    }

    #[test]
    fn lq_expansion_is_exact() {
        let m = presets::lq();
        let b = run(&m, &zero(), 300, 32, 0.0);
        let c = ConvexSpec::new(zero(), Direction::Step, vec![0.25, 0.125, 0.0625]);
        let st = expansion_study(&m, &c, &b).unwrap();
        assert!(st.exact(), "{st:?}");
    }

    #[test]
    fn domain_is_enforced() {
        let m = presets::lq();
        let pol = ControlPolicy::constant(0.0, ControlDomain::Interval { lo: -0.1, hi: 0.1 }).unwrap();
        let b = run(&m, &pol, 10, 8, 0.0);
        let c = ConvexSpec::new(pol, Direction::Constant(1.0), vec![0.5]);
        assert!(matches!(coupled_costs(&m, &c, &b), Err(Error::Precondition(_))));
    }

    #[test]
    fn chunked_reduction_is_order_stable() {
        let a = chunked(1000, || 0.0, |acc, i| {
            *acc += (i as f64).sqrt();
            Ok(())
        }, |a, b| *a += b)
        .unwrap();
        let b = chunked(1000, || 0.0, |acc, i| {
            *acc += (i as f64).sqrt();
            Ok(())
        }, |a, b| *a += b)
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
