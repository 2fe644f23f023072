//! Backward SDEs `dY = h1(t,Y)dt + h2(t,Y,Z)dL + Z dB_L`, the adjoint
//! equations of the control problem, and martingale representation.

use rand::{Rng, SeedableRng};

use crate::error::{invalid, Error, Result};
use crate::forward_sde::{CoefficientSet, ControlPolicy, GridMatrix, TrajectoryBundle};
use crate::regression::{Basis, Lattice, RegressionPlan};
use crate::stats::{Estimate, RunningStats};
use crate::subdiffusion::ObservableFeatures;

/// Where a driver is evaluated: lattice time, path and caller-grid column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub t: f64,
    pub path: usize,
    pub col: usize,
}

pub type Driver1<'a> = Box<dyn Fn(&Point, f64) -> f64 + Send + Sync + 'a>;
pub type Driver2<'a> = Box<dyn Fn(&Point, f64, f64) -> f64 + Send + Sync + 'a>;
pub type TerminalFn<'a> = Box<dyn Fn(&Point, &ObservableFeatures, f64) -> f64 + Send + Sync + 'a>;

pub struct BsdeSpec<'a> {
    pub name: String,
    pub h1: Driver1<'a>,
    pub h2: Driver2<'a>,
    /// Terminal value from the terminal features and controlled state.
    pub terminal: TerminalFn<'a>,
    /// Lipschitz constant of `h1` in `y` and of `h2` in `(y, z)`.
    pub lipschitz: f64,
}

impl<'a> BsdeSpec<'a> {
    pub fn new(
        name: impl Into<String>,
        h1: impl Fn(f64, f64) -> f64 + Send + Sync + 'a,
        h2: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'a,
        terminal: impl Fn(&ObservableFeatures, f64) -> f64 + Send + Sync + 'a,
        lipschitz: f64,
    ) -> Self {
        BsdeSpec {
            name: name.into(),
            h1: Box::new(move |p, y| h1(p.t, y)),
            h2: Box::new(move |p, y, z| h2(p.t, y, z)),
            terminal: Box::new(move |_, f, s| terminal(f, s)),
            lipschitz,
        }
    }

    /// Drivers that may depend on the path through the bundle.
    pub fn pathwise(
        name: impl Into<String>,
        h1: impl Fn(&Point, f64) -> f64 + Send + Sync + 'a,
        h2: impl Fn(&Point, f64, f64) -> f64 + Send + Sync + 'a,
        terminal: impl Fn(&Point, &ObservableFeatures, f64) -> f64 + Send + Sync + 'a,
        lipschitz: f64,
    ) -> Self {
        BsdeSpec { name: name.into(), h1: Box::new(h1), h2: Box::new(h2), terminal: Box::new(terminal), lipschitz }
    }

    /// Largest observed difference quotient over random points of `bundle`;
    /// fails when it exceeds the declared constant.
    pub fn lipschitz_self_check(&self, bundle: &TrajectoryBundle, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let col = rng.random_range(0..bundle.times().len());
            let pt = Point { t: bundle.times()[col], path: rng.random_range(0..bundle.n_paths()), col };
            let (y1, y2, z1, z2): (f64, f64, f64, f64) = (
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let d = (y1 - y2).abs();
            if d > 0.0 {
                worst = worst.max(((self.h1)(&pt, y1) - (self.h1)(&pt, y2)).abs() / d);
            }
            let d = (y1 - y2).abs() + (z1 - z2).abs();
            if d > 0.0 {
                worst = worst.max(((self.h2)(&pt, y1, z1) - (self.h2)(&pt, y2, z2)).abs() / d);
            }
        }
        if worst > self.lipschitz * (1.0 + 1e-9) + 1e-12 {
            return Err(invalid("lipschitz", format!("declared {} but observed {worst}", self.lipschitz)));
        }
        Ok(worst)
    }
}

/// Burkholder–Davis–Gundy constant used in the contraction threshold.
pub const BDG_CONSTANT: f64 = 2.0;

/// Smallest `beta` for which the contraction factor
/// `3 C1^2 (kappa+1)(T v 1)(1+K^2) / (2 beta kappa)` drops below one,
/// with `C1 = (1 + 1/kappa) C`.
pub fn contraction_threshold(lipschitz: f64, kappa: f64, horizon: f64, k: f64) -> f64 {
    let c1 = (1.0 + 1.0 / kappa) * lipschitz;
    3.0 * c1 * c1 * (kappa + 1.0) * horizon.max(1.0) * (1.0 + k * k) / (2.0 * kappa)
}

/// Twice the threshold, so the factor is one half.
/// Floored at one for driver-free equations.
pub fn default_beta(lipschitz: f64, kappa: f64, horizon: f64) -> f64 {
    (2.0 * contraction_threshold(lipschitz, kappa, horizon, BDG_CONSTANT)).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdeOptions {
    pub basis_degree: usize,
    /// `None` picks [`default_beta`].
    pub beta: Option<f64>,
    /// `None` means `1e-12 * T / kappa`.
    pub tol_flat: Option<f64>,
    /// Re-solve on every other grid time to estimate the time-discretization error.
    pub richardson: bool,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        BsdeOptions { basis_degree: 3, beta: None, tol_flat: None, richardson: true }
    }
}

impl BsdeOptions {
    pub fn degree(basis_degree: usize) -> Self {
        BsdeOptions { basis_degree, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// Names of the two components, e.g. `("p", "q")`.
    pub labels: (String, String),
    pub times: Vec<f64>,
    pub y: GridMatrix,
    /// Integrand on each step; the last column is zero.
    pub z: GridMatrix,
    pub basis: String,
    pub basis_degree: usize,
    pub beta: f64,
    pub picard_norms: Vec<f64>,
    pub iterations: usize,
    /// `Var(xi - Y_0 - sum Z dB)`.
    pub residual_variance: f64,
    pub ridged_steps: usize,
    pub dropped_columns: usize,
    pub tol_flat: f64,
    /// `|mean Y_h - mean Y_2h|` per grid time; zero when not estimated.
    pub discretization_error: Vec<f64>,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.y.rows()
    }

    pub fn mean_y(&self, i: usize) -> Estimate {
        self.y.column(i).into_iter().collect::<RunningStats>().estimate()
    }

    pub fn mean_z(&self, i: usize) -> Estimate {
        self.z.column(i).into_iter().collect::<RunningStats>().estimate()
    }

    /// Geometric mean of successive Picard ratios above the round-off floor.
    pub fn decay_ratio(&self) -> Option<f64> {
        let r = picard_ratios(&self.picard_norms);
        if r.is_empty() {
            return None;
        }
        Some((r.iter().map(|x| x.ln()).sum::<f64>() / r.len() as f64).exp())
    }

    pub fn relabel(mut self, y: &str, z: &str) -> Self {
        self.labels = (y.into(), z.into());
        self
    }
}

/// Ratios `d_{k+1} / d_k` while `d_{k+1}` stays above round-off.
pub fn picard_ratios(norms: &[f64]) -> Vec<f64> {
    let top = norms.iter().cloned().fold(0.0, f64::max);
    norms
        .windows(2)
        .take_while(|w| w[1] > 1e-13 * top)
        .map(|w| w[1] / w[0])
        .collect()
}

struct Frozen<'s> {
    y: &'s GridMatrix,
    z: &'s GridMatrix,
}

struct Engine<'b> {
    lat: Lattice<'b>,
    plan: RegressionPlan,
    /// Z is zeroed where the estimated `E[dL | F_i]` is below `tol_flat`.
    flat_dominated: GridMatrix<bool>,
    xi: Vec<f64>,
    tol_flat: f64,
}

impl<'b> Engine<'b> {
    fn new(spec: &BsdeSpec, lat: Lattice<'b>, basis: Basis, tol_flat: f64) -> Result<Self> {
        let plan = RegressionPlan::build(&lat, basis)?;
        let b = lat.bundle;
        let n = lat.n_paths();
        let last = lat.len() - 1;
        let c = lat.col(last);
        let xi: Vec<f64> = (0..n)
            .map(|p| {
                let f = ObservableFeatures { t: lat.time(last), x: b.x.get(p, c), l: b.l.get(p, c), age_of_flat: b.age.get(p, c) };
                (spec.terminal)(&Point { t: f.t, path: p, col: c }, &f, b.state.get(p, c))
            })
            .collect();
        if let Some(p) = xi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "terminal value", step: last, t: lat.time(last), x: b.state.get(p, c), u: f64::NAN });
        }
        // E[dL | F_i] on the two cells "X frozen now" / "X moving now":
        // non-negative, and zero only if no path of the cell moves.
        let mut flat_dominated = GridMatrix::zeros(n, lat.len());
        for i in 0..last {
            let col = lat.col(i);
            let mut sum = [0.0; 2];
            let mut cnt = [0usize; 2];
            for p in 0..n {
                let cell = (b.age.get(p, col) > 0.0) as usize;
                sum[cell] += lat.dl(p, i);
                cnt[cell] += 1;
            }
            for p in 0..n {
                let cell = (b.age.get(p, col) > 0.0) as usize;
                flat_dominated.set(p, i, sum[cell] / (cnt[cell] as f64) < tol_flat);
            }
        }
        Ok(Engine { lat, plan, flat_dominated, xi, tol_flat })
    }

    fn sweep(&self, spec: &BsdeSpec, frozen: Option<Frozen>) -> Result<(GridMatrix, GridMatrix)> {
        let lat = &self.lat;
        let n = lat.n_paths();
        let m = lat.len();
        let mut y = GridMatrix::zeros(n, m);
        let mut z = GridMatrix::zeros(n, m);
        for (p, v) in self.xi.iter().enumerate() {
            y.set(p, m - 1, *v);
        }
        let mut next = self.xi.clone();
        let mut target = vec![0.0; n];
        for i in (0..m - 1).rev() {
            let (t, dt, col) = (lat.time(i), lat.dt(i), lat.col(i));
            let fit = self.plan.project(lat, i, &next);
            for p in 0..n {
                let zi = if self.flat_dominated.get(p, i) { 0.0 } else { fit.integrand[p] };
                z.set(p, i, zi);
                let pt = Point { t, path: p, col };
                let h2 = match &frozen {
                    Some(f) => (spec.h2)(&pt, f.y.get(p, i + 1), f.z.get(p, i)),
                    None => (spec.h2)(&pt, next[p], zi),
                };
                target[p] = next[p] - h2 * lat.dl(p, i);
            }
            let cond = self.plan.project(lat, i, &target).value;
            for p in 0..n {
                let pt = Point { t, path: p, col };
                let c = cond[p];
                let yi = match &frozen {
                    Some(f) => c - (spec.h1)(&pt, f.y.get(p, i)) * dt,
                    None => {
                        let pred = c - (spec.h1)(&pt, c) * dt;
                        c - (spec.h1)(&pt, pred) * dt
                    }
                };
                if !yi.is_finite() {
                    let b = lat.bundle;
                    return Err(Error::NonFinite { what: "backward value", step: i, t, x: b.state.get(p, col), u: b.control.get(p, col) });
                }
                y.set(p, i, yi);
                next[p] = yi;
            }
        }
        Ok((y, z))
    }

    fn residual_variance(&self, y: &GridMatrix, z: &GridMatrix) -> f64 {
        let lat = &self.lat;
        (0..lat.n_paths())
            .map(|p| {
                let mart: f64 = (0..lat.len() - 1).map(|i| z.get(p, i) * lat.db(p, i)).sum();
                self.xi[p] - y.get(p, 0) - mart
            })
            .collect::<RunningStats>()
            .variance()
    }

    /// Discrete `M_{a,beta}` distance, weights normalised by `e^{2 beta T}`.
    fn distance(&self, beta: f64, a: (&GridMatrix, &GridMatrix), b: (&GridMatrix, &GridMatrix)) -> f64 {
        let lat = &self.lat;
        let n = lat.n_paths() as f64;
        let horizon = lat.time(lat.len() - 1);
        let mut acc = 0.0;
        for i in 0..lat.len() {
            let w = (2.0 * beta * (lat.time(i) - horizon)).exp();
            let dt = if i + 1 < lat.len() { lat.dt(i) } else { 0.0 };
            let mut s = 0.0;
            for p in 0..lat.n_paths() {
                let dy = a.0.get(p, i) - b.0.get(p, i);
                s += dy * dy * dt;
                if i + 1 < lat.len() {
                    let dz = a.1.get(p, i) - b.1.get(p, i);
                    s += dz * dz * lat.dl(p, i);
                }
            }
            acc += w * s / n;
        }
        acc.sqrt()
    }

    fn solution(&self, y: GridMatrix, z: GridMatrix, beta: f64) -> BsdeSolution {
        BsdeSolution {
            labels: ("Y".into(), "Z".into()),
            times: self.lat.times(),
            residual_variance: self.residual_variance(&y, &z),
            y,
            z,
            basis: self.plan.basis.describe(),
            basis_degree: self.plan.basis.degree,
            beta,
            picard_norms: Vec::new(),
            iterations: 0,
            ridged_steps: self.plan.ridged_steps(),
            dropped_columns: self.plan.dropped_columns(),
            tol_flat: self.tol_flat,
            discretization_error: vec![0.0; self.lat.len()],
        }
    }
}

fn resolve(spec: &BsdeSpec, bundle: &TrajectoryBundle, opts: &BsdeOptions) -> Result<(Basis, f64, f64)> {
    let basis = Basis::new(opts.basis_degree)?;
    let kappa = bundle.drift();
    let horizon = bundle.setup.horizon();
    let beta = opts.beta.unwrap_or_else(|| default_beta(spec.lipschitz, kappa, horizon));
    if !(beta > 0.0) {
        return Err(invalid("beta", "must be positive"));
    }
    let tol_flat = opts.tol_flat.unwrap_or(1e-12 * horizon / kappa);
    if !(tol_flat >= 0.0) {
        return Err(invalid("tol_flat", "must be non-negative"));
    }
    Ok((basis, beta, tol_flat))
}

fn richardson(spec: &BsdeSpec, bundle: &TrajectoryBundle, basis: Basis, tol_flat: f64, fine: &mut BsdeSolution) -> Result<()> {
    let Ok(coarse_lat) = Lattice::new(bundle, 2) else {
        return Ok(());
    };
    let coarse = Engine::new(spec, coarse_lat, basis, tol_flat)?;
    let (y2, _) = coarse.sweep(spec, None)?;
    let m = fine.times.len();
    let mut even = vec![0.0; m];
    for i in 0..coarse_lat.len() {
        let yh = fine.mean_y(2 * i).value;
        let y2h = y2.column(i).iter().sum::<f64>() / y2.rows() as f64;
        even[2 * i] = (yh - y2h).abs();
    }
    for j in 0..m {
        fine.discretization_error[j] = if j % 2 == 0 { even[j] } else { even[j - 1].max(even[j + 1]) };
    }
    Ok(())
}

/// Backward induction with one predictor-corrector pass on the `dt` driver.
pub fn backward_solve(spec: &BsdeSpec, bundle: &TrajectoryBundle, opts: &BsdeOptions) -> Result<BsdeSolution> {
    let (basis, beta, tol_flat) = resolve(spec, bundle, opts)?;
    let engine = Engine::new(spec, Lattice::full(bundle), basis, tol_flat)?;
    let (y, z) = engine.sweep(spec, None)?;
    let mut sol = engine.solution(y, z, beta);
    if opts.richardson {
        richardson(spec, bundle, basis, tol_flat, &mut sol)?;
    }
    Ok(sol)
}

/// Picard iteration of the driver-frozen map, recording the `M_{a,beta}`
/// distance between successive iterates.
pub fn picard_solve(
    spec: &BsdeSpec,
    bundle: &TrajectoryBundle,
    opts: &BsdeOptions,
    max_iter: usize,
    tol: f64,
) -> Result<BsdeSolution> {
    let (basis, beta, tol_flat) = resolve(spec, bundle, opts)?;
    if max_iter == 0 || !(tol > 0.0) {
        return Err(invalid("max_iter", "need max_iter >= 1 and tol > 0"));
    }
    let engine = Engine::new(spec, Lattice::full(bundle), basis, tol_flat)?;
    let (n, m) = (engine.lat.n_paths(), engine.lat.len());
    let zero = GridMatrix::zeros(n, m);
    let mut cur = (zero.clone(), zero.clone());
    let mut norms = Vec::new();
    let mut iterations = None;
    for k in 0..max_iter {
        let next = engine.sweep(spec, Some(Frozen { y: &cur.0, z: &cur.1 }))?;
        let d = engine.distance(beta, (&next.0, &next.1), (&cur.0, &cur.1));
        let size = engine.distance(beta, (&next.0, &next.1), (&zero, &zero));
        norms.push(d);
        cur = next;
        if d <= tol * size.max(f64::MIN_POSITIVE) {
            iterations = Some(k);
            break;
        }
        if k >= 3 && d >= norms[k - 1] {
            // Stagnation at the regression round-off floor.
            if d <= 1e-8 * size {
                iterations = Some(k);
                break;
            }
            let floor = default_beta(spec.lipschitz, bundle.drift(), bundle.setup.horizon());
            return Err(Error::NonContraction { norms, suggested_beta: floor.max(2.0 * beta) });
        }
    }
    let mut sol = engine.solution(cur.0, cur.1, beta);
    sol.iterations = iterations.unwrap_or(max_iter);
    sol.picard_norms = norms;
    if opts.richardson {
        richardson(spec, bundle, basis, tol_flat, &mut sol)?;
    }
    Ok(sol)
}

/// Integrand of a terminal functional `xi = E[xi] + int H dB_L`.
#[derive(Debug, Clone)]
pub struct Representation {
    pub e_xi: f64,
    pub h: GridMatrix,
    pub residual_variance: f64,
    /// Set when any step needed the ridge fallback.
    pub ridged: bool,
}

/// Martingale representation of per-path terminal samples on `bundle`.
pub fn represent_martingale(xi: &[f64], bundle: &TrajectoryBundle, basis_degree: usize) -> Result<Representation> {
    if xi.len() != bundle.n_paths() {
        return Err(invalid("xi", "one sample per path required"));
    }
    let samples = xi.to_vec();
    let spec = BsdeSpec::pathwise("representation", |_, _| 0.0, |_, _, _| 0.0, move |p, _, _| samples[p.path], 0.0);
    let opts = BsdeOptions { basis_degree, beta: Some(1.0), tol_flat: None, richardson: false };
    let sol = backward_solve(&spec, bundle, &opts)?;
    Ok(Representation {
        e_xi: sol.mean_y(0).value,
        residual_variance: sol.residual_variance,
        ridged: sol.ridged_steps > 0,
        h: sol.z,
    })
}

fn same_run(coeffs: &CoefficientSet, policy: &ControlPolicy, bundle: &TrajectoryBundle) -> Result<()> {
    if bundle.coefficients != coeffs.name || bundle.policy != policy.name {
        return Err(Error::Precondition(format!(
            "bundle was simulated with ({}, {}), not ({}, {})",
            bundle.coefficients, bundle.policy, coeffs.name, policy.name
        )));
    }
    Ok(())
}

fn partials_at(coeffs: &CoefficientSet, bundle: &TrajectoryBundle, p: &Point) -> crate::forward_sde::Partials {
    coeffs.partials_at(p.t, bundle.state.get(p.path, p.col), bundle.control.get(p.path, p.col))
}

fn check_first(first: &BsdeSolution, bundle: &TrajectoryBundle) -> Result<()> {
    if first.times.len() != bundle.times().len() || first.n_paths() != bundle.n_paths() {
        return Err(Error::Precondition("first adjoint was solved on a different bundle".into()));
    }
    Ok(())
}

/// Adjoint `dp = -(b_x p - f_x)dt - sigma_x q dL + q dB`, `p(T) = -h_x`.
pub fn first_adjoint_spec<'a>(coeffs: &'a CoefficientSet, bundle: &'a TrajectoryBundle) -> BsdeSpec<'a> {
    BsdeSpec::pathwise(
        "first adjoint",
        move |pt, y| {
            let d = partials_at(coeffs, bundle, pt);
            -(d.b_x * y - d.f_x)
        },
        move |pt, _, z| -partials_at(coeffs, bundle, pt).s_x * z,
        move |_, _, s| -coeffs.terminal_partials_at(s).0,
        coeffs.lipschitz,
    )
}

pub fn solve_first_adjoint(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    same_run(coeffs, policy, bundle)?;
    Ok(backward_solve(&first_adjoint_spec(coeffs, bundle), bundle, opts)?.relabel("p", "q"))
}

/// `dP = -(2b_x P + b_xx p - f_xx)dt - (sigma_x^2 P + 2 sigma_x Q + sigma_xx q)dL + Q dB`, `P(T) = -h_xx`.
pub fn solve_second_adjoint(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    same_run(coeffs, policy, bundle)?;
    check_first(first, bundle)?;
    let l = coeffs.lipschitz;
    let spec = BsdeSpec::pathwise(
        "second adjoint",
        |pt, y| {
            let d = partials_at(coeffs, bundle, pt);
            -(2.0 * d.b_x * y + d.b_xx * first.y.get(pt.path, pt.col) - d.f_xx)
        },
        |pt, y, z| {
            let d = partials_at(coeffs, bundle, pt);
            -(d.s_x * d.s_x * y + 2.0 * d.s_x * z + d.s_xx * first.z.get(pt.path, pt.col))
        },
        |_, _, s| -coeffs.terminal_partials_at(s).1,
        (2.0 * l).max(l * l + 2.0 * l),
    );
    Ok(backward_solve(&spec, bundle, opts)?.relabel("P", "Q"))
}

/// `d eta = (-f_xx - 2 eta b_x + p b_xx)dt + (q sigma_xx - eta sigma_x^2 - 2 gamma sigma_x)dL + gamma dB`,
/// `eta(T) = h_xx`; `gamma` is the integrand of this equation.
pub fn solve_eta(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
    opts: &BsdeOptions,
) -> Result<BsdeSolution> {
    same_run(coeffs, policy, bundle)?;
    check_first(first, bundle)?;
    let l = coeffs.lipschitz;
    let spec = BsdeSpec::pathwise(
        "eta",
        |pt, y| {
            let d = partials_at(coeffs, bundle, pt);
            -d.f_xx - 2.0 * y * d.b_x + first.y.get(pt.path, pt.col) * d.b_xx
        },
        |pt, y, z| {
            let d = partials_at(coeffs, bundle, pt);
            first.z.get(pt.path, pt.col) * d.s_xx - y * d.s_x * d.s_x - 2.0 * z * d.s_x
        },
        |_, _, s| coeffs.terminal_partials_at(s).1,
        (2.0 * l).max(l * l + 2.0 * l),
    );
    Ok(backward_solve(&spec, bundle, opts)?.relabel("eta", "gamma"))
}
