//! Maximum-principle diagnostics on a simulated bundle: the Hamiltonian, the
//! spike inequality, convex stationarity and the sufficiency inequality.
//!
//! Time integrals use left-point sums on the caller grid. The pointwise
//! conditions are checked at interior grid times only.

use rayon::prelude::*;

use crate::bsde::BsdeSolution;
use crate::error::{invalid, Error, Result};
use crate::forward_sde::{CoefficientSet, ControlDomain, ControlPolicy, TrajectoryBundle};
use crate::stats::{Estimate, RunningStats};

pub const FOOTER: &str = "Conditions are stated for almost every t. An exceptional null set of times \
cannot be detected on a finite grid; grid endpoints are excluded from the scan.";

/// Default number of control values in a spike scan.
pub const DEFAULT_U_POINTS: usize = 41;

/// `b p - f`.
pub fn hamiltonian(t: f64, x: f64, u: f64, p: f64, coeffs: &CoefficientSet) -> f64 {
    (coeffs.b)(t, x, u) * p - (coeffs.f)(t, x, u)
}

pub fn default_u_grid(domain: &ControlDomain, lo: f64, hi: f64) -> Vec<f64> {
    domain.scan_grid(lo, hi, DEFAULT_U_POINTS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Spike,
    ConvexStationarity,
}

impl Condition {
    pub fn id(&self) -> &'static str {
        match self {
            Condition::Spike => "spike",
            Condition::ConvexStationarity => "convex-stationarity",
        }
    }
}

/// Residual statistics of one `(t, u)` cell over all paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    /// Competing control value; `None` for stationarity.
    pub u: Option<f64>,
    pub mean: f64,
    pub std_error: f64,
    /// Backward-solver error carried into the mean, when estimated.
    pub solver_error: f64,
    pub max_abs: f64,
}

impl ResidualRow {
    pub fn combined_error(&self) -> f64 {
        self.std_error.hypot(self.solver_error)
    }

    fn violates(&self, condition: Condition, sigmas: f64) -> bool {
        let tol = sigmas * self.combined_error();
        match condition {
            Condition::Spike => self.mean < -tol,
            Condition::ConvexStationarity => self.mean.abs() > tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSummary {
    pub t: f64,
    pub mean: f64,
    pub max_abs: f64,
    pub fraction_violating: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmpReport {
    pub condition: Condition,
    pub config: Vec<(String, String)>,
    pub rows: Vec<ResidualRow>,
    pub sigmas: f64,
    pub footer: &'static str,
}

impl SmpReport {
    pub fn violations(&self) -> impl Iterator<Item = &ResidualRow> {
        self.rows.iter().filter(|r| r.violates(self.condition, self.sigmas))
    }

    pub fn fraction_violating(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.violations().count() as f64 / self.rows.len() as f64
    }

    pub fn holds(&self) -> bool {
        self.violations().next().is_none()
    }

    /// Row with the smallest mean.
    pub fn min_mean(&self) -> Option<&ResidualRow> {
        self.rows.iter().min_by(|a, b| a.mean.total_cmp(&b.mean))
    }

    /// Row with the largest `|mean|`.
    pub fn max_abs_mean(&self) -> Option<&ResidualRow> {
        self.rows.iter().max_by(|a, b| a.mean.abs().total_cmp(&b.mean.abs()))
    }

    /// Adds a time-discretization error estimate from a scan of the same
    /// problem on a grid with half the steps: for a first-order scheme the
    /// error at step `h` is about `mean_h - mean_2h`. Times missing from the
    /// coarse grid take the larger estimate of their neighbours.
    pub fn with_grid_refinement(mut self, coarse: &SmpReport) -> Result<SmpReport> {
        if coarse.condition != self.condition {
            return Err(invalid("coarse", "different condition"));
        }
        let key = |r: &ResidualRow| (r.t.to_bits(), r.u.map(f64::to_bits));
        let lookup: std::collections::HashMap<_, f64> = coarse.rows.iter().map(|r| (key(r), r.mean)).collect();
        let direct: Vec<Option<f64>> =
            self.rows.iter().map(|r| lookup.get(&key(r)).map(|c| (r.mean - c).abs())).collect();
        if direct.iter().all(Option::is_none) {
            return Err(invalid("coarse", "no grid times in common"));
        }
        let stride = self.rows.iter().take_while(|r| r.t == self.rows[0].t).count().max(1);
        for k in 0..self.rows.len() {
            let est = direct[k].unwrap_or_else(|| {
                let prev = k.checked_sub(stride).and_then(|i| direct[i]);
                let next = direct.get(k + stride).copied().flatten();
                prev.unwrap_or(0.0).max(next.unwrap_or(0.0))
            });
            self.rows[k].solver_error = self.rows[k].solver_error.hypot(est);
        }
        self.config.push(("grid_refinement".into(), format!("{} steps", coarse.config_value("steps").unwrap_or("?"))));
        Ok(self)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Per-time summary; for spike scans the mean is the minimum over `u`.
    pub fn per_time(&self) -> Vec<TimeSummary> {
        let mut out: Vec<TimeSummary> = Vec::new();
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for r in &self.rows {
            let bad = r.violates(self.condition, self.sigmas) as usize;
            match out.last_mut() {
                Some(s) if s.t == r.t => {
                    let better = match self.condition {
                        Condition::Spike => r.mean < s.mean,
                        Condition::ConvexStationarity => r.mean.abs() > s.mean.abs(),
                    };
                    if better {
                        s.mean = r.mean;
                    }
                    s.max_abs = s.max_abs.max(r.max_abs);
                    let c = counts.last_mut().expect("parallel to out");
                    c.0 += bad;
                    c.1 += 1;
                }
                _ => {
                    out.push(TimeSummary { t: r.t, mean: r.mean, max_abs: r.max_abs, fraction_violating: 0.0 });
                    counts.push((bad, 1));
                }
            }
        }
        for (s, (bad, n)) in out.iter_mut().zip(counts) {
            s.fraction_violating = bad as f64 / n as f64;
        }
        out
    }
}

fn check_inputs(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    sols: &[&BsdeSolution],
) -> Result<()> {
    if bundle.coefficients != coeffs.name || bundle.policy != policy.name {
        return Err(Error::Precondition(format!(
            "bundle was simulated with ({}, {}), not ({}, {})",
            bundle.coefficients, bundle.policy, coeffs.name, policy.name
        )));
    }
    for s in sols {
        if s.y.rows() != bundle.n_paths() || s.times.as_slice() != bundle.times() {
            return Err(Error::Precondition(format!("{} was not solved on this bundle", s.labels.0)));
        }
    }
    Ok(())
}

/// `1{R_t = 0} / kappa` from the exact flat indicator.
fn weight(bundle: &TrajectoryBundle, i: usize, j: usize) -> f64 {
    if bundle.flat.get(i, j) {
        0.0
    } else {
        1.0 / bundle.drift()
    }
}

fn echo(coeffs: &CoefficientSet, policy: &ControlPolicy, bundle: &TrajectoryBundle) -> Vec<(String, String)> {
    vec![
        ("coefficients".into(), coeffs.name.clone()),
        ("policy".into(), policy.name.clone()),
        ("paths".into(), bundle.n_paths().to_string()),
        ("steps".into(), (bundle.times().len() - 1).to_string()),
        ("seed".into(), bundle.setup.seed.to_string()),
        ("a".into(), bundle.setup.a.to_string()),
        ("kappa".into(), bundle.drift().to_string()),
    ]
}

fn cell<F: Fn(usize) -> f64>(n: usize, f: F) -> (Estimate, f64) {
    let mut s = RunningStats::new();
    let mut max_abs: f64 = 0.0;
    for i in 0..n {
        let v = f(i);
        s.push(v);
        max_abs = max_abs.max(v.abs());
    }
    (s.estimate(), max_abs)
}

/// `H(ū) - H(u) - 1{R=0}/kappa [dσ q + dσ^2 P / 2]` with `dσ = σ(u) - σ(ū)`,
/// for every interior grid time and every `u` in `u_grid`.
pub fn spike_condition_scan(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
    second: &BsdeSolution,
    u_grid: &[f64],
) -> Result<SmpReport> {
    check_inputs(coeffs, policy, bundle, &[first, second])?;
    if u_grid.is_empty() {
        return Err(invalid("u_grid", "empty"));
    }
    let m = bundle.times().len();
    let n = bundle.n_paths();
    let cells: Vec<(usize, f64)> = (1..m - 1).flat_map(|j| u_grid.iter().map(move |&u| (j, u))).collect();
    let rows = cells
        .par_iter()
        .map(|&(j, u)| {
            let t = bundle.times()[j];
            let (est, max_abs) = cell(n, |i| {
                let (x, ub) = (bundle.state.get(i, j), bundle.control.get(i, j));
                let (p, q, pp) = (first.y.get(i, j), first.z.get(i, j), second.y.get(i, j));
                let dh = hamiltonian(t, x, ub, p, coeffs) - hamiltonian(t, x, u, p, coeffs);
                let ds = (coeffs.sigma)(t, x, u) - (coeffs.sigma)(t, x, ub);
                dh - weight(bundle, i, j) * (ds * q + 0.5 * ds * ds * pp)
            });
            let solver = mean_abs(n, |i| {
                let x = bundle.state.get(i, j);
                ((coeffs.b)(t, x, bundle.control.get(i, j)) - (coeffs.b)(t, x, u)).abs()
            }) * first.discretization_error[j];
            ResidualRow { t, u: Some(u), mean: est.value, std_error: est.std_error, solver_error: solver, max_abs }
        })
        .collect();
    let mut config = echo(coeffs, policy, bundle);
    config.push(("u_grid".into(), format!("{} points in [{}, {}]", u_grid.len(), u_grid[0], u_grid[u_grid.len() - 1])));
    Ok(SmpReport { condition: Condition::Spike, config, rows, sigmas: 3.0, footer: FOOTER })
}

fn mean_abs<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    (0..n).map(f).sum::<f64>() / n.max(1) as f64
}

/// `G = b_u p + 1{R=0}/kappa σ_u q - f_u` at every interior grid time.
pub fn convex_stationarity_scan(
    coeffs: &CoefficientSet,
    policy: &ControlPolicy,
    bundle: &TrajectoryBundle,
    first: &BsdeSolution,
) -> Result<SmpReport> {
    check_inputs(coeffs, policy, bundle, &[first])?;
    let m = bundle.times().len();
    let n = bundle.n_paths();
    let rows = (1..m - 1)
        .into_par_iter()
        .map(|j| {
            let t = bundle.times()[j];
            let d = |i: usize| coeffs.partials_at(t, bundle.state.get(i, j), bundle.control.get(i, j));
            let (est, max_abs) = cell(n, |i| {
                let d = d(i);
                d.b_u * first.y.get(i, j) + weight(bundle, i, j) * (d.s_u * first.z.get(i, j)) - d.f_u
            });
            let solver = mean_abs(n, |i| d(i).b_u.abs()) * first.discretization_error[j];
            ResidualRow { t, u: None, mean: est.value, std_error: est.std_error, solver_error: solver, max_abs }
        })
        .collect();
    Ok(SmpReport {
        condition: Condition::ConvexStationarity,
        config: echo(coeffs, policy, bundle),
        rows,
        sigmas: 3.0,
        footer: FOOTER,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Holds,
    Fails,
    /// `h` is not convex on the sampled range; the theorem does not apply.
    PreconditionFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SufficiencyReport {
    pub verdict: Verdict,
    pub lhs: Option<Estimate>,
    pub rhs: Option<Estimate>,
    /// Pathwise `LHS - RHS`.
    pub gap: Option<Estimate>,
    pub j_candidate: Estimate,
    pub j_competitor: Estimate,
    /// Coupled `J(u) - J(ū)`.
    pub cost_gap: Estimate,
    pub config: Vec<(String, String)>,
}

impl SufficiencyReport {
    pub fn candidate_no_worse(&self, sigmas: f64) -> bool {
        self.cost_gap.value >= -sigmas * self.cost_gap.std_error
    }
}

/// Samples `h''` on `points` states spanning `[lo, hi]`.
pub fn terminal_convexity(coeffs: &CoefficientSet, lo: f64, hi: f64, points: usize) -> std::result::Result<(), String> {
    let n = points.max(2);
    for k in 0..n {
        let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let hxx = coeffs.terminal_partials_at(x).1;
        if hxx < -1e-8 * (1.0 + hxx.abs()) {
            return Err(format!("h''({x}) = {hxx} < 0"));
        }
    }
    Ok(())
}

/// Both sides of the sufficiency inequality for a competitor run on the same
/// drivers. The `σ` terms are integrated against `dL`, which equals
/// `1{R=0}/kappa dt`.
pub fn sufficiency_check(
    coeffs: &CoefficientSet,
    candidate: &ControlPolicy,
    competitor: &ControlPolicy,
    bundle: &TrajectoryBundle,
    competitor_bundle: &TrajectoryBundle,
    first: &BsdeSolution,
) -> Result<SufficiencyReport> {
    check_inputs(coeffs, candidate, bundle, &[first])?;
    if competitor_bundle.policy != competitor.name || competitor_bundle.coefficients != coeffs.name {
        return Err(Error::Precondition("competitor bundle does not match the competitor".into()));
    }
    if competitor_bundle.setup != bundle.setup {
        return Err(Error::Precondition("candidate and competitor must share drivers".into()));
    }
    let n = bundle.n_paths();
    let cost_gap: RunningStats = (0..n).map(|i| competitor_bundle.cost_samples[i] - bundle.cost_samples[i]).collect();
    let mut config = echo(coeffs, candidate, bundle);
    config.push(("competitor".into(), competitor.name.clone()));
    let mut report = SufficiencyReport {
        verdict: Verdict::Holds,
        lhs: None,
        rhs: None,
        gap: None,
        j_candidate: bundle.cost_estimate(),
        j_competitor: competitor_bundle.cost_estimate(),
        cost_gap: cost_gap.estimate(),
        config,
    };
    let states = bundle.state.column(bundle.times().len() - 1);
    let other = competitor_bundle.state.column(bundle.times().len() - 1);
    let (lo, hi) = states.iter().chain(&other).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if let Err(why) = terminal_convexity(coeffs, lo, hi, 65) {
        report.verdict = Verdict::PreconditionFailed(why);
        return Ok(report);
    }
    let tm = bundle.times();
    let per_path: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut lhs, mut rhs) = (0.0, 0.0);
            for j in 0..tm.len() - 1 {
                let t = tm[j];
                let (dt, dl) = (tm[j + 1] - t, bundle.dl.get(i, j));
                let (xb, ub) = (bundle.state.get(i, j), bundle.control.get(i, j));
                let (x, u) = (competitor_bundle.state.get(i, j), competitor_bundle.control.get(i, j));
                let (p, q) = (first.y.get(i, j), first.z.get(i, j));
                let d = coeffs.partials_at(t, xb, ub);
                lhs += (d.b_x * p - d.f_x) * (x - xb) * dt + d.s_x * q * (x - xb) * dl;
                rhs += (hamiltonian(t, x, u, p, coeffs) - hamiltonian(t, xb, ub, p, coeffs)) * dt
                    + ((coeffs.sigma)(t, x, u) - (coeffs.sigma)(t, xb, ub)) * q * dl;
            }
            (lhs, rhs)
        })
        .collect();
    let lhs: RunningStats = per_path.iter().map(|v| v.0).collect();
    let rhs: RunningStats = per_path.iter().map(|v| v.1).collect();
    let gap: RunningStats = per_path.iter().map(|v| v.0 - v.1).collect();
    let g = gap.estimate();
    report.verdict = if g.value >= -3.0 * g.std_error { Verdict::Holds } else { Verdict::Fails };
    report.lhs = Some(lhs.estimate());
    report.rhs = Some(rhs.estimate());
    report.gap = Some(g);
    Ok(report)
}

/// Classical maximum-principle evaluator for Brownian noise with unit speed:
/// no time change, no flat periods.
pub mod classical {
    use super::*;

    fn brownian(bundle: &TrajectoryBundle) -> Result<()> {
        let flat = (0..bundle.n_paths()).any(|i| (0..bundle.times().len()).any(|j| bundle.flat.get(i, j)));
        if bundle.drift() != 1.0 || flat || bundle.setup.a != 0.0 {
            return Err(Error::Precondition("classical evaluator needs L_t = t".into()));
        }
        Ok(())
    }

    /// `H(ū) - H(u) - [dσ q + dσ^2 P / 2]`.
    pub fn spike_scan(
        coeffs: &CoefficientSet,
        bundle: &TrajectoryBundle,
        p: &BsdeSolution,
        pp: &BsdeSolution,
        u_grid: &[f64],
    ) -> Result<Vec<ResidualRow>> {
        brownian(bundle)?;
        let tm = bundle.times();
        let mut rows = Vec::new();
        for j in 1..tm.len() - 1 {
            for &u in u_grid {
                let mut s = RunningStats::new();
                let mut max_abs: f64 = 0.0;
                for i in 0..bundle.n_paths() {
                    let (x, ub) = (bundle.state.get(i, j), bundle.control.get(i, j));
                    let (b, sig, f) = (&coeffs.b, &coeffs.sigma, &coeffs.f);
                    let y = p.y.get(i, j);
                    let h_bar = b(tm[j], x, ub) * y - f(tm[j], x, ub);
                    let h_u = b(tm[j], x, u) * y - f(tm[j], x, u);
                    let ds = sig(tm[j], x, u) - sig(tm[j], x, ub);
                    let v = (h_bar - h_u) - (ds * p.z.get(i, j) + 0.5 * ds * ds * pp.y.get(i, j));
                    s.push(v);
                    max_abs = max_abs.max(v.abs());
                }
                let e = s.estimate();
                let sup = (0..bundle.n_paths())
                    .map(|i| {
                        let x = bundle.state.get(i, j);
                        ((coeffs.b)(tm[j], x, bundle.control.get(i, j)) - (coeffs.b)(tm[j], x, u)).abs()
                    })
                    .sum::<f64>()
                    / bundle.n_paths() as f64;
                rows.push(ResidualRow {
                    t: tm[j],
                    u: Some(u),
                    mean: e.value,
                    std_error: e.std_error,
                    solver_error: sup * p.discretization_error[j],
                    max_abs,
                });
            }
        }
        Ok(rows)
    }

    /// `b_u p + σ_u q - f_u`.
    pub fn stationarity_scan(coeffs: &CoefficientSet, bundle: &TrajectoryBundle, p: &BsdeSolution) -> Result<Vec<ResidualRow>> {
        brownian(bundle)?;
        let tm = bundle.times();
        let mut rows = Vec::new();
        for j in 1..tm.len() - 1 {
            let mut s = RunningStats::new();
            let mut max_abs: f64 = 0.0;
            let mut bu = 0.0;
            for i in 0..bundle.n_paths() {
                let d = coeffs.partials_at(tm[j], bundle.state.get(i, j), bundle.control.get(i, j));
                let v = d.b_u * p.y.get(i, j) + d.s_u * p.z.get(i, j) - d.f_u;
                s.push(v);
                max_abs = max_abs.max(v.abs());
                bu += d.b_u.abs();
            }
            let e = s.estimate();
            rows.push(ResidualRow {
                t: tm[j],
                u: None,
                mean: e.value,
                std_error: e.std_error,
                solver_error: bu / bundle.n_paths() as f64 * p.discretization_error[j],
                max_abs,
            });
        }
        Ok(rows)
    }
}
