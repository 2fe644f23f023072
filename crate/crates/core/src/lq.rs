//! The scalar linear-quadratic example: `dx = (x + u)dt + dB_L`,
//! cost `E[ int u^2/2 dt + (x_T^2 - 2 x_T)/2 ]`.

use num_traits::Float;

use crate::error::{invalid, Result};
use crate::forward_sde::{estimate_cost, presets, BundleSetup, ControlDomain, ControlPolicy, TrajectoryBundle};
use crate::stats::Estimate;
use crate::subordinator::SubordinatorSpec;

fn two<F: Float>() -> F {
    F::one() + F::one()
}

/// `-2 / (e^{2(t-T)} + 1)`, solving `phi' + 2 phi + phi^2 = 0`, `phi(T) = -1`.
pub fn phi<F: Float>(t: F, horizon: F) -> F {
    -two::<F>() / ((two::<F>() * (t - horizon)).exp() + F::one())
}

/// `2 e^{t-T} / (e^{2(t-T)} + 1) = sech(t - T)`, solving `phi psi + psi' + psi = 0`, `psi(T) = 1`.
pub fn psi<F: Float>(t: F, horizon: F) -> F {
    let s = t - horizon;
    two::<F>() * s.exp() / ((two::<F>() * s).exp() + F::one())
}

/// Closed-form optimum for horizon `T`, offset `a` and start `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqClosedForm<F = f64> {
    pub horizon: F,
    pub a: F,
    pub x0: F,
    /// `2(e^{-T} - x0) / (e^{-2T} + 1)`.
    pub c: F,
}

impl<F: Float> LqClosedForm<F> {
    pub fn new(horizon: F, a: F, x0: F) -> Result<Self> {
        if !(horizon > F::zero()) || !horizon.is_finite() {
            return Err(invalid("T", "must be positive and finite"));
        }
        if !(a >= F::zero()) || !a.is_finite() {
            return Err(invalid("a", "must be non-negative"));
        }
        if !x0.is_finite() {
            return Err(invalid("x0", "must be finite"));
        }
        let c = two::<F>() * ((-horizon).exp() - x0) / ((-two::<F>() * horizon).exp() + F::one());
        Ok(LqClosedForm { horizon, a, x0, c })
    }

    pub fn phi(&self, t: F) -> F {
        phi(t, self.horizon)
    }

    pub fn psi(&self, t: F) -> F {
        psi(t, self.horizon)
    }

    /// `e^t x0 + (e^{-T} - x0)/(e^{-2T} + 1) (e^t - e^{-t})` on `[0, a]`.
    pub fn deterministic_prefix_state(&self, t: F) -> Result<F> {
        if t > self.a || t < F::zero() {
            return Err(invalid("t", "prefix state is defined on [0, a]"));
        }
        Ok(self.prefix(t))
    }

    fn prefix(&self, t: F) -> F {
        t.exp() * self.x0 + self.c / two::<F>() * (t.exp() - (-t).exp())
    }

    /// `c e^{-t}` on `[0, a]`, feedback `phi(t) x + psi(t)` after.
    pub fn optimal_control(&self, t: F, x: F) -> F {
        if t <= self.a {
            self.c * (-t).exp()
        } else {
            self.phi(t) * x + self.psi(t)
        }
    }

    /// First adjoint along the optimum; equals the optimal control.
    pub fn adjoint(&self, t: F, x: F) -> F {
        self.optimal_control(t, x)
    }

    /// Second adjoint `-e^{2(T-t)}`.
    pub fn second_adjoint(&self, t: F) -> F {
        -(two::<F>() * (self.horizon - t)).exp()
    }

    /// Kernel `cosh(t - T)` of the closed-loop dynamics after `a`.
    pub fn growth(&self, t: F) -> F {
        (t - self.horizon).cosh()
    }

    /// Optimal cost when `a >= T`: no noise enters.
    pub fn deterministic_value(&self) -> Option<F> {
        if self.a < self.horizon {
            return None;
        }
        let t = self.horizon;
        let x = self.prefix(t);
        let quarter = F::one() / (two::<F>() * two::<F>());
        Some(quarter * self.c * self.c * (F::one() - (-two::<F>() * t).exp()) + (x * x - two::<F>() * x) / two::<F>())
    }
}

impl LqClosedForm<f64> {
    /// Feedback policy realising the closed form.
    pub fn policy(&self) -> ControlPolicy {
        let form = *self;
        ControlPolicy::new(
            "lq-optimal",
            ControlDomain::real_line(),
            self.a,
            move |inp| form.optimal_control(inp.features.t, inp.state),
            move |t| form.c * (-t).exp(),
        )
        .expect("real line is a valid domain")
    }
}

/// Euler simulation of the optimum next to its quadrature representation.
#[derive(Debug, Clone)]
pub struct OptimalRun {
    pub bundle: TrajectoryBundle,
    /// Max over paths and grid times of `|x_euler - x_quadrature|` after `a`.
    pub quadrature_discrepancy: f64,
    /// Max over grid times in `[0, a]` of `|x_euler - prefix state|`.
    pub prefix_discrepancy: f64,
}

/// `x(t) = G(t) [ x(a)/G(a) + int_a^t (psi dr + dB_L)/G(r) ]`, `G(t) = cosh(t - T)`,
/// by left-point sums on the refined knots of each driver.
pub fn simulate_optimal(
    form: &LqClosedForm,
    spec: &SubordinatorSpec,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<OptimalRun> {
    if !(form.a < form.horizon) {
        return Err(invalid("a", "needs a < T; use deterministic_value"));
    }
    if (grid[grid.len() - 1] - form.horizon).abs() > 1e-12 * form.horizon {
        return Err(invalid("grid", "must end at T"));
    }
    let setup = BundleSetup::new(spec.clone(), grid.to_vec(), form.x0, form.a, seed, n_paths)?;
    let bundle = TrajectoryBundle::simulate(&presets::lq(), &form.policy(), setup)?;
    let xa = form.prefix(form.a);
    let mut quad: f64 = 0.0;
    let mut pre: f64 = 0.0;
    for p in 0..n_paths {
        let d = bundle.setup.driver(p)?;
        let t = d.times();
        let mut s = xa / form.growth(form.a);
        let mut j = 0;
        for k in 0..d.len() {
            if k > 0 && t[k - 1] >= form.a {
                s += (form.psi(t[k - 1]) * d.dt(k - 1) + d.db[k - 1]) / form.growth(t[k - 1]);
            }
            if d.inverse.caller.get(j) == Some(&k) {
                let xe = bundle.state.get(p, j);
                if t[k] <= form.a {
                    pre = pre.max((xe - form.prefix(t[k])).abs());
                } else {
                    quad = quad.max((xe - form.growth(t[k]) * s).abs());
                }
                j += 1;
            }
        }
    }
    Ok(OptimalRun { bundle, quadrature_discrepancy: quad, prefix_discrepancy: pre })
}

/// Optimal value: closed form when `a >= T`, Monte Carlo cost of the
/// closed-form policy otherwise.
pub fn value_estimate(
    form: &LqClosedForm,
    spec: &SubordinatorSpec,
    grid: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if let Some(v) = form.deterministic_value() {
        return Ok(Estimate { value: v, std_error: 0.0 });
    }
    let (est, _) = estimate_cost(&presets::lq(), &form.policy(), n_paths, grid, spec, form.x0, form.a, seed)?;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subdiffusion::uniform_grid;

    fn fd<G: Fn(f64) -> f64>(g: G, t: f64) -> f64 {
        let h = 1e-5;
        (g(t + h) - g(t - h)) / (2.0 * h)
    }

    #[test]
    fn riccati_values() {
        assert_eq!(phi(1.0, 1.0), -1.0);
        assert!((phi(0.0, 1.0) + 1.761594155955765).abs() < 1e-14);
        assert!((phi(-40.0, 1.0) + 2.0).abs() < 1e-15);
        assert_eq!(psi(1.0, 1.0), 1.0);
        assert!((psi(0.0, 1.0) - 0.6480542736638855).abs() < 1e-14);
        for t in [-0.3, 0.2, 0.9] {
            assert!((psi(t, 1.0) - 1.0 / (t - 1.0f64).cosh()).abs() < 1e-15);
        }
    }

    #[test]
    fn riccati_residuals() {
        for t in [0.0, 0.25, 0.5, 0.99] {
            let p = phi(t, 1.0);
            assert!((fd(|s| phi(s, 1.0), t) + 2.0 * p + p * p).abs() < 1e-8);
            let q = psi(t, 1.0);
            assert!((p * q + fd(|s| psi(s, 1.0), t) + q).abs() < 1e-8);
        }
    }

    #[test]
    fn prefix_and_control() {
        let f = LqClosedForm::new(1.0, 0.5, 0.0).unwrap();
        assert!((f.c - 0.6480542736638855).abs() < 1e-14);
        assert!((f.optimal_control(0.0, 9.0) - f.c).abs() < 1e-15);
        assert_eq!(f.deterministic_prefix_state(0.0).unwrap(), 0.0);
        assert!((f.deterministic_prefix_state(0.5).unwrap() - 0.3376976).abs() < 1e-6);
        assert!(f.deterministic_prefix_state(0.6).is_err());
        for t in [0.1, 0.3, 0.45] {
            let x = f.deterministic_prefix_state(t).unwrap();
            let d = fd(|s| f.prefix(s), t);
            assert!((d - x - f.c * (-t).exp()).abs() < 1e-8);
        }
        for x in [-1.0, 0.0, 2.0] {
            assert!((f.optimal_control(1.0, x) - (1.0 - x)).abs() < 1e-15);
        }
        let g = LqClosedForm::new(1.0, 0.3, (-1.0f64).exp()).unwrap();
        assert!(g.c.abs() < 1e-16);
        assert!((g.prefix(0.2) - 0.2f64.exp() * g.x0).abs() < 1e-15);
    }

    #[test]
    fn continuity_at_offset() {
        for (a, x0) in [(0.25, 0.0), (0.7, 1.3), (0.05, -2.0)] {
            let f = LqClosedForm::new(1.0, a, x0).unwrap();
            let xa = f.prefix(a);
            assert!((f.c * (-a).exp() - (f.phi(a) * xa + f.psi(a))).abs() < 1e-14);
        }
    }

    #[test]
    fn generic_over_float_width() {
        let f32form = LqClosedForm::<f32>::new(1.0, 0.25, 0.0).unwrap();
        let f64form = LqClosedForm::<f64>::new(1.0, 0.25, 0.0).unwrap();
        assert!((f32form.c as f64 - f64form.c).abs() < 1e-6);
    }

    #[test]
    fn deterministic_branch_matches_quadrature() {
        let f = LqClosedForm::new(1.0, 1.5, 0.2).unwrap();
        let n = 20_000;
        let mut integral = 0.0;
        for k in 0..n {
            let (t0, t1) = (k as f64 / n as f64, (k + 1) as f64 / n as f64);
            let (u0, u1) = (f.optimal_control(t0, 0.0), f.optimal_control(t1, 0.0));
            integral += 0.25 * (u0 * u0 + u1 * u1) / n as f64;
        }
        let x = f.prefix(1.0);
        let v = integral + 0.5 * (x * x - 2.0 * x);
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        let est = value_estimate(&f, &spec, &uniform_grid(1.0, 10), 10, 0).unwrap();
        assert!((est.value - v).abs() < 1e-6 && est.std_error == 0.0);
    }

    #[test]
    fn quadrature_and_euler_agree_and_converge() {
        let f = LqClosedForm::new(1.0, 0.25, 0.0).unwrap();
        let spec = SubordinatorSpec::pure_drift(1.0).unwrap();
        let mut prev = f64::INFINITY;
        for n in [100, 200, 400] {
            let run = simulate_optimal(&f, &spec, &uniform_grid(1.0, n), 200, 1).unwrap();
            assert!(run.quadrature_discrepancy < prev);
            assert!(run.prefix_discrepancy < 5.0 / n as f64);
            prev = run.quadrature_discrepancy;
        }
        assert!(prev < 0.02, "{prev}");
    }

    #[test]
    fn flat_runs_only_drift() {
        let f = LqClosedForm::new(1.0, 0.1, 0.0).unwrap();
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 5.0, 1.0).unwrap();
        let run = simulate_optimal(&f, &spec, &uniform_grid(1.0, 50), 50, 2).unwrap();
        let b = &run.bundle;
        let dt = 1.0 / 50.0;
        for p in 0..50 {
            for j in 0..50 {
                if b.db.get(p, j) == 0.0 && b.flat.get(p, j) && b.dl.get(p, j) == 0.0 {
                    let x = b.state.get(p, j);
                    let u = b.control.get(p, j);
                    assert!((b.state.get(p, j + 1) - x - (x + u) * dt).abs() < 1e-12);
                }
            }
        }
    }
}
