use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};

pub type Coefficient = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type Terminal = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PartialsFn = Arc<dyn Fn(f64, f64, f64) -> Partials + Send + Sync>;
pub type TerminalPartialsFn = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

/// First and second partials of `b`, `σ` and `f` at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Partials {
    pub b_x: f64,
    pub b_u: f64,
    pub b_xx: f64,
    pub b_xu: f64,
    pub b_uu: f64,
    pub s_x: f64,
    pub s_u: f64,
    pub s_xx: f64,
    pub s_xu: f64,
    pub s_uu: f64,
    pub f_x: f64,
    pub f_u: f64,
    pub f_xx: f64,
    pub f_xu: f64,
    pub f_uu: f64,
}

/// Drift, diffusion, running and terminal cost of a controlled state equation.
#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub b: Coefficient,
    pub sigma: Coefficient,
    pub f: Coefficient,
    pub h: Terminal,
    pub partials: Option<PartialsFn>,
    /// `(h_x, h_xx)`.
    pub terminal_partials: Option<TerminalPartialsFn>,
    pub lipschitz: f64,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("analytic_partials", &self.partials.is_some())
            .field("analytic_terminal_partials", &self.terminal_partials.is_some())
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

pub fn fd_step(v: f64) -> f64 {
    (1e-5 * v.abs()).max(1e-5)
}

fn d1(g: &dyn Fn(f64) -> f64, v: f64) -> f64 {
    let h = fd_step(v);
    (g(v + h) - g(v - h)) / (2.0 * h)
}

fn d2(g: &dyn Fn(f64) -> f64, v: f64) -> f64 {
    let h = fd_step(v);
    (g(v + h) - 2.0 * g(v) + g(v - h)) / (h * h)
}

fn dxu(g: &dyn Fn(f64, f64) -> f64, x: f64, u: f64) -> f64 {
    let (hx, hu) = (fd_step(x), fd_step(u));
    (g(x + hx, u + hu) - g(x + hx, u - hu) - g(x - hx, u + hu) + g(x - hx, u - hu)) / (4.0 * hx * hu)
}

fn fd_block(c: &Coefficient, t: f64, x: f64, u: f64) -> [f64; 5] {
    let gx = |v: f64| c(t, v, u);
    let gu = |v: f64| c(t, x, v);
    let gxu = |a: f64, b: f64| c(t, a, b);
    [d1(&gx, x), d1(&gu, u), d2(&gx, x), dxu(&gxu, x, u), d2(&gu, u)]
}

impl CoefficientSet {
    /// Build from the four functions; partials fall back to finite differences.
    pub fn new(
        name: impl Into<String>,
        b: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        f: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lipschitz: f64,
    ) -> Self {
        CoefficientSet {
            name: name.into(),
            b: Arc::new(b),
            sigma: Arc::new(sigma),
            f: Arc::new(f),
            h: Arc::new(h),
            partials: None,
            terminal_partials: None,
            lipschitz,
        }
    }

    pub fn with_partials(mut self, p: impl Fn(f64, f64, f64) -> Partials + Send + Sync + 'static) -> Self {
        self.partials = Some(Arc::new(p));
        self
    }

    pub fn with_terminal_partials(mut self, p: impl Fn(f64) -> (f64, f64) + Send + Sync + 'static) -> Self {
        self.terminal_partials = Some(Arc::new(p));
        self
    }

    /// True when any partial is obtained by finite differences.
    pub fn uses_finite_differences(&self) -> bool {
        self.partials.is_none() || self.terminal_partials.is_none()
    }

    pub fn partials_at(&self, t: f64, x: f64, u: f64) -> Partials {
        if let Some(p) = &self.partials {
            return p(t, x, u);
        }
        let [b_x, b_u, b_xx, b_xu, b_uu] = fd_block(&self.b, t, x, u);
        let [s_x, s_u, s_xx, s_xu, s_uu] = fd_block(&self.sigma, t, x, u);
        let [f_x, f_u, f_xx, f_xu, f_uu] = fd_block(&self.f, t, x, u);
        Partials { b_x, b_u, b_xx, b_xu, b_uu, s_x, s_u, s_xx, s_xu, s_uu, f_x, f_u, f_xx, f_xu, f_uu }
    }

    /// `(h_x, h_xx)`.
    pub fn terminal_partials_at(&self, x: f64) -> (f64, f64) {
        if let Some(p) = &self.terminal_partials {
            return p(x);
        }
        let h = &self.h;
        let g = |v: f64| h(v);
        (d1(&g, x), d2(&g, x))
    }

    /// Largest sampled ratio `|φ(t,x,u) - φ(t,y,v)| / (|x-y| + |u-v|)` over
    /// b, σ and f on random pairs from the box `[0,T] × [-r,r]²`.
    pub fn lipschitz_self_check<R: Rng>(&self, horizon: f64, radius: f64, samples: usize, rng: &mut R) -> Result<f64> {
        if !(radius > 0.0) || samples == 0 {
            return Err(invalid("radius", "need positive radius and samples"));
        }
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let t = horizon * rng.random::<f64>();
            let mut draw = || radius * (2.0 * rng.random::<f64>() - 1.0);
            let (x, y, u, v) = (draw(), draw(), draw(), draw());
            let d = (x - y).abs() + (u - v).abs();
            if d == 0.0 {
                continue;
            }
            for c in [&self.b, &self.sigma, &self.f] {
                worst = worst.max((c(t, x, u) - c(t, y, v)).abs() / d);
            }
        }
        Ok(worst)
    }
}

/// Ready-made models.
pub mod presets {
    use super::*;

    /// `b = x + u`, `σ = 1`, `f = u²/2`, `h = (x² - 2x)/2`.
    pub fn lq() -> CoefficientSet {
        CoefficientSet::new("lq", |_, x, u| x + u, |_, _, _| 1.0, |_, _, u| 0.5 * u * u, |x| 0.5 * (x * x - 2.0 * x), 1.0)
            .with_partials(|_, _, u| Partials { b_x: 1.0, b_u: 1.0, f_u: u, f_uu: 1.0, ..Partials::default() })
            .with_terminal_partials(|x| (x - 1.0, 1.0))
    }

    /// `b = μx`, `σ = σ0 x`, no cost.
    pub fn geometric(mu: f64, sigma: f64) -> CoefficientSet {
        CoefficientSet::new(
            "geometric",
            move |_, x, _| mu * x,
            move |_, x, _| sigma * x,
            |_, _, _| 0.0,
            |_| 0.0,
            mu.abs().max(sigma.abs()),
        )
        .with_partials(move |_, _, _| Partials { b_x: mu, s_x: sigma, ..Partials::default() })
        .with_terminal_partials(|_| (0.0, 0.0))
    }

    /// Smooth model with state- and control-dependent noise:
    /// `b = sin(x)/2 + u`, `σ = 0.4 + 0.2 cos(x) + 0.2 sin(u)`,
    /// `f = u²/2 + cos(x)/2`, `h = ln cosh(x - 1)`.
    pub fn nonlinear() -> CoefficientSet {
        CoefficientSet::new(
            "nonlinear",
            |_, x, u| 0.5 * x.sin() + u,
            |_, x, u| 0.4 + 0.2 * x.cos() + 0.2 * u.sin(),
            |_, x, u| 0.5 * u * u + 0.5 * x.cos(),
            |x| (x - 1.0).cosh().ln(),
            1.0,
        )
        .with_partials(|_, x, u| Partials {
            b_x: 0.5 * x.cos(),
            b_u: 1.0,
            b_xx: -0.5 * x.sin(),
            b_xu: 0.0,
            b_uu: 0.0,
            s_x: -0.2 * x.sin(),
            s_u: 0.2 * u.cos(),
            s_xx: -0.2 * x.cos(),
            s_xu: 0.0,
            s_uu: -0.2 * u.sin(),
            f_x: -0.5 * x.sin(),
            f_u: u,
            f_xx: -0.5 * x.cos(),
            f_xu: 0.0,
            f_uu: 1.0,
        })
        .with_terminal_partials(|x| {
            let th = (x - 1.0).tanh();
            (th, 1.0 - th * th)
        })
    }

    pub fn by_name(name: &str) -> Option<CoefficientSet> {
        match name {
            "lq" => Some(lq()),
            "nonlinear" => Some(nonlinear()),
            _ => None,
        }
    }
}
