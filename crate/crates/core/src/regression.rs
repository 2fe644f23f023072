//! Least-squares conditional expectations on observable features.
//!
//! At each step the next value is regressed jointly on value features
//! `phi(F_i)` and on `psi(F_i) * dB_i`. The second block gives the martingale
//! integrand directly.

use crate::error::{invalid, Result};
use crate::forward_sde::TrajectoryBundle;

/// Every `stride`-th caller time of a bundle, with increments aggregated.
#[derive(Debug, Clone, Copy)]
pub struct Lattice<'a> {
    pub bundle: &'a TrajectoryBundle,
    pub stride: usize,
}

impl<'a> Lattice<'a> {
    pub fn new(bundle: &'a TrajectoryBundle, stride: usize) -> Result<Self> {
        let steps = bundle.times().len() - 1;
        if stride == 0 || !steps.is_multiple_of(stride) || steps / stride == 0 {
            return Err(invalid("stride", format!("must divide the {steps} grid steps")));
        }
        Ok(Lattice { bundle, stride })
    }

    pub fn full(bundle: &'a TrajectoryBundle) -> Self {
        Lattice { bundle, stride: 1 }
    }

    /// Number of lattice times.
    pub fn len(&self) -> usize {
        (self.bundle.times().len() - 1) / self.stride + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }

    #[inline]
    pub fn col(&self, i: usize) -> usize {
        i * self.stride
    }

    pub fn time(&self, i: usize) -> f64 {
        self.bundle.times()[self.col(i)]
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.time(i + 1) - self.time(i)
    }

    pub fn dl(&self, path: usize, i: usize) -> f64 {
        let c = self.col(i);
        (c..c + self.stride).map(|j| self.bundle.dl.get(path, j)).sum()
    }

    pub fn db(&self, path: usize, i: usize) -> f64 {
        let c = self.col(i);
        (c..c + self.stride).map(|j| self.bundle.db.get(path, j)).sum()
    }
}

/// Polynomial features: total degree `degree` in `(X, L)`, powers of the
/// controlled state up to `degree`, and `age_of_flat` linearly. The integrand
/// block uses one degree less.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Basis {
    pub degree: usize,
}

impl Basis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 || degree > 6 {
            return Err(invalid("basis_degree", "must be in 1..=6"));
        }
        Ok(Basis { degree })
    }

    fn monomials(d: usize, x: f64, l: f64, out: &mut Vec<f64>) {
        for total in 0..=d {
            for j in 0..=total {
                out.push(x.powi((total - j) as i32) * l.powi(j as i32));
            }
        }
    }

    fn state_powers(d: usize, s: f64, out: &mut Vec<f64>) {
        let mut p = 1.0;
        for _ in 0..d {
            p *= s;
            out.push(p);
        }
    }

    /// Value features; the first entry is the constant.
    pub fn value_features(&self, x: f64, l: f64, age: f64, s: f64, out: &mut Vec<f64>) {
        out.clear();
        Self::monomials(self.degree, x, l, out);
        out.push(age);
        Self::state_powers(self.degree, s, out);
    }

    /// Integrand features; the first entry is the constant.
    pub fn integrand_features(&self, x: f64, l: f64, s: f64, out: &mut Vec<f64>) {
        out.clear();
        Self::monomials(self.degree - 1, x, l, out);
        Self::state_powers(self.degree - 1, s, out);
    }

    pub fn describe(&self) -> String {
        let d = self.degree;
        format!("value: total degree {d} in (X, L), age, state^1..{d}; integrand: degree {} times dB", d - 1)
    }
}

/// Relative pivot below which a column counts as a linear combination of the
/// earlier ones.
const PIVOT_DROP: f64 = 1e-10;
const RIDGE_COND: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-10;

#[derive(Debug, Clone)]
struct StepPlan {
    /// Active value features: (index, mean, scale); the constant has mean 0, scale 1.
    value: Vec<(usize, f64, f64)>,
    /// Active integrand features: (index, scale of psi * dB).
    integrand: Vec<(usize, f64)>,
    /// Lower Cholesky factor, row-major `m x m`; dropped columns have a zero row.
    chol: Vec<f64>,
    active: Vec<bool>,
    ridged: bool,
}

impl StepPlan {
    fn m(&self) -> usize {
        self.value.len() + self.integrand.len()
    }
}

/// Per-step normal-equation factorizations on a lattice, reused for every
/// right-hand side.
#[derive(Debug, Clone)]
pub struct RegressionPlan {
    pub basis: Basis,
    pub stride: usize,
    steps: Vec<StepPlan>,
}

/// Per-path split of a fitted conditional expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `E[y | F_i]`.
    pub value: Vec<f64>,
    /// Integrand coefficient of `dB_i`.
    pub integrand: Vec<f64>,
}

struct Row<'b> {
    phi: &'b mut Vec<f64>,
    psi: &'b mut Vec<f64>,
}

impl<'b> Row<'b> {
    fn load(&mut self, basis: &Basis, lat: &Lattice, path: usize, i: usize) -> f64 {
        let b = lat.bundle;
        let c = lat.col(i);
        let (x, l, age, s) = (b.x.get(path, c), b.l.get(path, c), b.age.get(path, c), b.state.get(path, c));
        basis.value_features(x, l, age, s, self.phi);
        basis.integrand_features(x, l, s, self.psi);
        lat.db(path, i)
    }
}

fn design(plan: &StepPlan, phi: &[f64], psi: &[f64], db: f64, out: &mut Vec<f64>) {
    out.clear();
    for &(k, mean, scale) in &plan.value {
        out.push((phi[k] - mean) / scale);
    }
    for &(k, scale) in &plan.integrand {
        out.push(psi[k] * db / scale);
    }
}

fn factor(a: &[f64], m: usize, drop: bool) -> (Vec<f64>, Vec<bool>) {
    let mut l = vec![0.0; m * m];
    let mut active = vec![true; m];
    for k in 0..m {
        let mut d = a[k * m + k];
        for j in 0..k {
            d -= l[k * m + j] * l[k * m + j];
        }
        let scale = a[k * m + k];
        if (!(d > PIVOT_DROP * scale) || !(scale > 0.0)) && (drop || !(d > 0.0)) {
            active[k] = false;
            continue;
        }
        let lkk = d.sqrt();
        l[k * m + k] = lkk;
        for r in k + 1..m {
            let mut v = a[r * m + k];
            for j in 0..k {
                v -= l[r * m + j] * l[k * m + j];
            }
            l[r * m + k] = v / lkk;
        }
    }
    (l, active)
}

fn solve(l: &[f64], active: &[bool], m: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m];
    for k in 0..m {
        if !active[k] {
            continue;
        }
        let mut v = rhs[k];
        for j in 0..k {
            v -= l[k * m + j] * y[j];
        }
        y[k] = v / l[k * m + k];
    }
    let mut x = vec![0.0; m];
    for k in (0..m).rev() {
        if !active[k] {
            continue;
        }
        let mut v = y[k];
        for r in k + 1..m {
            v -= l[r * m + k] * x[r];
        }
        x[k] = v / l[k * m + k];
    }
    x
}

impl RegressionPlan {
    pub fn build(lat: &Lattice, basis: Basis) -> Result<Self> {
        let n = lat.n_paths();
        if n < 2 {
            return Err(invalid("bundle", "regression needs at least two paths"));
        }
        let (mut phi, mut psi, mut row) = (Vec::new(), Vec::new(), Vec::new());
        let mut steps = Vec::with_capacity(lat.len() - 1);
        for i in 0..lat.len() - 1 {
            // Moments of the raw features.
            let mut rows = Row { phi: &mut phi, psi: &mut psi };
            rows.load(&basis, lat, 0, i);
            let (np, nq) = (rows.phi.len(), rows.psi.len());
            let mut s1 = vec![0.0; np];
            let mut s2 = vec![0.0; np];
            let mut q1 = vec![0.0; nq];
            let mut q2 = vec![0.0; nq];
            let mut z2 = vec![0.0; nq];
            let first = (rows.phi.clone(), rows.psi.clone());
            for p in 0..n {
                let mut rows = Row { phi: &mut phi, psi: &mut psi };
                let db = rows.load(&basis, lat, p, i);
                for k in 0..np {
                    let v = phi[k] - first.0[k];
                    s1[k] += v;
                    s2[k] += v * v;
                }
                for k in 0..nq {
                    let v = psi[k] - first.1[k];
                    q1[k] += v;
                    q2[k] += v * v;
                    z2[k] += (psi[k] * db).powi(2);
                }
            }
            let nf = n as f64;
            let spread = |s1: f64, s2: f64, shift: f64| {
                let mean = s1 / nf;
                let var = (s2 / nf - mean * mean).max(0.0);
                (mean + shift, var.sqrt())
            };
            let mut value = vec![(0usize, 0.0, 1.0)];
            for k in 1..np {
                let (mean, sd) = spread(s1[k], s2[k], first.0[k]);
                if sd > 1e-12 * (1.0 + mean.abs()) {
                    value.push((k, mean, sd));
                }
            }
            let mut integrand = Vec::new();
            for k in 0..nq {
                let (mean, sd) = spread(q1[k], q2[k], first.1[k]);
                let rms = (z2[k] / nf).sqrt();
                let varies = k == 0 || sd > 1e-12 * (1.0 + mean.abs());
                if varies && rms > 0.0 {
                    integrand.push((k, rms));
                }
            }
            let mut plan = StepPlan { value, integrand, chol: Vec::new(), active: Vec::new(), ridged: false };
            let m = plan.m();
            let mut a = vec![0.0; m * m];
            for p in 0..n {
                let mut rows = Row { phi: &mut phi, psi: &mut psi };
                let db = rows.load(&basis, lat, p, i);
                design(&plan, &phi, &psi, db, &mut row);
                for r in 0..m {
                    let v = row[r];
                    for c in 0..=r {
                        a[r * m + c] += v * row[c];
                    }
                }
            }
            for r in 0..m {
                for c in r + 1..m {
                    a[r * m + c] = a[c * m + r];
                }
            }
            let (mut l, mut active) = factor(&a, m, true);
            let diag: Vec<f64> = (0..m).filter(|&k| active[k]).map(|k| l[k * m + k]).collect();
            let hi = diag.iter().cloned().fold(0.0, f64::max);
            let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            if (hi / lo).powi(2) > RIDGE_COND {
                let trace: f64 = (0..m).map(|k| a[k * m + k]).sum();
                let lambda = RIDGE_SCALE * trace / m as f64;
                for k in 0..m {
                    if active[k] {
                        a[k * m + k] += lambda;
                    }
                }
                let keep = active.clone();
                let (l2, act2) = factor(&a, m, false);
                l = l2;
                active = act2.iter().zip(&keep).map(|(x, y)| *x && *y).collect();
                plan.ridged = true;
            }
            plan.chol = l;
            plan.active = active;
            steps.push(plan);
        }
        Ok(RegressionPlan { basis, stride: lat.stride, steps })
    }

    /// Steps whose normal equations needed the ridge fallback.
    pub fn ridged_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.ridged).count()
    }

    /// Columns removed as exact linear combinations of earlier ones, summed over steps.
    pub fn dropped_columns(&self) -> usize {
        self.steps.iter().map(|s| s.active.iter().filter(|a| !**a).count()).sum()
    }

    /// Regress `y` (one value per path) at step `i` of `lat`.
    pub fn project(&self, lat: &Lattice, i: usize, y: &[f64]) -> Projection {
        let plan = &self.steps[i];
        let m = plan.m();
        let n = lat.n_paths();
        let (mut phi, mut psi, mut row) = (Vec::new(), Vec::new(), Vec::new());
        let mut rhs = vec![0.0; m];
        for (p, &yp) in y.iter().enumerate().take(n) {
            let db = Row { phi: &mut phi, psi: &mut psi }.load(&self.basis, lat, p, i);
            design(plan, &phi, &psi, db, &mut row);
            for k in 0..m {
                rhs[k] += row[k] * yp;
            }
        }
        let beta = solve(&plan.chol, &plan.active, m, &rhs);
        let nv = plan.value.len();
        let mut value = Vec::with_capacity(n);
        let mut integrand = Vec::with_capacity(n);
        for p in 0..n {
            Row { phi: &mut phi, psi: &mut psi }.load(&self.basis, lat, p, i);
            let mut v = 0.0;
            for (j, &(k, mean, scale)) in plan.value.iter().enumerate() {
                v += beta[j] * (phi[k] - mean) / scale;
            }
            let mut z = 0.0;
            for (j, &(k, scale)) in plan.integrand.iter().enumerate() {
                z += beta[nv + j] * psi[k] / scale;
            }
            value.push(v);
            integrand.push(z);
        }
        Projection { value, integrand }
    }
}
