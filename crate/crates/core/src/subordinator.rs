//! Subordinators with positive drift, their exact inverse, and renewal estimates.
//!
//! A path is stored as its jump skeleton. Inversion walks the skeleton, so `L`
//! and `R` carry no discretization error, and the images of jump epochs are
//! inserted into the caller's grid as auxiliary knots.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::rng::{path_rng, Stream};
use crate::scalar::{Exact, Scalar};
use crate::stats::{Estimate, RunningStats};

/// Jump-size distribution for compound-Poisson laws.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpSize {
    Exponential { mean: f64 },
    Fixed(f64),
}

impl JumpSize {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpSize::Exponential { mean } => {
                // Exp(1) is positive with probability one; guard the zero draw anyway.
                let e: f64 = Exp::new(1.0).unwrap().sample(rng);
                (e * mean).max(f64::MIN_POSITIVE)
            }
            JumpSize::Fixed(s) => s,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            JumpSize::Exponential { mean } => mean,
            JumpSize::Fixed(s) => s,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = self.mean();
        if !(v > 0.0) || !v.is_finite() {
            return Err(invalid("jump_size", format!("must be positive and finite, got {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JumpLaw {
    None,
    CompoundPoisson { rate: f64, size: JumpSize },
    /// Stable law with Laplace exponent `scale * s^alpha`, jumps below `truncation` dropped.
    TruncatedStable { alpha: f64, scale: f64, truncation: f64, compensate: bool },
    /// Deterministic `(time, size)` jumps. Test hook only.
    Forced(Vec<(f64, f64)>),
}

impl JumpLaw {
    pub fn name(&self) -> &'static str {
        match self {
            JumpLaw::None => "none",
            JumpLaw::CompoundPoisson { .. } => "compound-poisson",
            JumpLaw::TruncatedStable { .. } => "truncated-stable",
            JumpLaw::Forced(_) => "forced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubordinatorSpec {
    pub kappa: f64,
    pub jump_law: JumpLaw,
}

impl SubordinatorSpec {
    pub fn new(kappa: f64, jump_law: JumpLaw) -> Result<Self> {
        let spec = Self { kappa, jump_law };
        spec.validate()?;
        Ok(spec)
    }

    pub fn pure_drift(kappa: f64) -> Result<Self> {
        Self::new(kappa, JumpLaw::None)
    }

    pub fn compound_poisson_exp(kappa: f64, rate: f64, mean: f64) -> Result<Self> {
        Self::new(kappa, JumpLaw::CompoundPoisson { rate, size: JumpSize::Exponential { mean } })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(invalid("kappa", format!("must be positive and finite, got {}", self.kappa)));
        }
        match &self.jump_law {
            JumpLaw::None => {}
            JumpLaw::CompoundPoisson { rate, size } => {
                if !(*rate >= 0.0) || !rate.is_finite() {
                    return Err(invalid("rate", format!("must be finite and nonnegative, got {rate}")));
                }
                size.validate()?;
            }
            JumpLaw::TruncatedStable { alpha, scale, truncation, .. } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
                }
                if !(*scale >= 0.0) || !scale.is_finite() {
                    return Err(invalid("scale", format!("must be finite and nonnegative, got {scale}")));
                }
                if !(*truncation > 0.0) || !truncation.is_finite() {
                    return Err(invalid("truncation", format!("must be positive, got {truncation}")));
                }
            }
            JumpLaw::Forced(jumps) => {
                let mut last = f64::NEG_INFINITY;
                for &(t, s) in jumps {
                    if !(t >= 0.0) || t < last {
                        return Err(invalid("forced_jumps", "times must be nonnegative and sorted"));
                    }
                    if !(s > 0.0) {
                        return Err(invalid("forced_jumps", "sizes must be positive"));
                    }
                    last = t;
                }
            }
        }
        Ok(())
    }

    /// Drift of the simulated path, including small-jump compensation if requested.
    pub fn effective_drift(&self) -> f64 {
        match self.jump_law {
            JumpLaw::TruncatedStable { alpha, scale, truncation, compensate: true } => {
                self.kappa + scale * alpha * truncation.powf(1.0 - alpha) / gamma(2.0 - alpha)
            }
            _ => self.kappa,
        }
    }

    /// Intensity of the jumps that are actually simulated.
    pub fn jump_rate(&self) -> f64 {
        match self.jump_law {
            JumpLaw::None | JumpLaw::Forced(_) => 0.0,
            JumpLaw::CompoundPoisson { rate, .. } => rate,
            JumpLaw::TruncatedStable { alpha, scale, truncation, .. } => {
                scale * truncation.powf(-alpha) / gamma(1.0 - alpha)
            }
        }
    }

    fn jump_size<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.jump_law {
            JumpLaw::CompoundPoisson { size, .. } => size.sample(rng),
            JumpLaw::TruncatedStable { alpha, truncation, .. } => {
                // Pareto tail above the truncation level.
                let u: f64 = 1.0 - rng.random::<f64>();
                truncation * u.powf(-1.0 / alpha)
            }
            _ => unreachable!("no random jumps for this law"),
        }
    }
}

/// Jump skeleton of `S_r = drift * r + sum of jumps up to r`, known on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubordinatorPath<S = f64> {
    pub horizon: S,
    pub jump_times: Vec<S>,
    pub jump_sizes: Vec<S>,
    pub drift: S,
    /// Sum of the first k+1 jumps.
    cum: Vec<S>,
    /// Left limit of S at the k-th jump.
    pre: Vec<S>,
}

impl<S: Scalar> SubordinatorPath<S> {
    pub fn new(drift: S, horizon: S, jump_times: Vec<S>, jump_sizes: Vec<S>) -> Result<Self> {
        if drift <= S::zero() {
            return Err(invalid("drift", "must be positive"));
        }
        if jump_times.len() != jump_sizes.len() {
            return Err(invalid("jump_sizes", "length differs from jump_times"));
        }
        if jump_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("jump_times", "must be nondecreasing"));
        }
        if jump_times.iter().any(|t| *t < S::zero() || *t > horizon) {
            return Err(invalid("jump_times", "must lie in [0, horizon]"));
        }
        if jump_sizes.iter().any(|s| *s <= S::zero()) {
            return Err(invalid("jump_sizes", "must be positive"));
        }
        let mut cum = Vec::with_capacity(jump_sizes.len());
        let mut pre = Vec::with_capacity(jump_sizes.len());
        let mut acc = S::zero();
        for (t, s) in jump_times.iter().zip(&jump_sizes) {
            pre.push(drift.clone() * t.clone() + acc.clone());
            acc = acc + s.clone();
            cum.push(acc.clone());
        }
        Ok(Self { horizon, jump_times, jump_sizes, drift, cum, pre })
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    fn cum_before(&self, k: usize) -> S {
        if k == 0 {
            S::zero()
        } else {
            self.cum[k - 1].clone()
        }
    }

    /// `S_r`, right-continuous.
    pub fn value_at(&self, r: &S) -> S {
        let k = self.jump_times.partition_point(|t| t <= r);
        self.drift.clone() * r.clone() + self.cum_before(k)
    }

    pub fn terminal_value(&self) -> S {
        self.value_at(&self.horizon)
    }

    /// Left limit of S at the k-th jump epoch.
    pub fn pre_jump_level(&self, k: usize) -> &S {
        &self.pre[k]
    }

    /// Value of S right after the k-th jump.
    pub fn post_jump_level(&self, k: usize) -> S {
        self.pre[k].clone() + self.jump_sizes[k].clone()
    }

    /// `(L_y, S_{L_y})` with `L_y = inf{r : S_r > y}`, or `None` when the
    /// skeleton is too short to certify the crossing.
    pub fn inverse_level(&self, y: &S) -> Option<(S, S)> {
        if *y >= self.terminal_value() {
            return None;
        }
        if *y < S::zero() {
            return Some((S::zero(), S::zero()));
        }
        let n = self.n_jumps();
        // First jump whose post-jump level exceeds y.
        let (mut lo_k, mut hi_k) = (0, n);
        while lo_k < hi_k {
            let mid = (lo_k + hi_k) / 2;
            if self.post_jump_level(mid) <= *y {
                lo_k = mid + 1;
            } else {
                hi_k = mid;
            }
        }
        let k = lo_k;
        if k < n && *y >= self.pre[k] {
            return Some((self.jump_times[k].clone(), self.post_jump_level(k)));
        }
        let lo = if k == 0 { S::zero() } else { self.jump_times[k - 1].clone() };
        let raw = (y.clone() - self.cum_before(k)) / self.drift.clone();
        let mut l = S::max_of(raw, lo);
        if k < n {
            l = S::min_of(l, self.jump_times[k].clone());
        }
        Some((l, y.clone()))
    }
}

impl SubordinatorPath<f64> {
    pub fn to_exact(&self) -> SubordinatorPath<Exact> {
        let conv = |v: &[f64]| v.iter().map(|x| Exact::from_f64_exact(*x)).collect::<Vec<_>>();
        SubordinatorPath::new(
            Exact::from_f64_exact(self.drift),
            Exact::from_f64_exact(self.horizon),
            conv(&self.jump_times),
            conv(&self.jump_sizes),
        )
        .expect("valid f64 path converts to a valid exact path")
    }
}

/// Sample the skeleton on `[0, horizon_l]` for path index 0 of `seed`.
pub fn sample_subordinator(spec: &SubordinatorSpec, horizon_l: f64, seed: u64) -> Result<SubordinatorPath> {
    sample_subordinator_path(spec, horizon_l, seed, 0)
}

/// Sample the skeleton of path `index` under master `seed`. Jumps are generated
/// sequentially, so a longer horizon extends the same path.
pub fn sample_subordinator_path(
    spec: &SubordinatorSpec,
    horizon_l: f64,
    seed: u64,
    index: u64,
) -> Result<SubordinatorPath> {
    spec.validate()?;
    if !(horizon_l > 0.0) || !horizon_l.is_finite() {
        return Err(invalid("horizon", format!("must be positive and finite, got {horizon_l}")));
    }
    let drift = spec.effective_drift();
    let mut times = Vec::new();
    let mut sizes = Vec::new();
    match &spec.jump_law {
        JumpLaw::None => {}
        JumpLaw::Forced(jumps) => {
            for &(t, s) in jumps.iter().filter(|(t, _)| *t <= horizon_l) {
                times.push(t);
                sizes.push(s);
            }
        }
        _ => {
            let rate = spec.jump_rate();
            if rate > 0.0 {
                let mut rng = path_rng(seed, Stream::Subordinator, index);
                let gap = Exp::new(rate).map_err(|e| invalid("rate", e.to_string()))?;
                let mut t = 0.0;
                loop {
                    t += gap.sample(&mut rng);
                    if t > horizon_l {
                        break;
                    }
                    let s = spec.jump_size(&mut rng);
                    times.push(t);
                    sizes.push(s);
                }
            }
        }
    }
    SubordinatorPath::new(drift, horizon_l, times, sizes)
}

/// Sample a skeleton long enough to cross `level`. The drift alone guarantees
/// the crossing by `level / drift`, so no extension loop is needed.
pub fn sample_to_level(spec: &SubordinatorSpec, level: f64, seed: u64, index: u64) -> Result<SubordinatorPath> {
    let drift = spec.effective_drift();
    let horizon = (level.max(0.0) / drift) * (1.0 + 1e-9) + 1e-9;
    sample_subordinator_path(spec, horizon, seed, index)
}

/// Exact inverse on a grid: knots, `L`, overshoot `R` and the flat indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct InversePath<S = f64> {
    /// All knots: the caller grid merged with auxiliary flat-interval endpoints.
    pub grid: Vec<S>,
    /// Knot index of each caller grid point.
    pub caller: Vec<usize>,
    /// `L_{(t-a)^+}` at each knot.
    pub l: Vec<S>,
    /// Overshoot `R_t`.
    pub r: Vec<S>,
    /// `R_t > 0`.
    pub flat: Vec<bool>,
    pub a: S,
    pub drift: S,
}

#[derive(Debug, Clone)]
struct Knot<S> {
    t: S,
    /// Exact level and the jump it belongs to, for auxiliary knots.
    event: Option<KnotEvent>,
    caller: Option<usize>,
}

#[derive(Debug, Clone)]
enum KnotEvent {
    Offset,
    FlatStart(usize),
    FlatEnd(usize),
}

/// Invert `path` on `grid` with initial overshoot `a`.
pub fn invert_on_grid<S: Scalar>(path: &SubordinatorPath<S>, grid: &[S], a: &S) -> Result<InversePath<S>> {
    if grid.len() < 2 {
        return Err(invalid("grid", "needs at least two points"));
    }
    if grid[0] < S::zero() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid", "must be strictly increasing and start at a nonnegative time"));
    }
    if *a < S::zero() {
        return Err(invalid("a", "must be nonnegative"));
    }
    let t_end = grid.last().unwrap().clone();
    let top = (t_end.clone() - a.clone()).positive_part();
    if top >= path.terminal_value() && top > S::zero() {
        return Err(Error::InsufficientHorizon {
            horizon: path.horizon.to_f64_lossy(),
            reached: path.terminal_value().to_f64_lossy(),
            level: top.to_f64_lossy(),
        });
    }

    let t0 = grid[0].clone();
    let mut aux: Vec<Knot<S>> = Vec::new();
    if *a > t0 && *a < t_end {
        aux.push(Knot { t: a.clone(), event: Some(KnotEvent::Offset), caller: None });
    }
    for k in 0..path.n_jumps() {
        let start = a.clone() + path.pre_jump_level(k).clone();
        if start >= t_end {
            break;
        }
        let end = a.clone() + path.post_jump_level(k);
        if start > t0 {
            aux.push(Knot { t: start, event: Some(KnotEvent::FlatStart(k)), caller: None });
        }
        if end > t0 && end < t_end {
            aux.push(Knot { t: end, event: Some(KnotEvent::FlatEnd(k)), caller: None });
        }
    }
    aux.sort_by(|x, y| x.t.partial_cmp(&y.t).unwrap());

    let mut knots: Vec<Knot<S>> = Vec::with_capacity(grid.len() + aux.len());
    let mut j = 0;
    for (i, t) in grid.iter().enumerate() {
        while j < aux.len() && aux[j].t < *t {
            push_knot(&mut knots, aux[j].clone());
            j += 1;
        }
        let mut k = Knot { t: t.clone(), event: None, caller: Some(i) };
        while j < aux.len() && aux[j].t == *t {
            k.event = aux[j].event.clone();
            j += 1;
        }
        push_knot(&mut knots, k);
    }

    let mut out = InversePath {
        grid: Vec::with_capacity(knots.len()),
        caller: vec![0; grid.len()],
        l: Vec::with_capacity(knots.len()),
        r: Vec::with_capacity(knots.len()),
        flat: Vec::with_capacity(knots.len()),
        a: a.clone(),
        drift: path.drift.clone(),
    };
    for knot in knots {
        let (l, r) = match &knot.event {
            Some(KnotEvent::FlatStart(k)) => (path.jump_times[*k].clone(), path.jump_sizes[*k].clone()),
            Some(KnotEvent::FlatEnd(k)) => (path.jump_times[*k].clone(), S::zero()),
            Some(KnotEvent::Offset) => level_point(path, &S::zero())?,
            None => {
                if knot.t <= *a {
                    (S::zero(), a.clone() - knot.t.clone())
                } else {
                    level_point(path, &(knot.t.clone() - a.clone()))?
                }
            }
        };
        if let Some(i) = knot.caller {
            out.caller[i] = out.grid.len();
        }
        out.flat.push(r > S::zero());
        out.grid.push(knot.t);
        out.l.push(l);
        out.r.push(r);
    }
    Ok(out)
}

fn push_knot<S: Scalar>(knots: &mut Vec<Knot<S>>, k: Knot<S>) {
    if let Some(last) = knots.last_mut() {
        if last.t == k.t {
            if last.caller.is_none() {
                last.caller = k.caller;
            }
            if last.event.is_none() {
                last.event = k.event;
            }
            return;
        }
    }
    knots.push(k);
}

fn level_point<S: Scalar>(path: &SubordinatorPath<S>, y: &S) -> Result<(S, S)> {
    let (l, s_l) = path.inverse_level(y).ok_or_else(|| Error::InsufficientHorizon {
        horizon: path.horizon.to_f64_lossy(),
        reached: path.terminal_value().to_f64_lossy(),
        level: y.to_f64_lossy(),
    })?;
    let r = s_l - y.clone();
    Ok((l, r))
}

/// Counts of invariant violations along one inverse path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InverseAudit {
    pub steps: usize,
    pub flat_steps: usize,
    /// `L` decreased.
    pub monotone: usize,
    /// `ΔL > Δt / drift`.
    pub lipschitz: usize,
    /// Slope differs from `1/drift` off flat runs or from 0 on them.
    pub slope: usize,
    /// `R` increased inside a flat run by other than `-Δt`.
    pub overshoot_rate: usize,
}

impl InverseAudit {
    pub fn violations(&self) -> usize {
        self.monotone + self.lipschitz + self.slope + self.overshoot_rate
    }
}

impl<S: Scalar> InversePath<S> {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Compare every step against the exact flat/linear structure. With exact
    /// scalars the comparisons are equalities; with `f64` they are bitwise.
    pub fn audit(&self) -> InverseAudit {
        let mut a = InverseAudit::default();
        for i in 0..self.grid.len().saturating_sub(1) {
            a.steps += 1;
            let dt = self.grid[i + 1].clone() - self.grid[i].clone();
            let dl = self.l[i + 1].clone() - self.l[i].clone();
            let cap = dt.clone() / self.drift.clone();
            if dl < S::zero() {
                a.monotone += 1;
            }
            if dl > cap {
                a.lipschitz += 1;
            }
            if self.flat[i] {
                a.flat_steps += 1;
                if !dl.is_zero() {
                    a.slope += 1;
                }
                let expected = self.r[i].clone() - dt;
                if self.r[i + 1] != expected.positive_part() {
                    a.overshoot_rate += 1;
                }
            } else if dl != cap {
                a.slope += 1;
            }
        }
        a
    }

    /// Number of maximal runs of flat steps.
    pub fn flat_runs(&self) -> usize {
        let n = self.grid.len().saturating_sub(1);
        (0..n).filter(|&i| self.flat[i] && (i == 0 || !self.flat[i - 1])).count()
    }
}

impl InversePath<f64> {
    /// `L`, `R` and flat flag at the caller grid points only.
    pub fn at_caller(&self) -> Vec<(f64, f64, f64, bool)> {
        self.caller.iter().map(|&k| (self.grid[k], self.l[k], self.r[k], self.flat[k])).collect()
    }
}

/// Monte Carlo estimate of `(U(x + δ) - U(x)) / δ = E[L_{x+δ} - L_x] / δ`.
pub fn estimate_renewal_density(
    spec: &SubordinatorSpec,
    x: f64,
    delta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    spec.validate()?;
    if !(x >= 0.0) {
        return Err(invalid("x", "must be nonnegative"));
    }
    if !(delta > 0.0) {
        return Err(invalid("delta", "must be positive"));
    }
    if n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    let mut stats = RunningStats::new();
    for i in 0..n_paths {
        let path = sample_to_level(spec, x + delta, seed, i as u64)?;
        let (l0, _) = level_point(&path, &x)?;
        let (l1, _) = level_point(&path, &(x + delta))?;
        stats.push((l1 - l0) / delta);
    }
    Ok(stats.estimate())
}

/// Renewal density in closed form where one is available: pure drift and
/// compound Poisson with exponential jumps. For rate `λ` and jump mean `m`,
/// `1/Φ(s) = (1 + ms) / (s (κ + κms + λm))` inverts to
/// `1/(κ + λm) + λm/(κ(κ + λm)) exp(-(κ + λm) x / (κm))`.
pub fn renewal_density_exact(spec: &SubordinatorSpec, x: f64) -> Option<f64> {
    if !(x >= 0.0) {
        return None;
    }
    let k = spec.kappa;
    match &spec.jump_law {
        JumpLaw::None => Some(1.0 / k),
        JumpLaw::CompoundPoisson { rate, size: JumpSize::Exponential { mean } } => {
            let lm = rate * mean;
            Some(1.0 / (k + lm) + lm / (k * (k + lm)) * (-(k + lm) * x / (k * mean)).exp())
        }
        _ => None,
    }
}

/// Monte Carlo estimate of `P(S_{L_x} = x)`: the fraction of paths that cross
/// level `x` continuously rather than by a jump.
pub fn hit_probability(spec: &SubordinatorSpec, x: f64, n_paths: usize, seed: u64) -> Result<Estimate> {
    spec.validate()?;
    if let JumpLaw::TruncatedStable { .. } = spec.jump_law {
        return Err(Error::UnsupportedLaw("truncated-stable"));
    }
    if !(x > 0.0) {
        return Err(invalid("x", "must be positive"));
    }
    if n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    let mut stats = RunningStats::new();
    for i in 0..n_paths {
        let path = sample_to_level(spec, x, seed, i as u64)?;
        let (_, r) = level_point(&path, &x)?;
        stats.push(if r == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(stats.estimate())
}

/// First-passage statistics at one truncation level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPoint {
    pub truncation: f64,
    pub effective_drift: f64,
    pub jump_rate: f64,
    /// `E L_level`, the mean first passage time over `level`.
    pub mean_passage: Estimate,
}

/// Reruns the first passage over `level` with the truncation of a
/// truncated-stable law multiplied by each of `factors`. No error bound for
/// the truncation is known; this reports how much the answer moves.
pub fn truncation_sensitivity(
    spec: &SubordinatorSpec,
    level: f64,
    factors: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<TruncationPoint>> {
    spec.validate()?;
    let JumpLaw::TruncatedStable { alpha, scale, truncation, compensate } = spec.jump_law else {
        return Err(Error::UnsupportedLaw(spec.jump_law.name()));
    };
    if !(level > 0.0) || !level.is_finite() {
        return Err(invalid("level", "must be positive and finite"));
    }
    if n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    factors
        .iter()
        .map(|&f| {
            if !(f > 0.0) || !f.is_finite() {
                return Err(invalid("factors", format!("must be positive, got {f}")));
            }
            let law = JumpLaw::TruncatedStable { alpha, scale, truncation: truncation * f, compensate };
            let s = SubordinatorSpec::new(spec.kappa, law)?;
            let mut stats = RunningStats::new();
            for i in 0..n_paths {
                let path = sample_to_level(&s, level, seed, i as u64)?;
                stats.push(level_point(&path, &level)?.0);
            }
            Ok(TruncationPoint {
                truncation: truncation * f,
                effective_drift: s.effective_drift(),
                jump_rate: s.jump_rate(),
                mean_passage: stats.estimate(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::exact_int;

    fn uniform_grid(t_end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
    }

    fn forced_single() -> SubordinatorSpec {
        SubordinatorSpec::new(1.0, JumpLaw::Forced(vec![(1.0, 2.0)])).unwrap()
    }

    #[test]
    fn pure_drift_has_no_jumps() {
        let spec = SubordinatorSpec::pure_drift(2.0).unwrap();
        let p = sample_subordinator(&spec, 1.0, 3).unwrap();
        assert_eq!(p.n_jumps(), 0);
        assert_eq!(p.value_at(&0.5), 1.0);
        assert_eq!(p.terminal_value(), 2.0);
    }

    #[test]
    fn forced_jump_reconstructs_piecewise() {
        let p = sample_subordinator(&forced_single(), 5.0, 0).unwrap();
        assert_eq!(p.value_at(&0.5), 0.5);
        assert_eq!(p.value_at(&1.0), 3.0);
        assert_eq!(p.value_at(&2.0), 4.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SubordinatorSpec::pure_drift(0.0).is_err());
        assert!(SubordinatorSpec::new(
            1.0,
            JumpLaw::TruncatedStable { alpha: 0.5, scale: 1.0, truncation: 0.0, compensate: false }
        )
        .is_err());
        assert!(SubordinatorSpec::new(
            1.0,
            JumpLaw::TruncatedStable { alpha: 1.2, scale: 1.0, truncation: 0.1, compensate: false }
        )
        .is_err());
    }

    #[test]
    fn compound_poisson_mean_matches_moment_identity() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 3.0, 1.0).unwrap();
        let n = 100_000;
        let s: RunningStats =
            (0..n).map(|i| sample_subordinator_path(&spec, 1.0, 11, i).unwrap().value_at(&1.0)).collect();
        let e = s.estimate();
        assert!(e.within(4.0, 3.5), "{e:?}");
    }

    #[test]
    fn pure_drift_inverse() {
        let spec = SubordinatorSpec::pure_drift(2.0).unwrap();
        let p = sample_subordinator(&spec, 10.0, 0).unwrap();
        let grid = uniform_grid(4.0, 16);
        let inv = invert_on_grid(&p, &grid, &0.0).unwrap();
        assert_eq!(inv.grid, grid);
        for (t, l) in inv.grid.iter().zip(&inv.l) {
            assert_eq!(*l, t / 2.0);
        }
        assert!(inv.r.iter().all(|r| *r == 0.0));
        assert!(inv.flat.iter().all(|f| !f));
    }

    #[test]
    fn single_jump_inverse_by_hand() {
        let p = sample_subordinator(&forced_single(), 10.0, 0).unwrap();
        let grid = uniform_grid(5.0, 20);
        let inv = invert_on_grid(&p, &grid, &0.0).unwrap();
        for k in 0..inv.len() {
            let t = inv.grid[k];
            let (l, r) = if t < 1.0 {
                (t, 0.0)
            } else if t < 3.0 {
                (1.0, 3.0 - t)
            } else {
                (t - 2.0, 0.0)
            };
            assert!((inv.l[k] - l).abs() < 1e-15, "t={t}");
            assert!((inv.r[k] - r).abs() < 1e-15, "t={t}");
            assert_eq!(inv.flat[k], r > 0.0, "t={t}");
        }
        assert_eq!(inv.flat_runs(), 1);
    }

    #[test]
    fn offset_phase_is_flat() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        let p = sample_subordinator(&spec, 1.0, 0).unwrap();
        let grid = uniform_grid(5.0, 10);
        let inv = invert_on_grid(&p, &grid, &5.0).unwrap();
        for k in 0..inv.len() {
            assert_eq!(inv.l[k], 0.0);
            assert_eq!(inv.r[k], 5.0 - inv.grid[k]);
        }
    }

    #[test]
    fn auxiliary_knots_split_flat_runs() {
        let spec = SubordinatorSpec::new(1.0, JumpLaw::Forced(vec![(0.3, 0.45)])).unwrap();
        let p = sample_subordinator(&spec, 10.0, 0).unwrap();
        let grid = uniform_grid(2.0, 4);
        let inv = invert_on_grid(&p, &grid, &0.1).unwrap();
        // offset end 0.1, flat run [0.4, 0.85]
        assert_eq!(inv.len(), grid.len() + 3);
        assert_eq!(inv.caller.len(), grid.len());
        for (i, &k) in inv.caller.iter().enumerate() {
            assert_eq!(inv.grid[k], grid[i]);
        }
        let xgrid: Vec<Exact> = grid.iter().map(|t| Exact::from_f64_exact(*t)).collect();
        let exact = invert_on_grid(&p.to_exact(), &xgrid, &Exact::from_f64_exact(0.1)).unwrap();
        assert_eq!(exact.len(), inv.len());
        assert_eq!(exact.audit().violations(), 0);
    }

    #[test]
    fn too_short_path_is_reported() {
        let spec = SubordinatorSpec::pure_drift(1.0).unwrap();
        let p = sample_subordinator(&spec, 1.0, 0).unwrap();
        let err = invert_on_grid(&p, &uniform_grid(2.0, 4), &0.0).unwrap_err();
        assert!(matches!(err, Error::InsufficientHorizon { .. }));
    }

    #[test]
    fn exact_inversion_has_no_violations() {
        let spec = SubordinatorSpec::compound_poisson_exp(0.7, 2.0, 0.5).unwrap();
        let grid: Vec<Exact> = (0..=64).map(|i| Exact::from_f64_exact(i as f64 / 32.0)).collect();
        for i in 0..50 {
            let p = sample_to_level(&spec, 2.0, 5, i).unwrap().to_exact();
            let inv = invert_on_grid(&p, &grid, &Exact::from_f64_exact(0.125)).unwrap();
            let audit = inv.audit();
            assert_eq!(audit.violations(), 0, "{audit:?}");
        }
    }

    #[test]
    fn exact_and_float_inversions_agree() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.5, 1.0).unwrap();
        let grid = uniform_grid(3.0, 30);
        let xgrid: Vec<Exact> = grid.iter().map(|t| Exact::from_f64_exact(*t)).collect();
        for i in 0..20 {
            let p = sample_to_level(&spec, 3.0, 9, i).unwrap();
            let a = invert_on_grid(&p, &grid, &0.0).unwrap();
            let b = invert_on_grid(&p.to_exact(), &xgrid, &exact_int(0)).unwrap();
            assert_eq!(a.len(), b.len());
            assert_eq!(a.flat, b.flat);
            for k in 0..a.len() {
                assert!((a.l[k] - b.l[k].to_f64_lossy()).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn flat_runs_match_jump_count() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 2.0, 0.7).unwrap();
        let grid = uniform_grid(4.0, 200);
        for i in 0..200 {
            let p = sample_to_level(&spec, 4.0, 21, i).unwrap();
            let inv = invert_on_grid(&p, &grid, &0.0).unwrap();
            let jumps_before = (0..p.n_jumps()).filter(|&k| *p.pre_jump_level(k) < 4.0).count();
            assert_eq!(inv.flat_runs(), jumps_before);
        }
    }

    #[test]
    fn pure_drift_renewal_is_exact() {
        let spec = SubordinatorSpec::pure_drift(2.0).unwrap();
        let e = estimate_renewal_density(&spec, 1.0, 0.125, 1000, 1).unwrap();
        assert_eq!(e.value, 0.5);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(hit_probability(&spec, 1.0, 100, 1).unwrap().value, 1.0);
    }

    #[test]
    fn truncation_sensitivity_settles() {
        let law = JumpLaw::TruncatedStable { alpha: 0.5, scale: 1.0, truncation: 0.1, compensate: true };
        let spec = SubordinatorSpec::new(1.0, law).unwrap();
        let pts = truncation_sensitivity(&spec, 2.0, &[1.0, 0.1, 0.01], 4000, 5).unwrap();
        // Rate c e^-alpha / Gamma(1 - alpha) and compensating drift
        // c alpha e^(1-alpha) / Gamma(2 - alpha), with Gamma(1/2) = sqrt(pi), Gamma(3/2) = sqrt(pi)/2.
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for p in &pts {
            let rate = p.truncation.powf(-0.5) / sqrt_pi;
            assert!((p.jump_rate - rate).abs() < 1e-12 * rate);
            let drift = 1.0 + p.truncation.sqrt() / sqrt_pi;
            assert!((p.effective_drift - drift).abs() < 1e-12);
        }
        // Compensation keeps the passage time put as the truncation shrinks.
        for p in &pts[1..] {
            let (a, b) = (pts[0].mean_passage, p.mean_passage);
            assert!((a.value - b.value).abs() < 4.0 * a.std_error.hypot(b.std_error), "{pts:?}");
        }
        assert!(truncation_sensitivity(&SubordinatorSpec::pure_drift(1.0).unwrap(), 1.0, &[1.0], 10, 0).is_err());
    }

    #[test]
    fn truncated_stable_hit_probability_unsupported() {
        let spec = SubordinatorSpec::new(
            1.0,
            JumpLaw::TruncatedStable { alpha: 0.6, scale: 1.0, truncation: 0.01, compensate: true },
        )
        .unwrap();
        assert_eq!(hit_probability(&spec, 1.0, 10, 0).unwrap_err(), Error::UnsupportedLaw("truncated-stable"));
        assert!(spec.effective_drift() > 1.0);
    }

    #[test]
    fn compensation_matches_numerical_truncated_mean() {
        let (alpha, scale, eps) = (0.4, 1.3, 0.05);
        let c = scale * alpha / gamma(1.0 - alpha);
        // ∫_0^eps s * c s^{-1-alpha} ds by substitution s = eps * v^{1/(1-alpha)}
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let v = (i as f64 + 0.5) / n as f64;
            let s = eps * v.powf(1.0 / (1.0 - alpha));
            let ds_dv = eps * v.powf(alpha / (1.0 - alpha)) / (1.0 - alpha);
            acc += c * s.powf(-alpha) * ds_dv / n as f64;
        }
        let spec = SubordinatorSpec::new(
            2.0,
            JumpLaw::TruncatedStable { alpha, scale, truncation: eps, compensate: true },
        )
        .unwrap();
        assert!((spec.effective_drift() - 2.0 - acc).abs() < 1e-6);
    }

    // Renewal density for drift 1, rate 1, Exp(1) jumps: 1/Φ(s) = (1+s)/(s(s+2)),
    // which inverts to ϑ(x) = (1 + e^{-2x}) / 2.
    fn theta_cp(x: f64) -> f64 {
        0.5 * (1.0 + (-2.0 * x).exp())
    }

    #[test]
    fn renewal_density_matches_laplace_inversion() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        let delta = 0.01;
        for x in [0.0, 0.5, 2.0] {
            let e = estimate_renewal_density(&spec, x, delta, 50_000, 4).unwrap();
            // forward difference bias: δ ϑ'(x) / 2
            let target = theta_cp(x) - 0.5 * delta * (-2.0 * x).exp();
            assert!(e.within(target, 4.0), "x={x} {e:?} target={target}");
        }
    }

    #[test]
    fn exact_renewal_density_limits() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        for x in [0.0, 0.3, 1.0, 4.0] {
            assert!((renewal_density_exact(&spec, x).unwrap() - theta_cp(x)).abs() < 1e-15);
        }
        assert_eq!(renewal_density_exact(&SubordinatorSpec::pure_drift(4.0).unwrap(), 2.0), Some(0.25));
        let fixed = SubordinatorSpec::new(1.0, JumpLaw::CompoundPoisson { rate: 1.0, size: JumpSize::Fixed(1.0) }).unwrap();
        assert_eq!(renewal_density_exact(&fixed, 1.0), None);
    }

    proptest::proptest! {
        #[test]
        fn exact_renewal_density_endpoints(k in 0.1..5.0f64, rate in 0.0..5.0f64, mean in 0.1..3.0f64) {
            let spec = SubordinatorSpec::compound_poisson_exp(k, rate, mean).unwrap();
            let at0 = renewal_density_exact(&spec, 0.0).unwrap();
            proptest::prop_assert!((at0 - 1.0 / k).abs() <= 1e-12 / k);
            let far = renewal_density_exact(&spec, 1e4).unwrap();
            proptest::prop_assert!((far - 1.0 / (k + rate * mean)).abs() <= 1e-12);
        }
    }

    #[test]
    fn renewal_density_agrees_with_fresh_brute_force() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        let (x, delta) = (2.0, 0.05);
        let e = estimate_renewal_density(&spec, x, delta, 100_000, 8).unwrap();
        let mut brute = RunningStats::new();
        for i in 0..1_000_000u64 {
            let p = sample_to_level(&spec, x + delta, 0xdead_beef, i).unwrap();
            let l0 = p.inverse_level(&x).unwrap().0;
            let l1 = p.inverse_level(&(x + delta)).unwrap().0;
            brute.push((l1 - l0) / delta);
        }
        let se = (e.std_error.powi(2) + brute.std_error().powi(2)).sqrt();
        assert!((e.value - brute.mean()).abs() < 3.0 * se, "{e:?} vs {}", brute.mean());
    }

    #[test]
    fn hit_probability_tends_to_one_near_zero() {
        let spec = SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap();
        let e = hit_probability(&spec, 1e-3, 20_000, 2).unwrap();
        assert!(e.value > 0.99, "{e:?}");
        let e1 = hit_probability(&spec, 1.0, 50_000, 2).unwrap();
        assert!(e1.within(theta_cp(1.0), 4.0), "{e1:?}");
    }
}
