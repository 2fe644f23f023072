use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::subdiffusion::ObservableFeatures;

/// Admissible control values.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlDomain {
    Interval { lo: f64, hi: f64 },
    Finite(Vec<f64>),
}

impl ControlDomain {
    pub fn real_line() -> Self {
        ControlDomain::Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlDomain::Interval { lo, hi } if lo <= hi => Ok(()),
            ControlDomain::Interval { .. } => Err(invalid("domain", "empty interval")),
            ControlDomain::Finite(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(()),
            ControlDomain::Finite(_) => Err(invalid("domain", "empty or non-finite set")),
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        match self {
            ControlDomain::Interval { lo, hi } => *lo <= u && u <= *hi,
            ControlDomain::Finite(v) => v.contains(&u),
        }
    }

    /// Nearest admissible value.
    pub fn project(&self, u: f64) -> f64 {
        match self {
            ControlDomain::Interval { lo, hi } => u.clamp(*lo, *hi),
            ControlDomain::Finite(v) => {
                *v.iter().min_by(|a, b| (*a - u).abs().total_cmp(&(*b - u).abs())).expect("nonempty domain")
            }
        }
    }

    /// `n` equispaced points across `[lo, hi]`, or the finite set itself.
    pub fn scan_grid(&self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        match self {
            ControlDomain::Finite(v) => v.clone(),
            ControlDomain::Interval { .. } => (0..n)
                .map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
                .map(|u| self.project(u))
                .collect(),
        }
    }
}

/// What a rule sees at time t: the observable features and the controlled state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyInput {
    pub features: ObservableFeatures,
    pub state: f64,
}

pub type Rule = Arc<dyn Fn(&PolicyInput) -> f64 + Send + Sync>;
pub type Prefix = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Markov feedback control with a deterministic prefix on `[0, a]`.
#[derive(Clone)]
pub struct ControlPolicy {
    pub name: String,
    pub domain: ControlDomain,
    pub a: f64,
    rule: Rule,
    prefix: Prefix,
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlPolicy").field("name", &self.name).field("domain", &self.domain).field("a", &self.a).finish()
    }
}

impl ControlPolicy {
    pub fn new(
        name: impl Into<String>,
        domain: ControlDomain,
        a: f64,
        rule: impl Fn(&PolicyInput) -> f64 + Send + Sync + 'static,
        prefix: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        domain.validate()?;
        if !(a >= 0.0) {
            return Err(invalid("a", "must be nonnegative"));
        }
        Ok(ControlPolicy { name: name.into(), domain, a, rule: Arc::new(rule), prefix: Arc::new(prefix) })
    }

    /// The constant control `u`.
    pub fn constant(u: f64, domain: ControlDomain) -> Result<Self> {
        Self::new(format!("constant({u})"), domain, 0.0, move |_| u, move |_| u)
    }

    pub fn value(&self, input: &PolicyInput) -> f64 {
        let t = input.features.t;
        let raw = if t <= self.a { (self.prefix)(t) } else { (self.rule)(input) };
        self.domain.project(raw)
    }

    /// The same policy shifted by a constant, without projection onto U.
    pub fn shifted(&self, delta: f64) -> ControlPolicy {
        let (rule, prefix) = (self.rule.clone(), self.prefix.clone());
        ControlPolicy {
            name: format!("{}+{delta}", self.name),
            domain: ControlDomain::real_line(),
            a: self.a,
            rule: Arc::new(move |i| rule(i) + delta),
            prefix: Arc::new(move |t| prefix(t) + delta),
        }
    }
}
