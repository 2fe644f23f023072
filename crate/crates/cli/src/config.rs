//! Experiment configuration: flat dotted keys (`subordinator.kappa = 1.0`),
//! read as TOML, validated in full before anything runs.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use subdiff::forward_sde::presets;
use subdiff::lq::LqClosedForm;
use subdiff::subordinator::{JumpLaw, JumpSize};
use subdiff::variation::Direction;
use subdiff::{CoefficientSet, ControlDomain, ControlPolicy, SubordinatorSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Lq,
    Nonlinear,
    Geometric { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    LqOptimal,
    Constant(f64),
    /// `u = k * state`.
    Linear(f64),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub subordinator: SubordinatorSpec,
    /// Truncation multipliers for the sensitivity report; empty unless the law is truncated.
    pub sensitivity_factors: Vec<f64>,
    pub horizon: f64,
    pub n_steps: usize,
    pub a: f64,
    pub x0: f64,
    pub model: Model,
    pub policy: PolicySpec,
    pub domain: ControlDomain,
    pub basis_degree: usize,
    pub beta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub tol_flat: Option<f64>,
    pub richardson: bool,
    pub n_paths: usize,
    pub master_seed: u64,
    pub output: String,
    pub sample_paths: usize,
    pub u_lo: f64,
    pub u_hi: f64,
    pub u_points: usize,
    pub competitor: Option<PolicySpec>,
    /// Add a half-resolution rerun to the residual error bars.
    pub grid_refinement: bool,
    pub directions: Vec<Direction>,
    pub epsilons: Vec<f64>,
    pub t_bar: f64,
    pub spike_v: PolicySpec,
    pub spike_epsilons: Vec<f64>,
    pub renewal_x: Vec<f64>,
    pub renewal_deltas: Vec<f64>,
    /// Resolved `key = value` pairs, defaults included.
    pub echo: BTreeMap<String, String>,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub out: Option<String>,
}

fn bad(key: &str, why: impl fmt::Display) -> CliError {
    CliError::Validation(format!("{key}: {why}"))
}

/// Flatten nested tables into dotted keys.
fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Reader {
    raw: BTreeMap<String, toml::Value>,
    echo: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.raw.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(toml::Value::Float(f)) => f,
            Some(toml::Value::Integer(i)) => i as f64,
            Some(other) => return Err(bad(key, format!("expected a number, got {other}"))),
        };
        if !v.is_finite() {
            return Err(bad(key, "must be finite"));
        }
        self.echo.insert(key.into(), format!("{v:?}"));
        Ok(v)
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        if self.raw.contains_key(key) {
            self.f64(key, 0.0).map(Some)
        } else {
            self.echo.insert(key.into(), "none".into());
            Ok(None)
        }
    }

    fn int(&mut self, key: &str, default: i64) -> Result<i64, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(toml::Value::Integer(i)) => i,
            Some(other) => return Err(bad(key, format!("expected an integer, got {other}"))),
        };
        self.echo.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn count(&mut self, key: &str, default: usize, min: usize) -> Result<usize, CliError> {
        let v = self.int(key, default as i64)?;
        if v < min as i64 {
            return Err(bad(key, format!("must be at least {min}, got {v}")));
        }
        Ok(v as usize)
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        let v = match self.take(key) {
            None => default,
            Some(toml::Value::Boolean(b)) => b,
            Some(other) => return Err(bad(key, format!("expected true or false, got {other}"))),
        };
        self.echo.insert(key.into(), v.to_string());
        Ok(v)
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String, CliError> {
        let v = match self.take(key) {
            None => default.to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(bad(key, format!("expected a string, got {other}"))),
        };
        self.echo.insert(key.into(), v.clone());
        Ok(v)
    }

    fn opt_string(&mut self, key: &str) -> Result<Option<String>, CliError> {
        if self.raw.contains_key(key) {
            self.string(key, "").map(Some)
        } else {
            self.echo.insert(key.into(), "none".into());
            Ok(None)
        }
    }

    fn list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        let v = match self.take(key) {
            None => default.to_vec(),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|x| match x {
                    toml::Value::Float(f) => Ok(*f),
                    toml::Value::Integer(i) => Ok(*i as f64),
                    other => Err(bad(key, format!("expected numbers, got {other}"))),
                })
                .collect::<Result<_, _>>()?,
            Some(toml::Value::Float(f)) => vec![f],
            Some(toml::Value::Integer(i)) => vec![i as f64],
            Some(other) => return Err(bad(key, format!("expected a list of numbers, got {other}"))),
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(bad(key, "entries must be finite"));
        }
        self.echo.insert(key.into(), format!("{v:?}"));
        Ok(v)
    }

    fn words(&mut self, key: &str, default: &[&str]) -> Result<Vec<String>, CliError> {
        let v: Vec<String> = match self.take(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(toml::Value::Array(a)) => a
                .iter()
                .map(|x| x.as_str().map(str::to_string).ok_or_else(|| bad(key, "expected strings")))
                .collect::<Result<_, _>>()?,
            Some(toml::Value::String(s)) => s.split(',').map(|w| w.trim().to_string()).collect(),
            Some(other) => return Err(bad(key, format!("expected a list of strings, got {other}"))),
        };
        self.echo.insert(key.into(), v.join(","));
        Ok(v)
    }
}

pub fn parse_policy(key: &str, s: &str) -> Result<PolicySpec, CliError> {
    let s = s.trim();
    if s == "lq-optimal" {
        return Ok(PolicySpec::LqOptimal);
    }
    let num = |rest: &str| rest.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    if let Some(v) = s.strip_prefix("constant:").and_then(num) {
        return Ok(PolicySpec::Constant(v));
    }
    if let Some(v) = s.strip_prefix("linear:").and_then(num) {
        return Ok(PolicySpec::Linear(v));
    }
    Err(bad(key, format!("unknown policy {s:?}; use lq-optimal, constant:<u> or linear:<k>")))
}

impl ExperimentConfig {
    /// Parse `text` (may be empty), apply overrides and validate everything.
    pub fn parse(text: &str, ov: &Overrides) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Validation(format!("config: {e}")))?;
        let mut raw = BTreeMap::new();
        flatten("", &table, &mut raw);
        if let Some(s) = ov.seed {
            raw.insert("master_seed".into(), toml::Value::Integer(s as i64));
        }
        if let Some(p) = ov.paths {
            raw.insert("n_paths".into(), toml::Value::Integer(p as i64));
        }
        if let Some(o) = &ov.out {
            raw.insert("output".into(), toml::Value::String(o.clone()));
        }
        let mut r = Reader { raw, echo: BTreeMap::new() };

        let kappa = r.f64("subordinator.kappa", 1.0)?;
        if !(kappa > 0.0) {
            return Err(bad("subordinator.kappa", format!("must be positive, got {kappa}")));
        }
        let law = r.string("subordinator.law", "compound-poisson")?;
        let mut sensitivity_factors = Vec::new();
        let jump_law = match law.as_str() {
            "pure-drift" | "none" => JumpLaw::None,
            "compound-poisson" => {
                let rate = r.f64("subordinator.rate", 1.0)?;
                let mean = r.f64("subordinator.jump_mean", 1.0)?;
                if rate < 0.0 {
                    return Err(bad("subordinator.rate", "must be nonnegative"));
                }
                if !(mean > 0.0) {
                    return Err(bad("subordinator.jump_mean", "must be positive"));
                }
                let size = match r.string("subordinator.jump_size", "exponential")?.as_str() {
                    "exponential" => JumpSize::Exponential { mean },
                    "fixed" => JumpSize::Fixed(mean),
                    other => return Err(bad("subordinator.jump_size", format!("unknown jump size {other:?}"))),
                };
                JumpLaw::CompoundPoisson { rate, size }
            }
            "truncated-stable" => {
                let alpha = r.f64("subordinator.alpha", 0.5)?;
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(bad("subordinator.alpha", format!("must lie in (0, 1), got {alpha}")));
                }
                let scale = r.f64("subordinator.scale", 1.0)?;
                let truncation = r.f64("subordinator.truncation", 0.01)?;
                if scale < 0.0 {
                    return Err(bad("subordinator.scale", "must be nonnegative"));
                }
                if !(truncation > 0.0) {
                    return Err(bad("subordinator.truncation", "must be positive"));
                }
                let compensate = r.boolean("subordinator.compensate", true)?;
                sensitivity_factors = r.list("subordinator.sensitivity_factors", &[1.0, 0.1, 0.01])?;
                if sensitivity_factors.iter().any(|f| !(*f > 0.0)) {
                    return Err(bad("subordinator.sensitivity_factors", "must be positive"));
                }
                JumpLaw::TruncatedStable { alpha, scale, truncation, compensate }
            }
            other => return Err(bad("subordinator.law", format!("unknown law {other:?}"))),
        };
        let subordinator = SubordinatorSpec::new(kappa, jump_law).map_err(|e| bad("subordinator", e))?;

        let horizon = r.f64("grid.T", 1.0)?;
        if !(horizon > 0.0) {
            return Err(bad("grid.T", format!("must be positive, got {horizon}")));
        }
        let n_steps = r.count("grid.n_steps", 400, 2)?;
        let a = r.f64("a", 0.25)?;
        if a < 0.0 {
            return Err(bad("a", format!("must be nonnegative, got {a}")));
        }
        let x0 = r.f64("x0", 0.0)?;

        let model = match r.string("model", "lq")?.as_str() {
            "lq" => Model::Lq,
            "nonlinear" => Model::Nonlinear,
            "geometric" => Model::Geometric { mu: r.f64("model.mu", 0.05)?, sigma: r.f64("model.sigma", 0.2)? },
            other => return Err(bad("model", format!("unknown model {other:?}; use lq, nonlinear or geometric"))),
        };
        let default_policy = if model == Model::Lq { "lq-optimal" } else { "constant:0" };
        let policy = parse_policy("policy", &r.string("policy", default_policy)?)?;
        if policy == PolicySpec::LqOptimal && model != Model::Lq {
            return Err(bad("policy", "lq-optimal requires model = \"lq\""));
        }
        let lo = r.opt_f64("control.lo")?.unwrap_or(f64::NEG_INFINITY);
        let hi = r.opt_f64("control.hi")?.unwrap_or(f64::INFINITY);
        if !(lo <= hi) {
            return Err(bad("control.lo", "must not exceed control.hi"));
        }
        let domain = ControlDomain::Interval { lo, hi };

        let basis_degree = r.count("solver.basis_degree", 3, 1)?;
        if basis_degree > 6 {
            return Err(bad("solver.basis_degree", format!("must be at most 6, got {basis_degree}")));
        }
        let beta = r.opt_f64("solver.beta")?;
        if let Some(b) = beta {
            if !(b > 0.0) {
                return Err(bad("solver.beta", format!("must be positive, got {b}")));
            }
        }
        let tol = r.f64("solver.tol", 1e-10)?;
        if !(tol > 0.0) {
            return Err(bad("solver.tol", "must be positive"));
        }
        let max_iter = r.count("solver.max_iter", 50, 1)?;
        let tol_flat = r.opt_f64("solver.tol_flat")?;
        if let Some(t) = tol_flat {
            if t < 0.0 {
                return Err(bad("solver.tol_flat", "must be nonnegative"));
            }
        }
        let richardson = r.boolean("solver.richardson", true)?;

        let n_paths = r.count("n_paths", 20_000, 2)?;
        let seed = r.int("master_seed", 1)?;
        if seed < 0 {
            return Err(bad("master_seed", "must be nonnegative"));
        }
        let output = r.string("output", "subdiff-out")?;
        let sample_paths = r.count("output.sample_paths", 10, 0)?;

        let u_lo = r.f64("smp.u_lo", -2.0)?;
        let u_hi = r.f64("smp.u_hi", 2.0)?;
        if !(u_lo <= u_hi) {
            return Err(bad("smp.u_lo", "must not exceed smp.u_hi"));
        }
        let u_points = r.count("smp.u_points", subdiff::smp::DEFAULT_U_POINTS, 1)?;
        let competitor = r.opt_string("smp.competitor")?.map(|s| parse_policy("smp.competitor", &s)).transpose()?;
        if competitor == Some(PolicySpec::LqOptimal) && model != Model::Lq {
            return Err(bad("smp.competitor", "lq-optimal requires model = \"lq\""));
        }

        let grid_refinement = r.boolean("smp.grid_refinement", true)?;

        let words = r.words("variation.directions", &["constant(1)", "ramp", "step", "feature-linear"])?;
        let directions = words
            .iter()
            .map(|w| Direction::parse(w).map_err(|e| bad("variation.directions", e)))
            .collect::<Result<Vec<_>, _>>()?;
        let epsilons = r.list("variation.epsilons", &[-0.2, -0.1, -0.05, 0.05, 0.1, 0.2])?;
        let t_bar = r.f64("spike.t_bar", 0.5 * horizon)?;
        let spike_v = parse_policy("spike.v", &r.string("spike.v", "constant:1")?)?;
        let spike_epsilons = r.list("spike.epsilons", &[0.125, 0.0625, 0.03125, 0.015625, 0.0078125])?;
        if spike_epsilons.len() < 2 || spike_epsilons.iter().any(|e| !(*e > 0.0) || t_bar + e > horizon) {
            return Err(bad("spike.epsilons", "need two or more positive values with t_bar + eps <= T"));
        }
        if !(t_bar >= 0.0 && t_bar < horizon) {
            return Err(bad("spike.t_bar", "must lie in [0, T)"));
        }
        let renewal_x = r.list("renewal.x", &[0.0, 0.5, 1.0, 2.0])?;
        if renewal_x.iter().any(|x| *x < 0.0) {
            return Err(bad("renewal.x", "must be nonnegative"));
        }
        let renewal_deltas = r.list("renewal.deltas", &[0.1, 0.05, 0.025])?;
        if renewal_deltas.is_empty() || renewal_deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(bad("renewal.deltas", "must be positive"));
        }

        if let Some(key) = r.raw.keys().next() {
            return Err(bad(key, "unknown key"));
        }
        Ok(ExperimentConfig {
            subordinator,
            sensitivity_factors,
            horizon,
            n_steps,
            a,
            x0,
            model,
            policy,
            domain,
            basis_degree,
            beta,
            tol,
            max_iter,
            tol_flat,
            richardson,
            n_paths,
            master_seed: seed as u64,
            output,
            sample_paths,
            u_lo,
            u_hi,
            u_points,
            competitor,
            grid_refinement,
            directions,
            epsilons,
            t_bar,
            spike_v,
            spike_epsilons,
            renewal_x,
            renewal_deltas,
            echo: r.echo,
        })
    }

    /// First 12 hex digits of the SHA-256 of the canonical echo, leaving out
    /// the output directory so a run can be moved or repeated elsewhere.
    pub fn hash(&self) -> String {
        let body: String =
            self.echo.iter().filter(|(k, _)| k.as_str() != "output").map(|(k, v)| format!("{k} = {v}\n")).collect();
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// The same experiment on half the steps, when the step count is even.
    pub fn coarse(&self) -> Option<ExperimentConfig> {
        (self.grid_refinement && self.n_steps.is_multiple_of(2) && self.n_steps >= 4).then(|| {
            let mut c = self.clone();
            c.n_steps /= 2;
            c
        })
    }

    pub fn grid(&self) -> Vec<f64> {
        subdiff::subdiffusion::uniform_grid(self.horizon, self.n_steps)
    }

    pub fn coefficients(&self) -> CoefficientSet {
        match self.model {
            Model::Lq => presets::lq(),
            Model::Nonlinear => presets::nonlinear(),
            Model::Geometric { mu, sigma } => presets::geometric(mu, sigma),
        }
    }

    pub fn lq_form(&self) -> Result<LqClosedForm, CliError> {
        LqClosedForm::new(self.horizon, self.a, self.x0).map_err(|e| bad("lq", e))
    }

    pub fn build_policy(&self, spec: &PolicySpec) -> Result<ControlPolicy, CliError> {
        let domain = self.domain.clone();
        let p = match *spec {
            PolicySpec::LqOptimal => return Ok(self.lq_form()?.policy()),
            PolicySpec::Constant(u) => {
                if !domain.contains(u) {
                    return Err(bad("policy", format!("constant {u} lies outside the control domain")));
                }
                ControlPolicy::constant(u, domain)
            }
            PolicySpec::Linear(k) => {
                let x0 = self.x0;
                ControlPolicy::new(format!("linear({k})"), domain, 0.0, move |i| k * i.state, move |_| k * x0)
            }
        };
        p.map_err(|e| bad("policy", e))
    }

    pub fn policy(&self) -> Result<ControlPolicy, CliError> {
        self.build_policy(&self.policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_lq_demo() {
        let c = ExperimentConfig::parse("", &Overrides::default()).unwrap();
        assert_eq!((c.horizon, c.a, c.x0, c.n_paths, c.n_steps), (1.0, 0.25, 0.0, 20_000, 400));
        assert_eq!(c.subordinator, SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap());
        assert_eq!(c.policy, PolicySpec::LqOptimal);
    }

    #[test]
    fn dotted_and_sectioned_keys_agree() {
        let a = ExperimentConfig::parse("subordinator.kappa = 2.0\ngrid.n_steps = 50", &Overrides::default()).unwrap();
        let b = ExperimentConfig::parse("[subordinator]\nkappa = 2\n[grid]\nn_steps = 50", &Overrides::default()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.subordinator.kappa, 2.0);
    }

    #[test]
    fn validation_names_the_field() {
        let cases = [
            ("subordinator.kappa = 0", "subordinator.kappa"),
            ("grid.T = -1", "grid.T"),
            ("n_paths = 1", "n_paths"),
            ("solver.basis_degree = 9", "solver.basis_degree"),
            ("policy = \"wobbly\"", "policy"),
            ("mystery = 3", "mystery"),
            ("model = \"nonlinear\"\npolicy = \"lq-optimal\"", "policy"),
            ("subordinator.law = \"truncated-stable\"\nsubordinator.alpha = 1.5", "subordinator.alpha"),
        ];
        for (text, field) in cases {
            match ExperimentConfig::parse(text, &Overrides::default()) {
                Err(CliError::Validation(m)) => assert!(m.starts_with(field), "{text}: {m}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_enter_the_hash() {
        let base = ExperimentConfig::parse("", &Overrides::default()).unwrap();
        let o = Overrides { seed: Some(9), paths: Some(100), out: None };
        let c = ExperimentConfig::parse("", &o).unwrap();
        assert_eq!((c.master_seed, c.n_paths), (9, 100));
        assert_ne!(base.hash(), c.hash());
        assert_eq!(c.hash(), ExperimentConfig::parse("master_seed = 9\nn_paths = 100", &Overrides::default()).unwrap().hash());
        let moved = Overrides { out: Some("elsewhere".into()), ..o };
        assert_eq!(c.hash(), ExperimentConfig::parse("", &moved).unwrap().hash());
    }

    #[test]
    fn policies_parse() {
        assert_eq!(parse_policy("p", "constant:0.5").unwrap(), PolicySpec::Constant(0.5));
        assert_eq!(parse_policy("p", "linear:-1").unwrap(), PolicySpec::Linear(-1.0));
        assert!(parse_policy("p", "constant:x").is_err());
    }
}
