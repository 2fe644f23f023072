use serde_json::{json, Value};
use subdiff::bsde::{
    contraction_threshold, default_beta, first_adjoint_spec, picard_solve, solve_eta, solve_first_adjoint,
    solve_second_adjoint, BsdeOptions, BsdeSolution, BDG_CONSTANT,
};
use subdiff::forward_sde::BundleSetup;
use subdiff::smp::{self, SmpReport, Verdict};
use subdiff::stats::RunningStats;
use subdiff::subdiffusion::sample_subdiffusion_path;
use subdiff::subordinator::{
    estimate_renewal_density, invert_on_grid, renewal_density_exact, sample_to_level, truncation_sensitivity,
};
use subdiff::variation::{
    coupled_costs_on, expansion_study_on, first_variation_j, second_variation_j, spike_remainder_scaling_on, ConvexSpec,
    SpikeSpec,
};
use subdiff::{ControlPolicy, Error, TrajectoryBundle};

use crate::config::{ExperimentConfig, Model, PolicySpec};
use crate::output::{num, Run};
use crate::CliError;

fn setup(cfg: &ExperimentConfig) -> Result<BundleSetup, CliError> {
    Ok(BundleSetup::new(cfg.subordinator.clone(), cfg.grid(), cfg.x0, cfg.a, cfg.master_seed, cfg.n_paths)?)
}

fn options(cfg: &ExperimentConfig) -> BsdeOptions {
    BsdeOptions { basis_degree: cfg.basis_degree, beta: cfg.beta, tol_flat: cfg.tol_flat, richardson: cfg.richardson }
}

fn bundle(cfg: &ExperimentConfig, run: &Run, policy: &ControlPolicy) -> Result<TrajectoryBundle, CliError> {
    run.note(format!("simulating {} paths on {} steps", cfg.n_paths, cfg.n_steps));
    Ok(TrajectoryBundle::simulate(&cfg.coefficients(), policy, setup(cfg)?)?)
}

fn estimate(e: subdiff::Estimate) -> Value {
    json!({ "value": e.value, "std_error": e.std_error })
}

fn solution_json(s: &BsdeSolution) -> Value {
    json!({
        "labels": [s.labels.0, s.labels.1],
        "basis": s.basis,
        "beta": s.beta,
        "iterations": s.iterations,
        "residual_variance": s.residual_variance,
        "ridged_steps": s.ridged_steps,
        "dropped_columns": s.dropped_columns,
        "tol_flat": s.tol_flat,
        "max_discretization_error": s.discretization_error.iter().cloned().fold(0.0, f64::max),
    })
}

fn sample_count(cfg: &ExperimentConfig) -> usize {
    cfg.sample_paths.min(cfg.n_paths)
}

pub fn simulate_subordinator(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let level = (cfg.horizon - cfg.a).max(0.0);
    let grid = cfg.grid();
    let mut jumps = Vec::new();
    let mut inverse = Vec::new();
    let mut audit = subdiff::subordinator::InverseAudit::default();
    let mut n_jumps = RunningStats::new();
    for i in 0..cfg.n_paths {
        let path = sample_to_level(&cfg.subordinator, level, cfg.master_seed, i as u64)?;
        let inv = invert_on_grid(&path, &grid, &cfg.a)?;
        let a = inv.audit();
        audit.steps += a.steps;
        audit.flat_steps += a.flat_steps;
        audit.monotone += a.monotone;
        audit.lipschitz += a.lipschitz;
        audit.slope += a.slope;
        audit.overshoot_rate += a.overshoot_rate;
        n_jumps.push(path.n_jumps() as f64);
        if i < sample_count(cfg) {
            for k in 0..path.n_jumps() {
                jumps.push(vec![i.to_string(), num(path.jump_times[k]), num(path.jump_sizes[k]), num(*path.pre_jump_level(k))]);
            }
            for (t, l, r, flat) in inv.at_caller() {
                inverse.push(vec![i.to_string(), num(t), num(l), num(r), (flat as u8).to_string()]);
            }
        }
    }
    run.csv("jumps", &["path", "time", "size", "level_before"], jumps)?;
    run.csv("inverse", &["path", "t", "L", "R", "flat"], inverse)?;
    run.json(
        "summary",
        &json!({
            "paths": cfg.n_paths,
            "level": level,
            "effective_drift": cfg.subordinator.effective_drift(),
            "mean_jumps": n_jumps.mean(),
            "audit": {
                "steps": audit.steps,
                "flat_steps": audit.flat_steps,
                "monotone": audit.monotone,
                "lipschitz": audit.lipschitz,
                "slope": audit.slope,
                "overshoot_rate": audit.overshoot_rate,
                "violations": audit.violations(),
            },
        }),
    )?;
    if !cfg.sensitivity_factors.is_empty() && level > 0.0 {
        run.note("truncation sensitivity");
        let pts = truncation_sensitivity(&cfg.subordinator, level, &cfg.sensitivity_factors, cfg.n_paths, cfg.master_seed)?;
        let rows = pts.iter().map(|p| {
            vec![
                num(p.truncation),
                num(p.effective_drift),
                num(p.jump_rate),
                num(p.mean_passage.value),
                num(p.mean_passage.std_error),
            ]
        });
        run.csv("truncation_sensitivity", &["truncation", "effective_drift", "jump_rate", "mean_L", "se_mean_L"], rows)?;
    }
    run.note(format!("{} inverse-path invariant violations in {} steps", audit.violations(), audit.steps));
    Ok(())
}

pub fn simulate_subdiffusion(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let grid = cfg.grid();
    let m = grid.len();
    let mut x1 = vec![RunningStats::new(); m];
    let mut x2 = vec![RunningStats::new(); m];
    let mut l = vec![RunningStats::new(); m];
    let mut flat = vec![RunningStats::new(); m];
    let mut samples = Vec::new();
    for i in 0..cfg.n_paths {
        let p = sample_subdiffusion_path(&cfg.subordinator, cfg.x0, cfg.a, &grid, cfg.master_seed, i as u64)?;
        for (j, &k) in p.inverse.caller.iter().enumerate() {
            let dx = p.x[k] - cfg.x0;
            x1[j].push(dx);
            x2[j].push(dx * dx);
            l[j].push(p.inverse.l[k]);
            flat[j].push(p.inverse.flat[k] as u8 as f64);
            if i < sample_count(cfg) {
                samples.push(vec![i.to_string(), num(grid[j]), num(p.x[k]), num(p.inverse.l[k]), num(p.inverse.r[k])]);
            }
        }
    }
    run.csv("paths", &["path", "t", "X", "L", "R"], samples)?;
    let rows = (0..m).map(|j| {
        vec![
            num(grid[j]),
            num(x1[j].mean()),
            num(x1[j].std_error()),
            num(x2[j].mean()),
            num(x2[j].std_error()),
            num(l[j].mean()),
            num(flat[j].mean()),
        ]
    });
    // E(X - x0) = 0 and E(X - x0)^2 = E L: martingale with quadratic variation L.
    run.csv("moments", &["t", "mean_dX", "se_mean_dX", "mean_dX2", "se_mean_dX2", "mean_L", "flat_fraction"], rows)?;
    let worst = (0..m)
        .map(|j| {
            let se = x2[j].std_error().hypot(l[j].std_error()).max(f64::MIN_POSITIVE);
            (x2[j].mean() - l[j].mean()).abs() / se
        })
        .fold(0.0, f64::max);
    run.json("summary", &json!({ "paths": cfg.n_paths, "max_qv_discrepancy_in_se": worst }))?;
    Ok(())
}

pub fn integrate_forward(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let policy = cfg.policy()?;
    let b = bundle(cfg, run, &policy)?;
    let times = b.times().to_vec();
    let rows = (0..times.len()).map(|j| {
        let s: RunningStats = b.state.column(j).into_iter().collect();
        let u: RunningStats = b.control.column(j).into_iter().collect();
        let l: RunningStats = b.l.column(j).into_iter().collect();
        vec![num(times[j]), num(s.mean()), num(s.std_error()), num(u.mean()), num(l.mean())]
    });
    run.csv("trajectory_mean", &["t", "mean_x", "se_x", "mean_u", "mean_L"], rows)?;
    let mut samples = Vec::new();
    for i in 0..sample_count(cfg) {
        for (j, t) in times.iter().enumerate() {
            samples.push(vec![i.to_string(), num(*t), num(b.state.get(i, j)), num(b.control.get(i, j)), num(b.l.get(i, j))]);
        }
    }
    run.csv("paths", &["path", "t", "x", "u", "L"], samples)?;
    let cost = b.cost_estimate();
    run.note(format!("J = {} +- {}", cost.value, cost.std_error));
    run.json("summary", &json!({ "model": b.coefficients, "policy": b.policy, "cost": estimate(cost) }))?;
    Ok(())
}

fn solution_rows(times: &[f64], sols: &[&BsdeSolution]) -> Vec<Vec<String>> {
    (0..times.len())
        .map(|j| {
            let mut row = vec![num(times[j])];
            for s in sols {
                let (y, z) = (s.mean_y(j), s.mean_z(j));
                row.extend([num(y.value), num(y.std_error), num(z.value), num(z.std_error), num(s.discretization_error[j])]);
            }
            row
        })
        .collect()
}

fn solution_header(sols: &[&BsdeSolution]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for s in sols {
        let (y, z) = (&s.labels.0, &s.labels.1);
        h.extend([format!("mean_{y}"), format!("se_{y}"), format!("mean_{z}"), format!("se_{z}"), format!("disc_err_{y}")]);
    }
    h
}

fn write_solutions(run: &mut Run, name: &str, times: &[f64], sols: &[&BsdeSolution]) -> Result<(), CliError> {
    let header = solution_header(sols);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv(name, &header, solution_rows(times, sols))
}

pub fn solve_bsde(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let coeffs = cfg.coefficients();
    let kappa = cfg.subordinator.effective_drift();
    let threshold = contraction_threshold(coeffs.lipschitz, kappa, cfg.horizon, BDG_CONSTANT);
    if let Some(beta) = cfg.beta {
        if beta < threshold {
            return Err(CliError::Numerical(format!(
                "solver.beta = {beta} is below the contraction threshold {threshold}; try beta >= {}",
                default_beta(coeffs.lipschitz, kappa, cfg.horizon)
            )));
        }
    }
    let policy = cfg.policy()?;
    let b = bundle(cfg, run, &policy)?;
    let spec = first_adjoint_spec(&coeffs, &b);
    let sol = picard_solve(&spec, &b, &options(cfg), cfg.max_iter, cfg.tol)?.relabel("p", "q");
    write_solutions(run, "solution", b.times(), &[&sol])?;
    let norms = subdiff::bsde::picard_ratios(&sol.picard_norms);
    let rows = sol.picard_norms.iter().enumerate().map(|(k, d)| {
        let ratio = if k == 0 { String::new() } else { num(norms[k - 1]) };
        vec![k.to_string(), num(*d), ratio]
    });
    run.csv("picard", &["iteration", "distance", "ratio"], rows)?;
    let mut summary = solution_json(&sol);
    summary["contraction_threshold"] = json!(threshold);
    summary["picard_norms"] = json!(sol.picard_norms);
    run.json("summary", &summary)?;
    run.note(format!("converged after {} iterations (beta = {})", sol.iterations, sol.beta));
    Ok(())
}

struct Adjoints {
    first: BsdeSolution,
    second: BsdeSolution,
    eta: BsdeSolution,
}

fn adjoints(cfg: &ExperimentConfig, run: &Run, policy: &ControlPolicy, b: &TrajectoryBundle) -> Result<Adjoints, CliError> {
    let coeffs = cfg.coefficients();
    let opts = options(cfg);
    run.note("solving first adjoint");
    let first = solve_first_adjoint(&coeffs, policy, b, &opts)?;
    run.note("solving second adjoint");
    let second = solve_second_adjoint(&coeffs, policy, b, &first, &opts)?;
    let eta = solve_eta(&coeffs, policy, b, &first, &opts)?;
    Ok(Adjoints { first, second, eta })
}

/// Max over grid times of `|mean(p - closed form)|` on an LQ-optimal run.
fn closed_form_residual(cfg: &ExperimentConfig, b: &TrajectoryBundle, p: &BsdeSolution) -> Result<f64, CliError> {
    let form = cfg.lq_form()?;
    let times = b.times();
    Ok((0..times.len())
        .map(|j| {
            let d: RunningStats =
                (0..b.n_paths()).map(|i| p.y.get(i, j) - form.adjoint(times[j], b.state.get(i, j))).collect();
            d.mean().abs()
        })
        .fold(0.0, f64::max))
}

fn lq_optimal_run(cfg: &ExperimentConfig) -> bool {
    cfg.model == Model::Lq && cfg.policy == PolicySpec::LqOptimal
}

pub fn solve_adjoints(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let policy = cfg.policy()?;
    let b = bundle(cfg, run, &policy)?;
    let adj = adjoints(cfg, run, &policy, &b)?;
    write_solutions(run, "adjoints", b.times(), &[&adj.first, &adj.second, &adj.eta])?;
    let mut summary = json!({
        "first": solution_json(&adj.first),
        "second": solution_json(&adj.second),
        "eta": solution_json(&adj.eta),
    });
    if lq_optimal_run(cfg) {
        let form = cfg.lq_form()?;
        summary["p_closed_form_resid"] = json!(closed_form_residual(cfg, &b, &adj.first)?);
        let pp = (0..b.times().len())
            .map(|j| (adj.second.mean_y(j).value - form.second_adjoint(b.times()[j])).abs())
            .fold(0.0, f64::max);
        summary["P_closed_form_resid"] = json!(pp);
    }
    run.json("summary", &summary)?;
    Ok(())
}

fn report_rows(r: &SmpReport) -> Vec<Vec<String>> {
    r.rows
        .iter()
        .map(|row| {
            vec![
                num(row.t),
                row.u.map(num).unwrap_or_default(),
                num(row.mean),
                num(row.std_error),
                num(row.solver_error),
                num(row.max_abs),
            ]
        })
        .collect()
}

fn report_json(r: &SmpReport) -> Value {
    let config: serde_json::Map<String, Value> = r.config.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    json!({
        "condition": r.condition.id(),
        "holds": r.holds(),
        "fraction_violating": r.fraction_violating(),
        "sigmas": r.sigmas,
        "min_mean": r.min_mean().map(|x| x.mean),
        "max_abs_mean": r.max_abs_mean().map(|x| x.mean.abs()),
        "config": config,
        "footer": r.footer,
    })
}

const REPORT_HEADER: [&str; 6] = ["t", "u", "mean", "std_error", "solver_error", "max_abs"];

pub fn check_smp(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let coeffs = cfg.coefficients();
    let policy = cfg.policy()?;
    let b = bundle(cfg, run, &policy)?;
    let opts = options(cfg);
    run.note("solving adjoints");
    let p = solve_first_adjoint(&coeffs, &policy, &b, &opts)?;
    let pp = solve_second_adjoint(&coeffs, &policy, &b, &p, &opts)?;
    let u_grid = cfg.domain.scan_grid(cfg.u_lo, cfg.u_hi, cfg.u_points);
    run.note(format!("spike scan over {} control values", u_grid.len()));
    let mut spike = smp::spike_condition_scan(&coeffs, &policy, &b, &p, &pp, &u_grid)?;
    let mut stationarity = smp::convex_stationarity_scan(&coeffs, &policy, &b, &p)?;
    if let Some(coarse) = cfg.coarse() {
        run.note(format!("grid refinement on {} steps", coarse.n_steps));
        let cb = bundle(&coarse, run, &policy)?;
        let copts = options(&coarse);
        let cp = solve_first_adjoint(&coeffs, &policy, &cb, &copts)?;
        let cpp = solve_second_adjoint(&coeffs, &policy, &cb, &cp, &copts)?;
        spike = spike.with_grid_refinement(&smp::spike_condition_scan(&coeffs, &policy, &cb, &cp, &cpp, &u_grid)?)?;
        stationarity = stationarity.with_grid_refinement(&smp::convex_stationarity_scan(&coeffs, &policy, &cb, &cp)?)?;
    }
    run.csv("spike", &REPORT_HEADER, report_rows(&spike))?;
    run.csv("stationarity", &REPORT_HEADER, report_rows(&stationarity))?;
    let per_time = spike.per_time().into_iter().map(|s| vec![num(s.t), num(s.mean), num(s.max_abs), num(s.fraction_violating)]);
    run.csv("spike_per_time", &["t", "min_mean", "max_abs", "fraction_violating"], per_time)?;
    let mut summary = json!({ "spike": report_json(&spike), "stationarity": report_json(&stationarity) });
    if let Some(comp) = &cfg.competitor {
        let competitor = cfg.build_policy(comp)?;
        let cb = b.reevaluate(&coeffs, &competitor)?;
        let s = smp::sufficiency_check(&coeffs, &policy, &competitor, &b, &cb, &p)?;
        let verdict = match &s.verdict {
            Verdict::Holds => json!("holds"),
            Verdict::Fails => json!("fails"),
            Verdict::PreconditionFailed(why) => json!({ "precondition_failed": why }),
        };
        summary["sufficiency"] = json!({
            "competitor": competitor.name,
            "verdict": verdict,
            "lhs": s.lhs.map(estimate),
            "rhs": s.rhs.map(estimate),
            "gap": s.gap.map(estimate),
            "j_candidate": estimate(s.j_candidate),
            "j_competitor": estimate(s.j_competitor),
            "cost_gap": estimate(s.cost_gap),
        });
    }
    run.json("summary", &summary)?;
    run.note(format!(
        "spike: {:.1}% of cells violate; stationarity: {:.1}%",
        100.0 * spike.fraction_violating(),
        100.0 * stationarity.fraction_violating()
    ));
    run.text("footer.txt", &format!("{}\n", smp::FOOTER))?;
    Ok(())
}

pub fn variation_study(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let coeffs = cfg.coefficients();
    let policy = cfg.policy()?;
    let b = bundle(cfg, run, &policy)?;
    let opts = options(cfg);
    let p = solve_first_adjoint(&coeffs, &policy, &b, &opts)?;
    let eta = solve_eta(&coeffs, &policy, &b, &p, &opts)?;
    let mut rows = Vec::new();
    let mut coupled = Vec::new();
    let mut expansions = Vec::new();
    for &d in &cfg.directions {
        run.note(format!("direction {}", d.name()));
        let convex = ConvexSpec::new(policy.clone(), d, cfg.epsilons.clone());
        let j1 = first_variation_j(&coeffs, &convex, &b, &p)?;
        let j2 = second_variation_j(&coeffs, &convex, &b, &p, &eta)?;
        for (order, v) in [(1, j1), (2, j2)] {
            rows.push(vec![
                d.name(),
                order.to_string(),
                num(v.direct.value),
                num(v.direct.std_error),
                num(v.adjoint.value),
                num(v.adjoint.std_error),
                num(v.solver_error),
                (v.agree(3.0) as u8).to_string(),
            ]);
        }
        for c in coupled_costs_on(&coeffs, &convex, &b.setup)? {
            coupled.push(vec![
                d.name(),
                num(c.epsilon),
                num(c.base.value),
                num(c.perturbed.value),
                num(c.difference.value),
                num(c.difference.std_error),
            ]);
        }
        let positive: Vec<f64> = cfg.epsilons.iter().copied().filter(|e| *e > 0.0).collect();
        if positive.len() >= 2 {
            let study = expansion_study_on(&coeffs, &ConvexSpec::new(policy.clone(), d, positive), &b.setup)?;
            for (e, r) in study.epsilons.iter().zip(&study.remainders) {
                expansions.push(vec![d.name(), num(*e), num(*r), num(study.slope), num(study.r_squared)]);
            }
        }
    }
    run.csv(
        "variations",
        &["direction", "order", "direct", "se_direct", "adjoint", "se_adjoint", "solver_error", "agree_3se"],
        rows,
    )?;
    run.csv("coupled_costs", &["direction", "epsilon", "J_base", "J_perturbed", "difference", "se_difference"], coupled)?;
    run.csv("expansion", &["direction", "epsilon", "remainder", "slope", "r_squared"], expansions)?;

    let alternative = cfg.build_policy(&cfg.spike_v)?;
    let spike = SpikeSpec::new(policy.clone(), alternative, cfg.t_bar);
    run.note("spike remainder scaling");
    let mut scaling = Vec::new();
    for k in [1u32, 2] {
        let s = spike_remainder_scaling_on(&coeffs, &spike, &b.setup, &cfg.spike_epsilons, k)?;
        for (r, name) in ["x_eps-x", "x_eps-x-y", "x_eps-x-y-z"].iter().enumerate() {
            for (e, eps) in s.epsilons.iter().enumerate() {
                scaling.push(vec![
                    k.to_string(),
                    name.to_string(),
                    num(*eps),
                    num(s.moments[r][e]),
                    num(s.slopes[r]),
                    num(s.r_squared[r]),
                ]);
            }
        }
    }
    run.csv("spike_scaling", &["k", "remainder", "epsilon", "moment", "slope", "r_squared"], scaling)?;
    Ok(())
}

pub fn lq_demo(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    if !lq_optimal_run(cfg) {
        return Err(CliError::Validation("model: lq-demo needs model = \"lq\" and policy = \"lq-optimal\"".into()));
    }
    let coeffs = cfg.coefficients();
    let form = cfg.lq_form()?;
    let policy = form.policy();
    let b = bundle(cfg, run, &policy)?;
    let p = solve_first_adjoint(&coeffs, &policy, &b, &options(cfg))?;
    let mut stationarity = smp::convex_stationarity_scan(&coeffs, &policy, &b, &p)?;
    if let Some(coarse) = cfg.coarse() {
        let cb = bundle(&coarse, run, &policy)?;
        let cp = solve_first_adjoint(&coeffs, &policy, &cb, &options(&coarse))?;
        stationarity = stationarity.with_grid_refinement(&smp::convex_stationarity_scan(&coeffs, &policy, &cb, &cp)?)?;
    }
    let v = b.cost_estimate();
    let stat_max = stationarity.rows.iter().map(|r| r.mean.abs()).fold(0.0, f64::max);
    let p_resid = closed_form_residual(cfg, &b, &p)?;
    let times = b.times();
    let rows = (0..times.len()).map(|j| {
        let closed: RunningStats = (0..b.n_paths()).map(|i| form.adjoint(times[j], b.state.get(i, j))).collect();
        let py = p.mean_y(j);
        vec![num(times[j]), num(py.value), num(py.std_error), num(closed.mean()), num(p.discretization_error[j])]
    });
    run.csv("adjoint", &["t", "mean_p", "se_p", "mean_p_closed_form", "disc_err_p"], rows)?;
    run.csv("stationarity", &REPORT_HEADER, report_rows(&stationarity))?;
    let summary = json!({
        "c": form.c,
        "V_hat": v.value,
        "stderr": v.std_error,
        "stationarity_max_resid": stat_max,
        "stationarity_holds": stationarity.holds(),
        "p_closed_form_resid": p_resid,
    });
    run.json("summary", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("plain numbers serialize"));
    Ok(())
}

pub fn renewal_density(cfg: &ExperimentConfig, run: &mut Run) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for &x in &cfg.renewal_x {
        let exact = renewal_density_exact(&cfg.subordinator, x);
        for &delta in &cfg.renewal_deltas {
            let e = estimate_renewal_density(&cfg.subordinator, x, delta, cfg.n_paths, cfg.master_seed)?;
            rows.push(vec![num(x), num(delta), num(e.value), num(e.std_error), exact.map(num).unwrap_or_default()]);
        }
    }
    run.csv("renewal", &["x", "delta", "estimate", "std_error", "exact"], rows)?;
    Ok(())
}

/// Numerical failures exit with a distinct code from input errors.
pub fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidSpec { .. } | Error::UnsupportedLaw(_) | Error::Precondition(_) => CliError::Validation(e.to_string()),
        Error::NonContraction { .. } | Error::NonFinite { .. } | Error::Unbounded { .. } | Error::InsufficientHorizon { .. } => {
            CliError::Numerical(e.to_string())
        }
    }
}
