//! Acceptance suite. Runs every criterion at its stated size and tolerance,
//! prints one PASS/FAIL line each and exits non-zero if any fails.
//!
//! Pass criterion ids (`1`, `8a`, ...) as arguments to run a subset.

use std::time::Instant;

use subdiff::bsde::{
    contraction_threshold, first_adjoint_spec, picard_ratios, picard_solve, represent_martingale, solve_first_adjoint,
    solve_second_adjoint, BsdeOptions, BDG_CONSTANT,
};
use subdiff::forward_sde::{euler_open_loop, presets, BundleSetup};
use subdiff::lq::LqClosedForm;
use subdiff::smp::{classical, convex_stationarity_scan, default_u_grid, spike_condition_scan};
use subdiff::subdiffusion::{geometric_subdiffusion, sample_subdiffusion_path, uniform_grid};
use subdiff::subordinator::{estimate_renewal_density, hit_probability, invert_on_grid, sample_to_level};
use subdiff::variation::{coupled_costs_on, expansion_study_on, spike_remainder_scaling_on, ConvexSpec, Direction, SpikeSpec};
use subdiff::{ControlDomain, ControlPolicy, Exact, Scalar, SubordinatorSpec, TrajectoryBundle};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn cp() -> SubordinatorSpec {
    SubordinatorSpec::compound_poisson_exp(1.0, 1.0, 1.0).unwrap()
}

fn lq_form() -> LqClosedForm {
    LqClosedForm::new(1.0, 0.25, 0.0).unwrap()
}

/// Criteria 1 and 2 share one optimal run.
struct LqRun {
    bundle: TrajectoryBundle,
    p: subdiff::bsde::BsdeSolution,
}

fn lq_run() -> LqRun {
    let form = lq_form();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 400), 0.0, form.a, 2024, 20_000).unwrap();
    let bundle = TrajectoryBundle::simulate(&presets::lq(), &form.policy(), setup).unwrap();
    let p = solve_first_adjoint(&presets::lq(), &form.policy(), &bundle, &BsdeOptions::default()).unwrap();
    LqRun { bundle, p }
}

fn c1_adjoint_identity(run: &LqRun) -> Outcome {
    let form = lq_form();
    let (b, p) = (&run.bundle, &run.p);
    let max_psi = b.times().iter().filter(|t| **t >= form.a).map(|t| form.psi(*t).abs()).fold(0.0, f64::max);
    let mut after: f64 = 0.0;
    let mut before: f64 = 0.0;
    for (j, &t) in b.times().iter().enumerate() {
        if t >= form.a {
            let dev = (0..b.n_paths())
                .map(|i| p.y.get(i, j) - form.phi(t) * b.state.get(i, j) - form.psi(t))
                .sum::<f64>()
                / b.n_paths() as f64;
            after = after.max(dev.abs());
        }
        if t <= form.a {
            let target = form.c * (-t).exp();
            before = before.max((0..b.n_paths()).map(|i| (p.y.get(i, j) - target).abs()).fold(0.0, f64::max));
        }
    }
    let pass = after <= 0.02 * max_psi && before <= 0.02 * form.c;
    outcome(
        pass,
        format!(
            "max|mean(p - phi x - psi)| = {after:.3e} (limit {:.3e}); max|p - c e^-t| on [0,a] = {before:.3e} (limit {:.3e})",
            0.02 * max_psi,
            0.02 * form.c
        ),
    )
}

fn c2_stationarity(run: &LqRun) -> Outcome {
    let form = lq_form();
    // The combined error adds the time-discretization error, estimated from
    // the same scan on a grid with half the steps.
    let setup = BundleSetup { grid: uniform_grid(1.0, 200), ..run.bundle.setup.clone() };
    let coarse = TrajectoryBundle::simulate(&presets::lq(), &form.policy(), setup).unwrap();
    let pc = solve_first_adjoint(&presets::lq(), &form.policy(), &coarse, &BsdeOptions::default()).unwrap();
    let rc = convex_stationarity_scan(&presets::lq(), &form.policy(), &coarse, &pc).unwrap();
    let r = convex_stationarity_scan(&presets::lq(), &form.policy(), &run.bundle, &run.p)
        .unwrap()
        .with_grid_refinement(&rc)
        .unwrap();
    let worst = r
        .rows
        .iter()
        .max_by(|a, b| (a.mean.abs() / a.combined_error()).total_cmp(&(b.mean.abs() / b.combined_error())))
        .unwrap();
    let bad = r.rows.iter().filter(|row| row.mean.abs() > 3.0 * row.combined_error()).count();
    outcome(
        bad == 0,
        format!(
            "{bad} of {} interior times beyond 3 combined errors; worst t = {:.4}: |G| = {:.3e}, combined error {:.3e} (MC {:.3e}, solver {:.3e})",
            r.rows.len(),
            worst.t,
            worst.mean.abs(),
            worst.combined_error(),
            worst.std_error,
            worst.solver_error
        ),
    )
}

fn c3_ordering() -> Outcome {
    let form = lq_form();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 400), 0.0, form.a, 77, 20_000).unwrap();
    let eps = vec![-0.2, -0.1, -0.05, 0.05, 0.1, 0.2];
    let mut failures = Vec::new();
    let mut weakest = f64::INFINITY;
    for d in Direction::library() {
        let spec = ConvexSpec::new(form.policy(), d, eps.clone());
        for c in coupled_costs_on(&presets::lq(), &spec, &setup).unwrap() {
            let z = c.difference.value / c.difference.std_error;
            let ok = if c.epsilon.abs() == 0.2 { z > 3.0 } else { z >= -3.0 };
            if c.epsilon.abs() == 0.2 {
                weakest = weakest.min(z);
            }
            if !ok {
                failures.push(format!("{} eps={} z={z:.2}", d.name(), c.epsilon));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("24 coupled comparisons; weakest |eps|=0.2 margin {weakest:.1} sigma; failures: {failures:?}"),
    )
}

fn c4_inverse_exactness() -> Outcome {
    let specs = [cp(), SubordinatorSpec::compound_poisson_exp(0.5, 3.0, 0.4).unwrap()];
    let grid: Vec<f64> = uniform_grid(2.0, 256);
    let xgrid: Vec<Exact> = grid.iter().map(|t| Exact::from_f64_exact(*t)).collect();
    let (mut violations, mut float_violations, mut flat, mut steps) = (0, 0, 0, 0);
    for (s, spec) in specs.iter().enumerate() {
        for i in 0..1000 {
            let path = sample_to_level(spec, 2.0, 40 + s as u64, i).unwrap();
            let exact = invert_on_grid(&path.to_exact(), &xgrid, &Exact::from_f64_exact(0.25)).unwrap().audit();
            let float = invert_on_grid(&path, &grid, &0.25).unwrap().audit();
            violations += exact.violations();
            float_violations += float.violations();
            flat += exact.flat_steps;
            steps += exact.steps;
        }
    }
    outcome(
        violations == 0 && flat > 0,
        format!(
            "2 x 1000 paths, {steps} exact steps ({flat} flat): {violations} violations in exact arithmetic \
             (f64 inversion, informational: {float_violations} rounding-level mismatches)"
        ),
    )
}

/// Renewal density of CP(rate 1, Exp(1)) with unit drift.
fn theta(x: f64) -> f64 {
    0.5 * (1.0 + (-2.0 * x).exp())
}

fn c5_renewal() -> Outcome {
    let spec = cp();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut prev: Option<subdiff::Estimate> = None;
    for (k, delta) in [0.1, 0.05, 0.025].into_iter().enumerate() {
        let e = estimate_renewal_density(&spec, 0.0, delta, 100_000, 500 + k as u64).unwrap();
        // Average of the density over [0, delta].
        let target = 0.5 + (1.0 - (-2.0 * delta).exp()) / (4.0 * delta);
        let near = e.within(target, 3.0);
        let toward = match prev {
            Some(p) => e.value - p.value >= -3.0 * e.std_error.hypot(p.std_error) && (1.0 - e.value).abs() <= (1.0 - p.value).abs() + 3.0 * e.std_error.hypot(p.std_error),
            None => true,
        };
        pass &= near && toward;
        lines.push(format!("delta={delta}: {:.4}+-{:.4} (avg density {target:.4})", e.value, e.std_error));
        prev = Some(e);
    }
    for (k, x) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let h = hit_probability(&spec, x, 100_000, 600 + k as u64).unwrap();
        // Central difference quotient over [x - d/2, x + d/2].
        let d = 0.02;
        let r = estimate_renewal_density(&spec, x - 0.5 * d, d, 100_000, 700 + k as u64).unwrap();
        let kappa = spec.kappa;
        let ok = (h.value - kappa * r.value).abs() <= 3.0 * h.std_error.hypot(kappa * r.std_error);
        pass &= ok;
        lines.push(format!("x={x}: hit {:.4}+-{:.4}, kappa*theta_hat {:.4}+-{:.4} (exact {:.4})", h.value, h.std_error, kappa * r.value, kappa * r.std_error, kappa * theta(x)));
    }
    outcome(pass, lines.join("; "))
}

fn c6_representation() -> Outcome {
    let zero = ControlPolicy::constant(0.0, ControlDomain::real_line()).unwrap();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 100), 0.0, 0.0, 61, 5000).unwrap();
    let b = TrajectoryBundle::simulate(&presets::lq(), &zero, setup).unwrap();
    let m = b.times().len();
    let xt = b.x.column(m - 1);
    let rep = represent_martingale(&xt, &b, 3).unwrap();
    // H - 1 in the integrand norm E sum (H - 1)^2 dL, and pointwise.
    let mut worst: f64 = 0.0;
    let mut norm = 0.0;
    for i in 0..b.n_paths() {
        for j in 0..m - 1 {
            let dl = b.dl.get(i, j);
            if dl > 0.0 {
                let d = rep.h.get(i, j) - 1.0;
                worst = worst.max(d.abs());
                norm += d * d * dl;
            }
        }
    }
    norm /= b.n_paths() as f64;
    let setup = BundleSetup::new(SubordinatorSpec::pure_drift(1.0).unwrap(), uniform_grid(1.0, 100), 0.0, 0.0, 62, 5000).unwrap();
    let bb = TrajectoryBundle::simulate(&presets::lq(), &zero, setup).unwrap();
    let sq: Vec<f64> = bb.x.column(m - 1).iter().map(|x| x * x).collect();
    let r1 = represent_martingale(&sq, &bb, 1).unwrap().residual_variance;
    let r3 = represent_martingale(&sq, &bb, 3).unwrap().residual_variance;
    let pass = norm < 1e-10 && rep.residual_variance < 1e-10 && r1 >= 10.0 * r3;
    outcome(
        pass,
        format!(
            "X_T: E sum (H - 1)^2 dL = {norm:.2e} (pointwise max {worst:.2e}), residual {:.2e}; X_T^2: residual degree 1 {r1:.3e}, degree 3 {r3:.3e} (ratio {:.1})",
            rep.residual_variance,
            r1 / r3
        ),
    )
}

fn c7_picard() -> Outcome {
    let m = presets::lq();
    let form = lq_form();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 200), 0.0, form.a, 71, 4000).unwrap();
    let b = TrajectoryBundle::simulate(&m, &form.policy(), setup).unwrap();
    let threshold = contraction_threshold(m.lipschitz, b.drift(), 1.0, BDG_CONSTANT);
    let opts = BsdeOptions { beta: Some(2.0 * threshold), richardson: false, ..BsdeOptions::default() };
    let spec = first_adjoint_spec(&m, &b);
    let sol = picard_solve(&spec, &b, &opts, 40, 1e-12).unwrap();
    let ratios = picard_ratios(&sol.picard_norms);
    let (mut run, mut best) = (0, 0);
    for r in &ratios {
        run = if *r <= 0.7 { run + 1 } else { 0 };
        best = best.max(run);
    }
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(best >= 4, format!("beta = {:.0}; ratios [{}]; longest run <= 0.7: {best}", 2.0 * threshold, shown.join(", ")))
}

fn spike_study() -> subdiff::variation::SpikeScaling {
    let form = lq_form();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 512), 0.0, form.a, 81, 100_000).unwrap();
    let v = ControlPolicy::constant(1.0, ControlDomain::real_line()).unwrap();
    let spike = SpikeSpec::new(form.policy(), v, 0.5);
    let eps: Vec<f64> = (3..=7).map(|k| 0.5f64.powi(k)).collect();
    spike_remainder_scaling_on(&presets::lq(), &spike, &setup, &eps, 1).unwrap()
}

fn c8a(s: &subdiff::variation::SpikeScaling) -> Outcome {
    let slope = s.slopes[0];
    outcome(
        (0.8..=1.2).contains(&slope),
        format!("slope of sup E|x_eps - x_bar|^2 = {slope:.3} (r2 {:.4}); moments [{}]", s.r_squared[0], sci(&s.moments[0])),
    )
}

fn c8b(s: &subdiff::variation::SpikeScaling) -> Outcome {
    let slope = s.slopes[1];
    outcome(
        (1.8..=2.2).contains(&slope),
        format!("slope of sup E|x_eps - x_bar - y_eps|^2 = {slope:.3} (r2 {:.4}); moments [{}]", s.r_squared[1], sci(&s.moments[1])),
    )
}

fn c9_expansion() -> Outcome {
    let m = presets::nonlinear();
    let pol = ControlPolicy::new("linear-feedback", ControlDomain::real_line(), 0.0, |i| -0.5 * i.state, |_| 0.0).unwrap();
    let setup = BundleSetup::new(cp(), uniform_grid(1.0, 128), 0.0, 0.0, 91, 4000).unwrap();
    let eps: Vec<f64> = (2..=5).map(|k| 0.5f64.powi(k)).collect();
    let mut good = 0;
    let mut lines = Vec::new();
    for d in Direction::library() {
        let st = expansion_study_on(&m, &ConvexSpec::new(pol.clone(), d, eps.clone()), &setup).unwrap();
        if st.slope > 2.0 {
            good += 1;
        }
        lines.push(format!("{}: {:.3}", d.name(), st.slope));
    }
    outcome(good >= 3, format!("slopes {}; {good} of 4 above 2", lines.join(", ")))
}

fn c10_classical() -> Outcome {
    let m = presets::nonlinear();
    let pol = ControlPolicy::new("linear-feedback", ControlDomain::real_line(), 0.0, |i| -0.5 * i.state, |_| 0.0).unwrap();
    let setup = BundleSetup::new(SubordinatorSpec::pure_drift(1.0).unwrap(), uniform_grid(1.0, 50), 0.0, 0.0, 101, 2000).unwrap();
    let b = TrajectoryBundle::simulate(&m, &pol, setup).unwrap();
    let opts = BsdeOptions::degree(3);
    let p = solve_first_adjoint(&m, &pol, &b, &opts).unwrap();
    let pp = solve_second_adjoint(&m, &pol, &b, &p, &opts).unwrap();
    let grid = default_u_grid(&ControlDomain::real_line(), -2.0, 2.0);
    let spike = spike_condition_scan(&m, &pol, &b, &p, &pp, &grid).unwrap();
    let spike_c = classical::spike_scan(&m, &b, &p, &pp, &grid).unwrap();
    let conv = convex_stationarity_scan(&m, &pol, &b, &p).unwrap();
    let conv_c = classical::stationarity_scan(&m, &b, &p).unwrap();
    let same_spike = spike.rows == spike_c;
    let same_conv = conv.rows == conv_c;
    outcome(
        same_spike && same_conv,
        format!("{} spike rows identical: {same_spike}; {} stationarity rows identical: {same_conv}", spike_c.len(), conv_c.len()),
    )
}

fn c11_geometric() -> Outcome {
    let (mu, sigma, s0) = (0.5, 0.8, 1.0);
    let m = presets::geometric(mu, sigma);
    let mut errs = Vec::new();
    for (k, n) in [32, 64, 128].into_iter().enumerate() {
        let grid = uniform_grid(1.0, n);
        let mut sum = 0.0;
        let paths = 20_000;
        for i in 0..paths {
            let d = sample_subdiffusion_path(&cp(), s0, 0.0, &grid, 110 + k as u64, i).unwrap();
            let exact = *geometric_subdiffusion(&d, s0, mu, sigma).unwrap().last().unwrap();
            let euler = *euler_open_loop(&m, &vec![0.0; d.len()], &d).unwrap().last().unwrap();
            sum += (euler - exact).abs();
        }
        errs.push(sum / paths as f64);
    }
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[1] / w[0]).collect();
    let pass = ratios.iter().all(|r| (0.55..=0.85).contains(r));
    outcome(pass, format!("strong errors [{}]; ratios {ratios:.3?}", sci(&errs)))
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id || id.starts_with(w.as_str()));
    let mut results: Vec<(&str, Outcome, f64)> = Vec::new();
    let mut record = |id: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(id) {
            let t0 = Instant::now();
            let o = f();
            let secs = t0.elapsed().as_secs_f64();
            println!("criterion {id:>3}: {} [{secs:.1}s] {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((id, o, secs));
        }
    };
    let run = if want("1") || want("2") { Some(lq_run()) } else { None };
    if let Some(run) = &run {
        record("1", &mut || c1_adjoint_identity(run));
        record("2", &mut || c2_stationarity(run));
    }
    drop(run);
    record("3", &mut c3_ordering);
    record("4", &mut c4_inverse_exactness);
    record("5", &mut c5_renewal);
    record("6", &mut c6_representation);
    record("7", &mut c7_picard);
    if want("8a") || want("8b") {
        let s = spike_study();
        record("8a", &mut || c8a(&s));
        record("8b", &mut || c8b(&s));
    }
    record("9", &mut c9_expansion);
    record("10", &mut c10_classical);
    record("11", &mut c11_geometric);
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
