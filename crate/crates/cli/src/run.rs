//! Command dispatch.

use std::time::Instant;

use mfbdsde_core::reduce::{log_log_slope, mean_se, mean_var, pairwise_mean};
use mfbdsde_core::{
    build_base, check_h1, cost_with_se, duality_check, evaluate_u, gateaux_check, lq_solve, lq_verify, mp_residual,
    parse, sample_ensemble, solve_adjoint, solve_forward_dsde, solve_mf_bdsde, solve_state, solve_variational,
    Bindings, ControlPath, ControlProblem, PathBundle, PicardTrace, ScenarioEnsemble, TimeGrid, Var, XiMode,
};

use crate::config::{Axis, Command, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::record::{ResultRecord, StudyRow, StudyTable};

pub fn ensemble(cfg: &ExperimentConfig) -> CliResult<ScenarioEnsemble> {
    let grid = TimeGrid::horizon(cfg.horizon, cfg.n_steps)?;
    Ok(sample_ensemble(grid, cfg.m_outer, cfg.k_inner, cfg.seed)?)
}

/// Mean and standard error of a per-particle quantity: across group means
/// when there are several backward-driver groups, otherwise across
/// particles.
pub fn mc_mean(values: &[f64], ens: &ScenarioEnsemble) -> (f64, f64) {
    if ens.m_outer() > 1 {
        let groups: Vec<f64> = (0..ens.m_outer()).map(|g| pairwise_mean(&values[ens.group_range(g)])).collect();
        (pairwise_mean(values), mean_se(&groups).1)
    } else {
        (pairwise_mean(values), mean_se(values).1)
    }
}

fn push_paths(rec: &mut ResultRecord, b: &PathBundle) {
    let n = b.grid.n_points();
    rec.push_series("t", b.grid.points());
    rec.push_series("Y_mean", (0..n).map(|i| b.mean_y(i)).collect());
    rec.push_series("Y_var", (0..n).map(|i| mean_var(b.y.at(i)).1).collect());
    rec.push_series("Z_mean", (0..n).map(|i| b.mean_z(i)).collect());
}

fn control_problem(cfg: &ExperimentConfig) -> CliResult<ControlProblem> {
    let (lo, hi) = cfg
        .u_box
        .ok_or_else(|| CliError::config(format!("`{}` needs a control block ([control] u_lo, u_hi)", cfg.command.name())))?;
    Ok(ControlProblem::new(cfg.coeffs.clone(), lo, hi)?)
}

fn direction(cfg: &ExperimentConfig, ens: &ScenarioEnsemble) -> CliResult<ControlPath> {
    let e = parse(&cfg.direction)?;
    let path: Vec<f64> = ens
        .grid()
        .points()
        .iter()
        .map(|&t| e.eval(&Bindings::new().with(Var::T, t)))
        .collect::<Result<_, _>>()?;
    Ok(ControlPath::deterministic(ens.n_particles(), &path))
}

/// The backward solution a `solve` reports: the base population for
/// problems with a forward state, the state at the nominal control for
/// control problems, the plain mean-field solve otherwise.
fn backward_solve(cfg: &ExperimentConfig, ens: &ScenarioEnsemble) -> CliResult<(PathBundle, PicardTrace)> {
    if let Some(x0) = cfg.x0 {
        let base = build_base(&cfg.coeffs, x0, ens, &cfg.solver, cfg.picard_tol, cfg.max_iter)?;
        return Ok((base.yz, base.trace));
    }
    if cfg.u_box.is_some() {
        let prob = control_problem(cfg)?;
        let u = ControlPath::constant(ens.n_particles(), ens.grid().n_points(), cfg.control_u);
        return Ok(solve_state(&prob, &u, ens, &cfg.solver, cfg.picard_tol, cfg.max_iter)?);
    }
    Ok(solve_mf_bdsde(&cfg.coeffs, ens, &cfg.solver, cfg.picard_tol, cfg.max_iter)?)
}

fn solve(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> CliResult<()> {
    let ens = ensemble(cfg)?;
    let (b, trace) = backward_solve(cfg, &ens)?;
    let (y0, y0_se) = mc_mean(b.y.at(0), &ens);
    let (z0, z0_se) = mc_mean(b.z.at(0), &ens);
    rec.push("Y0_mean", y0, Some(y0_se));
    rec.push("Z0_mean", z0, Some(z0_se));
    if let Some(o) = cfg.oracle {
        rec.push("oracle", o, None);
        rec.push("Y0_abs_error", (y0 - o).abs(), Some(y0_se));
    }
    if cfg.u_box.is_some() && cfg.x0.is_none() {
        let prob = control_problem(cfg)?;
        let u = ControlPath::constant(ens.n_particles(), ens.grid().n_points(), cfg.control_u);
        let (j, se) = cost_with_se(&prob, &u, &b)?;
        rec.push("J", j, Some(se));
    }
    rec.push("h1_margin", check_h1(&cfg.coeffs.lipschitz).margin, None);
    rec.push("picard_iterations", trace.iterations as f64, None);
    rec.push("picard_last_distance", trace.last_distance(), None);
    push_paths(rec, &b);
    rec.trace = Some(trace);
    Ok(())
}

fn forward(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> CliResult<()> {
    if !matches!(cfg.coeffs.xi, XiMode::Constant(_)) {
        return Err(CliError::config("forward needs a constant initial value (xi = number)"));
    }
    let ens = ensemble(cfg)?;
    let (b, trace) = solve_forward_dsde(&cfg.coeffs, &ens, &cfg.solver, cfg.picard_tol, cfg.max_iter)?;
    let n = b.grid.n_steps();
    let (pt, pt_se) = mc_mean(b.y.at(n), &ens);
    rec.push("P0_mean", b.mean_y(0), None);
    rec.push("PT_mean", pt, Some(pt_se));
    rec.push("picard_iterations", trace.iterations as f64, None);
    rec.push("picard_last_distance", trace.last_distance(), None);
    push_paths(rec, &b);
    rec.trace = Some(trace);
    Ok(())
}

fn spde_eval(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> CliResult<()> {
    let x0 = cfg.x0.ok_or_else(|| CliError::config("spde-eval needs a forward state; set x0 in [coefficients]"))?;
    if cfg.query_x.is_empty() {
        return Err(CliError::config("spde-eval needs at least one query point x"));
    }
    let ens = ensemble(cfg)?;
    let base = build_base(&cfg.coeffs, x0, &ens, &cfg.solver, cfg.picard_tol, cfg.max_iter)?;
    let mut means = Vec::new();
    let mut ses = Vec::new();
    let mut t_used = cfg.query_t;
    for &x in &cfg.query_x {
        let s = evaluate_u(cfg.query_t, x, &base, &cfg.coeffs, &cfg.solver)?;
        rec.push(format!("u({},{})", s.t, x), s.mean, Some(s.std_err));
        if let Some(o) = cfg.oracle.filter(|_| s.t == 0.0 && x == x0) {
            rec.push("oracle", o, None);
            rec.push("u_abs_error", (s.mean - o).abs(), Some(s.std_err));
        }
        t_used = s.t;
        means.push(s.mean);
        ses.push(s.std_err);
    }
    rec.push("t", t_used, None);
    rec.push_series("x", cfg.query_x.clone());
    rec.push_series("u_mean", means);
    rec.push_series("u_std_err", ses);
    rec.trace = Some(base.trace);
    Ok(())
}

fn control_check(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> CliResult<()> {
    let prob = control_problem(cfg)?;
    if cfg.k_inner != 1 {
        return Err(CliError::config("control-check runs the adjoint backwards in time and needs k_inner = 1"));
    }
    let ens = ensemble(cfg)?;
    let (tol, it) = (cfg.inner_tol(), cfg.inner_iter());
    let u = ControlPath::constant(ens.n_particles(), ens.grid().n_points(), cfg.control_u);
    let dir = direction(cfg, &ens)?;
    let g = gateaux_check(&prob, &u, &dir, &cfg.eps_list, &ens, &cfg.solver, tol, it)?;
    let (hat, trace) = solve_state(&prob, &u, &ens, &cfg.solver, tol, it)?;
    let (var, _) = solve_variational(&prob, &u, &hat, &dir, &ens, &cfg.solver, tol, it)?;
    let (adj, _) = solve_adjoint(&prob, &u, &hat, &ens, &cfg.solver, tol, it)?;
    let d = duality_check(&prob, &u, &hat, &var, &adj, &dir)?;
    let mp = mp_residual(&prob, &u, &adj, &hat, None, cfg.mp_tol)?;
    let (j, j_se) = cost_with_se(&prob, &u, &hat)?;
    let dj = mfbdsde_core::cost_derivative(&prob, &u, &hat, &var, &dir)?;
    rec.push("J", j, Some(j_se));
    rec.push("dJ", dj, None);
    rec.push("gateaux_slope", g.slope, None);
    rec.push("gateaux_max_residual", g.residual.iter().copied().fold(0.0, f64::max), None);
    rec.push("duality_direct", d.direct, Some(d.std_err));
    rec.push("duality_integral", d.via_integral, Some(d.std_err));
    rec.push("duality_gap", d.gap(), Some(d.std_err));
    rec.push("duality_tolerance", d.tolerance(), None);
    rec.push("mp_global_min", mp.global_min, None);
    rec.push("mp_violation_fraction", mp.violation_fraction, None);
    rec.push_series("eps", g.eps.clone());
    rec.push_series("sup_sq_diff", g.sup_sq_diff.clone());
    rec.push_series("quotient_residual", g.residual.clone());
    rec.trace = Some(trace);
    Ok(())
}

fn lq(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> CliResult<()> {
    let c = cfg.lq.as_ref().ok_or_else(|| CliError::config("lq needs an [lq] block or an lq preset"))?;
    let ens = ensemble(cfg)?;
    let sol = lq_solve(c, &ens, &cfg.solver, cfg.picard_tol, cfg.max_iter.max(50))?;
    let rep = lq_verify(&sol, c, &ens, cfg.n_perturb, cfg.perturb_eps, cfg.seed, &cfg.solver, cfg.picard_tol)?;
    let n = sol.uhat.v.n_points();
    let (u, u_se) = mc_mean(sol.uhat.v.as_slice(), &ens);
    let (y0, y0_se) = mc_mean(sol.state.y.at(0), &ens);
    let prob = mfbdsde_core::lq_assemble(c)?;
    let (j, j_se) = cost_with_se(&prob, &sol.uhat, &sol.state)?;
    rec.push("u_mean", u, Some(u_se));
    rec.push("Y0_mean", y0, Some(y0_se));
    rec.push("J", j, Some(j_se));
    if let Some(o) = cfg.oracle {
        rec.push("oracle", o, None);
        rec.push("Y0_abs_error", (y0 - o).abs(), Some(y0_se));
    }
    rec.push("fixed_point_residual", sol.fixed_point_residual, None);
    rec.push("min_cost_delta", rep.min_delta, None);
    rec.push("mp_global_min", rep.mp.global_min, None);
    rec.push("mp_violation_fraction", rep.mp.violation_fraction, None);
    rec.push("iterations", sol.iterations as f64, None);
    rec.push("damped", if sol.damped { 1.0 } else { 0.0 }, None);
    rec.push_series("t", sol.state.grid.points());
    rec.push_series("u_mean", (0..n).map(|i| pairwise_mean(sol.uhat.v.at(i))).collect());
    rec.push_series("Y_mean", (0..n).map(|i| sol.state.mean_y(i)).collect());
    rec.push_series("cost_deltas", rep.deltas);
    rec.trace = Some(PicardTrace { distances: sol.updates, iterations: sol.iterations, converged: true });
    Ok(())
}

/// The quantity compared with a preset's oracle.
fn oracle_estimate(cfg: &ExperimentConfig) -> CliResult<f64> {
    let ens = ensemble(cfg)?;
    if let Some(c) = &cfg.lq {
        let sol = lq_solve(c, &ens, &cfg.solver, cfg.picard_tol, cfg.max_iter.max(50))?;
        return Ok(sol.state.mean_y(0));
    }
    let (b, _) = backward_solve(cfg, &ens)?;
    Ok(b.mean_y(0))
}

fn shape_for(cfg: &ExperimentConfig, n: usize) -> CliResult<(usize, usize)> {
    match (cfg.m_outer, cfg.k_inner) {
        (_, 1) => Ok((n, 1)),
        (1, _) => Ok((1, n)),
        (m, _) if n % m == 0 && n >= m => Ok((m, n / m)),
        (m, _) => Err(CliError::config(format!("particle count {n} is not a multiple of the {m} groups"))),
    }
}

fn integer_value(axis: Axis, v: f64) -> CliResult<usize> {
    if v.fract() == 0.0 && v >= 1.0 {
        Ok(v as usize)
    } else {
        Err(CliError::config(format!("{} values must be positive integers, got {v}", axis.name())))
    }
}

pub fn convergence_study(cfg: &ExperimentConfig) -> CliResult<StudyTable> {
    let axis = cfg.axis.ok_or_else(|| CliError::config("convergence-study needs an axis (steps, particles, epsilon)"))?;
    if cfg.values.len() < 3 {
        return Err(CliError::config("convergence-study needs at least three axis values"));
    }
    if axis == Axis::Epsilon {
        let prob = control_problem(cfg)
            .map_err(|_| CliError::config("axis=epsilon needs a control block ([control] u_lo, u_hi)"))?;
        let ens = ensemble(cfg)?;
        let u = ControlPath::constant(ens.n_particles(), ens.grid().n_points(), cfg.control_u);
        let dir = direction(cfg, &ens)?;
        let g = gateaux_check(&prob, &u, &dir, &cfg.values, &ens, &cfg.solver, cfg.inner_tol(), cfg.inner_iter())?;
        let rows = (0..g.eps.len())
            .map(|i| StudyRow { value: g.eps[i], estimate: g.residual[i], std_err: None, error: g.sup_sq_diff[i] })
            .collect();
        return Ok(StudyTable { axis, rows, slope: Some(g.slope).filter(|s| s.is_finite()) });
    }
    let oracle = cfg.oracle.ok_or_else(|| CliError::config("convergence-study on this axis needs a preset with an oracle"))?;
    let mut rows = Vec::with_capacity(cfg.values.len());
    for &v in &cfg.values {
        let n = integer_value(axis, v)?;
        let mut c = cfg.clone();
        match axis {
            Axis::Steps => c.n_steps = n,
            Axis::Particles => (c.m_outer, c.k_inner) = shape_for(cfg, n)?,
            Axis::Epsilon => unreachable!(),
        }
        let estimates: Vec<f64> = (0..cfg.replicates as u64)
            .map(|r| {
                c.seed = cfg.seed.wrapping_add(r);
                oracle_estimate(&c)
            })
            .collect::<CliResult<_>>()?;
        let sq: Vec<f64> = estimates.iter().map(|e| (e - oracle).powi(2)).collect();
        let (estimate, se) = mean_se(&estimates);
        rows.push(StudyRow { value: v, estimate, std_err: Some(se), error: pairwise_mean(&sq).sqrt() });
    }
    let errors: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let slope = if errors.iter().all(|&e| e > 0.0) { Some(log_log_slope(&cfg.values, &errors)) } else { None };
    Ok(StudyTable { axis, rows, slope })
}

fn run_inner(cfg: &ExperimentConfig) -> CliResult<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg.echo());
    match cfg.command {
        Command::Solve => solve(cfg, &mut rec)?,
        Command::Forward => forward(cfg, &mut rec)?,
        Command::SpdeEval => spde_eval(cfg, &mut rec)?,
        Command::ControlCheck => control_check(cfg, &mut rec)?,
        Command::Lq => lq(cfg, &mut rec)?,
        Command::ConvergenceStudy => {
            let t = convergence_study(cfg)?;
            if let Some(s) = t.slope {
                rec.push("slope", s, None);
            }
            rec.table = Some(t);
        }
    }
    rec.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Run one experiment, on a dedicated thread pool when a thread count is
/// configured.
pub fn run(cfg: &ExperimentConfig) -> CliResult<ResultRecord> {
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?
            .install(|| run_inner(cfg)),
        None => run_inner(cfg),
    }
}
