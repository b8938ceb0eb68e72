//! Optimal control of a mean-field backward doubly stochastic equation:
//! state, cost, variational and adjoint equations, the Hamiltonian, and
//! a checker for the maximum-principle inequality.
//!
//! `E'` integrates the second argument of a kernel `k(w, w')`, `E*` the
//! first. Both are computed against the particle population; `E*` is the
//! `E'` average of the kernel with primed and unprimed slots swapped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsde::{Estimator, LinearDriver, Markers, PathBundle, SolverConfig};
use crate::coeff::CoefficientSet;
use crate::dsl::{diff, Bindings, Expr, SeparableKernel, Var};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::meanfield::{average_each_member, PopulationSnapshot};
use crate::mf_solver::{picard, DriverFactory, MfSolve, PicardTrace};
use crate::reduce::{log_log_slope, mean_se, pairwise_mean, pairwise_sum};
use crate::scenario::ScenarioEnsemble;

/// A control problem with a box of admissible control values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub coeffs: CoefficientSet,
    pub u_lo: f64,
    pub u_hi: f64,
}

impl ControlProblem {
    pub fn new(coeffs: CoefficientSet, u_lo: f64, u_hi: f64) -> Result<Self> {
        if u_lo.is_nan() || u_hi.is_nan() || u_lo > u_hi {
            return Err(Error::invalid(format!("control box [{u_lo}, {u_hi}] is empty")));
        }
        coeffs.validate()?;
        Ok(Self { coeffs, u_lo, u_hi })
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.u_lo && v <= self.u_hi
    }

    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.u_lo, self.u_hi)
    }
}

/// Control values per particle and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub v: Field,
}

impl ControlPath {
    pub fn constant(n_particles: usize, n_points: usize, value: f64) -> Self {
        Self { v: Field::filled(n_particles, n_points, value) }
    }

    /// The same time path for every particle.
    pub fn deterministic(n_particles: usize, path: &[f64]) -> Self {
        Self { v: Field::from_fn(n_particles, path.len(), |_, i| path[i]) }
    }

    pub fn from_field(v: Field) -> Self {
        Self { v }
    }

    /// `self + eps * dir`.
    pub fn perturbed(&self, eps: f64, dir: &ControlPath) -> Result<ControlPath> {
        Ok(ControlPath { v: self.v.combine(1.0, &dir.v, eps)? })
    }

    pub fn check(&self, prob: &ControlProblem, ens: &ScenarioEnsemble) -> Result<()> {
        if self.v.n_particles() != ens.n_particles() || self.v.n_points() != ens.grid().n_points() {
            return Err(Error::shape("control path does not match the ensemble"));
        }
        if let Some(bad) = self.v.as_slice().iter().find(|&&x| !prob.contains(x)) {
            return Err(Error::invalid(format!(
                "control value {bad} outside [{}, {}]",
                prob.u_lo, prob.u_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointBundle {
    pub p: Field,
    pub q: Field,
}

/// Controlled state equation.
pub fn solve_state(
    prob: &ControlProblem,
    v: &ControlPath,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(PathBundle, PicardTrace)> {
    v.check(prob, ens)?;
    MfSolve::new(&prob.coeffs, ens, *cfg).tolerance(tol, max_iter).controls(&v.v).run()
}

fn snapshots(state: &PathBundle, v: &ControlPath) -> Vec<PopulationSnapshot> {
    (0..state.y.n_points())
        .map(|i| {
            let mut s = state.snapshot(i);
            s.v = Some(v.v.at(i).to_vec());
            s
        })
        .collect()
}

fn check_pair(state: &PathBundle, v: &ControlPath) -> Result<()> {
    if state.y.n_particles() != v.v.n_particles() || state.y.n_points() != v.v.n_points() {
        return Err(Error::shape("state and control differ in shape"));
    }
    Ok(())
}

/// `E int_0^T E' l dt + E E' h(Y_0, Y_0')`, left-endpoint rule.
pub fn cost(prob: &ControlProblem, v: &ControlPath, state: &PathBundle) -> Result<f64> {
    check_pair(state, v)?;
    let grid = state.grid;
    let snaps = snapshots(state, v);
    let l = SeparableKernel::compile(&prob.coeffs.l);
    let h = SeparableKernel::compile(&prob.coeffs.h);
    let running: Vec<f64> = (0..grid.n_steps())
        .map(|i| Ok(pairwise_mean(&average_each_member(&l, &snaps[i], grid.point(i), None)?)))
        .collect::<Result<_>>()?;
    let initial = pairwise_mean(&average_each_member(&h, &snaps[0], grid.point(0), None)?);
    Ok(grid.dt() * pairwise_sum(&running) + initial)
}

/// [`cost`] together with the standard error of the per-particle cost.
pub fn cost_with_se(prob: &ControlProblem, v: &ControlPath, state: &PathBundle) -> Result<(f64, f64)> {
    let j = cost(prob, v, state)?;
    let grid = state.grid;
    let snaps = snapshots(state, v);
    let l = SeparableKernel::compile(&prob.coeffs.l);
    let h = SeparableKernel::compile(&prob.coeffs.h);
    let mut per = average_each_member(&h, &snaps[0], grid.point(0), None)?;
    for i in 0..grid.n_steps() {
        for (a, b) in per.iter_mut().zip(average_each_member(&l, &snaps[i], grid.point(i), None)?) {
            *a += grid.dt() * b;
        }
    }
    Ok((j, mean_se(&per).1))
}

fn kernel_of(e: &Expr, var: Var) -> SeparableKernel {
    SeparableKernel::compile(&diff(e, var))
}

/// Kernel of `e_var(w*, w)` as a function of `(own = w, primed = w*)`.
fn star_kernel_of(e: &Expr, var: Var) -> SeparableKernel {
    SeparableKernel::compile(&diff(e, var).swap_primed())
}

fn rows_to_field(rows: Vec<Vec<f64>>) -> Result<Field> {
    Field::from_rows(rows)
}

fn per_step<F>(n_points: usize, f: F) -> Result<Field>
where
    F: Fn(usize) -> Result<Vec<f64>>,
{
    rows_to_field((0..n_points).map(f).collect::<Result<_>>()?)
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// `E'[k] * x` elementwise plus `E'[k' x']`.
fn linear_term(
    own_k: &SeparableKernel,
    primed_k: &SeparableKernel,
    snap: &PopulationSnapshot,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let mut out = average_each_member(own_k, snap, t, None)?;
    for (o, xi) in out.iter_mut().zip(x) {
        *o *= xi;
    }
    add_into(&mut out, &average_each_member(primed_k, snap, t, Some(x))?);
    Ok(out)
}

struct VariationalFactory {
    snaps: Vec<PopulationSnapshot>,
    times: Vec<f64>,
    af: Field,
    bf: Field,
    ag: Field,
    bg: Field,
    psi_f: Field,
    psi_g: Field,
    f_yp: SeparableKernel,
    f_zp: SeparableKernel,
    g_yp: SeparableKernel,
    g_zp: SeparableKernel,
}

impl VariationalFactory {
    fn source(&self, psi: &Field, k_yp: &SeparableKernel, k_zp: &SeparableKernel, frozen: &PathBundle) -> Result<Field> {
        per_step(self.times.len(), |i| {
            let mut c = psi.at(i).to_vec();
            let (s, t) = (&self.snaps[i], self.times[i]);
            add_into(&mut c, &average_each_member(k_yp, s, t, Some(frozen.y.at(i)))?);
            add_into(&mut c, &average_each_member(k_zp, s, t, Some(frozen.z.at(i)))?);
            Ok(c)
        })
    }
}

impl DriverFactory for VariationalFactory {
    type D = LinearDriver;

    fn build(&self, frozen: &PathBundle) -> Result<LinearDriver> {
        Ok(LinearDriver {
            af: Some(self.af.clone()),
            bf: Some(self.bf.clone()),
            cf: Some(self.source(&self.psi_f, &self.f_yp, &self.f_zp, frozen)?),
            ag: Some(self.ag.clone()),
            bg: Some(self.bg.clone()),
            cg: Some(self.source(&self.psi_g, &self.g_yp, &self.g_zp, frozen)?),
        })
    }
}

/// The derivative `(xi, eta)` of the state at `uhat` in direction `v_dir`:
/// a linear mean-field equation with zero terminal value.
#[allow(clippy::too_many_arguments)]
pub fn solve_variational(
    prob: &ControlProblem,
    uhat: &ControlPath,
    state_hat: &PathBundle,
    v_dir: &ControlPath,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(PathBundle, PicardTrace)> {
    check_pair(state_hat, uhat)?;
    check_pair(state_hat, v_dir)?;
    let snaps = snapshots(state_hat, uhat);
    let times = ens.grid().points();
    let np = ens.n_particles();
    let (tf, tg) = (&prob.coeffs.theta_f, &prob.coeffs.theta_g);
    let mean_of = |e: &Expr, var: Var| {
        let k = kernel_of(e, var);
        per_step(times.len(), |i| average_each_member(&k, &snaps[i], times[i], None))
    };
    let psi = |e: &Expr| {
        let (kv, kvp) = (kernel_of(e, Var::V), kernel_of(e, Var::Vp));
        per_step(times.len(), |i| linear_term(&kv, &kvp, &snaps[i], times[i], v_dir.v.at(i)))
    };
    let factory = VariationalFactory {
        af: mean_of(tf, Var::Y)?,
        bf: mean_of(tf, Var::Z)?,
        ag: mean_of(tg, Var::Y)?,
        bg: mean_of(tg, Var::Z)?,
        psi_f: psi(tf)?,
        psi_g: psi(tg)?,
        f_yp: kernel_of(tf, Var::Yp),
        f_zp: kernel_of(tf, Var::Zp),
        g_yp: kernel_of(tg, Var::Yp),
        g_zp: kernel_of(tg, Var::Zp),
        snaps,
        times,
    };
    let terminal = vec![0.0; np];
    picard(&factory, ens, &terminal, &Markers::from_ensemble(ens), cfg, tol, max_iter, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateauxReport {
    pub eps: Vec<f64>,
    /// `sup_t E|Y^eps - Yhat|^2` per `eps`.
    pub sup_sq_diff: Vec<f64>,
    /// `sup_t E|(Y^eps - Yhat)/eps - xi|^2` per `eps`.
    pub residual: Vec<f64>,
    /// Log-log slope of `sup_sq_diff` against `eps`; `NaN` when every
    /// difference vanishes.
    pub slope: f64,
}

fn sup_mean_sq(a: &Field, b: &Field, scale: f64, c: Option<&Field>) -> f64 {
    (0..a.n_points())
        .map(|i| {
            let sq: Vec<f64> = (0..a.n_particles())
                .map(|p| {
                    let d = (a.get(p, i) - b.get(p, i)) * scale - c.map_or(0.0, |c| c.get(p, i));
                    d * d
                })
                .collect();
            pairwise_mean(&sq)
        })
        .fold(0.0, f64::max)
}

/// Perturbation scaling of the state around `uhat` along `v_dir`.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_check(
    prob: &ControlProblem,
    uhat: &ControlPath,
    v_dir: &ControlPath,
    eps_list: &[f64],
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<GateauxReport> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(Error::invalid("eps values must be positive"));
    }
    let perturbed: Vec<ControlPath> = eps_list.iter().map(|&e| uhat.perturbed(e, v_dir)).collect::<Result<_>>()?;
    for p in &perturbed {
        p.check(prob, ens)?;
    }
    let (hat, _) = solve_state(prob, uhat, ens, cfg, tol, max_iter)?;
    let (var, _) = solve_variational(prob, uhat, &hat, v_dir, ens, cfg, tol, max_iter)?;
    let mut sup_sq_diff = Vec::with_capacity(eps_list.len());
    let mut residual = Vec::with_capacity(eps_list.len());
    for (&e, u) in eps_list.iter().zip(&perturbed) {
        let (ye, _) = solve_state(prob, u, ens, cfg, tol, max_iter)?;
        sup_sq_diff.push(sup_mean_sq(&ye.y, &hat.y, 1.0, None));
        residual.push(sup_mean_sq(&ye.y, &hat.y, 1.0 / e, Some(&var.y)));
    }
    let slope =
        if sup_sq_diff.iter().all(|&d| d > 0.0) { log_log_slope(eps_list, &sup_sq_diff) } else { f64::NAN };
    Ok(GateauxReport { eps: eps_list.to_vec(), sup_sq_diff, residual, slope })
}

/// Derivative of the cost along `v_dir` from the variational solution.
pub fn cost_derivative(
    prob: &ControlProblem,
    uhat: &ControlPath,
    state_hat: &PathBundle,
    var: &PathBundle,
    v_dir: &ControlPath,
) -> Result<f64> {
    check_pair(state_hat, uhat)?;
    let grid = state_hat.grid;
    let snaps = snapshots(state_hat, uhat);
    let l = &prob.coeffs.l;
    let pairs = [
        (kernel_of(l, Var::Y), kernel_of(l, Var::Yp), &var.y),
        (kernel_of(l, Var::Z), kernel_of(l, Var::Zp), &var.z),
        (kernel_of(l, Var::V), kernel_of(l, Var::Vp), &v_dir.v),
    ];
    let running: Vec<f64> = (0..grid.n_steps())
        .map(|i| {
            let t = grid.point(i);
            let mut acc = vec![0.0; state_hat.n_particles()];
            for (k, kp, x) in &pairs {
                add_into(&mut acc, &linear_term(k, kp, &snaps[i], t, x.at(i))?);
            }
            Ok(pairwise_mean(&acc))
        })
        .collect::<Result<_>>()?;
    let h = &prob.coeffs.h;
    let init = linear_term(&kernel_of(h, Var::Y), &kernel_of(h, Var::Yp), &snaps[0], grid.point(0), var.y.at(0))?;
    Ok(grid.dt() * pairwise_sum(&running) + pairwise_mean(&init))
}

/// `H = theta_f * p + theta_g * q + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    expr: Expr,
}

/// Arguments of the Hamiltonian: own state `(y1, z1, v1)`, population
/// state `(y2, z2, v2)` and the adjoint pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianArgs {
    pub t: f64,
    pub y1: f64,
    pub z1: f64,
    pub v1: f64,
    pub y2: f64,
    pub z2: f64,
    pub v2: f64,
    pub p: f64,
    pub q: f64,
}

impl HamiltonianArgs {
    pub fn bindings(&self) -> Bindings {
        Bindings::from_pairs(&[
            (Var::T, self.t),
            (Var::Y, self.y1),
            (Var::Z, self.z1),
            (Var::V, self.v1),
            (Var::Yp, self.y2),
            (Var::Zp, self.z2),
            (Var::Vp, self.v2),
            (Var::P, self.p),
            (Var::Q, self.q),
        ])
    }
}

impl Hamiltonian {
    pub fn new(coeffs: &CoefficientSet) -> Self {
        let expr = Expr::add(
            Expr::add(
                Expr::mul(coeffs.theta_f.clone(), Expr::var(Var::P)),
                Expr::mul(coeffs.theta_g.clone(), Expr::var(Var::Q)),
            ),
            coeffs.l.clone(),
        );
        Self { expr }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn partial_expr(&self, var: Var) -> Expr {
        diff(&self.expr, var)
    }

    pub fn value(&self, args: &HamiltonianArgs) -> Result<f64> {
        self.expr.eval(&args.bindings())
    }

    pub fn partial(&self, var: Var, args: &HamiltonianArgs) -> Result<f64> {
        self.partial_expr(var).eval(&args.bindings())
    }
}

pub fn hamiltonian(prob: &ControlProblem, args: &HamiltonianArgs) -> Result<f64> {
    Hamiltonian::new(&prob.coeffs).value(args)
}

pub fn hamiltonian_partial(prob: &ControlProblem, var: Var, args: &HamiltonianArgs) -> Result<f64> {
    Hamiltonian::new(&prob.coeffs).partial(var, args)
}

struct AdjointFactory {
    n: usize,
    snaps: Vec<PopulationSnapshot>,
    times: Vec<f64>,
    /// Solver-indexed coefficients of `p` and `q`.
    af: Field,
    bf: Field,
    ag: Field,
    bg: Field,
    /// Original-time sources without the carrier terms.
    cf0: Field,
    cg0: Field,
    f_star: [SeparableKernel; 2],
    g_star: [SeparableKernel; 2],
}

impl AdjointFactory {
    fn source(&self, base: &Field, ks: &[SeparableKernel; 2], p: &Field, q: &Field) -> Result<Field> {
        let f = per_step(self.n + 1, |i| {
            let mut c = base.at(i).to_vec();
            let (s, t) = (&self.snaps[i], self.times[i]);
            add_into(&mut c, &average_each_member(&ks[0], s, t, Some(p.at(i)))?);
            add_into(&mut c, &average_each_member(&ks[1], s, t, Some(q.at(i)))?);
            Ok(c)
        })?;
        Ok(f.reversed_in_time())
    }
}

impl DriverFactory for AdjointFactory {
    type D = LinearDriver;

    fn build(&self, frozen: &PathBundle) -> Result<LinearDriver> {
        let (p, q) = (frozen.y.reversed_in_time(), frozen.z.reversed_in_time());
        Ok(LinearDriver {
            af: Some(self.af.clone()),
            bf: Some(self.bf.clone()),
            cf: Some(self.source(&self.cf0, &self.f_star, &p, &q)?),
            ag: Some(self.ag.clone()),
            bg: Some(self.bg.clone()),
            cg: Some(self.source(&self.cg0, &self.g_star, &p, &q)?),
        })
    }
}

/// Adjoint forward equation along `(state_hat, uhat)`.
///
/// Solved as a backward equation on the time-reversed ensemble, which
/// needs `k_inner == 1`. With one particle per group the grouped estimator
/// is the identity, so the conditional expectations of that reversed
/// scheme are taken pathwise; `q` is then zero. This is exact when
/// `theta_g` vanishes, as in every control preset.
pub fn solve_adjoint(
    prob: &ControlProblem,
    uhat: &ControlPath,
    state_hat: &PathBundle,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(AdjointBundle, PicardTrace)> {
    check_pair(state_hat, uhat)?;
    let rev = ens.time_reverse()?;
    let grid = *ens.grid();
    let n = grid.n_steps();
    let times = grid.points();
    let snaps = snapshots(state_hat, uhat);
    let c = &prob.coeffs;
    let (tf, tg, l, h) = (&c.theta_f, &c.theta_g, &c.l, &c.h);
    let mean_of = |e: &Expr, var: Var| {
        let k = kernel_of(e, var);
        per_step(n + 1, |i| average_each_member(&k, &snaps[i], times[i], None))
    };
    let both = |e: &Expr, own: Var, primed: Var| {
        let (k, ks) = (kernel_of(e, own), star_kernel_of(e, primed));
        per_step(n + 1, |i| {
            let mut a = average_each_member(&k, &snaps[i], times[i], None)?;
            add_into(&mut a, &average_each_member(&ks, &snaps[i], times[i], None)?);
            Ok(a)
        })
    };
    let factory = AdjointFactory {
        n,
        af: mean_of(tf, Var::Y)?.reversed_in_time(),
        bf: mean_of(tg, Var::Y)?.reversed_in_time(),
        ag: mean_of(tf, Var::Z)?.reversed_in_time(),
        bg: mean_of(tg, Var::Z)?.reversed_in_time(),
        cf0: both(l, Var::Y, Var::Yp)?,
        cg0: both(l, Var::Z, Var::Zp)?,
        f_star: [star_kernel_of(tf, Var::Yp), star_kernel_of(tg, Var::Yp)],
        g_star: [star_kernel_of(tf, Var::Zp), star_kernel_of(tg, Var::Zp)],
        snaps,
        times,
    };
    let p0 = {
        let s = &factory.snaps[0];
        let mut a = average_each_member(&kernel_of(h, Var::Y), s, grid.point(0), None)?;
        add_into(&mut a, &average_each_member(&star_kernel_of(h, Var::Yp), s, grid.point(0), None)?);
        a
    };
    let cfg = SolverConfig { estimator: Estimator::Grouped, ..*cfg };
    let (b, trace) = picard(&factory, &rev, &p0, &Markers::from_ensemble(&rev), &cfg, tol, max_iter, None)?;
    Ok((AdjointBundle { p: b.y.reversed_in_time(), q: b.z.reversed_in_time() }, trace))
}

/// Two computations of `E[xi_0 p_0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub direct: f64,
    pub via_integral: f64,
    /// Standard error of the per-particle difference.
    pub std_err: f64,
    pub dt: f64,
}

impl DualityReport {
    pub fn gap(&self) -> f64 {
        (self.direct - self.via_integral).abs()
    }

    /// `3 SE` for sampling plus `dt * max(|direct|, |via|)` for the
    /// left-endpoint quadrature.
    pub fn tolerance(&self) -> f64 {
        3.0 * self.std_err + self.dt * self.direct.abs().max(self.via_integral.abs())
    }
}

/// `E[xi_0 p_0]` directly and from the time integral of the cost and
/// control sensitivities, on the same samples (left-endpoint rule).
pub fn duality_check(
    prob: &ControlProblem,
    uhat: &ControlPath,
    state_hat: &PathBundle,
    var: &PathBundle,
    adj: &AdjointBundle,
    v_dir: &ControlPath,
) -> Result<DualityReport> {
    check_pair(state_hat, uhat)?;
    let grid = state_hat.grid;
    let np = state_hat.n_particles();
    let snaps = snapshots(state_hat, uhat);
    let c = &prob.coeffs;
    let cost_terms = [
        (kernel_of(&c.l, Var::Y), kernel_of(&c.l, Var::Yp), &var.y),
        (kernel_of(&c.l, Var::Z), kernel_of(&c.l, Var::Zp), &var.z),
    ];
    let control_terms = [
        (kernel_of(&c.theta_f, Var::V), kernel_of(&c.theta_f, Var::Vp), &adj.p),
        (kernel_of(&c.theta_g, Var::V), kernel_of(&c.theta_g, Var::Vp), &adj.q),
    ];
    let rows: Vec<Vec<f64>> = (0..grid.n_steps())
        .map(|i| {
            let t = grid.point(i);
            let mut acc = vec![0.0; np];
            for (k, kp, x) in &cost_terms {
                let term = linear_term(k, kp, &snaps[i], t, x.at(i))?;
                for (a, b) in acc.iter_mut().zip(&term) {
                    *a -= b;
                }
            }
            for (k, kp, w) in &control_terms {
                let term = linear_term(k, kp, &snaps[i], t, v_dir.v.at(i))?;
                for ((a, b), wp) in acc.iter_mut().zip(&term).zip(w.at(i)) {
                    *a += b * wp;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let dt = grid.dt();
    let integral: Vec<f64> = (0..np)
        .into_par_iter()
        .map(|p| dt * pairwise_sum(&rows.iter().map(|r| r[p]).collect::<Vec<_>>()))
        .collect();
    let direct: Vec<f64> = var.y.at(0).iter().zip(adj.p.at(0)).map(|(x, p)| x * p).collect();
    let diff: Vec<f64> = direct.iter().zip(&integral).map(|(a, b)| a - b).collect();
    let (_, std_err) = mean_se(&diff);
    Ok(DualityReport { direct: pairwise_mean(&direct), via_integral: pairwise_mean(&integral), std_err, dt })
}

/// Maximum-principle residual over grid points and particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpReport {
    /// `min over (t, particle, v) of G * (v - uhat)`.
    pub global_min: f64,
    /// Fraction of `(t, particle)` points whose minimum is below `-tol`.
    pub violation_fraction: f64,
    /// `(grid index, particle)` of the global minimum.
    pub argmin: (usize, usize),
    /// `G = E'[H_v] + E*[H_v']` per particle and grid point.
    pub gradient: Field,
}

/// Check `G * (v - uhat) >= 0` for every `v` in `v_grid` (default: the two
/// box end points, where an affine function of `v` attains its minimum).
pub fn mp_residual(
    prob: &ControlProblem,
    uhat: &ControlPath,
    adj: &AdjointBundle,
    state_hat: &PathBundle,
    v_grid: Option<&[f64]>,
    tol: f64,
) -> Result<MpReport> {
    check_pair(state_hat, uhat)?;
    let ends = [prob.u_lo, prob.u_hi];
    let v_grid = v_grid.unwrap_or(&ends);
    if v_grid.is_empty() || v_grid.iter().any(|&v| !prob.contains(v)) {
        return Err(Error::invalid("v grid must be nonempty and inside the control box"));
    }
    let grid = state_hat.grid;
    let snaps = snapshots(state_hat, uhat);
    let c = &prob.coeffs;
    let own = [kernel_of(&c.theta_f, Var::V), kernel_of(&c.theta_g, Var::V), kernel_of(&c.l, Var::V)];
    let star = [star_kernel_of(&c.theta_f, Var::Vp), star_kernel_of(&c.theta_g, Var::Vp), star_kernel_of(&c.l, Var::Vp)];
    let gradient = per_step(grid.n_points(), |i| {
        let (s, t) = (&snaps[i], grid.point(i));
        let (p, q) = (adj.p.at(i), adj.q.at(i));
        let ef = average_each_member(&own[0], s, t, None)?;
        let eg = average_each_member(&own[1], s, t, None)?;
        let mut g = average_each_member(&own[2], s, t, None)?;
        for k in 0..g.len() {
            g[k] += ef[k] * p[k] + eg[k] * q[k];
        }
        add_into(&mut g, &average_each_member(&star[0], s, t, Some(p))?);
        add_into(&mut g, &average_each_member(&star[1], s, t, Some(q))?);
        add_into(&mut g, &average_each_member(&star[2], s, t, None)?);
        Ok(g)
    })?;
    let mut global_min = f64::INFINITY;
    let mut argmin = (0, 0);
    let mut violations = 0usize;
    for i in 0..grid.n_points() {
        for (k, (&g, &u)) in gradient.at(i).iter().zip(uhat.v.at(i)).enumerate() {
            let m = v_grid.iter().map(|&v| if g == 0.0 { 0.0 } else { g * (v - u) }).fold(f64::INFINITY, f64::min);
            if m < -tol {
                violations += 1;
            }
            if m < global_min {
                global_min = m;
                argmin = (i, k);
            }
        }
    }
    let total = grid.n_points() * state_hat.n_particles();
    Ok(MpReport { global_min, violation_fraction: violations as f64 / total as f64, argmin, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{LipschitzMeta, Slot, XiMode};
    use crate::scenario::{sample_ensemble, TimeGrid};

    fn problem(pairs: &[(Slot, &str)], xi: XiMode) -> ControlProblem {
        let mut c = CoefficientSet::default().with_xi(xi);
        for (s, src) in pairs {
            c.set(*s, src).unwrap();
        }
        ControlProblem::new(c, -10.0, 10.0).unwrap()
    }

    fn ens(m: usize) -> ScenarioEnsemble {
        sample_ensemble(TimeGrid::horizon(1.0, 16).unwrap(), m, 1, 7).unwrap()
    }

    #[test]
    fn empty_box_is_rejected() {
        assert!(ControlProblem::new(CoefficientSet::default(), 1.0, 0.0).is_err());
    }

    #[test]
    fn state_with_constant_control() {
        let e = ens(8);
        let prob = problem(&[(Slot::ThetaF, "v")], XiMode::Constant(1.0));
        let v = ControlPath::constant(8, 17, 0.5);
        let (b, _) = solve_state(&prob, &v, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        for i in 0..=16 {
            let want = 1.0 + 0.5 * (1.0 - e.grid().point(i));
            assert!(b.y.at(i).iter().all(|y| (y - want).abs() < 1e-12));
        }
        let outside = ControlPath::constant(8, 17, 11.0);
        assert!(solve_state(&prob, &outside, &e, &SolverConfig::pooled(1), 1e-14, 5).is_err());
    }

    #[test]
    fn cost_examples() {
        let grid = TimeGrid::horizon(1.0, 4).unwrap();
        let y = Field::from_fn(3, 5, |p, _| (p + 1) as f64);
        let state = PathBundle::new(y, Field::zeros(3, 5), grid).unwrap();
        let v = ControlPath::constant(3, 5, 2.0);
        let j = |pairs: &[(Slot, &str)]| cost(&problem(pairs, XiMode::Constant(0.0)), &v, &state).unwrap();
        assert_eq!(j(&[(Slot::H, "y")]), 2.0);
        assert_eq!(j(&[(Slot::L, "v^2")]), 4.0);
        assert!((j(&[(Slot::L, "y*yp")]) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn variational_of_a_pure_control_drift() {
        let e = ens(16);
        let prob = problem(&[(Slot::ThetaF, "v")], XiMode::Constant(0.0));
        let u = ControlPath::constant(16, 17, 0.0);
        let (hat, _) = solve_state(&prob, &u, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        let dir = ControlPath::deterministic(16, &e.grid().points());
        let cfg = SolverConfig::pooled(1);
        let (var, _) = solve_variational(&prob, &u, &hat, &dir, &e, &cfg, 1e-24, 10).unwrap();
        let grid = e.grid();
        for i in 0..=16 {
            // left-endpoint sum of s over [t_i, T]
            let want: f64 = (i..16).map(|k| grid.dt() * grid.point(k)).sum();
            assert!(var.y.at(i).iter().all(|x| (x - want).abs() < 1e-12));
            assert!(var.z.at(i).iter().all(|z| z.abs() < 1e-12));
        }
        let zero = ControlPath::constant(16, 17, 0.0);
        let (v0, _) = solve_variational(&prob, &u, &hat, &zero, &e, &cfg, 1e-24, 10).unwrap();
        assert!(v0.y.as_slice().iter().chain(v0.z.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn hamiltonian_examples() {
        let prob = problem(&[(Slot::ThetaF, "v"), (Slot::L, "v^2/2")], XiMode::Constant(0.0));
        let args = HamiltonianArgs { p: 1.0, v1: 2.0, ..Default::default() };
        assert_eq!(hamiltonian_partial(&prob, Var::V, &args).unwrap(), 3.0);
        assert_eq!(hamiltonian(&prob, &HamiltonianArgs::default()).unwrap(), 0.0);
    }

    #[test]
    fn adjoint_of_a_pure_initial_cost() {
        let e = ens(32);
        let prob = problem(&[(Slot::H, "y^2/2")], XiMode::WTerminal);
        let u = ControlPath::constant(32, 17, 0.0);
        let (hat, _) = solve_state(&prob, &u, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        let (adj, _) = solve_adjoint(&prob, &u, &hat, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        for i in 0..=16 {
            assert_eq!(adj.p.at(i), hat.y.at(0));
            assert!(adj.q.at(i).iter().all(|&q| q == 0.0));
        }
        let none = problem(&[], XiMode::WTerminal);
        let (adj, _) = solve_adjoint(&none, &u, &hat, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        assert!(adj.p.as_slice().iter().chain(adj.q.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn boundary_control_with_positive_gradient() {
        let e = ens(8);
        let mut prob = problem(&[(Slot::L, "v")], XiMode::Constant(0.0));
        prob.u_lo = -1.0;
        prob.u_hi = 1.0;
        prob.coeffs.lipschitz = LipschitzMeta::default();
        let u = ControlPath::constant(8, 17, -1.0);
        let (hat, _) = solve_state(&prob, &u, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        let (adj, _) = solve_adjoint(&prob, &u, &hat, &e, &SolverConfig::pooled(1), 1e-14, 5).unwrap();
        let r = mp_residual(&prob, &u, &adj, &hat, None, 1e-9).unwrap();
        assert_eq!(r.global_min, 0.0);
        assert_eq!(r.violation_fraction, 0.0);
    }
}
