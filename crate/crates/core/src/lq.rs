//! Backward linear-quadratic problems.
//!
//! State drivers are linear in `(y, z, v, yp, zp, vp)`, costs quadratic,
//! and every weight is deterministic (a constant or a function of `t`).
//! The optimality system is solved by iterating control, state and
//! adjoint until the control stops moving.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bdsde::{PathBundle, SolverConfig};
use crate::coeff::{CoefficientSet, LipschitzMeta, XiMode};
use crate::control::{cost, mp_residual, solve_adjoint, solve_state, AdjointBundle, ControlPath, ControlProblem, MpReport};
use crate::dsl::{Bindings, Expr, Var};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::reduce::pairwise_mean;
use crate::mf_solver::PicardTrace;
use crate::scenario::ScenarioEnsemble;

/// Coefficients; each is an expression in `t` only.
#[derive(Debug, Clone, PartialEq)]
pub struct LQCoefficients {
    pub a1: Expr,
    pub a2: Expr,
    pub b1: Expr,
    pub b2: Expr,
    pub c1: Expr,
    pub c2: Expr,
    pub d1: Expr,
    pub d2: Expr,
    pub e1: Expr,
    pub e2: Expr,
    pub f1: Expr,
    pub f2: Expr,
    pub m1: Expr,
    pub m2: Expr,
    pub n1: Expr,
    pub n2: Expr,
    pub r1: Expr,
    pub r2: Expr,
    pub q1_0: Expr,
    pub q2_0: Expr,
    pub xi: f64,
    pub horizon: f64,
    pub u_box: (f64, f64),
    /// Use the running-cost sources `M1`, `N1` without the state factor in
    /// the adjoint, for comparison only.
    pub bare_adjoint_sources: bool,
}

impl Default for LQCoefficients {
    fn default() -> Self {
        let z = Expr::zero;
        Self {
            a1: z(),
            a2: z(),
            b1: z(),
            b2: z(),
            c1: z(),
            c2: z(),
            d1: z(),
            d2: z(),
            e1: z(),
            e2: z(),
            f1: z(),
            f2: z(),
            m1: z(),
            m2: z(),
            n1: z(),
            n2: z(),
            r1: z(),
            r2: z(),
            q1_0: z(),
            q2_0: z(),
            xi: 0.0,
            horizon: 1.0,
            u_box: (f64::NEG_INFINITY, f64::INFINITY),
            bare_adjoint_sources: false,
        }
    }
}

const SAMPLES: usize = 65;

impl LQCoefficients {
    /// Set a coefficient by its conventional name (`A1`, `Q1_0`, ...) from a
    /// constant.
    pub fn set(&mut self, name: &str, value: f64) -> Result<&mut Self> {
        *self.slot_mut(name)? = Expr::Num(value);
        Ok(self)
    }

    /// Set a coefficient from an expression in `t`.
    pub fn set_expr(&mut self, name: &str, src: &str) -> Result<&mut Self> {
        let e = crate::dsl::parse(src)?;
        e.check_vars(&[Var::T], name)?;
        *self.slot_mut(name)? = e;
        Ok(self)
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.set(name, value)?;
        Ok(self)
    }

    pub const NAMES: [&'static str; 20] = [
        "A1", "A2", "B1", "B2", "C1", "C2", "D1", "D2", "E1", "E2", "F1", "F2", "M1", "M2", "N1", "N2", "R1", "R2",
        "Q1_0", "Q2_0",
    ];

    fn slot_mut(&mut self, name: &str) -> Result<&mut Expr> {
        Ok(match name.to_ascii_uppercase().as_str() {
            "A1" => &mut self.a1,
            "A2" => &mut self.a2,
            "B1" => &mut self.b1,
            "B2" => &mut self.b2,
            "C1" => &mut self.c1,
            "C2" => &mut self.c2,
            "D1" => &mut self.d1,
            "D2" => &mut self.d2,
            "E1" => &mut self.e1,
            "E2" => &mut self.e2,
            "F1" => &mut self.f1,
            "F2" => &mut self.f2,
            "M1" => &mut self.m1,
            "M2" => &mut self.m2,
            "N1" => &mut self.n1,
            "N2" => &mut self.n2,
            "R1" => &mut self.r1,
            "R2" => &mut self.r2,
            "Q1_0" => &mut self.q1_0,
            "Q2_0" => &mut self.q2_0,
            _ => return Err(Error::invalid(format!("unknown coefficient `{name}`"))),
        })
    }

    fn all(&self) -> [(&'static str, &Expr); 20] {
        [
            ("A1", &self.a1),
            ("A2", &self.a2),
            ("B1", &self.b1),
            ("B2", &self.b2),
            ("C1", &self.c1),
            ("C2", &self.c2),
            ("D1", &self.d1),
            ("D2", &self.d2),
            ("E1", &self.e1),
            ("E2", &self.e2),
            ("F1", &self.f1),
            ("F2", &self.f2),
            ("M1", &self.m1),
            ("M2", &self.m2),
            ("N1", &self.n1),
            ("N2", &self.n2),
            ("R1", &self.r1),
            ("R2", &self.r2),
            ("Q1_0", &self.q1_0),
            ("Q2_0", &self.q2_0),
        ]
    }

    fn at(e: &Expr, t: f64) -> Result<f64> {
        e.eval(&Bindings::new().with(Var::T, t))
    }

    fn samples(&self, e: &Expr) -> Result<Vec<f64>> {
        (0..SAMPLES).map(|k| Self::at(e, self.horizon * k as f64 / (SAMPLES - 1) as f64)).collect()
    }

    /// `sup |e(t)|` over a uniform sample of `[0, T]`.
    fn bound(&self, e: &Expr) -> Result<f64> {
        Ok(self.samples(e)?.into_iter().fold(0.0, |m, x| m.max(x.abs())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !self.xi.is_finite() {
            return Err(Error::invalid("terminal value must be finite"));
        }
        if self.u_box.0.is_nan() || self.u_box.1.is_nan() || self.u_box.0 > self.u_box.1 {
            return Err(Error::invalid("control box is empty"));
        }
        for (name, e) in self.all() {
            e.check_vars(&[Var::T], name)?;
            if self.samples(e)?.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("coefficient {name} is not bounded on [0, T]")));
            }
        }
        for (name, e) in [
            ("M1", &self.m1),
            ("M2", &self.m2),
            ("N1", &self.n1),
            ("N2", &self.n2),
            ("R1", &self.r1),
            ("R2", &self.r2),
            ("Q1_0", &self.q1_0),
            ("Q2_0", &self.q2_0),
        ] {
            if self.samples(e)?.iter().any(|&x| x < 0.0) {
                return Err(Error::invalid(format!("weight {name} must be nonnegative")));
            }
        }
        let r = self.samples(&Expr::add(self.r1.clone(), self.r2.clone()))?;
        if r.iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("R1 + R2 must be positive"));
        }
        Ok(())
    }
}

fn linear(terms: &[(&Expr, Var)]) -> Expr {
    terms.iter().fold(Expr::zero(), |acc, (c, v)| Expr::add(acc, Expr::mul((*c).clone(), Expr::var(*v))))
}

fn half_squares(terms: &[(&Expr, Var)]) -> Expr {
    terms.iter().fold(Expr::zero(), |acc, (c, v)| {
        Expr::add(acc, Expr::div(Expr::mul((*c).clone(), Expr::pow(Expr::var(*v), 2)), Expr::Num(2.0)))
    })
}

/// The control problem with linear drivers and quadratic costs.
pub fn lq_assemble(c: &LQCoefficients) -> Result<ControlProblem> {
    c.validate()?;
    let theta_f = linear(&[
        (&c.a1, Var::Y),
        (&c.b1, Var::Z),
        (&c.c1, Var::V),
        (&c.a2, Var::Yp),
        (&c.b2, Var::Zp),
        (&c.c2, Var::Vp),
    ]);
    let theta_g = linear(&[
        (&c.d1, Var::Y),
        (&c.e1, Var::Z),
        (&c.f1, Var::V),
        (&c.d2, Var::Yp),
        (&c.e2, Var::Zp),
        (&c.f2, Var::Vp),
    ]);
    let l = half_squares(&[
        (&c.m1, Var::Y),
        (&c.n1, Var::Z),
        (&c.r1, Var::V),
        (&c.m2, Var::Yp),
        (&c.n2, Var::Zp),
        (&c.r2, Var::Vp),
    ]);
    // the initial cost is charged at t = 0
    let (q1, q2) = (Expr::Num(LQCoefficients::at(&c.q1_0, 0.0)?), Expr::Num(LQCoefficients::at(&c.q2_0, 0.0)?));
    let h = half_squares(&[(&q1, Var::Y), (&q2, Var::Yp)]);
    let g_terms = [&c.d1, &c.e1, &c.f1, &c.d2, &c.e2, &c.f2];
    let kappa = g_terms.iter().filter(|e| !e.is_zero()).count() as f64;
    let b = |e: &Expr| c.bound(e);
    let lipschitz = LipschitzMeta {
        l_y: b(&c.a1)?,
        l_z: b(&c.b1)?,
        l_yp: b(&c.a2)?,
        l_zp: b(&c.b2)?,
        l_v: b(&c.c1)?,
        l_vp: b(&c.c2)?,
        k_y: kappa.sqrt() * b(&c.d1)?,
        k_yp: kappa.sqrt() * b(&c.d2)?,
        k_v: kappa.sqrt() * b(&c.f1)?,
        k_vp: kappa.sqrt() * b(&c.f2)?,
        alpha1: 0.0,
        alpha2: 1.0,
        alpha3: kappa * b(&c.e1)?.powi(2),
        alpha4: kappa * b(&c.e2)?.powi(2),
        l_gamma: 1.0,
    };
    let coeffs = CoefficientSet {
        theta_f,
        theta_g,
        l,
        h,
        xi: XiMode::Constant(c.xi),
        lipschitz,
        ..Default::default()
    };
    ControlProblem::new(coeffs, c.u_box.0, c.u_box.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LQSolution {
    pub uhat: ControlPath,
    pub state: PathBundle,
    pub adjoint: AdjointBundle,
    /// `sup |C1 p + F1 q + C2 E[p] + F2 E[q] + (R1 + R2) u|` over grid points
    /// and particles.
    pub fixed_point_residual: f64,
    pub cost_at_opt: f64,
    pub iterations: usize,
    /// `sup |u_{k+1} - u_k|` per iteration.
    pub updates: Vec<f64>,
    pub damped: bool,
}

struct Weights {
    c1: Vec<f64>,
    c2: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    r: Vec<f64>,
}

impl Weights {
    fn new(c: &LQCoefficients, times: &[f64]) -> Result<Self> {
        let on = |e: &Expr| times.iter().map(|&t| LQCoefficients::at(e, t)).collect::<Result<Vec<_>>>();
        Ok(Self {
            c1: on(&c.c1)?,
            c2: on(&c.c2)?,
            f1: on(&c.f1)?,
            f2: on(&c.f2)?,
            r: on(&Expr::add(c.r1.clone(), c.r2.clone()))?,
        })
    }

    /// `C1 p + F1 q + C2 E[p] + F2 E[q]` per particle at grid index `i`.
    fn gradient(&self, i: usize, p: &[f64], q: &[f64]) -> Vec<f64> {
        let (pm, qm) = (pairwise_mean(p), pairwise_mean(q));
        let common = self.c2[i] * pm + self.f2[i] * qm;
        p.iter().zip(q).map(|(pk, qk)| self.c1[i] * pk + self.f1[i] * qk + common).collect()
    }
}

/// The adjoint problem: with the bare sources `l` is replaced by the
/// linear cost whose partials are the constants `M1`, `N1`, `M2`, `N2`.
fn adjoint_problem(prob: &ControlProblem, c: &LQCoefficients) -> Result<ControlProblem> {
    if !c.bare_adjoint_sources {
        return Ok(prob.clone());
    }
    let l = Expr::add(
        linear(&[(&c.m1, Var::Y), (&c.n1, Var::Z), (&c.m2, Var::Yp), (&c.n2, Var::Zp)]),
        half_squares(&[(&c.r1, Var::V), (&c.r2, Var::Vp)]),
    );
    let mut p = prob.clone();
    p.coeffs.l = l;
    Ok(p)
}

fn residual_of(w: &Weights, u: &ControlPath, adj: &AdjointBundle) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..u.v.n_points() {
        let g = w.gradient(i, adj.p.at(i), adj.q.at(i));
        for (gk, uk) in g.iter().zip(u.v.at(i)) {
            worst = worst.max((gk + w.r[i] * uk).abs());
        }
    }
    worst
}

/// Solve the optimality system by fixed-point iteration on the control.
///
/// The update is halved from the first sign reversal of the update on.
pub fn lq_solve(c: &LQCoefficients, ens: &ScenarioEnsemble, cfg: &SolverConfig, tol: f64, max_iter: usize) -> Result<LQSolution> {
    let prob = lq_assemble(c)?;
    let adj_prob = adjoint_problem(&prob, c)?;
    if (ens.grid().length() - c.horizon).abs() > 1e-12 * c.horizon {
        return Err(Error::invalid("ensemble horizon differs from the coefficient horizon"));
    }
    let grid = *ens.grid();
    let (np, npts) = (ens.n_particles(), grid.n_points());
    let w = Weights::new(c, &grid.points())?;
    let inner_tol = (tol * tol).min(1e-20);
    let inner_iter = 60;
    let mut u = ControlPath::constant(np, npts, prob.project(0.0));
    let mut prev_step: Option<Field> = None;
    let mut damped = false;
    let mut updates = Vec::new();
    for _ in 0..max_iter {
        let (state, _) = solve_state(&prob, &u, ens, cfg, inner_tol, inner_iter)?;
        let (adj, _) = solve_adjoint(&adj_prob, &u, &state, ens, cfg, inner_tol, inner_iter)?;
        let mut step = Field::zeros(np, npts);
        for i in 0..npts {
            let g = w.gradient(i, adj.p.at(i), adj.q.at(i));
            for (k, gk) in g.iter().enumerate() {
                let target = prob.project(-gk / w.r[i]);
                step.set(k, i, target - u.v.get(k, i));
            }
        }
        if let Some(prev) = &prev_step {
            let dot: f64 = step.as_slice().iter().zip(prev.as_slice()).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                damped = true;
            }
        }
        let factor = if damped { 0.5 } else { 1.0 };
        let sup = step.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs())) * factor;
        updates.push(sup);
        if sup <= tol {
            let cost_at_opt = cost(&prob, &u, &state)?;
            let fixed_point_residual = residual_of(&w, &u, &adj);
            return Ok(LQSolution {
                uhat: u,
                state,
                adjoint: adj,
                fixed_point_residual,
                cost_at_opt,
                iterations: updates.len(),
                updates,
                damped,
            });
        }
        u = ControlPath { v: u.v.combine(1.0, &step, factor)? };
        prev_step = Some(step);
    }
    Err(Error::IterationLimit { trace: PicardTrace { iterations: updates.len(), distances: updates, converged: false } })
}

/// Sampled cost dominance around a computed optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `J(uhat + eps v) - J(uhat)` per perturbation.
    pub deltas: Vec<f64>,
    pub min_delta: f64,
    pub base_cost: f64,
    pub mp: MpReport,
}

/// Piecewise-constant direction with values in `[-1, 1]` on four pieces.
fn random_direction(rng: &mut ChaCha8Rng, np: usize, n_points: usize) -> ControlPath {
    let pieces: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let path: Vec<f64> = (0..n_points).map(|i| pieces[(i * 4 / n_points).min(3)]).collect();
    ControlPath::deterministic(np, &path)
}

/// Cost differences `J(uhat + eps v) - J(uhat)` on common random numbers,
/// plus the maximum-principle residual at `uhat`.
#[allow(clippy::too_many_arguments)]
pub fn lq_verify(
    sol: &LQSolution,
    c: &LQCoefficients,
    ens: &ScenarioEnsemble,
    n_perturb: usize,
    eps: f64,
    seed: u64,
    cfg: &SolverConfig,
    tol: f64,
) -> Result<DominanceReport> {
    let prob = lq_assemble(c)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::invalid("eps must be finite and nonnegative"));
    }
    let (np, npts) = (ens.n_particles(), ens.grid().n_points());
    let inner_tol = (tol * tol).min(1e-20);
    let (state, _) = solve_state(&prob, &sol.uhat, ens, cfg, inner_tol, 60)?;
    let base_cost = cost(&prob, &sol.uhat, &state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deltas = Vec::with_capacity(n_perturb);
    for _ in 0..n_perturb {
        let dir = random_direction(&mut rng, np, npts);
        let u = ControlPath { v: Field::from_fn(np, npts, |p, i| prob.project(sol.uhat.v.get(p, i) + eps * dir.v.get(p, i))) };
        let (s, _) = solve_state(&prob, &u, ens, cfg, inner_tol, 60)?;
        deltas.push(cost(&prob, &u, &s)? - base_cost);
    }
    let min_delta = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let mp = mp_residual(&prob, &sol.uhat, &sol.adjoint, &sol.state, None, tol)?;
    Ok(DominanceReport { deltas, min_delta, base_cost, mp })
}
