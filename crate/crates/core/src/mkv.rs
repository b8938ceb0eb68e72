//! Forward McKean-Vlasov paths and the probabilistic evaluation
//! `u(t, x) = Y^{t,x}_t` of the associated nonlocal SPDE.
//!
//! The field `u` is random through the backward driver, so an evaluation
//! returns one sample per backward-driver group.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsde::{solve_with_driver, CoefficientDriver, Markers, PathBundle, SolverConfig};
use crate::coeff::CoefficientSet;
use crate::dsl::{Bindings, SeparableKernel, Var};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::meanfield::{check_h1, PopulationSnapshot};
use crate::mf_solver::{MfSolve, PicardTrace};
use crate::reduce::{mean_se, pairwise_mean};
use crate::scenario::ScenarioEnsemble;

/// The solution started from `(0, x0)`, whose paths are the population
/// every query averages against.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePopulation {
    pub x0: f64,
    pub x: Field,
    pub yz: PathBundle,
    pub ens: ScenarioEnsemble,
    pub trace: PicardTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSample {
    pub t: f64,
    pub x: f64,
    /// One value per backward-driver group.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
}

/// Euler-Maruyama for `dX = Gb(t, X) dt + Gs(t, X) dW` from `x_init` at the
/// grid point nearest `t_init`; rows before that point hold `x_init`.
///
/// `Gb`, `Gs` average `b`, `sigma` over `base.x` in the `xp` slot. Without a
/// base the population is the simulated one itself.
pub fn simulate_mkv(
    coeffs: &CoefficientSet,
    x_init: f64,
    t_init: f64,
    ens: &ScenarioEnsemble,
    base: Option<&BasePopulation>,
) -> Result<Field> {
    if !x_init.is_finite() {
        return Err(Error::invalid("initial state must be finite"));
    }
    let grid = *ens.grid();
    check_time(t_init, &grid)?;
    if let Some(b) = base {
        if b.x.n_points() != grid.n_points() {
            return Err(Error::shape("base population lives on a different grid"));
        }
    }
    let n = grid.n_steps();
    let np = ens.n_particles();
    let dt = grid.dt();
    let b_k = SeparableKernel::compile(&coeffs.b);
    let s_k = SeparableKernel::compile(&coeffs.sigma);
    let start = grid.nearest_index(t_init);
    let mut x = Field::filled(np, n + 1, x_init);
    for i in start..n {
        let t = grid.point(i);
        let own = x.at(i).to_vec();
        let pop: &[f64] = match base {
            Some(b) => b.x.at(i),
            None => &own,
        };
        let bind_own = |p: usize, b: &mut Bindings| {
            b.set(Var::X, own[p]);
        };
        let bind_pop = |j: usize, b: &mut Bindings| {
            b.set(Var::Xp, pop[j]);
        };
        let drift = b_k.average_each(t, np, bind_own, pop.len(), bind_pop, None)?;
        let diffusion = s_k.average_each(t, np, bind_own, pop.len(), bind_pop, None)?;
        let next: Vec<f64> = (0..np).map(|p| own[p] + drift[p] * dt + diffusion[p] * ens.dw(p, i)).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: i, what: "non-finite forward state".into() });
        }
        x.at_mut(i + 1).copy_from_slice(&next);
    }
    Ok(x)
}

fn check_time(t: f64, grid: &crate::scenario::TimeGrid) -> Result<()> {
    let slack = 1e-12 * (1.0 + grid.length());
    if !(t >= grid.t_start() - slack && t <= grid.t_end() + slack) {
        return Err(Error::invalid(format!(
            "time {t} outside [{}, {}]",
            grid.t_start(),
            grid.t_end()
        )));
    }
    Ok(())
}

/// `(1/N) sum_j h(x = own_p, xp = pop_j)` for every `p`.
fn terminal_average(kernel: &SeparableKernel, t: f64, own: &[f64], pop: &[f64]) -> Result<Vec<f64>> {
    kernel.average_each(
        t,
        own.len(),
        |p, b| {
            b.set(Var::X, own[p]);
        },
        pop.len(),
        |j, b| {
            b.set(Var::Xp, pop[j]);
        },
        None,
    )
}

/// Simulate `X^{0,x0}` and solve its mean-field backward equation, whose
/// population is its own solution.
pub fn build_base(
    coeffs: &CoefficientSet,
    x0: f64,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<BasePopulation> {
    coeffs.validate()?;
    let report = check_h1(&coeffs.lipschitz);
    if !report.h1_ok {
        return Err(Error::invalid(format!("contraction check fails (margin {:.3})", report.margin)));
    }
    let grid = *ens.grid();
    let x = simulate_mkv(coeffs, x0, grid.t_start(), ens, None)?;
    let n = grid.n_steps();
    let h = SeparableKernel::compile(&coeffs.h);
    let xi = terminal_average(&h, grid.t_end(), x.at(n), x.at(n))?;
    let (yz, trace) = MfSolve::new(coeffs, ens, *cfg).tolerance(tol, max_iter).forward_state(&x).terminal(xi).run()?;
    Ok(BasePopulation { x0, x, yz, ens: ens.clone(), trace })
}

fn query_key(index: usize, x: f64) -> u64 {
    ((index as u64) << 40) ^ x.to_bits().rotate_left(17)
}

/// `u(t, x)` with fresh forward particles and the base's backward driver.
///
/// `t` is snapped to the nearest grid point. All primed slots read the
/// base population.
pub fn evaluate_u(t: f64, x: f64, base: &BasePopulation, coeffs: &CoefficientSet, cfg: &SolverConfig) -> Result<FieldSample> {
    let grid = *base.ens.grid();
    check_time(t, &grid)?;
    if !x.is_finite() {
        return Err(Error::invalid("query point must be finite"));
    }
    let k = grid.nearest_index(t);
    let n = grid.n_steps();
    let qens = base.ens.with_fresh_forward(base.ens.k_inner(), query_key(k, x))?;
    let xq = simulate_mkv(coeffs, x, grid.point(k), &qens, Some(base))?;
    let h = SeparableKernel::compile(&coeffs.h);
    let terminal = terminal_average(&h, grid.t_end(), xq.at(n), base.x.at(n))?;
    let frozen: Vec<PopulationSnapshot> = (0..=n)
        .map(|i| PopulationSnapshot {
            time_index: i,
            x: Some(base.x.at(i).to_vec()),
            y: base.yz.y.at(i).to_vec(),
            z: base.yz.z.at(i).to_vec(),
            v: None,
        })
        .collect();
    let driver = CoefficientDriver::new(coeffs, grid.points(), Some(frozen), None, Some(&xq))?;
    let markers = Markers::with_state(&qens, xq.clone());
    let sol = solve_with_driver(&driver, &qens, &terminal, &markers, cfg, k)?;
    let yk = sol.y.at(k);
    let values: Vec<f64> =
        (0..qens.m_outer()).into_par_iter().map(|g| pairwise_mean(&yk[qens.group_range(g)])).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: k, what: "non-finite field value".into() });
    }
    let (mean, std_err) = mean_se(&values);
    Ok(FieldSample { t: grid.point(k), x, values, mean, std_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{LipschitzMeta, Slot};
    use crate::scenario::{sample_ensemble, TimeGrid};

    fn coeffs(pairs: &[(Slot, &str)]) -> CoefficientSet {
        let mut c = CoefficientSet::default();
        for (s, src) in pairs {
            c.set(*s, src).unwrap();
        }
        c
    }

    #[test]
    fn frozen_state_without_coefficients() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 8).unwrap(), 2, 4, 1).unwrap();
        let x = simulate_mkv(&CoefficientSet::default(), 0.3, 0.0, &ens, None).unwrap();
        assert!(x.as_slice().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn linear_drift_tracks_the_exponential() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 64).unwrap(), 1, 16, 1).unwrap();
        let x = simulate_mkv(&coeffs(&[(Slot::B, "x")]), 1.0, 0.0, &ens, None).unwrap();
        let m = pairwise_mean(x.at(64));
        assert!((m - 1f64.exp()).abs() / 1f64.exp() < 0.02);
        assert!((m - (1.0 + 1.0 / 64.0f64).powi(64)).abs() < 1e-12);
    }

    #[test]
    fn constant_terminal_from_the_population() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 8).unwrap(), 2, 8, 4).unwrap();
        let c = coeffs(&[(Slot::H, "x + xp")]);
        let base = build_base(&c, 0.75, &ens, &SolverConfig::grouped(1), 1e-12, 10).unwrap();
        assert!(base.yz.y.as_slice().iter().all(|&y| (y - 1.5).abs() < 1e-12));
        assert!(base.yz.z.as_slice().iter().all(|&z| z.abs() < 1e-12));
        assert!(base.x.at(0).iter().all(|&x| x == 0.75));
    }

    #[test]
    fn query_before_terminal_snaps_and_rejects_outside() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 8).unwrap(), 4, 8, 4).unwrap();
        let c = coeffs(&[(Slot::Sigma, "1"), (Slot::H, "x")])
            .with_lipschitz(LipschitzMeta { l_gamma: 1.0, ..Default::default() });
        let base = build_base(&c, 0.0, &ens, &SolverConfig::grouped(1), 1e-12, 10).unwrap();
        let s = evaluate_u(0.49, 1.0, &base, &c, &SolverConfig::grouped(1)).unwrap();
        assert_eq!(s.t, 0.5);
        assert_eq!(s.values.len(), 4);
        assert!(evaluate_u(1.5, 0.0, &base, &c, &SolverConfig::grouped(1)).is_err());
        assert!(evaluate_u(-0.1, 0.0, &base, &c, &SolverConfig::grouped(1)).is_err());
    }
}
