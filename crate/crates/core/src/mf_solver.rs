//! Picard iteration over the frozen population, and the forward doubly
//! stochastic equation via time reversal.

use serde::{Deserialize, Serialize};

use crate::bdsde::{solve_with_driver, terminal_condition, CoefficientDriver, Driver, Markers, PathBundle, SolverConfig};
use crate::coeff::{CoefficientSet, XiMode};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::meanfield::{check_h1, PopulationSnapshot};
use crate::reduce::pairwise_mean;
use crate::scenario::ScenarioEnsemble;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PicardTrace {
    /// `distances[k]` is the distance between iterates `k` and `k + 1`.
    pub distances: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PicardTrace {
    pub fn last_distance(&self) -> f64 {
        self.distances.last().copied().unwrap_or(f64::NAN)
    }

    /// Successive ratios `d_{k+1} / d_k`, skipping exact zeros.
    pub fn ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// `d_{k+1} <= d_k` for every `k >= 1`.
    pub fn is_contracting(&self) -> bool {
        self.distances.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Builds the driver of one Picard sweep from the previous iterate.
pub trait DriverFactory: Sync {
    type D: Driver;
    fn build(&self, frozen: &PathBundle) -> Result<Self::D>;
}

/// Generic Picard loop.
///
/// Starts from `init`, or from `Y` equal to the terminal mean and `Z = 0`.
pub fn picard<F: DriverFactory>(
    factory: &F,
    ens: &ScenarioEnsemble,
    terminal: &[f64],
    markers: &Markers,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
    init: Option<PathBundle>,
) -> Result<(PathBundle, PicardTrace)> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid("tolerance must be >= 0"));
    }
    let mut current = match init {
        Some(b) => b,
        None => PathBundle::constant(ens.n_particles(), *ens.grid(), pairwise_mean(terminal)),
    };
    let mut trace = PicardTrace::default();
    for _ in 0..max_iter {
        let driver = factory.build(&current)?;
        let next = solve_with_driver(&driver, ens, terminal, markers, cfg, 0)?;
        let d = current.distance(&next)?;
        trace.distances.push(d);
        trace.iterations += 1;
        current = next;
        if d <= tol {
            trace.converged = true;
            return Ok((current, trace));
        }
    }
    Err(Error::IterationLimit { trace })
}

/// Coefficient drivers whose primed slots read the previous iterate.
pub struct CoefficientFactory<'a> {
    pub coeffs: &'a CoefficientSet,
    pub times: Vec<f64>,
    pub controls: Option<&'a Field>,
    pub x: Option<&'a Field>,
}

impl CoefficientFactory<'_> {
    pub fn snapshots(&self, frozen: &PathBundle) -> Vec<PopulationSnapshot> {
        (0..frozen.y.n_points())
            .map(|i| {
                let mut s = frozen.snapshot(i);
                s.v = self.controls.map(|c| c.at(i).to_vec());
                s.x = self.x.map(|c| c.at(i).to_vec());
                s
            })
            .collect()
    }
}

impl<'a> DriverFactory for CoefficientFactory<'a> {
    type D = CoefficientDriver<'a>;

    fn build(&self, frozen: &PathBundle) -> Result<CoefficientDriver<'a>> {
        let snaps = if self.coeffs.is_mean_field() { Some(self.snapshots(frozen)) } else { None };
        CoefficientDriver::new(self.coeffs, self.times.clone(), snaps, self.controls, self.x)
    }
}

/// A mean-field solve with optional control and forward-state paths.
#[derive(Debug, Clone)]
pub struct MfSolve<'a> {
    coeffs: &'a CoefficientSet,
    ens: &'a ScenarioEnsemble,
    cfg: SolverConfig,
    tol: f64,
    max_iter: usize,
    enforce_h1: bool,
    controls: Option<&'a Field>,
    x: Option<&'a Field>,
    terminal: Option<Vec<f64>>,
    init: Option<PathBundle>,
}

impl<'a> MfSolve<'a> {
    pub fn new(coeffs: &'a CoefficientSet, ens: &'a ScenarioEnsemble, cfg: SolverConfig) -> Self {
        Self {
            coeffs,
            ens,
            cfg,
            tol: 1e-10,
            max_iter: 50,
            enforce_h1: true,
            controls: None,
            x: None,
            terminal: None,
            init: None,
        }
    }

    pub fn tolerance(mut self, tol: f64, max_iter: usize) -> Self {
        self.tol = tol;
        self.max_iter = max_iter;
        self
    }

    /// Proceed even when the contraction check fails.
    pub fn allow_h1_failure(mut self) -> Self {
        self.enforce_h1 = false;
        self
    }

    /// Control paths bound to `v` (own) and `vp` (population).
    pub fn controls(mut self, v: &'a Field) -> Self {
        self.controls = Some(v);
        self
    }

    /// Forward-state paths bound to `x` and `xp`; also used as the
    /// regression marker.
    pub fn forward_state(mut self, x: &'a Field) -> Self {
        self.x = Some(x);
        self
    }

    /// Explicit terminal (or, for the forward equation, initial) values.
    pub fn terminal(mut self, values: Vec<f64>) -> Self {
        self.terminal = Some(values);
        self
    }

    pub fn initial_guess(mut self, b: PathBundle) -> Self {
        self.init = Some(b);
        self
    }

    fn check(&self) -> Result<()> {
        self.coeffs.validate()?;
        if self.enforce_h1 {
            let r = check_h1(&self.coeffs.lipschitz);
            if !r.h1_ok {
                return Err(Error::invalid(format!(
                    "contraction check fails (margin {:.3}, M2 {:.3}); pass allow_h1_failure to override",
                    r.margin, r.m2
                )));
            }
        }
        Ok(())
    }

    /// Backward equation.
    pub fn run(self) -> Result<(PathBundle, PicardTrace)> {
        self.check()?;
        let terminal = match &self.terminal {
            Some(t) => t.clone(),
            None => {
                let xt = self.x.map(|x| x.at(x.n_points() - 1));
                terminal_condition(&self.coeffs.xi, self.ens, xt)?
            }
        };
        let markers = match self.x {
            Some(x) => Markers::with_state(self.ens, x.clone()),
            None => Markers::from_ensemble(self.ens),
        };
        let factory =
            CoefficientFactory { coeffs: self.coeffs, times: self.ens.grid().points(), controls: self.controls, x: self.x };
        picard(&factory, self.ens, &terminal, &markers, &self.cfg, self.tol, self.max_iter, self.init)
    }

    /// Forward equation `P_t = eta + int_0^t f ds + int_0^t g dW - int_0^t Q dB`,
    /// solved as a backward equation on the time-reversed ensemble.
    pub fn run_forward(self) -> Result<(PathBundle, PicardTrace)> {
        self.check()?;
        let rev = self.ens.time_reverse()?;
        let n = self.ens.grid().n_steps();
        let eta = match (&self.terminal, &self.coeffs.xi) {
            (Some(t), _) => t.clone(),
            (None, XiMode::Constant(c)) => vec![*c; self.ens.n_particles()],
            (None, _) => return Err(Error::invalid("the initial value of a forward equation must be a constant")),
        };
        let grid = *self.ens.grid();
        let times: Vec<f64> = (0..=n).map(|i| grid.point(n - i)).collect();
        let controls = self.controls.map(Field::reversed_in_time);
        let x = self.x.map(Field::reversed_in_time);
        let markers = match &x {
            Some(x) => Markers::with_state(&rev, x.clone()),
            None => Markers::from_ensemble(&rev),
        };
        let factory = CoefficientFactory { coeffs: self.coeffs, times, controls: controls.as_ref(), x: x.as_ref() };
        let init = self.init.map(|b| b.reversed_in_time());
        let (b, trace) = picard(&factory, &rev, &eta, &markers, &self.cfg, self.tol, self.max_iter, init)?;
        Ok((b.reversed_in_time(), trace))
    }
}

/// Mean-field backward equation by Picard iteration.
pub fn solve_mf_bdsde(
    coeffs: &CoefficientSet,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(PathBundle, PicardTrace)> {
    MfSolve::new(coeffs, ens, *cfg).tolerance(tol, max_iter).run()
}

/// Mean-field forward doubly stochastic equation; `coeffs.xi` must be a
/// constant initial value.
pub fn solve_forward_dsde(
    coeffs: &CoefficientSet,
    ens: &ScenarioEnsemble,
    cfg: &SolverConfig,
    tol: f64,
    max_iter: usize,
) -> Result<(PathBundle, PicardTrace)> {
    MfSolve::new(coeffs, ens, *cfg).tolerance(tol, max_iter).run_forward()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bdsde::solve_bdsde;
    use crate::coeff::{LipschitzMeta, Slot};
    use crate::scenario::{sample_ensemble, TimeGrid};

    fn linear_mean(c: f64) -> CoefficientSet {
        CoefficientSet::default()
            .with_xi(XiMode::Constant(1.0))
            .with(Slot::ThetaF, &format!("0.5*y + {c}*yp"))
            .unwrap()
            .with_lipschitz(LipschitzMeta { l_y: 0.5, l_yp: c, l_gamma: 1.0, ..Default::default() })
    }

    #[test]
    fn local_drivers_converge_in_one_effective_sweep() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 16).unwrap(), 4, 32, 1).unwrap();
        let c = CoefficientSet::default()
            .with_xi(XiMode::WTerminal)
            .with(Slot::ThetaF, "0.3*y")
            .unwrap();
        let (b, trace) = solve_mf_bdsde(&c, &ens, &SolverConfig::grouped(1), 1e-12, 5).unwrap();
        assert_eq!(trace.iterations, 2);
        assert!(trace.distances[1] <= 1e-12);
        let direct = solve_bdsde(&c, &ens, None, None, &SolverConfig::grouped(1)).unwrap();
        assert_eq!(b, direct);
    }

    #[test]
    fn linear_mean_contracts() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 32).unwrap(), 4, 256, 2).unwrap();
        let (b, trace) = solve_mf_bdsde(&linear_mean(0.5), &ens, &SolverConfig::grouped(1), 1e-20, 40).unwrap();
        assert!(trace.converged && trace.is_contracting());
        let y0 = b.mean_y(0);
        assert!((y0 - 1f64.exp()).abs() / 1f64.exp() < 0.02, "{y0}");
    }

    #[test]
    fn iteration_limit_carries_the_trace() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 8).unwrap(), 2, 32, 2).unwrap();
        match solve_mf_bdsde(&linear_mean(0.5), &ens, &SolverConfig::grouped(1), 0.0, 3) {
            Err(Error::IterationLimit { trace }) => {
                assert_eq!(trace.iterations, 3);
                assert!(!trace.converged);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failing_contraction_check_is_rejected_unless_overridden() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 4).unwrap(), 1, 16, 2).unwrap();
        let c = linear_mean(0.5)
            .with_lipschitz(LipschitzMeta { alpha1: 0.8, alpha2: 1.0, alpha3: 0.3, ..Default::default() });
        assert!(matches!(solve_mf_bdsde(&c, &ens, &SolverConfig::grouped(1), 1e-12, 20), Err(Error::InvalidArgument(_))));
        assert!(MfSolve::new(&c, &ens, SolverConfig::grouped(1)).tolerance(1e-12, 40).allow_h1_failure().run().is_ok());
    }

    #[test]
    fn forward_zero_coefficients() {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 8).unwrap(), 64, 1, 3).unwrap();
        let c = CoefficientSet::default().with_xi(XiMode::Constant(2.5));
        let (b, _) = solve_forward_dsde(&c, &ens, &SolverConfig::grouped(1), 1e-14, 5).unwrap();
        assert!(b.y.as_slice().iter().all(|&p| p == 2.5));
        assert!(b.z.as_slice().iter().all(|&q| q == 0.0));
    }

    #[test]
    fn forward_drift_matches_euler() {
        let grid = TimeGrid::horizon(1.0, 64).unwrap();
        let ens = sample_ensemble(grid, 32, 1, 3).unwrap();
        let c = CoefficientSet::default().with_xi(XiMode::Constant(1.0)).with(Slot::ThetaF, "0.7*y + t").unwrap();
        let (b, _) = solve_forward_dsde(&c, &ens, &SolverConfig::grouped(1), 1e-24, 10).unwrap();
        let mut p = 1.0;
        for j in 1..=64 {
            p += grid.dt() * (0.7 * p + grid.point(j));
            for q in 0..32 {
                assert!((b.y.get(q, j) - p).abs() <= 1e-10);
            }
        }
    }
}
