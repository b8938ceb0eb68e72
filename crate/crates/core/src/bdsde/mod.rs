//! Backward time stepping for a doubly stochastic equation whose population
//! arguments are frozen.
//!
//! Step `i` (from `n - 1` down to `0`):
//!
//! ```text
//! Ty    = Y[i+1] + g(i+1) * dB[i]
//! Yfit  = E[Ty | F_i]
//! Z[i]  = E[(Ty - Yfit) * dW[i] | F_i] / dt
//! Y[i]  = Yfit + dt * f(i, Yfit, Z[i])
//! ```
//!
//! The backward integral takes its integrand at the right end point.

mod regression;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeff::{CoefficientSet, XiMode};
use crate::dsl::{Bindings, SeparableKernel, Var};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::meanfield::{snapshot_kernel, PopulationSnapshot};
use crate::reduce::pairwise_mean;
use crate::scenario::{ScenarioEnsemble, TimeGrid};

pub use regression::{regress, Predictor, RegressionDesign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// One fit per backward-driver group.
    Grouped,
    /// One fit over all particles, with the backward-driver level as an
    /// extra input.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub basis_degree: usize,
    pub estimator: Estimator,
    pub ridge: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { basis_degree: 1, estimator: Estimator::Grouped, ridge: 1e-8 }
    }
}

impl SolverConfig {
    pub const MAX_DEGREE: usize = 6;

    pub fn grouped(basis_degree: usize) -> Self {
        Self { basis_degree, estimator: Estimator::Grouped, ..Default::default() }
    }

    pub fn pooled(basis_degree: usize) -> Self {
        Self { basis_degree, estimator: Estimator::Pooled, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.basis_degree > Self::MAX_DEGREE {
            return Err(Error::invalid(format!(
                "basis degree {} exceeds {}",
                self.basis_degree,
                Self::MAX_DEGREE
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::invalid(format!("ridge {} must be finite and >= 0", self.ridge)));
        }
        Ok(())
    }
}

/// Solution pair on the grid, one row per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub y: Field,
    pub z: Field,
    pub grid: TimeGrid,
}

impl PathBundle {
    pub fn new(y: Field, z: Field, grid: TimeGrid) -> Result<Self> {
        if y.n_particles() != z.n_particles() || y.n_points() != z.n_points() || y.n_points() != grid.n_points() {
            return Err(Error::shape("bundle fields do not match the grid"));
        }
        Ok(Self { y, z, grid })
    }

    /// `Y` constant at `y0`, `Z` zero.
    pub fn constant(n_particles: usize, grid: TimeGrid, y0: f64) -> Self {
        Self {
            y: Field::filled(n_particles, grid.n_points(), y0),
            z: Field::zeros(n_particles, grid.n_points()),
            grid,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.y.n_particles()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn snapshot(&self, i: usize) -> PopulationSnapshot {
        PopulationSnapshot { time_index: i, x: None, y: self.y.at(i).to_vec(), z: self.z.at(i).to_vec(), v: None }
    }

    pub fn mean_y(&self, i: usize) -> f64 {
        pairwise_mean(self.y.at(i))
    }

    pub fn mean_z(&self, i: usize) -> f64 {
        pairwise_mean(self.z.at(i))
    }

    /// Time axis reversed, on the same grid.
    pub fn reversed_in_time(&self) -> PathBundle {
        PathBundle { y: self.y.reversed_in_time(), z: self.z.reversed_in_time(), grid: self.grid }
    }

    /// `max_i mean |dY_i|^2 + dt * sum_{i<n} mean |dZ_i|^2`.
    pub fn distance(&self, other: &PathBundle) -> Result<f64> {
        if self.y.n_particles() != other.y.n_particles() || self.y.n_points() != other.y.n_points() {
            return Err(Error::shape("bundles differ in shape"));
        }
        let n = self.grid.n_steps();
        let sq = |a: &[f64], b: &[f64]| pairwise_mean(&a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect::<Vec<_>>());
        let dy: Vec<f64> = (0..=n).map(|i| sq(self.y.at(i), other.y.at(i))).collect();
        let dz: Vec<f64> = (0..n).map(|i| sq(self.z.at(i), other.z.at(i))).collect();
        let ymax = dy.iter().copied().fold(0.0, f64::max);
        Ok(ymax + self.grid.dt() * crate::reduce::pairwise_sum(&dz))
    }

    pub fn is_finite(&self) -> bool {
        self.y.is_finite() && self.z.is_finite()
    }
}

/// Terminal values per particle.
///
/// `x_terminal` holds the forward state at the final grid point; it is
/// required by the expression mode.
pub fn terminal_condition(xi: &XiMode, ens: &ScenarioEnsemble, x_terminal: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = ens.n_particles();
    match xi {
        XiMode::Constant(c) => Ok(vec![*c; n]),
        XiMode::WTerminal => {
            let levels = ens.forward_levels();
            Ok(levels.at(ens.grid().n_steps()).to_vec())
        }
        XiMode::Expr(e) => {
            let x = x_terminal.ok_or_else(|| Error::invalid("terminal expression needs forward state paths"))?;
            if x.len() != n {
                return Err(Error::shape("terminal state length differs from particle count"));
            }
            x.iter().map(|&xv| e.eval(&Bindings::new().with(Var::X, xv))).collect()
        }
    }
}

/// Driver evaluation for the backward scheme.
///
/// `i` is the solver's grid index; `y` and `z` are the whole population's
/// values at which the driver is evaluated.
pub trait Driver: Sync {
    fn f(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>>;
    fn g(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>>;
}

/// Drivers from coefficient expressions.
pub struct CoefficientDriver<'a> {
    theta_f: SeparableKernel,
    theta_g: SeparableKernel,
    times: Vec<f64>,
    frozen: Option<Vec<PopulationSnapshot>>,
    controls: Option<&'a Field>,
    x: Option<&'a Field>,
}

impl<'a> CoefficientDriver<'a> {
    /// `times[i]` is the coefficient time at solver index `i`. `frozen`,
    /// `controls` and `x` are indexed by solver index as well.
    pub fn new(
        coeffs: &CoefficientSet,
        times: Vec<f64>,
        frozen: Option<Vec<PopulationSnapshot>>,
        controls: Option<&'a Field>,
        x: Option<&'a Field>,
    ) -> Result<Self> {
        if frozen.is_none() && coeffs.is_mean_field() {
            return Err(Error::invalid("drivers read primed variables but no population is frozen"));
        }
        if let Some(fr) = &frozen {
            if fr.len() != times.len() {
                return Err(Error::shape("one snapshot per grid point is required"));
            }
        }
        for f in [controls, x].into_iter().flatten() {
            if f.n_points() != times.len() {
                return Err(Error::shape("path field does not match the grid"));
            }
        }
        Ok(Self {
            theta_f: SeparableKernel::compile(&coeffs.theta_f),
            theta_g: SeparableKernel::compile(&coeffs.theta_g),
            times,
            frozen,
            controls,
            x,
        })
    }

    fn eval(&self, kernel: &SeparableKernel, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let n = y.len();
        if kernel.is_zero() {
            return Ok(vec![0.0; n]);
        }
        let t = self.times[i];
        let step = match &self.frozen {
            Some(fr) => snapshot_kernel(kernel, &fr[i], t, None)?,
            None => kernel.at_step(t, 1, |_, _| {}, None)?,
        };
        let v = self.controls.map(|c| c.at(i));
        let x = self.x.map(|c| c.at(i));
        (0..n)
            .into_par_iter()
            .map(|p| {
                let mut b = Bindings::new();
                b.set(Var::T, t).set(Var::Y, y[p]).set(Var::Z, z[p]);
                if let Some(v) = v {
                    b.set(Var::V, v[p]);
                }
                if let Some(x) = x {
                    b.set(Var::X, x[p]);
                }
                step.value(&b)
            })
            .collect()
    }
}

impl Driver for CoefficientDriver<'_> {
    fn f(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.eval(&self.theta_f, i, y, z)
    }

    fn g(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.eval(&self.theta_g, i, y, z)
    }
}

/// Drivers affine in the unknowns:
/// `f = af*y + bf*z + cf`, `g = ag*y + bg*z + cg`, with coefficient fields
/// indexed by solver index. Missing fields are zero.
#[derive(Debug, Clone, Default)]
pub struct LinearDriver {
    pub af: Option<Field>,
    pub bf: Option<Field>,
    pub cf: Option<Field>,
    pub ag: Option<Field>,
    pub bg: Option<Field>,
    pub cg: Option<Field>,
}

fn affine(a: &Option<Field>, b: &Option<Field>, c: &Option<Field>, i: usize, y: &[f64], z: &[f64]) -> Vec<f64> {
    (0..y.len())
        .map(|p| {
            let mut acc = 0.0;
            if let Some(a) = a {
                acc += a.get(p, i) * y[p];
            }
            if let Some(b) = b {
                acc += b.get(p, i) * z[p];
            }
            if let Some(c) = c {
                acc += c.get(p, i);
            }
            acc
        })
        .collect()
}

impl Driver for LinearDriver {
    fn f(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(affine(&self.af, &self.bf, &self.cf, i, y, z))
    }

    fn g(&self, i: usize, y: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(affine(&self.ag, &self.bg, &self.cg, i, y, z))
    }
}

/// Regression inputs per grid point.
#[derive(Debug, Clone)]
pub struct Markers {
    /// Forward-state marker, one row per grid point.
    pub state: Field,
    /// Backward-driver level `B_T - B_t` per particle.
    pub level: Field,
}

impl Markers {
    /// `W` levels as the state marker.
    pub fn from_ensemble(ens: &ScenarioEnsemble) -> Self {
        Self::with_state(ens, ens.forward_levels())
    }

    pub fn with_state(ens: &ScenarioEnsemble, state: Field) -> Self {
        Self { state, level: ens.backward_levels() }
    }
}

/// Run the backward scheme with a general driver.
///
/// Steps below `from_index` are skipped; those rows hold copies of row
/// `from_index`.
pub fn solve_with_driver<D: Driver + ?Sized>(
    driver: &D,
    ens: &ScenarioEnsemble,
    terminal: &[f64],
    markers: &Markers,
    cfg: &SolverConfig,
    from_index: usize,
) -> Result<PathBundle> {
    cfg.validate()?;
    let grid = *ens.grid();
    let n = grid.n_steps();
    let np = ens.n_particles();
    let dt = grid.dt();
    if terminal.len() != np {
        return Err(Error::shape(format!("terminal has {} values for {np} particles", terminal.len())));
    }
    if markers.state.n_particles() != np || markers.state.n_points() != n + 1 {
        return Err(Error::shape("markers do not match the ensemble"));
    }
    if from_index > n {
        return Err(Error::invalid(format!("start index {from_index} beyond the grid")));
    }
    if terminal.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence { step: n, what: "non-finite terminal value".into() });
    }
    let k_inner = ens.k_inner();
    let mut y = Field::zeros(np, n + 1);
    let mut z = Field::zeros(np, n + 1);
    y.at_mut(n).copy_from_slice(terminal);
    let zeros = vec![0.0; np];
    for i in (from_index..n).rev() {
        let y1 = y.at(i + 1).to_vec();
        let z1 = if i + 1 == n { zeros.clone() } else { z.at(i + 1).to_vec() };
        let g1 = driver.g(i + 1, &y1, &z1)?;
        let ty: Vec<f64> = (0..np).map(|p| y1[p] + g1[p] * ens.db_of(p, i)).collect();
        let design = RegressionDesign::new(markers.state.at(i), Some(markers.level.at(i)), k_inner, cfg)?;
        let yfit = design.fit(&ty)?;
        let tz: Vec<f64> = (0..np).map(|p| (ty[p] - yfit[p]) * ens.dw(p, i) / dt).collect();
        let zi = design.fit(&tz)?;
        let fi = driver.f(i, &yfit, &zi)?;
        let yi: Vec<f64> = (0..np).map(|p| yfit[p] + dt * fi[p]).collect();
        if yi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: i, what: "non-finite Y".into() });
        }
        if zi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: i, what: "non-finite Z".into() });
        }
        y.at_mut(i).copy_from_slice(&yi);
        z.at_mut(i).copy_from_slice(&zi);
    }
    if from_index < n {
        let last = z.at(n - 1).to_vec();
        z.at_mut(n).copy_from_slice(&last);
    }
    let (yr, zr) = (y.at(from_index).to_vec(), z.at(from_index).to_vec());
    for i in 0..from_index {
        y.at_mut(i).copy_from_slice(&yr);
        z.at_mut(i).copy_from_slice(&zr);
    }
    PathBundle::new(y, z, grid)
}

/// Solve with coefficient drivers and frozen population arguments.
///
/// `frozen[i]` supplies the primed slots at grid index `i`; it may be
/// absent only when neither driver reads the population.
pub fn solve_bdsde(
    coeffs: &CoefficientSet,
    ens: &ScenarioEnsemble,
    frozen: Option<&[PopulationSnapshot]>,
    controls: Option<&Field>,
    cfg: &SolverConfig,
) -> Result<PathBundle> {
    let terminal = terminal_condition(&coeffs.xi, ens, None)?;
    let times = ens.grid().points();
    let driver = CoefficientDriver::new(coeffs, times, frozen.map(<[_]>::to_vec), controls, None)?;
    solve_with_driver(&driver, ens, &terminal, &Markers::from_ensemble(ens), cfg, 0)
}
