//! Least-squares conditional expectations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Estimator, SolverConfig};
use crate::error::{Error, Result};
use crate::reduce::{pairwise_mean, pairwise_sum};

const REFINEMENT_STEPS: usize = 2;

/// Affine standardization of one raw input.
#[derive(Debug, Clone, Copy)]
struct Scale {
    shift: f64,
    inv: f64,
}

impl Scale {
    /// `None` when the input is constant over the sample.
    fn fit(xs: &[f64]) -> Option<Scale> {
        let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let big = lo.abs().max(hi.abs());
        if !(hi - lo > 1e-12 * (1.0 + big)) {
            return None;
        }
        let shift = pairwise_mean(xs);
        let var = pairwise_mean(&xs.iter().map(|x| (x - shift) * (x - shift)).collect::<Vec<_>>());
        Some(Scale { shift, inv: 1.0 / var.sqrt() })
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        (x - self.shift) * self.inv
    }
}

/// One least-squares problem: a set of particles sharing one basis.
#[derive(Debug, Clone)]
struct Block {
    start: usize,
    len: usize,
    marker: Option<Scale>,
    level: Option<Scale>,
    /// Monomial exponents `(marker, level)` of the non-constant columns.
    powers: Vec<(u32, u32)>,
    col_mean: Vec<f64>,
    col_norm: Vec<f64>,
    /// Centered and normalized columns, column-major.
    cols: Vec<Vec<f64>>,
    gram: DMatrix<f64>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    ridge: f64,
}

fn monomials(degree: usize, use_marker: bool, use_level: bool) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for total in 1..=degree as u32 {
        for a in (0..=total).rev() {
            let b = total - a;
            if (a > 0 && !use_marker) || (b > 0 && !use_level) {
                continue;
            }
            out.push((a, b));
        }
    }
    out
}

impl Block {
    fn build(
        start: usize,
        markers: &[f64],
        levels: Option<&[f64]>,
        degree: usize,
        ridge: f64,
        group: usize,
    ) -> Result<Block> {
        let len = markers.len();
        let marker = Scale::fit(markers);
        let level = levels.and_then(Scale::fit);
        let powers = monomials(degree, marker.is_some(), level.is_some());
        if len < powers.len() + 1 {
            return Err(Error::invalid(format!(
                "regression group {group} has {len} samples for {} basis functions",
                powers.len() + 1
            )));
        }
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(powers.len());
        let mut col_mean = Vec::with_capacity(powers.len());
        let mut col_norm = Vec::with_capacity(powers.len());
        for &(a, b) in &powers {
            let raw: Vec<f64> = (0..len)
                .map(|p| {
                    let u = marker.map_or(0.0, |s| s.apply(markers[p]));
                    let w = match (level, levels) {
                        (Some(s), Some(l)) => s.apply(l[p]),
                        _ => 0.0,
                    };
                    u.powi(a as i32) * w.powi(b as i32)
                })
                .collect();
            let m = pairwise_mean(&raw);
            let centered: Vec<f64> = raw.iter().map(|x| x - m).collect();
            let norm = pairwise_sum(&centered.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();
            let keep = norm > 1e-10 * (len as f64).sqrt();
            let inv = if keep { 1.0 / norm } else { 0.0 };
            cols.push(centered.iter().map(|x| x * inv).collect());
            col_mean.push(m);
            col_norm.push(if keep { norm } else { 0.0 });
        }
        let k = cols.len();
        let mut gram = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                let prod: Vec<f64> = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).collect();
                let g = pairwise_sum(&prod);
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
        }
        let factor = if k == 0 {
            None
        } else {
            let mut reg = gram.clone();
            for a in 0..k {
                // a dropped column has an all-zero row; pin its coefficient to 0
                reg[(a, a)] += if col_norm[a] == 0.0 { 1.0 } else { ridge };
            }
            let chol = reg.cholesky().ok_or(Error::SingularSystem { group })?;
            // the Gram matrix has unit diagonal, so a pivot this small means
            // the columns are numerically dependent
            if chol.l_dirty().diagonal().iter().any(|d| d * d < 1e-13) {
                return Err(Error::SingularSystem { group });
            }
            Some(chol)
        };
        Ok(Block { start, len, marker, level, powers, col_mean, col_norm, cols, gram, factor, ridge })
    }

    fn coefficients(&self, target: &[f64]) -> (f64, DVector<f64>) {
        let mean = pairwise_mean(target);
        let k = self.cols.len();
        let Some(factor) = &self.factor else {
            return (mean, DVector::zeros(0));
        };
        let resid: Vec<f64> = target.iter().map(|y| y - mean).collect();
        let rhs = DVector::from_iterator(
            k,
            self.cols.iter().map(|c| pairwise_sum(&c.iter().zip(&resid).map(|(a, b)| a * b).collect::<Vec<_>>())),
        );
        let mut coef = factor.solve(&rhs);
        if self.ridge > 0.0 {
            for _ in 0..REFINEMENT_STEPS {
                let r = &rhs - &self.gram * &coef;
                coef += factor.solve(&r);
            }
        }
        (mean, coef)
    }

    fn fit(&self, target: &[f64]) -> Vec<f64> {
        let (mean, coef) = self.coefficients(target);
        (0..self.len)
            .map(|p| {
                let mut acc = mean;
                for (c, col) in coef.iter().zip(&self.cols) {
                    acc += c * col[p];
                }
                acc
            })
            .collect()
    }

    fn predict_with(&self, mean: f64, coef: &DVector<f64>, marker: f64, level: f64) -> f64 {
        let u = self.marker.map_or(0.0, |s| s.apply(marker));
        let w = self.level.map_or(0.0, |s| s.apply(level));
        let mut acc = mean;
        for (j, &(a, b)) in self.powers.iter().enumerate() {
            if self.col_norm[j] == 0.0 {
                continue;
            }
            let raw = u.powi(a as i32) * w.powi(b as i32);
            acc += coef[j] * (raw - self.col_mean[j]) / self.col_norm[j];
        }
        acc
    }
}

/// A fixed regression design over one time step, reusable across targets.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    blocks: Vec<Block>,
    n: usize,
    estimator: Estimator,
    k_inner: usize,
}

impl RegressionDesign {
    /// `markers[p]` is particle `p`'s forward-state marker; `levels[p]` its
    /// backward-driver level (used by the pooled estimator only). Particles
    /// are laid out group-major with `k_inner` per group.
    pub fn new(markers: &[f64], levels: Option<&[f64]>, k_inner: usize, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let n = markers.len();
        if n == 0 {
            return Err(Error::EmptyPopulation);
        }
        if let Some(l) = levels {
            if l.len() != n {
                return Err(Error::shape("levels and markers differ in length"));
            }
        }
        let blocks = match cfg.estimator {
            Estimator::Pooled => vec![Block::build(0, markers, levels, cfg.basis_degree, cfg.ridge, 0)?],
            Estimator::Grouped => {
                if k_inner == 0 || n % k_inner != 0 {
                    return Err(Error::shape(format!("{n} particles do not split into groups of {k_inner}")));
                }
                (0..n / k_inner)
                    .into_par_iter()
                    .map(|g| {
                        let r = g * k_inner..(g + 1) * k_inner;
                        Block::build(r.start, &markers[r], None, cfg.basis_degree, cfg.ridge, g)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self { blocks, n, estimator: cfg.estimator, k_inner })
    }

    /// In-sample fitted conditional expectation of `target`.
    pub fn fit(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.n {
            return Err(Error::shape(format!("target length {} vs design {}", target.len(), self.n)));
        }
        let parts: Vec<Vec<f64>> =
            self.blocks.par_iter().map(|b| b.fit(&target[b.start..b.start + b.len])).collect();
        Ok(parts.concat())
    }

    /// Fit and keep the coefficients for out-of-sample use.
    pub fn predictor(&self, target: &[f64]) -> Result<Predictor<'_>> {
        if target.len() != self.n {
            return Err(Error::shape(format!("target length {} vs design {}", target.len(), self.n)));
        }
        let coefs = self.blocks.iter().map(|b| b.coefficients(&target[b.start..b.start + b.len])).collect();
        Ok(Predictor { design: self, coefs })
    }
}

/// Fitted regression usable at new points.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    design: &'a RegressionDesign,
    coefs: Vec<(f64, DVector<f64>)>,
}

impl Predictor<'_> {
    /// Prediction for a point in `group` (ignored by the pooled estimator).
    pub fn predict(&self, group: usize, marker: f64, level: f64) -> f64 {
        let g = match self.design.estimator {
            Estimator::Pooled => 0,
            Estimator::Grouped => group,
        };
        let (mean, coef) = &self.coefs[g];
        self.design.blocks[g].predict_with(*mean, coef, marker, level)
    }

    pub fn k_inner(&self) -> usize {
        self.design.k_inner
    }
}

/// Fit `targets` on `markers` and return the predictor's in-sample values.
pub fn regress(
    targets: &[f64],
    markers: &[f64],
    levels: Option<&[f64]>,
    k_inner: usize,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    RegressionDesign::new(markers, levels, k_inner, cfg)?.fit(targets)
}
