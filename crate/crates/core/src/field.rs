use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-particle, per-grid-point values stored time-major: `at(i)` is the
/// whole population at grid index `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    n_particles: usize,
    n_points: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn filled(n_particles: usize, n_points: usize, value: f64) -> Self {
        Self { n_particles, n_points, data: vec![value; n_particles * n_points] }
    }

    pub fn zeros(n_particles: usize, n_points: usize) -> Self {
        Self::filled(n_particles, n_points, 0.0)
    }

    /// Build from `f(particle, index)`.
    pub fn from_fn(n_particles: usize, n_points: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_particles * n_points);
        for i in 0..n_points {
            for p in 0..n_particles {
                data.push(f(p, i));
            }
        }
        Self { n_particles, n_points, data }
    }

    /// Build from time-major rows, one row per grid point.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_points = rows.len();
        let n_particles = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_particles) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self { n_particles, n_points, data: rows.concat() })
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_particles..(i + 1) * self.n_particles]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_particles..(i + 1) * self.n_particles]
    }

    #[inline]
    pub fn get(&self, particle: usize, i: usize) -> f64 {
        self.data[i * self.n_particles + particle]
    }

    #[inline]
    pub fn set(&mut self, particle: usize, i: usize, value: f64) {
        self.data[i * self.n_particles + particle] = value;
    }

    /// The time path of one particle.
    pub fn path(&self, particle: usize) -> Vec<f64> {
        (0..self.n_points).map(|i| self.get(particle, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Element-wise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        if self.n_particles != other.n_particles || self.n_points != other.n_points {
            return Err(Error::shape("field shapes differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(Field { n_particles: self.n_particles, n_points: self.n_points, data })
    }

    /// Same values with the time axis reversed.
    pub fn reversed_in_time(&self) -> Field {
        let n = self.n_points;
        Field::from_fn(self.n_particles, n, |p, i| self.get(p, n - 1 - i))
    }
}
