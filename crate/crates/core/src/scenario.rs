//! Time grid, dual Brownian drivers and the time-reversal transform.
//!
//! An ensemble holds `m_outer` groups. All `k_inner` particles of a group
//! share one backward-driver path `B`; every particle has its own forward
//! path `W`. Increments come from keyed ChaCha streams, one stream per
//! `(driver, group, particle)`, so any path can be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;

/// Uniform partition of `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_start >= t_end {
            return Err(Error::invalid(format!("time grid needs t_start < t_end, got [{t_start}, {t_end}]")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        Ok(Self { t_start, t_end, n_steps })
    }

    /// Grid on `[0, horizon]`.
    pub fn horizon(horizon: f64, n_steps: usize) -> Result<Self> {
        Self::new(0.0, horizon, n_steps)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Grid point `k`, computed as `t_start + k * dt` (never by accumulation).
    pub fn point(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.point(k)).collect()
    }

    /// Nearest grid index to `t`; ties go to the lower index.
    pub fn nearest_index(&self, t: f64) -> usize {
        let x = (t - self.t_start) / self.dt();
        let lo = x.floor().clamp(0.0, self.n_steps as f64) as usize;
        if lo < self.n_steps && x - lo as f64 > 0.5 {
            lo + 1
        } else {
            lo
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Driver {
    Forward = 0,
    Backward = 1,
    Query = 2,
}

fn stream_id(driver: Driver, group: usize, particle: usize) -> u64 {
    ((driver as u64) << 62) | ((group as u64 & 0x7fff_ffff) << 31) | (particle as u64 & 0x7fff_ffff)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn gaussian_path(seed: u64, stream: u64, n: usize, scale: f64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    debug_assert_eq!(out.len(), n);
    for slot in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *slot = scale * z;
    }
}

/// Forward (`dW`) and backward (`dB`) Brownian increments for a grouped
/// particle population.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEnsemble {
    grid: TimeGrid,
    m_outer: usize,
    k_inner: usize,
    /// particle-major: `dw[p * n_steps + s]`
    dw: Vec<f64>,
    /// group-major: `db[g * n_steps + s]`
    db: Vec<f64>,
    seed: u64,
}

impl ScenarioEnsemble {
    /// Sample i.i.d. `Normal(0, dt)` increments for every driver.
    pub fn sample(grid: TimeGrid, m_outer: usize, k_inner: usize, seed: u64) -> Result<Self> {
        if m_outer == 0 || k_inner == 0 {
            return Err(Error::invalid("particle counts must be at least 1"));
        }
        let n = grid.n_steps();
        let sd = grid.dt().sqrt();
        let mut dw = vec![0.0; m_outer * k_inner * n];
        dw.par_chunks_mut(n).enumerate().for_each(|(p, chunk)| {
            gaussian_path(seed, stream_id(Driver::Forward, p / k_inner, p % k_inner), n, sd, chunk);
        });
        let mut db = vec![0.0; m_outer * n];
        db.par_chunks_mut(n).enumerate().for_each(|(g, chunk)| {
            gaussian_path(seed, stream_id(Driver::Backward, g, 0), n, sd, chunk);
        });
        Ok(Self { grid, m_outer, k_inner, dw, db, seed })
    }

    /// Ensemble from explicit increments (`dw` particle-major, `db` group-major).
    pub fn from_increments(
        grid: TimeGrid,
        m_outer: usize,
        k_inner: usize,
        dw: Vec<f64>,
        db: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = grid.n_steps();
        if m_outer == 0 || k_inner == 0 {
            return Err(Error::invalid("particle counts must be at least 1"));
        }
        if dw.len() != m_outer * k_inner * n || db.len() != m_outer * n {
            return Err(Error::shape("increment arrays do not match the ensemble shape"));
        }
        if dw.iter().chain(&db).any(|x| !x.is_finite()) {
            return Err(Error::invalid("increments must be finite"));
        }
        Ok(Self { grid, m_outer, k_inner, dw, db, seed })
    }

    /// Same backward-driver groups, freshly drawn forward particles.
    ///
    /// `key` selects an independent stream family, so distinct keys give
    /// independent forward paths.
    pub fn with_fresh_forward(&self, k_inner: usize, key: u64) -> Result<Self> {
        if k_inner == 0 {
            return Err(Error::invalid("particle counts must be at least 1"));
        }
        let n = self.grid.n_steps();
        let sd = self.grid.dt().sqrt();
        let seed = splitmix(self.seed ^ splitmix(key));
        let mut dw = vec![0.0; self.m_outer * k_inner * n];
        dw.par_chunks_mut(n).enumerate().for_each(|(p, chunk)| {
            gaussian_path(seed, stream_id(Driver::Query, p / k_inner, p % k_inner), n, sd, chunk);
        });
        Ok(Self { grid: self.grid, m_outer: self.m_outer, k_inner, dw, db: self.db.clone(), seed: self.seed })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn m_outer(&self) -> usize {
        self.m_outer
    }

    pub fn k_inner(&self) -> usize {
        self.k_inner
    }

    pub fn n_particles(&self) -> usize {
        self.m_outer * self.k_inner
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn group_of(&self, particle: usize) -> usize {
        particle / self.k_inner
    }

    /// Particle index range of group `g`.
    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        g * self.k_inner..(g + 1) * self.k_inner
    }

    #[inline]
    pub fn dw(&self, particle: usize, step: usize) -> f64 {
        self.dw[particle * self.grid.n_steps() + step]
    }

    #[inline]
    pub fn db(&self, group: usize, step: usize) -> f64 {
        self.db[group * self.grid.n_steps() + step]
    }

    /// Backward increment seen by a particle.
    #[inline]
    pub fn db_of(&self, particle: usize, step: usize) -> f64 {
        self.db(self.group_of(particle), step)
    }

    pub fn dw_path(&self, particle: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.dw[particle * n..(particle + 1) * n]
    }

    pub fn db_path(&self, group: usize) -> &[f64] {
        let n = self.grid.n_steps();
        &self.db[group * n..(group + 1) * n]
    }

    /// `W_{t_i}` for every particle (`W_{t_0} = 0`).
    pub fn forward_levels(&self) -> Field {
        let n = self.grid.n_steps();
        let np = self.n_particles();
        let mut f = Field::zeros(np, n + 1);
        for p in 0..np {
            let mut acc = 0.0;
            for s in 0..n {
                acc += self.dw(p, s);
                f.set(p, s + 1, acc);
            }
        }
        f
    }

    /// `B_T - B_{t_i}` for every particle (zero at the last index).
    pub fn backward_levels(&self) -> Field {
        let n = self.grid.n_steps();
        let np = self.n_particles();
        let mut f = Field::zeros(np, n + 1);
        for g in 0..self.m_outer {
            let mut acc = 0.0;
            let mut col = vec![0.0; n + 1];
            for s in (0..n).rev() {
                acc += self.db(g, s);
                col[s] = acc;
            }
            for p in self.group_range(g) {
                for (i, v) in col.iter().enumerate() {
                    f.set(p, i, *v);
                }
            }
        }
        f
    }

    /// Time reversal on increments.
    ///
    /// Step `k` of the result carries step `n-1-k` of the input, and the two
    /// drivers swap roles: the old backward path becomes the new forward
    /// path and vice versa. Only ensembles with `k_inner == 1` can be
    /// reversed, because the new backward driver must be shared inside a
    /// group while the old forward paths are particle-specific.
    pub fn time_reverse(&self) -> Result<Self> {
        if self.k_inner != 1 {
            return Err(Error::shape(format!(
                "time reversal needs k_inner = 1 (got {} x {})",
                self.m_outer, self.k_inner
            )));
        }
        let n = self.grid.n_steps();
        let mut dw = vec![0.0; self.dw.len()];
        let mut db = vec![0.0; self.db.len()];
        for g in 0..self.m_outer {
            for s in 0..n {
                dw[g * n + s] = self.db(g, n - 1 - s);
                db[g * n + s] = self.dw(g, n - 1 - s);
            }
        }
        Ok(Self { grid: self.grid, m_outer: self.m_outer, k_inner: 1, dw, db, seed: self.seed })
    }
}

/// Free-function form of [`ScenarioEnsemble::sample`].
pub fn sample_ensemble(grid: TimeGrid, m_outer: usize, k_inner: usize, seed: u64) -> Result<ScenarioEnsemble> {
    ScenarioEnsemble::sample(grid, m_outer, k_inner, seed)
}

/// Free-function form of [`ScenarioEnsemble::time_reverse`].
pub fn time_reverse(ens: &ScenarioEnsemble) -> Result<ScenarioEnsemble> {
    ens.time_reverse()
}
