//! Empirical-measure versions of the population averages `E'` and `E*`,
//! and the contraction check on the Lipschitz data.

use serde::{Deserialize, Serialize};

use crate::coeff::LipschitzMeta;
use crate::dsl::{Bindings, Expr, KernelAtStep, SeparableKernel, Var};
use crate::error::{Error, Result};

/// The population state at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSnapshot {
    pub time_index: usize,
    pub x: Option<Vec<f64>>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Option<Vec<f64>>,
}

impl PopulationSnapshot {
    pub fn new(time_index: usize, y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let s = Self { time_index, x: None, y, z, v: None };
        s.validate()?;
        Ok(s)
    }

    pub fn with_v(mut self, v: Vec<f64>) -> Result<Self> {
        self.v = Some(v);
        self.validate()?;
        Ok(self)
    }

    pub fn with_x(mut self, x: Vec<f64>) -> Result<Self> {
        self.x = Some(x);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::EmptyPopulation);
        }
        let lens = [Some(self.z.len()), self.x.as_ref().map(Vec::len), self.v.as_ref().map(Vec::len)];
        if lens.iter().flatten().any(|&l| l != n) {
            return Err(Error::shape("snapshot arrays differ in length"));
        }
        let all = self.y.iter().chain(&self.z).chain(self.x.iter().flatten()).chain(self.v.iter().flatten());
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::invalid("snapshot holds non-finite values"));
        }
        Ok(())
    }

    /// Bind member `j` into the primed slots.
    #[inline]
    pub fn bind_primed(&self, j: usize, b: &mut Bindings) {
        b.set(Var::Yp, self.y[j]).set(Var::Zp, self.z[j]);
        if let Some(x) = &self.x {
            b.set(Var::Xp, x[j]);
        }
        if let Some(v) = &self.v {
            b.set(Var::Vp, v[j]);
        }
    }

    /// Bind member `j` into the unprimed slots.
    #[inline]
    pub fn bind_own(&self, j: usize, b: &mut Bindings) {
        b.set(Var::Y, self.y[j]).set(Var::Z, self.z[j]);
        if let Some(x) = &self.x {
            b.set(Var::X, x[j]);
        }
        if let Some(v) = &self.v {
            b.set(Var::V, v[j]);
        }
    }
}

/// A kernel averaged against one snapshot, ready for per-particle queries.
pub fn snapshot_kernel<'k>(
    kernel: &'k SeparableKernel,
    snap: &PopulationSnapshot,
    t: f64,
    carrier: Option<&[f64]>,
) -> Result<KernelAtStep<'k>> {
    if snap.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    kernel.at_step(t, snap.len(), |j, b| snap.bind_primed(j, b), carrier)
}

/// `(1/N) sum_j theta(t, own, primed = member j)`.
pub fn gamma_hat(theta: &Expr, own: &Bindings, snap: &PopulationSnapshot, t: f64) -> Result<f64> {
    let k = SeparableKernel::compile(theta);
    let mut own = *own;
    own.set(Var::T, t);
    snapshot_kernel(&k, snap, t, None)?.value(&own)
}

/// `(1/N) sum_j carrier_j * kernel(t, own, primed = member j)`.
///
/// Integrating over the first argument of a kernel `k(w*, w)` is the same
/// call with `kernel.swap_primed()`.
pub fn estar_hat(kernel: &Expr, carrier: &[f64], snap: &PopulationSnapshot, own: &Bindings, t: f64) -> Result<f64> {
    if carrier.len() != snap.len() {
        return Err(Error::shape(format!("carrier length {} vs snapshot {}", carrier.len(), snap.len())));
    }
    let k = SeparableKernel::compile(kernel);
    let mut own = *own;
    own.set(Var::T, t);
    snapshot_kernel(&k, snap, t, Some(carrier))?.value(&own)
}

/// `(1/N) sum_j carrier_j * kernel(own = member p, primed = member j)` for
/// every member `p` of the snapshot.
pub fn average_each_member(
    kernel: &SeparableKernel,
    snap: &PopulationSnapshot,
    t: f64,
    carrier: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if snap.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    kernel.average_each(t, snap.len(), |p, b| snap.bind_own(p, b), snap.len(), |j, b| snap.bind_primed(j, b), carrier)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    /// Coupling constant at which the constants were evaluated.
    pub c: f64,
    /// `M4 / (1 - M2)` at `c`; infinite when `M2 >= 1`.
    pub ratio: f64,
    pub h1_ok: bool,
    pub margin: f64,
}

fn constants(m: &LipschitzMeta, c: f64) -> [f64; 4] {
    let lg = m.l_gamma;
    let m1 = m.k_y * m.k_y * (1.0 + m.alpha2) + (1.0 + lg) * (m.l_y + m.l_z * c + 0.5 * lg * lg + lg * m.l_zp * c);
    let m2 = (1.0 + lg) * m.l_z / c + m.alpha1 + m.alpha2 * m.alpha3;
    let m3 = 0.5 * m.l_yp * m.l_yp + m.alpha2 * m.k_yp;
    let m4 = lg * m.l_zp / c + m.alpha2 * m.alpha4;
    [m1, m2, m3, m4]
}

/// Contraction check over `C in {2^-10, ..., 2^10}`.
pub fn check_h1(meta: &LipschitzMeta) -> ContractionReport {
    let margin = 1.0 - (meta.alpha1 + meta.alpha2 * meta.alpha3 + meta.alpha2 * meta.alpha4);
    let mut best: Option<(f64, [f64; 4], f64)> = None;
    let mut fallback: Option<(f64, [f64; 4])> = None;
    for k in -10..=10 {
        let c = 2f64.powi(k);
        let ms = constants(meta, c);
        if fallback.is_none_or(|(_, f)| ms[1] < f[1]) {
            fallback = Some((c, ms));
        }
        if ms[1] < 1.0 {
            let ratio = ms[3] / (1.0 - ms[1]);
            if ratio < 1.0 && best.is_none_or(|(_, _, r)| ratio < r) {
                best = Some((c, ms, ratio));
            }
        }
    }
    let (c, ms, ratio, feasible) = match best {
        Some((c, ms, r)) => (c, ms, r, true),
        None => {
            let (c, ms) = fallback.expect("scan is nonempty");
            let r = if ms[1] < 1.0 { ms[3] / (1.0 - ms[1]) } else { f64::INFINITY };
            (c, ms, r, false)
        }
    };
    ContractionReport {
        m1: ms[0],
        m2: ms[1],
        m3: ms[2],
        m4: ms[3],
        c,
        ratio,
        h1_ok: margin > 0.0 && feasible,
        margin,
    }
}
