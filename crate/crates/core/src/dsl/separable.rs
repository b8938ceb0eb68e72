//! Population averages of interaction kernels.
//!
//! A kernel `k(own, primed)` averaged over a population costs `O(N)` per
//! particle when done naively. Most kernels in practice are sums of
//! products `a(own) * b(primed)`, so rewriting the kernel in that form lets
//! one population pass compute the moments `mean_j b(j)` and every particle
//! then pays only for its own factors. Summands that do not split are kept
//! as a residual kernel and averaged directly.

use rayon::prelude::*;

use super::{Bindings, Expr, Var};
use crate::error::{Error, Result};
use crate::reduce::pairwise_mean;

const MAX_TERMS: usize = 32;
const MAX_EXPANDED_POWER: u32 = 4;

type Terms = Vec<(Expr, Expr)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableKernel {
    terms: Terms,
    rest: Option<Expr>,
}

fn own_pure(e: &Expr) -> bool {
    !e.has_primed()
}

fn primed_pure(e: &Expr) -> bool {
    e.vars().iter().all(|v| v.is_primed() || *v == Var::T)
}

fn product(l: Terms, r: Terms) -> Option<Terms> {
    if l.len() * r.len() > MAX_TERMS {
        return None;
    }
    let mut out = Vec::with_capacity(l.len() * r.len());
    for (a1, b1) in &l {
        for (a2, b2) in &r {
            out.push((Expr::mul(a1.clone(), a2.clone()), Expr::mul(b1.clone(), b2.clone())));
        }
    }
    Some(out)
}

fn negate(ts: Terms) -> Terms {
    ts.into_iter().map(|(a, b)| (Expr::neg(a), b)).collect()
}

fn expand(e: &Expr) -> Option<Terms> {
    if own_pure(e) {
        return Some(vec![(e.clone(), Expr::Num(1.0))]);
    }
    if primed_pure(e) {
        return Some(vec![(Expr::Num(1.0), e.clone())]);
    }
    match e {
        Expr::Add(l, r) => {
            let mut ts = expand(l)?;
            ts.extend(expand(r)?);
            (ts.len() <= MAX_TERMS).then_some(ts)
        }
        Expr::Sub(l, r) => {
            let mut ts = expand(l)?;
            ts.extend(negate(expand(r)?));
            (ts.len() <= MAX_TERMS).then_some(ts)
        }
        Expr::Neg(a) => Some(negate(expand(a)?)),
        Expr::Mul(l, r) => product(expand(l)?, expand(r)?),
        Expr::Div(l, r) => {
            let ts = expand(l)?;
            if own_pure(r) {
                Some(ts.into_iter().map(|(a, b)| (Expr::div(a, (**r).clone()), b)).collect())
            } else if primed_pure(r) {
                Some(ts.into_iter().map(|(a, b)| (a, Expr::div(b, (**r).clone()))).collect())
            } else {
                None
            }
        }
        Expr::Pow(a, n) if *n <= MAX_EXPANDED_POWER => {
            let base = expand(a)?;
            let mut acc = vec![(Expr::Num(1.0), Expr::Num(1.0))];
            for _ in 0..*n {
                acc = product(acc, base.clone())?;
            }
            Some(acc)
        }
        _ => None,
    }
}

fn summands(e: &Expr, sign: bool, out: &mut Vec<(bool, Expr)>) {
    match e {
        Expr::Add(l, r) => {
            summands(l, sign, out);
            summands(r, sign, out);
        }
        Expr::Sub(l, r) => {
            summands(l, sign, out);
            summands(r, !sign, out);
        }
        Expr::Neg(a) if !own_pure(a) => summands(a, !sign, out),
        other => out.push((sign, other.clone())),
    }
}

impl SeparableKernel {
    pub fn compile(e: &Expr) -> Self {
        if let Some(terms) = expand(e) {
            return Self { terms: merge(terms), rest: None };
        }
        let mut parts = Vec::new();
        summands(e, true, &mut parts);
        let mut terms = Vec::new();
        let mut rest: Option<Expr> = None;
        for (positive, part) in parts {
            match expand(&part) {
                Some(ts) if terms.len() + ts.len() <= MAX_TERMS => {
                    terms.extend(if positive { ts } else { negate(ts) });
                }
                _ => {
                    rest = Some(match (rest, positive) {
                        (None, true) => part,
                        (None, false) => Expr::neg(part),
                        (Some(r), true) => Expr::add(r, part),
                        (Some(r), false) => Expr::sub(r, part),
                    });
                }
            }
        }
        Self { terms: merge(terms), rest }
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn is_fully_separable(&self) -> bool {
        self.rest.is_none()
    }

    pub fn is_zero(&self) -> bool {
        self.rest.is_none() && self.terms.iter().all(|(a, b)| a.is_zero() || b.is_zero())
    }

    /// Precompute the population side of the kernel.
    ///
    /// `primed(j, b)` binds the primed slots for population member `j`.
    /// `carrier`, when given, weights member `j` inside the average.
    pub fn at_step<F>(&self, t: f64, n: usize, primed: F, carrier: Option<&[f64]>) -> Result<KernelAtStep<'_>>
    where
        F: Fn(usize, &mut Bindings) + Sync,
    {
        if n == 0 {
            return Err(Error::EmptyPopulation);
        }
        if let Some(c) = carrier {
            if c.len() != n {
                return Err(Error::shape(format!("carrier has length {}, population {n}", c.len())));
            }
        }
        let bind = |j: usize| {
            let mut b = Bindings::new();
            b.set(Var::T, t);
            primed(j, &mut b);
            b
        };
        let weight = |j: usize| carrier.map_or(1.0, |c| c[j]);
        let mut moments = Vec::with_capacity(self.terms.len());
        for (_, b_k) in &self.terms {
            let m = if let Some(c) = b_k.constant_value() {
                match carrier {
                    None => c,
                    Some(w) => c * pairwise_mean(w),
                }
            } else {
                let vals: Vec<f64> =
                    (0..n).into_par_iter().map(|j| Ok(weight(j) * b_k.eval(&bind(j))?)).collect::<Result<_>>()?;
                pairwise_mean(&vals)
            };
            moments.push(m);
        }
        let population = if self.rest.is_some() {
            let pop: Vec<(f64, Bindings)> = (0..n).map(|j| (weight(j), bind(j))).collect();
            Some(pop)
        } else {
            None
        };
        Ok(KernelAtStep { kernel: self, moments, population })
    }

    /// The average for each of `n_own` particles, whose unprimed slots are
    /// bound by `own(p, b)`, against a population of `n_pop` members bound
    /// by `primed(j, b)`.
    pub fn average_each<O, F>(
        &self,
        t: f64,
        n_own: usize,
        own: O,
        n_pop: usize,
        primed: F,
        carrier: Option<&[f64]>,
    ) -> Result<Vec<f64>>
    where
        O: Fn(usize, &mut Bindings) + Sync,
        F: Fn(usize, &mut Bindings) + Sync,
    {
        if self.is_zero() {
            return Ok(vec![0.0; n_own]);
        }
        let step = self.at_step(t, n_pop, primed, carrier)?;
        (0..n_own)
            .into_par_iter()
            .map(|p| {
                let mut b = Bindings::new();
                b.set(Var::T, t);
                own(p, &mut b);
                step.value(&b)
            })
            .collect()
    }
}

fn merge(terms: Terms) -> Terms {
    let mut out: Terms = Vec::new();
    for (a, b) in terms {
        if a.is_zero() || b.is_zero() {
            continue;
        }
        match out.iter_mut().find(|(_, b2)| *b2 == b) {
            Some((a2, _)) => *a2 = Expr::add(a2.clone(), a),
            None => out.push((a, b)),
        }
    }
    out
}

/// A kernel with its population moments fixed.
#[derive(Debug, Clone)]
pub struct KernelAtStep<'a> {
    kernel: &'a SeparableKernel,
    moments: Vec<f64>,
    population: Option<Vec<(f64, Bindings)>>,
}

impl KernelAtStep<'_> {
    /// `(1/N) sum_j w_j k(own, primed_j)`.
    pub fn value(&self, own: &Bindings) -> Result<f64> {
        let mut acc = 0.0;
        for ((a, _), m) in self.kernel.terms.iter().zip(&self.moments) {
            acc += a.eval(own)? * m;
        }
        if let (Some(rest), Some(pop)) = (&self.kernel.rest, &self.population) {
            let vals: Vec<f64> = pop
                .iter()
                .map(|(w, pb)| {
                    let mut b = *own;
                    b.overlay(pb);
                    Ok(w * rest.eval(&b)?)
                })
                .collect::<Result<_>>()?;
            acc += pairwise_mean(&vals);
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    fn brute(e: &Expr, own: &Bindings, ys: &[f64], zs: &[f64]) -> f64 {
        let vals: Vec<f64> = ys
            .iter()
            .zip(zs)
            .map(|(&y, &z)| {
                let mut b = *own;
                b.set(Var::Yp, y).set(Var::Zp, z);
                e.eval(&b).unwrap()
            })
            .collect();
        pairwise_mean(&vals)
    }

    #[test]
    fn separable_and_residual_kernels_match_brute_force() {
        let ys = [0.3, -1.2, 2.0, 0.7, 1.1];
        let zs = [1.0, 0.5, -0.25, 2.0, -1.5];
        let own = Bindings::from_pairs(&[(Var::T, 0.4), (Var::Y, 0.9), (Var::Z, -0.6)]);
        for (src, separable) in [
            ("y*yp", true),
            ("(y - yp)^2 + z*zp/(1 + t)", true),
            ("exp(-t)*(y - yp)", true),
            ("sin(y)*cos(zp) - 3*yp/(2 + z^2)", true),
            ("tanh(y - yp) + y*zp", false),
            ("sqrt(1 + (y - yp)^2)", false),
            ("y + z", true),
        ] {
            let e = parse(src).unwrap();
            let k = SeparableKernel::compile(&e);
            assert_eq!(k.is_fully_separable(), separable, "{src}");
            let step = k
                .at_step(0.4, ys.len(), |j, b| {
                    b.set(Var::Yp, ys[j]).set(Var::Zp, zs[j]);
                }, None)
                .unwrap();
            let got = step.value(&own).unwrap();
            let want = brute(&e, &own, &ys, &zs);
            assert!((got - want).abs() <= 1e-13 * (1.0 + want.abs()), "{src}: {got} vs {want}");
        }
    }

    #[test]
    fn own_only_kernel_is_exact() {
        let e = parse("sin(y)*exp(z) + 0.1*t").unwrap();
        let k = SeparableKernel::compile(&e);
        assert_eq!(k.n_terms(), 1);
        let own = Bindings::from_pairs(&[(Var::T, 0.2), (Var::Y, 0.3), (Var::Z, 0.1)]);
        let step = k.at_step(0.2, 97, |_, _| {}, None).unwrap();
        assert_eq!(step.value(&own).unwrap(), e.eval(&own).unwrap());
    }

    #[test]
    fn carrier_weights_members() {
        let k = SeparableKernel::compile(&Expr::Num(1.0));
        let step = k.at_step(0.0, 3, |_, _| {}, Some(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(step.value(&Bindings::new()).unwrap(), 2.0);
        assert!(matches!(k.at_step(0.0, 3, |_, _| {}, Some(&[1.0])), Err(Error::Shape(_))));
        assert!(matches!(k.at_step(0.0, 0, |_, _| {}, None), Err(Error::EmptyPopulation)));
    }
}
