//! Scalar coefficient expressions.
//!
//! Grammar (lowest to highest precedence): `+ -`, `* /`, unary `-`, `^`.
//! `*` and `/` associate left, `^` associates right and takes a
//! non-negative integer exponent. Functions: `exp sin cos tanh sqrt abs`
//! (plus `sign`, which only appears in derivatives of `abs`).
//!
//! Variables come from a fixed set. The primed names `xp yp zp vp` are the
//! slots filled from the rest of the population in mean-field averages.

mod diff;
mod parse;
mod separable;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diff::diff;
pub use parse::parse;
pub use separable::{KernelAtStep, SeparableKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Var {
    T,
    X,
    Xp,
    Y,
    Z,
    Yp,
    Zp,
    V,
    Vp,
    P,
    Q,
}

impl Var {
    pub const ALL: [Var; 11] = [
        Var::T,
        Var::X,
        Var::Xp,
        Var::Y,
        Var::Z,
        Var::Yp,
        Var::Zp,
        Var::V,
        Var::Vp,
        Var::P,
        Var::Q,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Xp => "xp",
            Var::Y => "y",
            Var::Z => "z",
            Var::Yp => "yp",
            Var::Zp => "zp",
            Var::V => "v",
            Var::Vp => "vp",
            Var::P => "p",
            Var::Q => "q",
        }
    }

    pub fn from_name(s: &str) -> Option<Var> {
        Var::ALL.iter().copied().find(|v| v.name() == s)
    }

    /// Primed slots are bound from the population, not from the particle.
    pub fn is_primed(self) -> bool {
        matches!(self, Var::Xp | Var::Yp | Var::Zp | Var::Vp)
    }

    /// Exchange a slot with its primed partner (`y <-> yp` etc.).
    pub fn swapped(self) -> Var {
        match self {
            Var::X => Var::Xp,
            Var::Xp => Var::X,
            Var::Y => Var::Yp,
            Var::Yp => Var::Y,
            Var::Z => Var::Zp,
            Var::Zp => Var::Z,
            Var::V => Var::Vp,
            Var::Vp => Var::V,
            other => other,
        }
    }

    #[inline]
    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Exp,
    Sin,
    Cos,
    Tanh,
    Sqrt,
    Abs,
    Sign,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        [Func::Exp, Func::Sin, Func::Cos, Func::Tanh, Func::Sqrt, Func::Abs, Func::Sign]
            .into_iter()
            .find(|f| f.name() == s)
    }

    fn apply(self, x: f64) -> Result<f64> {
        Ok(match self {
            Func::Exp => x.exp(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tanh => x.tanh(),
            Func::Sqrt => {
                if x < 0.0 {
                    return Err(Error::NumericDomain(format!("sqrt of negative value {x}")));
                }
                x.sqrt()
            }
            Func::Abs => x.abs(),
            Func::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

/// Values for the variable slots, with a record of which are bound.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings {
    vals: [f64; 11],
    bound: u16,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn set(&mut self, var: Var, value: f64) -> &mut Self {
        self.vals[var.slot()] = value;
        self.bound |= 1 << var.slot();
        self
    }

    pub fn with(mut self, var: Var, value: f64) -> Self {
        self.set(var, value);
        self
    }

    #[inline]
    pub fn get(&self, var: Var) -> Option<f64> {
        if self.bound & (1 << var.slot()) != 0 {
            Some(self.vals[var.slot()])
        } else {
            None
        }
    }

    /// Copy every slot bound in `other` over this one.
    #[inline]
    pub fn overlay(&mut self, other: &Bindings) {
        for k in 0..11 {
            if other.bound & (1 << k) != 0 {
                self.vals[k] = other.vals[k];
            }
        }
        self.bound |= other.bound;
    }

    pub fn unset(&mut self, var: Var) {
        self.bound &= !(1 << var.slot());
    }

    pub fn from_pairs(pairs: &[(Var, f64)]) -> Self {
        let mut b = Self::new();
        for &(v, x) in pairs {
            b.set(v, x);
        }
        b
    }
}

impl Expr {
    pub fn num(x: f64) -> Expr {
        Expr::Num(x)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    pub fn zero() -> Expr {
        Expr::Num(0.0)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(x) if *x == 0.0)
    }

    pub fn eval(&self, b: &Bindings) -> Result<f64> {
        match self {
            Expr::Num(x) => Ok(*x),
            Expr::Var(v) => b.get(*v).ok_or(Error::UnboundVariable(*v)),
            Expr::Neg(a) => Ok(-a.eval(b)?),
            Expr::Add(l, r) => Ok(l.eval(b)? + r.eval(b)?),
            Expr::Sub(l, r) => Ok(l.eval(b)? - r.eval(b)?),
            Expr::Mul(l, r) => Ok(l.eval(b)? * r.eval(b)?),
            Expr::Div(l, r) => {
                let num = l.eval(b)?;
                let den = r.eval(b)?;
                if den == 0.0 {
                    return Err(Error::NumericDomain("division by zero".into()));
                }
                Ok(num / den)
            }
            Expr::Pow(a, n) => Ok(a.eval(b)?.powi(*n as i32)),
            Expr::Call(f, a) => f.apply(a.eval(b)?),
        }
    }

    /// Free variables, sorted and deduplicated.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => out.push(*v),
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(l, r) | Expr::Sub(l, r) | Expr::Mul(l, r) | Expr::Div(l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }

    pub fn uses(&self, var: Var) -> bool {
        self.vars().contains(&var)
    }

    pub fn has_primed(&self) -> bool {
        self.vars().iter().any(|v| v.is_primed())
    }

    /// Replace every variable by its primed partner and vice versa.
    pub fn swap_primed(&self) -> Expr {
        self.map_vars(&|v| Expr::Var(v.swapped()))
    }

    /// Substitute variables.
    pub fn map_vars(&self, f: &dyn Fn(Var) -> Expr) -> Expr {
        let rec = |e: &Expr| Box::new(e.map_vars(f));
        match self {
            Expr::Num(x) => Expr::Num(*x),
            Expr::Var(v) => f(*v),
            Expr::Neg(a) => Expr::Neg(rec(a)),
            Expr::Add(l, r) => Expr::Add(rec(l), rec(r)),
            Expr::Sub(l, r) => Expr::Sub(rec(l), rec(r)),
            Expr::Mul(l, r) => Expr::Mul(rec(l), rec(r)),
            Expr::Div(l, r) => Expr::Div(rec(l), rec(r)),
            Expr::Pow(a, n) => Expr::Pow(rec(a), *n),
            Expr::Call(g, a) => Expr::Call(*g, rec(a)),
        }
    }

    /// Check no variable outside `allowed` occurs.
    pub fn check_vars(&self, allowed: &[Var], slot: &str) -> Result<()> {
        match self.vars().into_iter().find(|v| !allowed.contains(v)) {
            Some(v) => Err(Error::invalid(format!("variable `{v}` is not allowed in `{slot}`"))),
            None => Ok(()),
        }
    }

    /// Constant value if the tree has no variables.
    pub fn constant_value(&self) -> Option<f64> {
        if self.vars().is_empty() {
            self.eval(&Bindings::new()).ok()
        } else {
            None
        }
    }

    // light constructors with local simplification, used by diff and by
    // expression builders elsewhere in the crate

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
            _ if a.is_zero() => b,
            _ if b.is_zero() => a,
            (_, Expr::Neg(inner)) => Expr::sub(a, (**inner).clone()),
            _ => Expr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
            _ if b.is_zero() => a,
            _ if a.is_zero() => Expr::neg(b),
            _ => Expr::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Num(x) => Expr::Num(-x),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
            _ if a.is_zero() || b.is_zero() => Expr::zero(),
            (Expr::Num(x), _) if *x == 1.0 => b,
            (_, Expr::Num(y)) if *y == 1.0 => a,
            (Expr::Num(x), _) if *x == -1.0 => Expr::neg(b),
            (_, Expr::Num(y)) if *y == -1.0 => Expr::neg(a),
            _ => Expr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (&a, &b) {
            (Expr::Num(x), Expr::Num(y)) if *y != 0.0 => Expr::Num(x / y),
            _ if a.is_zero() => Expr::zero(),
            (_, Expr::Num(y)) if *y == 1.0 => a,
            _ => Expr::Div(Box::new(a), Box::new(b)),
        }
    }

    pub fn pow(a: Expr, n: u32) -> Expr {
        match (&a, n) {
            (_, 0) => Expr::Num(1.0),
            (_, 1) => a,
            (Expr::Num(x), _) => Expr::Num(x.powi(n as i32)),
            _ => Expr::Pow(Box::new(a), n),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        Expr::Call(f, Box::new(a))
    }
}

impl std::str::FromStr for Expr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Expr> {
        parse(s)
    }
}

// precedence levels used by the printer
const ADD: u8 = 1;
const MUL: u8 = 2;
const UNARY: u8 = 3;
const POW: u8 = 4;
const ATOM: u8 = 5;

fn level(e: &Expr) -> u8 {
    match e {
        Expr::Num(x) if *x < 0.0 || (*x == 0.0 && x.is_sign_negative()) => UNARY,
        Expr::Num(_) | Expr::Var(_) | Expr::Call(..) => ATOM,
        Expr::Neg(_) => UNARY,
        Expr::Add(..) | Expr::Sub(..) => ADD,
        Expr::Mul(..) | Expr::Div(..) => MUL,
        Expr::Pow(..) => POW,
    }
}

fn write_at(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if level(e) < min {
        write!(f, "(")?;
        write_expr(f, e)?;
        write!(f, ")")
    } else {
        write_expr(f, e)
    }
}

fn write_expr(f: &mut fmt::Formatter<'_>, e: &Expr) -> fmt::Result {
    match e {
        Expr::Num(x) => write!(f, "{x}"),
        Expr::Var(v) => write!(f, "{v}"),
        Expr::Neg(a) => {
            write!(f, "-")?;
            // `-2` would read back as a negative literal
            if matches!(**a, Expr::Num(_)) {
                write!(f, "(")?;
                write_expr(f, a)?;
                write!(f, ")")
            } else {
                write_at(f, a, UNARY)
            }
        }
        Expr::Add(l, r) => {
            write_at(f, l, ADD)?;
            write!(f, " + ")?;
            write_at(f, r, MUL)
        }
        Expr::Sub(l, r) => {
            write_at(f, l, ADD)?;
            write!(f, " - ")?;
            write_at(f, r, MUL)
        }
        Expr::Mul(l, r) => {
            write_at(f, l, MUL)?;
            write!(f, "*")?;
            write_at(f, r, UNARY)
        }
        Expr::Div(l, r) => {
            write_at(f, l, MUL)?;
            write!(f, "/")?;
            write_at(f, r, UNARY)
        }
        Expr::Pow(a, n) => {
            write_at(f, a, ATOM)?;
            write!(f, "^{n}")
        }
        Expr::Call(g, a) => {
            write!(f, "{}(", g.name())?;
            write_expr(f, a)?;
            write!(f, ")")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(f, self)
    }
}

/// Free-function evaluation.
pub fn eval(e: &Expr, bindings: &Bindings) -> Result<f64> {
    e.eval(bindings)
}
