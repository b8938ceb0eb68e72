use super::{Expr, Func, Var};

/// Symbolic partial derivative of `e` in `var`.
///
/// `abs` differentiates to `sign`, with `sign(0) = 0`.
pub fn diff(e: &Expr, var: Var) -> Expr {
    match e {
        Expr::Num(_) => Expr::zero(),
        Expr::Var(w) => Expr::Num(if *w == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => Expr::neg(diff(a, var)),
        Expr::Add(a, b) => Expr::add(diff(a, var), diff(b, var)),
        Expr::Sub(a, b) => Expr::sub(diff(a, var), diff(b, var)),
        Expr::Mul(a, b) => Expr::add(
            Expr::mul(diff(a, var), (**b).clone()),
            Expr::mul((**a).clone(), diff(b, var)),
        ),
        Expr::Div(a, b) => {
            let da = diff(a, var);
            let db = diff(b, var);
            let first = Expr::div(da, (**b).clone());
            if db.is_zero() {
                first
            } else {
                Expr::sub(first, Expr::div(Expr::mul((**a).clone(), db), Expr::pow((**b).clone(), 2)))
            }
        }
        Expr::Pow(a, n) => {
            if *n == 0 {
                return Expr::zero();
            }
            Expr::mul(Expr::mul(Expr::Num(*n as f64), Expr::pow((**a).clone(), n - 1)), diff(a, var))
        }
        Expr::Call(f, a) => {
            let da = diff(a, var);
            if da.is_zero() {
                return Expr::zero();
            }
            let a = (**a).clone();
            let outer = match f {
                Func::Exp => Expr::call(Func::Exp, a),
                Func::Sin => Expr::call(Func::Cos, a),
                Func::Cos => Expr::neg(Expr::call(Func::Sin, a)),
                Func::Tanh => Expr::sub(Expr::Num(1.0), Expr::pow(Expr::call(Func::Tanh, a), 2)),
                Func::Sqrt => Expr::div(Expr::Num(0.5), Expr::call(Func::Sqrt, a)),
                Func::Abs => Expr::call(Func::Sign, a),
                Func::Sign => return Expr::zero(),
            };
            Expr::mul(outer, da)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{parse, Bindings};
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(diff(&parse("y^2").unwrap(), Var::Y), parse("2*y").unwrap());
        assert_eq!(diff(&parse("y*zp").unwrap(), Var::Zp), parse("y").unwrap());
        let d = diff(&parse("exp(-t)*(y - yp)").unwrap(), Var::Yp);
        assert_eq!(d, parse("-exp(-t)").unwrap());
    }

    #[test]
    fn matches_central_difference() {
        let e = parse("exp(-t)*(y - yp)").unwrap();
        let d = diff(&e, Var::Yp);
        let at = |yp: f64| Bindings::from_pairs(&[(Var::T, 0.3), (Var::Y, 1.0), (Var::Yp, yp)]);
        let h = 1e-5;
        let fd = (e.eval(&at(2.0 + h)).unwrap() - e.eval(&at(2.0 - h)).unwrap()) / (2.0 * h);
        let exact = d.eval(&at(2.0)).unwrap();
        assert!((exact - fd).abs() <= 1e-6);
        assert!((exact + (-0.3f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn abs_has_sign_derivative() {
        let d = diff(&parse("abs(y)").unwrap(), Var::Y);
        for (y, s) in [(-2.0, -1.0), (0.0, 0.0), (3.0, 1.0)] {
            assert_eq!(d.eval(&Bindings::new().with(Var::Y, y)).unwrap(), s);
        }
    }

    #[test]
    fn quotient_and_chain_rules() {
        let e = parse("sin(y)/(1 + z^2) + sqrt(y)*tanh(z) - cos(y*z)").unwrap();
        let b = Bindings::from_pairs(&[(Var::Y, 0.7), (Var::Z, -0.4)]);
        for var in [Var::Y, Var::Z] {
            let h = 1e-5;
            let mut lo = b;
            let mut hi = b;
            lo.set(var, b.get(var).unwrap() - h);
            hi.set(var, b.get(var).unwrap() + h);
            let fd = (e.eval(&hi).unwrap() - e.eval(&lo).unwrap()) / (2.0 * h);
            let exact = diff(&e, var).eval(&b).unwrap();
            assert!((exact - fd).abs() <= 1e-8 * (1.0 + fd.abs()), "{var}: {exact} vs {fd}");
        }
    }
}
