use mfbdsde_core::dsl::Func;
use mfbdsde_core::meanfield::gamma_hat;
use mfbdsde_core::{diff, parse, Bindings, Expr, PopulationSnapshot, Var};
use proptest::prelude::*;

const VARS: [Var; 6] = [Var::Y, Var::Z, Var::Yp, Var::Zp, Var::V, Var::T];

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0u32..40).prop_map(|n| Expr::Num(n as f64 / 4.0)),
        proptest::sample::select(VARS.to_vec()).prop_map(Expr::Var),
    ]
}

/// Trees built only from operations that are smooth everywhere.
fn smooth_expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 32, 2, |inner| {
        let funcs = proptest::sample::select(vec![Func::Sin, Func::Cos, Func::Tanh, Func::Exp]);
        prop_oneof![
            inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), 1u32..4).prop_map(|(a, n)| Expr::Pow(Box::new(a), n)),
            (funcs, inner.clone()).prop_map(|(f, a)| Expr::Call(f, Box::new(Expr::Call(Func::Tanh, Box::new(a))))),
        ]
    })
}

fn point() -> impl Strategy<Value = Bindings> {
    proptest::collection::vec(-1.5f64..1.5, VARS.len()).prop_map(|xs| {
        let mut b = Bindings::new();
        for (v, x) in VARS.iter().zip(xs) {
            b.set(*v, x);
        }
        b
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn printing_then_parsing_preserves_values(e in smooth_expr(), b in point()) {
        let back = parse(&e.to_string()).unwrap();
        let (x, y) = (e.eval(&b).unwrap(), back.eval(&b).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{e} -> {back}: {x} vs {y}");
        prop_assert_eq!(back.to_string(), parse(&back.to_string()).unwrap().to_string());
    }

    #[test]
    fn derivative_matches_central_difference(e in smooth_expr(), b in point(), k in 0usize..6) {
        let var = VARS[k];
        let d = diff(&e, var).eval(&b).unwrap();
        let x = b.get(var).unwrap();
        let h = 1e-5;
        let at = |v: f64| e.eval(&b.with(var, v)).unwrap();
        let fd = (at(x + h) - at(x - h)) / (2.0 * h);
        // curvature of the trees is bounded (arguments are squashed by
        // tanh), so the truncation error stays near h^2 times a modest factor
        prop_assert!((d - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "{e}: d/d{var} = {d}, fd {fd}");
    }

    #[test]
    fn parser_never_panics(s in ".{0,40}") {
        let _ = parse(&s);
    }

    #[test]
    fn parser_never_panics_on_grammar_tokens(toks in proptest::collection::vec(
        proptest::sample::select(vec!["y", "zp", "+", "-", "*", "/", "^", "(", ")", "2", "0.5", "sin", "exp", " ", "1e3", "t"]),
        0..20,
    )) {
        let _ = parse(&toks.concat());
    }

    #[test]
    fn gamma_hat_is_permutation_invariant(
        ys in proptest::collection::vec(-3.0f64..3.0, 1..40),
        seed in any::<u64>(),
        own in -2.0f64..2.0,
    ) {
        let n = ys.len();
        let zs: Vec<f64> = ys.iter().map(|y| 0.5 * y - 1.0).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = PopulationSnapshot::new(0, ys.clone(), zs.clone()).unwrap();
        let b = PopulationSnapshot::new(0, perm.iter().map(|&j| ys[j]).collect(), perm.iter().map(|&j| zs[j]).collect()).unwrap();
        let theta = parse("sin(y*yp) + zp^2 - y*zp").unwrap();
        let own = Bindings::new().with(Var::Y, own).with(Var::Z, 0.0);
        let (x, y) = (gamma_hat(&theta, &own, &a, 0.0).unwrap(), gamma_hat(&theta, &own, &b, 0.0).unwrap());
        prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    for bad in ["", "y +", "(y", "foo(y)", "y ^ 1.5", "2 $ y"] {
        assert!(parse(bad).is_err(), "{bad}");
    }
}
