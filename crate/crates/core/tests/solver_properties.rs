use mfbdsde_core::reduce::{log_log_slope, pairwise_mean};
use mfbdsde_core::*;

fn grid() -> TimeGrid {
    TimeGrid::horizon(1.0, 32).unwrap()
}

#[test]
fn martingale_error_shrinks_like_inverse_square_root() {
    let p = preset("martingale").unwrap();
    let ns = [256usize, 1024, 4096];
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let sq: Vec<f64> = (0..32u64)
                .map(|seed| {
                    let ens = sample_ensemble(grid(), 1, n, 1000 + seed).unwrap();
                    let (b, _) = solve_mf_bdsde(&p.coeffs, &ens, &p.solver, 1e-10, 10).unwrap();
                    let w = ens.forward_levels();
                    pairwise_mean(&(0..n).map(|k| (b.y.get(k, 0) - w.get(k, 0)).powi(2)).collect::<Vec<_>>())
                        + pairwise_mean(&b.z.at(4).iter().map(|z| (z - 1.0).powi(2)).collect::<Vec<_>>())
                })
                .collect();
            pairwise_mean(&sq).sqrt()
        })
        .collect();
    let slope = log_log_slope(&ns.map(|n| n as f64), &errs);
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    assert!((slope + 0.5).abs() <= 0.15, "slope {slope}, errors {errs:?}");
}

#[test]
fn constant_preset_is_exact_at_every_resolution() {
    let p = preset("constant").unwrap();
    for n in [4, 16, 64] {
        let ens = sample_ensemble(TimeGrid::horizon(1.0, n).unwrap(), 4, 64, 3).unwrap();
        let (b, _) = solve_mf_bdsde(&p.coeffs, &ens, &p.solver, 1e-12, 5).unwrap();
        assert!(b.y.as_slice().iter().all(|&y| y == presets::CONSTANT_VALUE));
        assert!(b.z.as_slice().iter().all(|&z| z == 0.0));
    }
}

#[test]
fn same_seed_same_bits() {
    let p = preset("linear-mean").unwrap();
    let run = || {
        let ens = sample_ensemble(grid(), 4, 256, 11).unwrap();
        solve_mf_bdsde(&p.coeffs, &ens, &p.solver, 1e-10, 20).unwrap()
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let other = sample_ensemble(grid(), 4, 256, 12).unwrap();
    assert_ne!(other, sample_ensemble(grid(), 4, 256, 11).unwrap());
}

#[test]
fn failing_contraction_check_is_refused() {
    let c = CoefficientSet::default()
        .with(Slot::ThetaG, "0.9*y + 0.9*yp")
        .unwrap()
        .with_lipschitz(LipschitzMeta { alpha1: 0.5, alpha2: 1.0, alpha3: 0.5, l_gamma: 1.0, ..Default::default() });
    assert!(!check_h1(&c.lipschitz).h1_ok);
    let ens = sample_ensemble(grid(), 2, 64, 1).unwrap();
    assert!(solve_mf_bdsde(&c, &ens, &SolverConfig::default(), 1e-8, 20).is_err());
}

#[test]
fn iteration_limit_reports_the_trace() {
    let p = preset("linear-mean").unwrap();
    let ens = sample_ensemble(grid(), 2, 256, 1).unwrap();
    match solve_mf_bdsde(&p.coeffs, &ens, &p.solver, 1e-30, 2) {
        Err(Error::IterationLimit { trace }) => {
            assert_eq!(trace.iterations, 2);
            assert!(!trace.converged);
            assert_eq!(trace.distances.len(), 2);
        }
        other => panic!("expected iteration limit, got {other:?}"),
    }
}

mod field {
    use super::*;

    fn spde() -> (Preset, BasePopulation) {
        let p = preset("spde-basic").unwrap();
        let ens = sample_ensemble(grid(), 8, 512, 5).unwrap();
        let base = build_base(&p.coeffs, p.x0.unwrap(), &ens, &p.solver, 1e-10, 20).unwrap();
        (p, base)
    }

    #[test]
    fn field_at_the_start_matches_the_base_solution() {
        let (p, base) = spde();
        let s = evaluate_u(0.0, p.x0.unwrap(), &base, &p.coeffs, &p.solver).unwrap();
        let y0 = base.yz.mean_y(0);
        assert!((s.mean - y0).abs() <= 4.0 * s.std_err.max(1e-3), "u {} vs Y0 {y0}", s.mean);
        assert!((s.mean - p.oracle.unwrap()).abs() < 0.05);
    }

    #[test]
    fn field_slope_in_x_follows_the_linear_solution() {
        let (p, base) = spde();
        let t = 0.5;
        let a = evaluate_u(t, 0.0, &base, &p.coeffs, &p.solver).unwrap();
        let b = evaluate_u(t, 2.0, &base, &p.coeffs, &p.solver).unwrap();
        let slope = (b.mean - a.mean) / 2.0;
        let want = (0.5f64 * (1.0 - t)).exp();
        assert!((slope - want).abs() / want < 0.05, "slope {slope} vs {want}");
    }

    #[test]
    fn queries_do_not_disturb_each_other() {
        let (p, base) = spde();
        let before = base.clone();
        let first = evaluate_u(0.25, 0.5, &base, &p.coeffs, &p.solver).unwrap();
        let _ = evaluate_u(0.75, -1.0, &base, &p.coeffs, &p.solver).unwrap();
        let again = evaluate_u(0.25, 0.5, &base, &p.coeffs, &p.solver).unwrap();
        assert_eq!(first, again);
        assert_eq!(base, before);
    }

    #[test]
    fn mean_field_drift_moves_the_mean_exponentially() {
        let p = preset("mkv-linear").unwrap();
        let ens = sample_ensemble(TimeGrid::horizon(1.0, 64).unwrap(), 8, 1024, 2).unwrap();
        let base = build_base(&p.coeffs, p.x0.unwrap(), &ens, &p.solver, 1e-10, 20).unwrap();
        let m = pairwise_mean(base.x.at(64));
        assert!((m - p.oracle.unwrap()).abs() / p.oracle.unwrap() < 0.01, "{m}");
        assert!((base.yz.mean_y(0) - m).abs() < 1e-9);
    }
}

mod control_equations {
    use super::*;

    fn setup() -> (ControlProblem, ScenarioEnsemble, SolverConfig) {
        let p = preset("control-linear").unwrap();
        let ens = sample_ensemble(grid(), 2048, 1, 9).unwrap();
        let (lo, hi) = p.u_box.unwrap();
        (ControlProblem::new(p.coeffs, lo, hi).unwrap(), ens, p.solver)
    }

    #[test]
    fn variational_solution_is_linear_in_the_direction() {
        let (prob, ens, cfg) = setup();
        let np = ens.n_particles();
        let u = ControlPath::constant(np, 33, 0.2);
        let (hat, _) = solve_state(&prob, &u, &ens, &cfg, 1e-24, 60).unwrap();
        let d1 = ControlPath::deterministic(np, &grid().points().iter().map(|t| t.sin()).collect::<Vec<_>>());
        let d2 = ControlPath::from_field(d1.v.combine(-3.0, &d1.v, 0.0).unwrap());
        let (a, _) = solve_variational(&prob, &u, &hat, &d1, &ens, &cfg, 1e-24, 60).unwrap();
        let (b, _) = solve_variational(&prob, &u, &hat, &d2, &ens, &cfg, 1e-24, 60).unwrap();
        let worst = a.y.as_slice().iter().zip(b.y.as_slice()).map(|(x, y)| (3.0 * x + y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn cost_derivative_matches_a_central_difference() {
        let (prob, ens, cfg) = setup();
        let np = ens.n_particles();
        let u = ControlPath::constant(np, 33, -0.1);
        let dir = ControlPath::deterministic(np, &grid().points().iter().map(|t| 1.0 + t).collect::<Vec<_>>());
        let (hat, _) = solve_state(&prob, &u, &ens, &cfg, 1e-24, 60).unwrap();
        let (var, _) = solve_variational(&prob, &u, &hat, &dir, &ens, &cfg, 1e-24, 60).unwrap();
        let analytic = cost_derivative(&prob, &u, &hat, &var, &dir).unwrap();
        let h = 1e-4;
        let j = |eps: f64| {
            let v = u.perturbed(eps, &dir).unwrap();
            let (s, _) = solve_state(&prob, &v, &ens, &cfg, 1e-24, 60).unwrap();
            cost(&prob, &v, &s).unwrap()
        };
        let fd = (j(h) - j(-h)) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{analytic} vs {fd}");
    }

    #[test]
    fn off_box_controls_are_rejected() {
        let (prob, ens, cfg) = setup();
        let u = ControlPath::constant(ens.n_particles(), 33, 6.0);
        assert!(solve_state(&prob, &u, &ens, &cfg, 1e-10, 20).is_err());
    }
}

mod linear_quadratic {
    use super::*;

    fn ens() -> ScenarioEnsemble {
        sample_ensemble(grid(), 2048, 1, 21).unwrap()
    }

    #[test]
    fn a_shifted_control_is_detected_as_suboptimal() {
        let p = preset("lq-basic").unwrap();
        let lq = p.lq.unwrap();
        let ens = ens();
        let mut sol = lq_solve(&lq, &ens, &p.solver, 1e-10, 50).unwrap();
        let np = ens.n_particles();
        sol.uhat = sol.uhat.perturbed(0.2, &ControlPath::constant(np, 33, 1.0)).unwrap();
        let prob = lq_assemble(&lq).unwrap();
        let (state, _) = solve_state(&prob, &sol.uhat, &ens, &p.solver, 1e-12, 50).unwrap();
        let (adj, _) = solve_adjoint(&prob, &sol.uhat, &state, &ens, &p.solver, 1e-12, 50).unwrap();
        sol.state = state;
        sol.adjoint = adj;
        sol.cost_at_opt = cost(&prob, &sol.uhat, &sol.state).unwrap();
        let rep = lq_verify(&sol, &lq, &ens, 20, 0.1, 3, &p.solver, 1e-10).unwrap();
        assert!(rep.min_delta < -0.005, "{}", rep.min_delta);
        assert!(rep.mp.global_min < -0.01, "{}", rep.mp.global_min);
    }

    #[test]
    fn zero_step_gives_zero_differences() {
        let p = preset("lq-basic").unwrap();
        let lq = p.lq.unwrap();
        let ens = ens();
        let sol = lq_solve(&lq, &ens, &p.solver, 1e-10, 50).unwrap();
        let rep = lq_verify(&sol, &lq, &ens, 5, 0.0, 3, &p.solver, 1e-10).unwrap();
        assert!(rep.deltas.iter().all(|&d| d == 0.0), "{:?}", rep.deltas);
    }

    #[test]
    fn solution_scales_with_the_terminal_value() {
        let p = preset("lq-basic").unwrap();
        let lq = p.lq.unwrap();
        let ens = ens();
        let a = lq_solve(&lq, &ens, &p.solver, 1e-12, 50).unwrap();
        let b = lq_solve(&LQCoefficients { xi: 2.0 * lq.xi, ..lq.clone() }, &ens, &p.solver, 1e-12, 50).unwrap();
        let worst = a
            .uhat
            .v
            .as_slice()
            .iter()
            .zip(b.uhat.v.as_slice())
            .map(|(x, y)| (2.0 * x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
        assert!((4.0 * a.cost_at_opt - b.cost_at_opt).abs() < 1e-8);
    }

    #[test]
    fn pure_control_cost_is_minimised_at_zero() {
        let lq = LQCoefficients { xi: 1.0, ..Default::default() }.with("R1", 1.0).unwrap();
        let ens = ens();
        let sol = lq_solve(&lq, &ens, &SolverConfig::pooled(1), 1e-10, 50).unwrap();
        assert!(sol.uhat.v.as_slice().iter().all(|&u| u.abs() < 1e-12));
        assert!(sol.cost_at_opt.abs() < 1e-12);
        assert!((sol.state.mean_y(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bare_adjoint_sources_change_the_answer_when_state_cost_is_present() {
        let mut lq = presets::lq_basic_coefficients();
        lq.set("M1", 1.0).unwrap();
        let ens = ens();
        let cfg = SolverConfig::pooled(1);
        let full = lq_solve(&lq, &ens, &cfg, 1e-10, 60).unwrap();
        let bare = lq_solve(&LQCoefficients { bare_adjoint_sources: true, ..lq.clone() }, &ens, &cfg, 1e-10, 60).unwrap();
        let (uf, ub) = (pairwise_mean(full.uhat.v.as_slice()), pairwise_mean(bare.uhat.v.as_slice()));
        assert!((uf - ub).abs() > 1e-3, "{uf} vs {ub}");
        // without M1, N1 the two readings agree
        let plain = presets::lq_basic_coefficients();
        let a = lq_solve(&plain, &ens, &cfg, 1e-10, 60).unwrap();
        let b = lq_solve(&LQCoefficients { bare_adjoint_sources: true, ..plain }, &ens, &cfg, 1e-10, 60).unwrap();
        assert_eq!(a.uhat, b.uhat);
    }
}
