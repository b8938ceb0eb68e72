use std::path::Path;
use std::process::Command as Proc;

use mfbdsde_cli::*;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_mfbdsde"))
}

fn cli(args: &[&str]) -> Cli {
    use clap::Parser;
    Cli::try_parse_from(std::iter::once("mfbdsde").chain(args.iter().copied())).unwrap()
}

fn record_at(path: &Path) -> ResultRecord {
    match load(path).unwrap() {
        Loaded::Record(r) => r,
        Loaded::Study(_) => panic!("expected a record"),
    }
}

#[test]
fn solve_linear_mean_writes_the_oracle_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let status = bin()
        .args(["solve", "--preset", "linear-mean", "--particles", "8x1024", "--steps", "64", "--seed", "42", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let r = record_at(&out);
    assert_eq!(r.version, VERSION);
    let y0 = r.scalar("Y0_mean").unwrap();
    assert!((y0.value - 1f64.exp()).abs() / 1f64.exp() <= 0.02, "{}", y0.value);
    assert!(y0.std_err.is_some());
    assert_eq!(r.config.m_outer, 8);
    assert_eq!(r.series("Y_mean").unwrap().values.len(), 65);
}

#[test]
fn lq_basic_matches_the_closed_form() {
    let r = execute(&cli(&["lq", "--preset", "lq-basic", "--seed", "1", "--particles", "2048x1", "--format", "json", "--out", "/dev/null"])).unwrap();
    let u = r.scalar("u_mean").unwrap().value;
    let j = r.scalar("J").unwrap().value;
    assert!((u + 0.5).abs() <= 0.01, "{u}");
    assert!((j - 0.25).abs() <= 0.005, "{j}");
    assert!(r.scalar("J").unwrap().std_err.is_some());
}

#[test]
fn constant_preset_is_exact_with_zero_error_bar() {
    let r = run(&resolve(&cli(&["solve", "--preset", "constant", "--particles", "2x64", "--steps", "8"])).unwrap()).unwrap();
    let y0 = r.scalar("Y0_mean").unwrap();
    assert_eq!(y0.value, 2.5);
    assert_eq!(y0.std_err, Some(0.0));
}

#[test]
fn exit_codes_follow_the_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();

    assert_eq!(code(&["solve", "--preset", "nope"]), 2);
    assert_eq!(code(&["solve", "--bogus-flag"]), 2);
    assert_eq!(code(&["solve", "--particles", "8"]), 2);
    assert_eq!(code(&["control-check", "--preset", "control-linear", "--particles", "4x16", "--steps", "4"]), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[coefficients]\ntheta_f = \"y +\"\n").unwrap();
    assert_eq!(code(&["solve", "--config", bad.to_str().unwrap()]), 2);

    // a driver that grows without bound
    let blow = dir.path().join("blow.toml");
    std::fs::write(&blow, "[coefficients]\nxi = 1.0\ntheta_f = \"exp(y)*y^4\"\n[grid]\nn_steps = 8\n[particles]\nm_outer = 1\nk_inner = 16\n").unwrap();
    let out = bin().args(["solve", "--config", blow.to_str().unwrap(), "--T", "40"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"error\":\"divergence\""));

    let slow = dir.path().join("slow.toml");
    std::fs::write(&slow, "preset = \"linear-mean\"\n[tolerances]\npicard_tol = 1e-300\nmax_iter = 2\n[particles]\nm_outer = 2\nk_inner = 64\n").unwrap();
    let out = bin().args(["solve", "--config", slow.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration-limit"));
}

#[test]
fn json_and_csv_round_trip_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    for (preset, cmd, shape) in
        [("martingale", "solve", "4x64"), ("spde-basic", "spde-eval", "4x64"), ("control-linear", "control-check", "256x1")]
    {
        let r = execute(&cli(&[cmd, "--preset", preset, "--particles", shape, "--steps", "8", "--out", "/dev/null"])).unwrap();
        for fmt in [Format::Json, Format::Csv] {
            let p = dir.path().join(format!("{preset}.{fmt:?}"));
            record::write(&r, fmt, &p).unwrap();
            assert_eq!(record_at(&p), r, "{preset} {fmt:?}");
        }
    }
}

#[test]
fn csv_quotes_cells_with_separators() {
    let mut r = run(&resolve(&cli(&["solve", "--preset", "constant", "--particles", "1x8", "--steps", "2"])).unwrap()).unwrap();
    r.push("odd, \"name\"\nwith newline", 1.5, Some(0.25));
    let text = render(&r, Format::Csv).unwrap();
    assert!(text.contains("\"odd, \"\"name\"\"\nwith newline\""));
    assert_eq!(record::ResultRecord::from_csv(&text).unwrap(), r);
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        r#"
command = "solve"
seed = 3

[grid]
T = 0.5
n_steps = 16

[particles]
m_outer = 2
k_inner = 128

[coefficients]
theta_f = "0.5*y + 0.5*yp"
xi = 1.0

[lipschitz]
l_y = 0.5
l_yp = 0.5
l_gamma = 1.0

[output]
format = "csv"
"#,
    )
    .unwrap();
    let out = dir.path().join("r.csv");
    let status = bin().args(["run", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let r = record_at(&out);
    assert_eq!(r.command, Command::Solve);
    assert_eq!((r.config.seed, r.config.n_steps, r.config.horizon), (4, 16, 0.5));
    let y0 = r.scalar("Y0_mean").unwrap().value;
    assert!((y0 - 0.5f64.exp()).abs() < 0.01, "{y0}");
    assert!(std::fs::read_to_string(&out).unwrap().starts_with("meta,version"));
}

#[test]
fn threads_from_the_environment_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("r{i}.json"));
        let status = bin()
            .env(THREADS_ENV, threads)
            .args(["solve", "--preset", "linear-mean", "--particles", "4x256", "--steps", "16", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        outs.push(record_at(&out).without_timing());
    }
    assert_eq!(outs[0], outs[1]);
    let bad = bin().env(THREADS_ENV, "many").args(["solve", "--preset", "constant"]).status().unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn spde_eval_reports_each_query() {
    let r = execute(&cli(&[
        "spde-eval", "--preset", "spde-basic", "--particles", "8x256", "--steps", "16", "--t", "0.5", "--x", "-1,1.5", "--out", "/dev/null",
    ]))
    .unwrap();
    assert_eq!(r.series("u_mean").unwrap().values.len(), 2);
    let u = r.scalar("u(0.5,1.5)").unwrap();
    let exact = 1.0 + 0.25f64.exp() * 0.5;
    assert!((u.value - exact).abs() < 0.1, "{}", u.value);
    assert!(u.std_err.unwrap() > 0.0);
}

mod study {
    use super::*;

    fn table(args: &[&str]) -> StudyTable {
        let cfg = resolve(&cli(args)).unwrap();
        convergence_study(&cfg).unwrap()
    }

    #[test]
    fn particles_axis_has_the_monte_carlo_rate() {
        let t = table(&[
            "convergence-study", "--preset", "martingale", "--axis", "particles", "--values", "512,2048,8192",
            "--steps", "4", "--replicates", "200",
        ]);
        let errs: Vec<f64> = t.rows.iter().map(|r| r.error).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        let s = t.slope.unwrap();
        assert!((s + 0.5).abs() <= 0.15, "slope {s}");
    }

    #[test]
    fn epsilon_axis_is_quadratic() {
        let t = table(&[
            "convergence-study", "--preset", "control-linear", "--axis", "epsilon", "--values", "0.2,0.1,0.05",
            "--particles", "1024x1", "--steps", "16",
        ]);
        assert!((t.slope.unwrap() - 2.0).abs() <= 0.2);
    }

    #[test]
    fn steps_axis_on_the_constant_preset_is_exact() {
        let t = table(&["convergence-study", "--preset", "constant", "--axis", "steps", "--values", "4,8,16", "--particles", "2x32", "--replicates", "2"]);
        assert!(t.rows.iter().all(|r| r.error == 0.0));
        assert_eq!(t.slope, None);
    }

    #[test]
    fn study_csv_is_a_table_with_the_slope_last() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.csv");
        let status = bin()
            .args(["convergence-study", "--preset", "linear-mean", "--axis", "steps", "--values", "4,8,16", "--particles", "2x64"])
            .args(["--replicates", "2", "--format", "csv", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "axis,value,estimate,std_err,error");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("slope,"));
        let Loaded::Study(t) = load(&out).unwrap() else { panic!("expected a table") };
        assert_eq!(t.rows.len(), 3);
        // at the Picard fixed point the own term is taken at the right end
        // and the population term at the left, which for this linear driver
        // is the trapezoidal rule
        assert!((t.slope.unwrap() + 2.0).abs() < 0.2, "{:?}", t.slope);
    }

    #[test]
    fn study_errors_are_configuration_errors() {
        for args in [
            &["convergence-study", "--preset", "control-linear", "--axis", "steps", "--values", "4,8,16"][..],
            &["convergence-study", "--preset", "linear-mean", "--axis", "epsilon", "--values", "0.1,0.2,0.3"][..],
            &["convergence-study", "--preset", "linear-mean", "--axis", "steps", "--values", "4,8"][..],
            &["convergence-study", "--preset", "linear-mean", "--values", "4,8,16"][..],
        ] {
            let e = resolve(&cli(args)).and_then(|c| convergence_study(&c)).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{args:?}: {e}");
        }
    }
}
