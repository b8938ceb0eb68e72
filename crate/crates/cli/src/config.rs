//! Experiment configuration: presets, an optional TOML file, and command
//! line overrides, resolved in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mfbdsde_core::{
    lq_assemble, parse, preset, CoefficientSet, Estimator, LQCoefficients, LipschitzMeta, Slot, SolverConfig, Var,
    XiMode,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::ext_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Forward,
    SpdeEval,
    ControlCheck,
    Lq,
    ConvergenceStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Forward => "forward",
            Command::SpdeEval => "spde-eval",
            Command::ControlCheck => "control-check",
            Command::Lq => "lq",
            Command::ConvergenceStudy => "convergence-study",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Steps,
    Particles,
    Epsilon,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Steps => "steps",
            Axis::Particles => "particles",
            Axis::Epsilon => "epsilon",
        }
    }
}

/// The TOML file, section by section. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub command: Option<Command>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub grid: Option<GridSection>,
    pub particles: Option<ParticlesSection>,
    pub tolerances: Option<TolSection>,
    pub solver: Option<SolverSection>,
    pub coefficients: Option<BTreeMap<String, toml::Value>>,
    pub lipschitz: Option<toml::Table>,
    pub control: Option<ControlSection>,
    pub lq: Option<BTreeMap<String, toml::Value>>,
    pub query: Option<QuerySection>,
    pub study: Option<StudySection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    pub n_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesSection {
    pub m_outer: Option<usize>,
    pub k_inner: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolSection {
    pub picard_tol: Option<f64>,
    pub mp_tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub basis_degree: Option<usize>,
    pub estimator: Option<Estimator>,
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub u_lo: Option<f64>,
    pub u_hi: Option<f64>,
    pub u: Option<f64>,
    pub direction: Option<String>,
    pub eps: Option<Vec<f64>>,
    pub n_perturb: Option<usize>,
    pub perturb_eps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    pub t: Option<f64>,
    pub x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub axis: Option<Axis>,
    pub values: Option<Vec<f64>>,
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

impl FileConfig {
    pub fn from_toml(src: &str) -> CliResult<Self> {
        Ok(toml::from_str(src)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&src)
    }
}

/// Values given on the command line; these win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub particles: Option<(usize, usize)>,
    pub steps: Option<usize>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
    pub u: Option<f64>,
    pub t: Option<f64>,
    pub x: Option<Vec<f64>>,
    pub axis: Option<Axis>,
    pub values: Option<Vec<f64>>,
    pub replicates: Option<usize>,
}

/// `MxK`, e.g. `8x1024`.
pub fn parse_particles(s: &str) -> Result<(usize, usize), String> {
    let (m, k) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected MxK, got `{s}`"))?;
    let m: usize = m.trim().parse().map_err(|_| format!("bad outer count in `{s}`"))?;
    let k: usize = k.trim().parse().map_err(|_| format!("bad inner count in `{s}`"))?;
    if m == 0 || k == 0 {
        return Err(format!("particle counts must be positive in `{s}`"));
    }
    Ok((m, k))
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub preset: Option<String>,
    pub coeffs: CoefficientSet,
    pub lq: Option<LQCoefficients>,
    pub oracle: Option<f64>,
    pub horizon: f64,
    pub n_steps: usize,
    pub m_outer: usize,
    pub k_inner: usize,
    pub seed: u64,
    pub picard_tol: f64,
    pub mp_tol: f64,
    pub max_iter: usize,
    pub solver: SolverConfig,
    pub x0: Option<f64>,
    pub u_box: Option<(f64, f64)>,
    pub control_u: f64,
    pub direction: String,
    pub eps_list: Vec<f64>,
    pub n_perturb: usize,
    pub perturb_eps: f64,
    pub query_t: f64,
    pub query_x: Vec<f64>,
    pub axis: Option<Axis>,
    pub values: Vec<f64>,
    pub replicates: usize,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub threads: Option<usize>,
}

/// The serializable echo of a resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub command: Command,
    pub preset: Option<String>,
    pub coefficients: BTreeMap<String, String>,
    pub lipschitz: LipschitzMeta,
    pub lq: Option<BTreeMap<String, String>>,
    #[serde(with = "ext_f64::option")]
    pub oracle: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    pub m_outer: usize,
    pub k_inner: usize,
    pub seed: u64,
    pub picard_tol: f64,
    pub mp_tol: f64,
    pub max_iter: usize,
    pub solver: SolverConfig,
    pub x0: Option<f64>,
    #[serde(with = "ext_f64::pair")]
    pub u_box: Option<(f64, f64)>,
    pub control_u: f64,
    pub direction: String,
    pub eps_list: Vec<f64>,
    pub n_perturb: usize,
    pub perturb_eps: f64,
    pub query_t: f64,
    pub query_x: Vec<f64>,
    pub axis: Option<Axis>,
    pub values: Vec<f64>,
    pub replicates: usize,
}

fn xi_text(xi: &XiMode) -> String {
    match xi {
        XiMode::Constant(c) => format!("{c}"),
        XiMode::WTerminal => "W_T".into(),
        XiMode::Expr(e) => e.to_string(),
    }
}

fn parse_xi(v: &toml::Value) -> CliResult<XiMode> {
    match v {
        toml::Value::Float(c) => Ok(XiMode::Constant(*c)),
        toml::Value::Integer(c) => Ok(XiMode::Constant(*c as f64)),
        toml::Value::String(s) if s.trim() == "W_T" => Ok(XiMode::WTerminal),
        toml::Value::String(s) => match s.trim().parse::<f64>() {
            Ok(c) => Ok(XiMode::Constant(c)),
            Err(_) => Ok(XiMode::expr(s)?),
        },
        other => Err(CliError::config(format!("xi must be a number, \"W_T\" or an expression in x, got {other}"))),
    }
}

fn as_f64(key: &str, v: &toml::Value) -> CliResult<f64> {
    match v {
        toml::Value::Float(x) => Ok(*x),
        toml::Value::Integer(x) => Ok(*x as f64),
        other => Err(CliError::config(format!("`{key}` must be a number, got {other}"))),
    }
}

fn apply_lq(lq: &mut LQCoefficients, table: &BTreeMap<String, toml::Value>) -> CliResult<()> {
    for (key, v) in table {
        match key.as_str() {
            "xi" => lq.xi = as_f64(key, v)?,
            "bare_adjoint_sources" => {
                lq.bare_adjoint_sources =
                    v.as_bool().ok_or_else(|| CliError::config("`bare_adjoint_sources` must be a boolean"))?
            }
            name if LQCoefficients::NAMES.contains(&name) => match v {
                toml::Value::String(s) => {
                    lq.set_expr(name, s)?;
                }
                other => {
                    lq.set(name, as_f64(name, other)?)?;
                }
            },
            other => return Err(CliError::config(format!("unknown [lq] key `{other}`"))),
        }
    }
    Ok(())
}

fn lq_echo(lq: &LQCoefficients) -> BTreeMap<String, String> {
    let exprs = [
        &lq.a1, &lq.a2, &lq.b1, &lq.b2, &lq.c1, &lq.c2, &lq.d1, &lq.d2, &lq.e1, &lq.e2, &lq.f1, &lq.f2, &lq.m1, &lq.m2,
        &lq.n1, &lq.n2, &lq.r1, &lq.r2, &lq.q1_0, &lq.q2_0,
    ];
    let mut m: BTreeMap<String, String> =
        LQCoefficients::NAMES.iter().zip(exprs).map(|(n, e)| (n.to_string(), e.to_string())).collect();
    m.insert("xi".into(), format!("{}", lq.xi));
    m.insert("bare_adjoint_sources".into(), lq.bare_adjoint_sources.to_string());
    m
}

fn positive(name: &str, x: f64) -> CliResult<f64> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CliError::config(format!("{name} must be positive, got {x}")))
    }
}

fn nonzero(name: &str, n: usize) -> CliResult<usize> {
    if n > 0 {
        Ok(n)
    } else {
        Err(CliError::config(format!("{name} must be positive")))
    }
}

impl ExperimentConfig {
    /// Resolve preset defaults, then the file, then the command line.
    pub fn resolve(command: Option<Command>, file: &FileConfig, ov: &Overrides) -> CliResult<Self> {
        let command = command
            .or(file.command)
            .ok_or_else(|| CliError::config("no command given on the command line or in the config file"))?;
        let preset_name = ov.preset.clone().or_else(|| file.preset.clone());
        let p = preset_name.as_deref().map(preset).transpose().map_err(|e| CliError::config(e.to_string()))?;

        let mut coeffs = p.as_ref().map(|p| p.coeffs.clone()).unwrap_or_default();
        let mut lq = p.as_ref().and_then(|p| p.lq.clone());
        let mut oracle = p.as_ref().and_then(|p| p.oracle);
        let mut x0 = p.as_ref().and_then(|p| p.x0);
        let mut u_box = p.as_ref().and_then(|p| p.u_box);
        let (mut m_outer, mut k_inner) = p.as_ref().map(|p| p.particles).unwrap_or((8, 1024));
        let mut horizon = p.as_ref().map(|p| p.horizon).unwrap_or(1.0);
        let mut n_steps = p.as_ref().map(|p| p.n_steps).unwrap_or(64);
        let mut solver = p.as_ref().map(|p| p.solver).unwrap_or_default();

        if let Some(table) = &file.coefficients {
            oracle = None;
            for (key, v) in table {
                match key.as_str() {
                    "xi" => coeffs.xi = parse_xi(v)?,
                    "x0" => x0 = Some(as_f64(key, v)?),
                    name => {
                        let slot = Slot::from_name(name)
                            .ok_or_else(|| CliError::config(format!("unknown coefficient slot `{name}`")))?;
                        let src = v
                            .as_str()
                            .ok_or_else(|| CliError::config(format!("coefficient `{name}` must be a quoted expression")))?;
                        coeffs.set(slot, src)?;
                    }
                }
            }
        }
        if let Some(t) = &file.lipschitz {
            let mut merged = toml::Table::try_from(coeffs.lipschitz).map_err(|e| CliError::config(e.to_string()))?;
            for (k, v) in t {
                merged.insert(k.clone(), v.clone());
            }
            coeffs.lipschitz = toml::Value::Table(merged)
                .try_into()
                .map_err(|e: toml::de::Error| CliError::config(format!("[lipschitz]: {e}")))?;
        }
        if let Some(table) = &file.lq {
            oracle = None;
            let l = lq.get_or_insert_with(LQCoefficients::default);
            apply_lq(l, table)?;
        }

        if let Some(g) = &file.grid {
            horizon = g.horizon.unwrap_or(horizon);
            n_steps = g.n_steps.unwrap_or(n_steps);
        }
        if let Some(ps) = &file.particles {
            m_outer = ps.m_outer.unwrap_or(m_outer);
            k_inner = ps.k_inner.unwrap_or(k_inner);
        }
        if let Some(s) = &file.solver {
            solver.basis_degree = s.basis_degree.unwrap_or(solver.basis_degree);
            solver.estimator = s.estimator.unwrap_or(solver.estimator);
            solver.ridge = s.ridge.unwrap_or(solver.ridge);
        }
        let tol = file.tolerances.clone().unwrap_or_default();
        let ctl = file.control.clone().unwrap_or_default();
        let query = file.query.clone().unwrap_or_default();
        let study = file.study.clone().unwrap_or_default();
        let output = file.output.clone().unwrap_or_default();

        horizon = ov.horizon.unwrap_or(horizon);
        n_steps = ov.steps.unwrap_or(n_steps);
        if let Some((m, k)) = ov.particles {
            m_outer = m;
            k_inner = k;
        }

        if ctl.u_lo.is_some() || ctl.u_hi.is_some() {
            let (lo, hi) = u_box.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            u_box = Some((ctl.u_lo.unwrap_or(lo), ctl.u_hi.unwrap_or(hi)));
        }
        if let Some(l) = lq.as_mut() {
            l.horizon = horizon;
            if let Some(b) = u_box {
                l.u_box = b;
            }
            u_box = Some(l.u_box);
            coeffs = lq_assemble(l)?.coeffs;
        }
        if let Some((lo, hi)) = u_box {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(CliError::config(format!("control box [{lo}, {hi}] is empty")));
            }
        }

        let direction = ctl.direction.clone().unwrap_or_else(|| "1 - 0.5*t".into());
        parse(&direction)?.check_vars(&[Var::T], "direction")?;

        let cfg = ExperimentConfig {
            command,
            preset: preset_name,
            coeffs,
            lq,
            oracle,
            horizon: positive("T", horizon)?,
            n_steps: nonzero("n_steps", n_steps)?,
            m_outer: nonzero("m_outer", m_outer)?,
            k_inner: nonzero("k_inner", k_inner)?,
            seed: ov.seed.or(file.seed).unwrap_or(42),
            picard_tol: positive("picard_tol", tol.picard_tol.unwrap_or(1e-8))?,
            mp_tol: positive("mp_tol", tol.mp_tol.unwrap_or(1e-3))?,
            max_iter: nonzero("max_iter", tol.max_iter.unwrap_or(20))?,
            solver,
            x0,
            u_box,
            control_u: ov.u.or(ctl.u).unwrap_or(0.0),
            direction,
            eps_list: ctl.eps.clone().unwrap_or_else(|| vec![0.2, 0.1, 0.05, 0.025]),
            n_perturb: ctl.n_perturb.unwrap_or(100),
            perturb_eps: ctl.perturb_eps.unwrap_or(0.1),
            query_t: ov.t.or(query.t).unwrap_or(0.0),
            query_x: ov.x.clone().or(query.x).or(x0.map(|x| vec![x])).unwrap_or_default(),
            axis: ov.axis.or(study.axis),
            values: ov.values.clone().or(study.values).unwrap_or_default(),
            replicates: nonzero("replicates", ov.replicates.or(study.replicates).unwrap_or(8))?,
            out: ov.out.clone().or(output.path),
            format: ov.format.or(output.format).unwrap_or_default(),
            threads: ov.threads.or(file.threads),
        };
        cfg.coeffs.validate()?;
        cfg.solver.validate()?;
        if cfg.eps_list.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(CliError::config("control eps values must be positive"));
        }
        Ok(cfg)
    }

    /// Inner tolerance for the control equations, whose comparisons run far
    /// below the Picard tolerance of a single solve.
    pub fn inner_tol(&self) -> f64 {
        (self.picard_tol * self.picard_tol).min(1e-20)
    }

    pub fn inner_iter(&self) -> usize {
        self.max_iter.max(60)
    }

    pub fn echo(&self) -> ConfigEcho {
        let c = &self.coeffs;
        let mut coefficients: BTreeMap<String, String> = [Slot::ThetaF, Slot::ThetaG, Slot::L, Slot::H, Slot::B, Slot::Sigma]
            .into_iter()
            .map(|s| (s.name().to_string(), c.slot(s).to_string()))
            .collect();
        coefficients.insert("xi".into(), xi_text(&c.xi));
        ConfigEcho {
            command: self.command,
            preset: self.preset.clone(),
            coefficients,
            lipschitz: c.lipschitz,
            lq: self.lq.as_ref().map(lq_echo),
            oracle: self.oracle,
            horizon: self.horizon,
            n_steps: self.n_steps,
            m_outer: self.m_outer,
            k_inner: self.k_inner,
            seed: self.seed,
            picard_tol: self.picard_tol,
            mp_tol: self.mp_tol,
            max_iter: self.max_iter,
            solver: self.solver,
            x0: self.x0,
            u_box: self.u_box,
            control_u: self.control_u,
            direction: self.direction.clone(),
            eps_list: self.eps_list.clone(),
            n_perturb: self.n_perturb,
            perturb_eps: self.perturb_eps,
            query_t: self.query_t,
            query_x: self.query_x.clone(),
            axis: self.axis,
            values: self.values.clone(),
            replicates: self.replicates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn particles_flag() {
        assert_eq!(parse_particles("8x1024"), Ok((8, 1024)));
        assert_eq!(parse_particles("1X5"), Ok((1, 5)));
        assert!(parse_particles("8").is_err());
        assert!(parse_particles("0x4").is_err());
        assert!(parse_particles("ax4").is_err());
    }

    #[test]
    fn flags_override_file_override_preset() {
        let file = FileConfig::from_toml(
            r#"
            preset = "linear-mean"
            seed = 7
            [grid]
            n_steps = 32
            [particles]
            m_outer = 4
            "#,
        )
        .unwrap();
        let ov = Overrides { seed: Some(9), ..Default::default() };
        let c = ExperimentConfig::resolve(Some(Command::Solve), &file, &ov).unwrap();
        assert_eq!((c.m_outer, c.k_inner, c.n_steps, c.seed), (4, 1024, 32, 9));
        assert_eq!(c.oracle, Some(1f64.exp()));
    }

    #[test]
    fn inline_coefficients_drop_the_oracle() {
        let file = FileConfig::from_toml(
            r#"
            preset = "linear-mean"
            [coefficients]
            theta_f = "0.25*y"
            xi = "W_T"
            "#,
        )
        .unwrap();
        let c = ExperimentConfig::resolve(Some(Command::Solve), &file, &Overrides::default()).unwrap();
        assert_eq!(c.oracle, None);
        assert_eq!(c.coeffs.xi, XiMode::WTerminal);
        assert_eq!(c.echo().coefficients["theta_f"], "0.25*y");
    }

    #[test]
    fn config_errors() {
        let bad = [
            "preset = \"nope\"",
            "[coefficients]\ntheta_f = \"y +\"",
            "[coefficients]\nb = \"y\"",
            "[coefficients]\nwhat = \"y\"",
            "[grid]\nT = -1.0",
            "unknown_key = 1",
            "[lq]\nZZ = 1.0",
        ];
        for src in bad {
            let r = FileConfig::from_toml(src)
                .and_then(|f| ExperimentConfig::resolve(Some(Command::Solve), &f, &Overrides::default()));
            let e = r.expect_err(src);
            assert_eq!(e.exit_code(), 2, "{src}: {e}");
        }
    }

    #[test]
    fn lq_section_builds_the_problem() {
        let file = FileConfig::from_toml("[lq]\nC1 = 1\nR1 = 1.0\nQ1_0 = \"1 + 0*t\"\nxi = 2.0\n").unwrap();
        let c = ExperimentConfig::resolve(Some(Command::Lq), &file, &Overrides::default()).unwrap();
        assert_eq!(c.lq.as_ref().unwrap().xi, 2.0);
        assert_eq!(c.coeffs.theta_f.to_string(), "v");
        assert_eq!(c.u_box, Some((f64::NEG_INFINITY, f64::INFINITY)));
    }
}
