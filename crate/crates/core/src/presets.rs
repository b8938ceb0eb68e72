//! Built-in problems with known answers.

use crate::bdsde::SolverConfig;
use crate::coeff::{CoefficientSet, LipschitzMeta, Slot, XiMode};
use crate::error::{Error, Result};
use crate::lq::LQCoefficients;

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub coeffs: CoefficientSet,
    pub horizon: f64,
    pub n_steps: usize,
    /// `(m_outer, k_inner)`.
    pub particles: (usize, usize),
    pub solver: SolverConfig,
    /// Starting point of the forward state, for field evaluations.
    pub x0: Option<f64>,
    pub u_box: Option<(f64, f64)>,
    pub lq: Option<LQCoefficients>,
    /// Exact value of the mean of `Y_0` (for field presets, `u(0, x0)`).
    pub oracle: Option<f64>,
}

pub const PRESET_NAMES: [&str; 8] = [
    "constant",
    "martingale",
    "backward-driver",
    "linear-mean",
    "mkv-linear",
    "spde-basic",
    "control-linear",
    "lq-basic",
];

/// Terminal value of the `constant` preset.
pub const CONSTANT_VALUE: f64 = 2.5;
/// Backward-driver coefficient of the `backward-driver` preset.
pub const BACKWARD_DRIVER_COEFF: f64 = 0.5;

fn with(mut c: CoefficientSet, pairs: &[(Slot, &str)]) -> CoefficientSet {
    for (s, src) in pairs {
        c.set(*s, src).expect("preset expressions are valid");
    }
    c
}

fn base(name: &'static str, description: &'static str, coeffs: CoefficientSet) -> Preset {
    Preset {
        name,
        description,
        coeffs,
        horizon: 1.0,
        n_steps: 64,
        particles: (8, 1024),
        solver: SolverConfig::grouped(1),
        x0: None,
        u_box: None,
        lq: None,
        oracle: None,
    }
}

fn unit_gamma() -> LipschitzMeta {
    LipschitzMeta { l_gamma: 1.0, alpha2: 1.0, ..Default::default() }
}

pub fn lq_basic_coefficients() -> LQCoefficients {
    let mut c = LQCoefficients { xi: 1.0, horizon: 1.0, u_box: (-10.0, 10.0), ..Default::default() };
    for name in ["C1", "R1", "Q1_0"] {
        c.set(name, 1.0).expect("known coefficient");
    }
    c
}

pub fn preset(name: &str) -> Result<Preset> {
    let zero = CoefficientSet::default().with_lipschitz(unit_gamma());
    let p = match name {
        "constant" => Preset {
            oracle: Some(CONSTANT_VALUE),
            ..base("constant", "xi = 2.5, no drivers: Y = 2.5, Z = 0", zero.with_xi(XiMode::Constant(CONSTANT_VALUE)))
        },
        "martingale" => Preset {
            particles: (1, 8192),
            oracle: Some(0.0),
            ..base("martingale", "xi = W_T, no drivers: Y = W, Z = 1", zero.with_xi(XiMode::WTerminal))
        },
        "backward-driver" => Preset {
            particles: (8192, 1),
            oracle: Some(0.0),
            ..base(
                "backward-driver",
                "xi = 0, theta_g = 0.5: Y_t = 0.5 (B_T - B_t), Var Y_t = 0.25 (T - t)",
                with(zero, &[(Slot::ThetaG, "0.5")]),
            )
        },
        "linear-mean" => Preset {
            oracle: Some(1f64.exp()),
            ..base(
                "linear-mean",
                "xi = 1, theta_f = 0.5 y + 0.5 yp: Y_0 = e",
                with(zero, &[(Slot::ThetaF, "0.5*y + 0.5*yp")])
                    .with_xi(XiMode::Constant(1.0))
                    .with_lipschitz(LipschitzMeta { l_y: 0.5, l_yp: 0.5, ..unit_gamma() }),
            )
        },
        "mkv-linear" => Preset {
            x0: Some(1.0),
            oracle: Some(0.5f64.exp()),
            ..base(
                "mkv-linear",
                "dX = 0.5 E[X] dt + 0.2 dW from 1, h = x: u(0, 1) = E X_T = e^0.5",
                with(zero, &[(Slot::B, "0.5*xp"), (Slot::Sigma, "0.2"), (Slot::H, "x")]),
            )
        },
        "spde-basic" => Preset {
            x0: Some(1.0),
            oracle: Some(1.0),
            ..base(
                "spde-basic",
                "dX = dW, h = x, theta_f = 0.5 (y - yp): u(t, x) = 1 + e^{(T - t)/2} (x - 1)",
                with(zero, &[(Slot::Sigma, "1"), (Slot::H, "x"), (Slot::ThetaF, "0.5*(y - yp)")])
                    .with_lipschitz(LipschitzMeta { l_y: 0.5, l_yp: 0.5, ..unit_gamma() }),
            )
        },
        "control-linear" => Preset {
            particles: (8192, 1),
            solver: SolverConfig::pooled(1),
            u_box: Some((-5.0, 5.0)),
            ..base(
                "control-linear",
                "theta_f = 0.5 y + 0.5 yp + v, l = y^2/2 + v^2/2, h = y^2/2, xi = W_T",
                with(
                    zero,
                    &[(Slot::ThetaF, "0.5*y + 0.5*yp + v"), (Slot::L, "y^2/2 + v^2/2"), (Slot::H, "y^2/2")],
                )
                .with_xi(XiMode::WTerminal)
                .with_lipschitz(LipschitzMeta { l_y: 0.5, l_yp: 0.5, l_v: 1.0, ..unit_gamma() }),
            )
        },
        "lq-basic" => {
            let lq = lq_basic_coefficients();
            let prob = crate::lq::lq_assemble(&lq)?;
            Preset {
                particles: (8192, 1),
                solver: SolverConfig::pooled(1),
                u_box: Some(lq.u_box),
                oracle: Some(0.5),
                lq: Some(lq),
                ..base("lq-basic", "theta_f = v, l = v^2/2, h = y^2/2, xi = 1: u = -1/2, Y_0 = 1/2, J = 1/4", prob.coeffs)
            }
        }
        other => return Err(Error::invalid(format!("unknown preset `{other}`"))),
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::check_h1;

    #[test]
    fn every_preset_builds_and_passes_the_contraction_check() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            p.coeffs.validate().unwrap();
            assert!(check_h1(&p.coeffs.lipschitz).h1_ok, "{name}");
        }
        assert!(preset("nope").is_err());
    }
}
