//! Problem coefficients as expression data.

use serde::{Deserialize, Serialize};

use crate::dsl::{parse, Expr, Var};
use crate::error::{Error, Result};

/// Variables usable by the drivers and the running cost.
pub const DRIVER_VARS: [Var; 9] =
    [Var::T, Var::X, Var::Xp, Var::Y, Var::Z, Var::Yp, Var::Zp, Var::V, Var::Vp];
/// Variables usable by the initial/terminal cost `h`.
pub const COST_VARS: [Var; 4] = [Var::X, Var::Xp, Var::Y, Var::Yp];
/// Variables usable by the forward drift and diffusion.
pub const FORWARD_VARS: [Var; 3] = [Var::T, Var::X, Var::Xp];

/// Lipschitz and growth constants of the drivers.
///
/// `l_gamma` is the Lipschitz constant of the outer driver in its
/// interaction argument. Coefficients here enter the drivers directly,
/// so it is 1 whenever the kernel is non-trivial.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipschitzMeta {
    pub l_y: f64,
    pub l_z: f64,
    pub l_yp: f64,
    pub l_zp: f64,
    pub l_v: f64,
    pub l_vp: f64,
    pub k_y: f64,
    pub k_yp: f64,
    pub k_v: f64,
    pub k_vp: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub l_gamma: f64,
}

impl LipschitzMeta {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("l_y", self.l_y),
            ("l_z", self.l_z),
            ("l_yp", self.l_yp),
            ("l_zp", self.l_zp),
            ("l_v", self.l_v),
            ("l_vp", self.l_vp),
            ("k_y", self.k_y),
            ("k_yp", self.k_yp),
            ("k_v", self.k_v),
            ("k_vp", self.k_vp),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("l_gamma", self.l_gamma),
        ];
        for (name, x) in fields {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::invalid(format!("lipschitz constant {name} = {x} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How the terminal value is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum XiMode {
    Constant(f64),
    /// The particle's own `W_T`.
    WTerminal,
    /// An expression in `x`, evaluated at the terminal forward state.
    Expr(Expr),
}

impl XiMode {
    pub fn expr(src: &str) -> Result<XiMode> {
        let e = parse(src)?;
        e.check_vars(&[Var::X], "xi")?;
        Ok(XiMode::Expr(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub theta_f: Expr,
    pub theta_g: Expr,
    pub l: Expr,
    pub h: Expr,
    pub b: Expr,
    pub sigma: Expr,
    pub xi: XiMode,
    pub lipschitz: LipschitzMeta,
}

impl Default for CoefficientSet {
    fn default() -> Self {
        Self {
            theta_f: Expr::zero(),
            theta_g: Expr::zero(),
            l: Expr::zero(),
            h: Expr::zero(),
            b: Expr::zero(),
            sigma: Expr::zero(),
            xi: XiMode::Constant(0.0),
            lipschitz: LipschitzMeta::default(),
        }
    }
}

/// Names of the expression slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    ThetaF,
    ThetaG,
    L,
    H,
    B,
    Sigma,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::ThetaF => "theta_f",
            Slot::ThetaG => "theta_g",
            Slot::L => "l",
            Slot::H => "h",
            Slot::B => "b",
            Slot::Sigma => "sigma",
        }
    }

    pub fn from_name(s: &str) -> Option<Slot> {
        [Slot::ThetaF, Slot::ThetaG, Slot::L, Slot::H, Slot::B, Slot::Sigma]
            .into_iter()
            .find(|k| k.name() == s)
    }

    pub fn allowed(self) -> &'static [Var] {
        match self {
            Slot::ThetaF | Slot::ThetaG | Slot::L => &DRIVER_VARS,
            Slot::H => &COST_VARS,
            Slot::B | Slot::Sigma => &FORWARD_VARS,
        }
    }
}

impl CoefficientSet {
    /// Parse `src` into `slot`, checking its variables.
    pub fn set(&mut self, slot: Slot, src: &str) -> Result<&mut Self> {
        let e = parse(src)?;
        e.check_vars(slot.allowed(), slot.name())?;
        *self.slot_mut(slot) = e;
        Ok(self)
    }

    pub fn with(mut self, slot: Slot, src: &str) -> Result<Self> {
        self.set(slot, src)?;
        Ok(self)
    }

    pub fn with_xi(mut self, xi: XiMode) -> Self {
        self.xi = xi;
        self
    }

    pub fn with_lipschitz(mut self, meta: LipschitzMeta) -> Self {
        self.lipschitz = meta;
        self
    }

    pub fn slot(&self, slot: Slot) -> &Expr {
        match slot {
            Slot::ThetaF => &self.theta_f,
            Slot::ThetaG => &self.theta_g,
            Slot::L => &self.l,
            Slot::H => &self.h,
            Slot::B => &self.b,
            Slot::Sigma => &self.sigma,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Expr {
        match slot {
            Slot::ThetaF => &mut self.theta_f,
            Slot::ThetaG => &mut self.theta_g,
            Slot::L => &mut self.l,
            Slot::H => &mut self.h,
            Slot::B => &mut self.b,
            Slot::Sigma => &mut self.sigma,
        }
    }

    /// Check every slot against its variable set.
    pub fn validate(&self) -> Result<()> {
        for slot in [Slot::ThetaF, Slot::ThetaG, Slot::L, Slot::H, Slot::B, Slot::Sigma] {
            self.slot(slot).check_vars(slot.allowed(), slot.name())?;
        }
        if let XiMode::Expr(e) = &self.xi {
            e.check_vars(&[Var::X], "xi")?;
        }
        self.lipschitz.validate()
    }

    /// True when either driver reads the population.
    pub fn is_mean_field(&self) -> bool {
        self.theta_f.has_primed() || self.theta_g.has_primed()
    }

    /// Drivers with every primed slot replaced by zero.
    pub fn without_mean_field(&self) -> CoefficientSet {
        let zero_primed = |v: Var| if v.is_primed() { Expr::zero() } else { Expr::Var(v) };
        CoefficientSet {
            theta_f: self.theta_f.map_vars(&zero_primed),
            theta_g: self.theta_g.map_vars(&zero_primed),
            ..self.clone()
        }
    }
}
