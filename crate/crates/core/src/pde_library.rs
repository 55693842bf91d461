//! Right-hand sides of the four benchmark systems: advection-diffusion, wave,
//! Burgers and gas dynamics. Each is the semi-discrete `dU/dt = f(U)` obtained
//! by replacing spatial derivatives with the central-difference stencils.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stencils::StencilSet;
use crate::tensor_grid::GridField;

/// Densities below this make the gas-dynamics RHS refuse to divide.
pub const MIN_DENSITY: f64 = 1e-6;

pub const SYSTEM_NAMES: [&str; 4] = ["advection_diffusion", "wave", "burgers", "gas_dynamics"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdeParams {
    AdvectionDiffusion { c_x: f64, c_y: f64, d: f64 },
    Wave { omega: f64 },
    Burgers { d: f64 },
    GasDynamics { gamma: f64, m: f64, mu: f64, k: f64 },
}

impl PdeParams {
    pub fn name(&self) -> &'static str {
        match self {
            PdeParams::AdvectionDiffusion { .. } => "advection_diffusion",
            PdeParams::Wave { .. } => "wave",
            PdeParams::Burgers { .. } => "burgers",
            PdeParams::GasDynamics { .. } => "gas_dynamics",
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match *self {
            PdeParams::AdvectionDiffusion { c_x, c_y, d } => vec![("c_x", c_x), ("c_y", c_y), ("D", d)],
            PdeParams::Wave { omega } => vec![("omega", omega)],
            PdeParams::Burgers { d } => vec![("D", d)],
            PdeParams::GasDynamics { gamma, m, mu, k } => {
                vec![("gamma", gamma), ("M", m), ("mu", mu), ("k", k)]
            }
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Overrides one named parameter (names as in [`PdeParams::to_map`]).
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        let slot = match (self, key) {
            (PdeParams::AdvectionDiffusion { c_x, .. }, "c_x") => c_x,
            (PdeParams::AdvectionDiffusion { c_y, .. }, "c_y") => c_y,
            (PdeParams::AdvectionDiffusion { d, .. }, "D") => d,
            (PdeParams::Wave { omega }, "omega") => omega,
            (PdeParams::Burgers { d }, "D") => d,
            (PdeParams::GasDynamics { gamma, .. }, "gamma") => gamma,
            (PdeParams::GasDynamics { m, .. }, "M") => m,
            (PdeParams::GasDynamics { mu, .. }, "mu") => mu,
            (PdeParams::GasDynamics { k, .. }, "k") => k,
            (p, key) => {
                return Err(Error::InvalidConfig(format!(
                    "system {} has no parameter `{key}` (known: {})",
                    p.name(),
                    p.to_map().keys().cloned().collect::<Vec<_>>().join(", ")
                )))
            }
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSystem {
    pub params: PdeParams,
    /// Multiplier applied to the whole right-hand side.
    pub scale: f64,
}

impl PdeSystem {
    pub fn new(params: PdeParams, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("derivative scale must be positive, got {scale}")));
        }
        Ok(Self { params, scale })
    }

    pub fn advection_diffusion() -> Self {
        Self {
            params: PdeParams::AdvectionDiffusion { c_x: 1.0, c_y: 1.0, d: 0.001 },
            scale: 0.1,
        }
    }

    pub fn wave() -> Self {
        Self {
            params: PdeParams::Wave { omega: 0.1 },
            scale: 0.1,
        }
    }

    pub fn burgers() -> Self {
        Self {
            params: PdeParams::Burgers { d: 0.01 },
            scale: 0.01,
        }
    }

    pub fn gas_dynamics() -> Self {
        Self {
            params: PdeParams::GasDynamics { gamma: 1.0, m: 1.0, mu: 0.01, k: 0.01 },
            scale: 0.002,
        }
    }

    pub fn name(&self) -> &'static str {
        self.params.name()
    }

    /// Channels present in the published data.
    pub fn observed_channels(&self) -> usize {
        match self.params {
            PdeParams::AdvectionDiffusion { .. } | PdeParams::Wave { .. } => 1,
            PdeParams::Burgers { .. } => 2,
            PdeParams::GasDynamics { .. } => 4,
        }
    }

    pub fn temporal_order(&self) -> usize {
        match self.params {
            PdeParams::Wave { .. } => 2,
            _ => 1,
        }
    }

    /// Channels of the first-order state the solver integrates.
    pub fn state_channels(&self) -> usize {
        self.observed_channels() * self.temporal_order()
    }

    pub fn channel_labels(&self) -> &'static [&'static str] {
        match self.params {
            PdeParams::AdvectionDiffusion { .. } => &["u"],
            PdeParams::Wave { .. } => &["u", "u_t"],
            PdeParams::Burgers { .. } => &["u_x", "u_y"],
            PdeParams::GasDynamics { .. } => &["rho", "T", "v_x", "v_y"],
        }
    }

    pub fn rhs(&self, state: &GridField) -> Result<GridField> {
        if state.channels() != self.state_channels() {
            return Err(Error::shape(
                "pde rhs",
                format!("{} channels for {}", self.state_channels(), self.name()),
                format!("{} channels", state.channels()),
            ));
        }
        let s = StencilSet::for_field(state);
        let raw = match self.params {
            PdeParams::AdvectionDiffusion { c_x, c_y, d } => rhs_advection_diffusion(&s, state, c_x, c_y, d)?,
            PdeParams::Wave { omega } => rhs_wave(&s, state, omega)?,
            PdeParams::Burgers { d } => rhs_burgers(&s, state, d)?,
            PdeParams::GasDynamics { gamma, m, mu, k } => rhs_gas_dynamics(&s, state, gamma, m, mu, k)?,
        };
        Ok(raw.scale(self.scale))
    }
}

pub fn lookup_system(name: &str) -> Result<PdeSystem> {
    match name {
        "advection_diffusion" => Ok(PdeSystem::advection_diffusion()),
        "wave" => Ok(PdeSystem::wave()),
        "burgers" => Ok(PdeSystem::burgers()),
        "gas_dynamics" => Ok(PdeSystem::gas_dynamics()),
        _ => Err(Error::UnknownSystem {
            name: name.to_string(),
            valid: SYSTEM_NAMES.to_vec(),
        }),
    }
}

fn ch(state: &GridField, c: usize) -> Result<GridField> {
    state.select_channels(c..c + 1)
}

// Unscaled right-hand sides below; `PdeSystem::rhs` applies the scale.

/// `-(c·∇)u + D ∇²u`; with constant `c`, `∇·(cu) = c·∇u`.
fn rhs_advection_diffusion(s: &StencilSet, u: &GridField, c_x: f64, c_y: f64, d: f64) -> Result<GridField> {
    let ux = s.d_dx(u)?;
    let uy = s.d_dy(u)?;
    let lap = s.laplacian(u)?;
    let adv = GridField::axpy(c_x, &ux, &uy.scale(c_y))?;
    GridField::axpy(d, &lap, &adv.scale(-1.0))
}

/// `[u, v] -> [v, ω² ∇²u]`.
fn rhs_wave(s: &StencilSet, state: &GridField, omega: f64) -> Result<GridField> {
    let u = ch(state, 0)?;
    let v = ch(state, 1)?;
    let acc = s.laplacian(&u)?.scale(omega * omega);
    GridField::concat_channels(&[&v, &acc])
}

/// `D ∇²u_i - (u·∇)u_i` for each velocity component.
fn rhs_burgers(s: &StencilSet, state: &GridField, d: f64) -> Result<GridField> {
    let ux = ch(state, 0)?;
    let uy = ch(state, 1)?;
    let mut parts = Vec::with_capacity(2);
    for comp in [&ux, &uy] {
        let adv = s.advect(comp, &ux, &uy)?;
        parts.push(GridField::axpy(d, &s.laplacian(comp)?, &adv.scale(-1.0))?);
    }
    GridField::concat_channels(&[&parts[0], &parts[1]])
}

/// Compressible gas with ideal-gas closure `P = ρT`.
fn rhs_gas_dynamics(
    s: &StencilSet,
    state: &GridField,
    gamma: f64,
    m: f64,
    mu: f64,
    k: f64,
) -> Result<GridField> {
    let rho = ch(state, 0)?;
    let temp = ch(state, 1)?;
    let vx = ch(state, 2)?;
    let vy = ch(state, 3)?;
    let min_rho = rho.min_channel(0);
    if min_rho < MIN_DENSITY {
        return Err(Error::DegenerateState {
            min_rho,
            threshold: MIN_DENSITY,
        });
    }
    let div_v = s.divergence(&vx, &vy)?;
    let inv_rho = rho.map(|r| 1.0 / r);

    let drho = s
        .advect(&rho, &vx, &vy)?
        .add(&rho.mul(&div_v)?)?
        .scale(-1.0);

    let conduction = s.laplacian(&temp)?.mul(&inv_rho)?.scale(gamma * m * k);
    let dtemp = s
        .advect(&temp, &vx, &vy)?
        .add(&temp.mul(&div_v)?.scale(gamma))?
        .scale(-1.0)
        .add(&conduction)?;

    let pressure = rho.mul(&temp)?;
    let (px, py) = s.gradient(&pressure)?;
    let (gx, gy) = s.gradient(&div_v)?;
    let mut dv = Vec::with_capacity(2);
    for (comp, dp, gdiv) in [(&vx, &px, &gx), (&vy, &py, &gy)] {
        let adv = s.advect(comp, &vx, &vy)?;
        let force = gdiv.scale(mu).sub(dp)?.mul(&inv_rho)?;
        dv.push(force.sub(&adv)?);
    }
    GridField::concat_channels(&[&drho, &dtemp, &dv[0], &dv[1]])
}
