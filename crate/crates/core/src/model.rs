//! B-cell lymphopoiesis with a leukemic clone.
//!
//! Three healthy compartments (Pro-B `C1`, Pre-B `C2`, transition `C3`) and a
//! leukemic compartment `L`, all measured in cells. Proliferation is damped by
//! a saturating feedback signal: healthy cells sense every cell in the marrow,
//! leukemic cells only sense the healthy ones.
//!
//! | Compartment | Equation |
//! |-------------|----------|
//! | `C1` | `c0 + s ρ1 C1 − α1 C1 − μ ρ1 C1` |
//! | `C2` | `s ρ2 C2 + α1 C1 − α2 C2 − μ ρ2 C2` |
//! | `C3` | `α2 C2 − α3 C3` |
//! | `L`  | `s_L ρ_L L (1 − L/L_max) − γ_L L − μ ρ_L L` |
//!
//! with `s = 1/(1 + k(L + ΣC))`, `s_L = 1/(1 + kΣC)` and `μ ≥ 0` the total
//! drug effect (zero for the untreated system).

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` must be {requirement}, got {value}")]
    InvalidParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("unknown clone origin `{0}` (expected `pro_b` or `pre_b`)")]
    UnknownOrigin(String),
}

/// Maturation stage the leukemic clone descends from. Selects `ρ_L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneOrigin {
    /// `ρ_L = ρ1`
    ProB,
    /// `ρ_L = ρ2`
    PreB,
}

impl fmt::Display for CloneOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CloneOrigin::ProB => f.write_str("pro_b"),
            CloneOrigin::PreB => f.write_str("pre_b"),
        }
    }
}

impl FromStr for CloneOrigin {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pro_b" | "prob" => Ok(CloneOrigin::ProB),
            "pre_b" | "preb" => Ok(CloneOrigin::PreB),
            _ => Err(ModelError::UnknownOrigin(s.to_string())),
        }
    }
}

/// Raw biological constants, one field per model symbol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterValues {
    /// Stem-cell influx into `C1` (cells/day).
    pub c0: f64,
    /// Pro-B proliferation rate (1/day).
    pub rho1: f64,
    /// Pre-B proliferation rate (1/day).
    pub rho2: f64,
    /// Pro-B → Pre-B transition rate (1/day).
    pub alpha1: f64,
    /// Pre-B → transition rate (1/day).
    pub alpha2: f64,
    /// Transition-cell blood exit rate (1/day).
    pub alpha3: f64,
    /// Feedback signal strength (1/cell).
    pub k: f64,
    /// Leukemic blood exit rate (1/day).
    #[serde(rename = "gamma_L")]
    pub gamma_l: f64,
    /// Leukemic carrying capacity (cells).
    #[serde(rename = "L_max")]
    pub l_max: f64,
    pub clone_origin: CloneOrigin,
}

impl ParameterValues {
    /// Published reference values. `ρ1 = ln 2`, `ρ2 = ln 2 / 1.5`.
    pub fn reference(clone_origin: CloneOrigin) -> Self {
        let ln2 = std::f64::consts::LN_2;
        Self {
            c0: 1e7,
            rho1: ln2,
            rho2: ln2 / 1.5,
            alpha1: 0.168,
            alpha2: 0.144,
            alpha3: 0.288,
            k: 1e-10,
            gamma_l: 0.288e-3,
            l_max: 1e12,
            clone_origin,
        }
    }
}

/// Validated model parameters with `ρ_L` resolved from the clone origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParameters {
    values: ParameterValues,
    rho_l: f64,
}

impl ModelParameters {
    pub fn new(values: ParameterValues) -> Result<Self, ModelError> {
        fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter {
                    name,
                    requirement: "finite and > 0",
                    value,
                })
            }
        }
        if !(values.c0.is_finite() && values.c0 >= 0.0) {
            return Err(ModelError::InvalidParameter {
                name: "c0",
                requirement: "finite and >= 0",
                value: values.c0,
            });
        }
        positive("rho1", values.rho1)?;
        positive("rho2", values.rho2)?;
        positive("alpha1", values.alpha1)?;
        positive("alpha2", values.alpha2)?;
        positive("alpha3", values.alpha3)?;
        positive("k", values.k)?;
        positive("gamma_L", values.gamma_l)?;
        positive("L_max", values.l_max)?;
        let rho_l = match values.clone_origin {
            CloneOrigin::ProB => values.rho1,
            CloneOrigin::PreB => values.rho2,
        };
        Ok(Self { values, rho_l })
    }

    /// Reference parameter set for the given clone origin.
    pub fn reference(clone_origin: CloneOrigin) -> Self {
        Self::new(ParameterValues::reference(clone_origin)).expect("reference values are valid")
    }

    pub fn values(&self) -> &ParameterValues {
        &self.values
    }

    pub fn c0(&self) -> f64 {
        self.values.c0
    }
    pub fn rho1(&self) -> f64 {
        self.values.rho1
    }
    pub fn rho2(&self) -> f64 {
        self.values.rho2
    }
    pub fn alpha1(&self) -> f64 {
        self.values.alpha1
    }
    pub fn alpha2(&self) -> f64 {
        self.values.alpha2
    }
    pub fn alpha3(&self) -> f64 {
        self.values.alpha3
    }
    pub fn k(&self) -> f64 {
        self.values.k
    }
    pub fn gamma_l(&self) -> f64 {
        self.values.gamma_l
    }
    pub fn l_max(&self) -> f64 {
        self.values.l_max
    }
    pub fn clone_origin(&self) -> CloneOrigin {
        self.values.clone_origin
    }
    pub fn rho_l(&self) -> f64 {
        self.rho_l
    }

    /// Same parameters with a different stem-cell influx.
    pub fn with_c0(&self, c0: f64) -> Result<Self, ModelError> {
        Self::new(ParameterValues { c0, ..self.values })
    }

    pub fn with_clone_origin(&self, clone_origin: CloneOrigin) -> Self {
        Self::new(ParameterValues {
            clone_origin,
            ..self.values
        })
        .expect("origin change keeps parameters valid")
    }
}

/// Cell counts of the four marrow compartments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MarrowState {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub l: f64,
}

impl MarrowState {
    pub const fn new(c1: f64, c2: f64, c3: f64, l: f64) -> Self {
        Self { c1, c2, c3, l }
    }

    /// Reference initial marrow (healthy steady values) seeded with `l` leukemic cells.
    pub const fn reference_initial(l: f64) -> Self {
        Self::new(3.52211e9, 1.84911e10, 9.24555e9, l)
    }

    pub fn healthy_total(&self) -> f64 {
        self.c1 + self.c2 + self.c3
    }

    pub fn total(&self) -> f64 {
        self.healthy_total() + self.l
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.c1, self.c2, self.c3, self.l]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_nonnegative(&self) -> bool {
        self.to_array().iter().all(|v| *v >= 0.0)
    }
}

/// Time derivative of a [`MarrowState`] (cells/day).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub dc1: f64,
    pub dc2: f64,
    pub dc3: f64,
    pub dl: f64,
}

impl StateDerivative {
    pub fn to_array(self) -> [f64; 4] {
        [self.dc1, self.dc2, self.dc3, self.dl]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Healthy feedback signal `1/(1 + k(L + C1 + C2 + C3))`.
#[inline]
pub fn healthy_signal(params: &ModelParameters, state: &MarrowState) -> f64 {
    1.0 / (1.0 + params.k() * (state.l + state.healthy_total()))
}

/// Leukemic feedback signal `1/(1 + k(C1 + C2 + C3))`; leukemic cells ignore their own density.
#[inline]
pub fn leukemic_signal(params: &ModelParameters, state: &MarrowState) -> f64 {
    1.0 / (1.0 + params.k() * state.healthy_total())
}

/// Right-hand side of the untreated system.
#[inline]
pub fn leukemia_rhs(params: &ModelParameters, state: &MarrowState) -> StateDerivative {
    treatment_rhs(params, state, 0.0)
}

/// Right-hand side with a chemotherapy kill term proportional to proliferation.
///
/// Transition cells do not proliferate, so `dc3` never depends on `mu`.
#[inline]
pub fn treatment_rhs(params: &ModelParameters, state: &MarrowState, mu: f64) -> StateDerivative {
    let s = healthy_signal(params, state);
    let s_l = leukemic_signal(params, state);
    let p = &params.values;
    let MarrowState { c1, c2, c3, l } = *state;
    StateDerivative {
        dc1: p.c0 + s * p.rho1 * c1 - p.alpha1 * c1 - mu * p.rho1 * c1,
        dc2: s * p.rho2 * c2 + p.alpha1 * c1 - p.alpha2 * c2 - mu * p.rho2 * c2,
        dc3: p.alpha2 * c2 - p.alpha3 * c3,
        dl: s_l * params.rho_l * l * (1.0 - l / p.l_max) - p.gamma_l * l - mu * params.rho_l * l,
    }
}
