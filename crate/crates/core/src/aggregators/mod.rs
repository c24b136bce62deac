//! Gradient aggregation operators.
//!
//! Every operator maps a [`GradientSet`] (plus, for the stochastic ones, an
//! explicit generator) to an [`AggregateUpdate`] whose direction follows the
//! crate-wide descent convention `θ ← θ + η·g`.

mod graddrop;
mod imtl;
mod mgda;
mod pcgrad;
mod scalarize;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use graddrop::{
    graddrop, graddrop_expectation, graddrop_repr, graddrop_repr_expectation, sign_purity, GradDropOptions,
    GradDropSample,
};
pub use imtl::{
    imtl_g, imtl_g_excluding_zero, imtl_l_step, ImtlRoute, ImtlTrace, LossScaleState, LossScaleStep,
    LOG_SCALE_LIMIT,
};
pub use mgda::{mgda, mgda_rescale, mgda_rescale_lenient};
pub use pcgrad::{pcgrad, PCGradTrace};
pub use scalarize::{rgd, rlw, rlw_weights, sign_agnostic_graddrop, unitary, RlwDistribution};

use crate::error::{Error, Result};
use crate::grad::{AggregateUpdate, DenseVector, GradientSet, Space};
use crate::minnorm::MinNormConfig;

fn default_true() -> bool {
    true
}

fn default_mass() -> f64 {
    1.0
}

fn default_keep() -> f64 {
    0.5
}

/// An aggregation method together with its options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Unitary,
    Mgda {
        /// Divide each gradient by `‖∇L_i‖ · L_i` before solving.
        #[serde(default = "default_true")]
        rescale: bool,
    },
    Imtl,
    Pcgrad,
    Graddrop {
        #[serde(default)]
        flip_indicator: bool,
    },
    Rlw {
        #[serde(default)]
        distribution: RlwDistribution,
        #[serde(default = "default_mass")]
        mass: f64,
    },
    Rgd {
        #[serde(default = "default_keep")]
        p: f64,
    },
    SignAgnosticGraddrop {
        #[serde(default = "default_keep")]
        p: f64,
    },
}

impl Method {
    /// Every method with default options, in reporting order.
    pub fn catalog() -> Vec<Method> {
        vec![
            Method::Unitary,
            Method::Mgda { rescale: true },
            Method::Imtl,
            Method::Pcgrad,
            Method::Graddrop { flip_indicator: false },
            Method::Rlw { distribution: RlwDistribution::Dirichlet, mass: 1.0 },
            Method::Rlw { distribution: RlwDistribution::Normal, mass: 1.0 },
            Method::Rgd { p: 0.5 },
            Method::SignAgnosticGraddrop { p: 0.5 },
        ]
    }

    /// Short stable name used in file names and reports.
    pub fn label(&self) -> String {
        match self {
            Method::Unitary => "unitary".into(),
            Method::Mgda { rescale: true } => "mgda".into(),
            Method::Mgda { rescale: false } => "mgda-raw".into(),
            Method::Imtl => "imtl".into(),
            Method::Pcgrad => "pcgrad".into(),
            Method::Graddrop { flip_indicator: false } => "graddrop".into(),
            Method::Graddrop { flip_indicator: true } => "graddrop-flipped".into(),
            Method::Rlw { distribution, mass } => {
                let base = match distribution {
                    RlwDistribution::Dirichlet => "rlw-dirichlet",
                    RlwDistribution::Normal => "rlw-normal",
                    RlwDistribution::Uniform => "rlw-uniform",
                };
                if *mass == 1.0 {
                    base.into()
                } else {
                    format!("{base}-x{mass}")
                }
            }
            Method::Rgd { p } => format!("rgd-p{p}"),
            Method::SignAgnosticGraddrop { p } => format!("sign-agnostic-graddrop-p{p}"),
        }
    }

    /// Whether the method can run on gradients in `space`.
    pub fn supports(&self, space: Space) -> bool {
        !(matches!(self, Method::Pcgrad) && space == Space::Representation)
    }

    pub fn is_unitary(&self) -> bool {
        matches!(self, Method::Unitary)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::Rgd { p } | Method::SignAgnosticGraddrop { p } if !(*p > 0.0 && *p <= 1.0) => {
                Err(Error::Config(format!("{}: keep probability must lie in (0, 1]", self.label())))
            }
            Method::Rlw { mass, .. } if !(*mass > 0.0 && mass.is_finite()) => {
                Err(Error::Config("rlw mass must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Parses a label as produced by [`Method::label`]; bare `rgd` and
    /// `sign-agnostic-graddrop` use `p = 0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let parse_p = |rest: &str| -> Result<f64> {
            rest.strip_prefix("-p")
                .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))?
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad keep probability in `{s}`")))
        };
        let method = match norm.as_str() {
            "unitary" => Method::Unitary,
            "mgda" => Method::Mgda { rescale: true },
            "mgda-raw" => Method::Mgda { rescale: false },
            "imtl" => Method::Imtl,
            "pcgrad" => Method::Pcgrad,
            "graddrop" => Method::Graddrop { flip_indicator: false },
            "graddrop-flipped" => Method::Graddrop { flip_indicator: true },
            "rlw" | "rlw-dirichlet" => Method::Rlw { distribution: RlwDistribution::Dirichlet, mass: 1.0 },
            "rlw-normal" => Method::Rlw { distribution: RlwDistribution::Normal, mass: 1.0 },
            "rlw-uniform" => Method::Rlw { distribution: RlwDistribution::Uniform, mass: 1.0 },
            "rgd" => Method::Rgd { p: 0.5 },
            "sign-agnostic-graddrop" => Method::SignAgnosticGraddrop { p: 0.5 },
            other => {
                if let Some(rest) = other.strip_prefix("sign-agnostic-graddrop") {
                    Method::SignAgnosticGraddrop { p: parse_p(rest)? }
                } else if let Some(rest) = other.strip_prefix("rgd") {
                    Method::Rgd { p: parse_p(rest)? }
                } else {
                    return Err(Error::Config(format!("unknown method `{s}`")));
                }
            }
        };
        method.validate()?;
        Ok(method)
    }
}

/// Layout of representation-space gradients, needed by sign-aware masking.
#[derive(Clone, Copy, Debug)]
pub struct ReprLayout<'a> {
    /// Shared activations `z`, flattened like the gradients.
    pub activations: &'a DenseVector,
    /// Representation width `r`; the batch size is `dim / r`.
    pub width: usize,
}

/// Applies `method` to `gs`.
///
/// `losses` are the current per-task losses (used by MGDA rescaling). For
/// representation-space GradDrop, `repr` must describe the activations.
pub fn aggregate<R: Rng + ?Sized>(
    method: &Method,
    gs: &GradientSet,
    losses: &[f64],
    repr: Option<ReprLayout<'_>>,
    qp: MinNormConfig,
    rng: &mut R,
) -> Result<AggregateUpdate> {
    if !method.supports(gs.space()) {
        return Err(Error::Config(format!("{method} does not operate on {:?} gradients", gs.space())));
    }
    Ok(match method {
        Method::Unitary => unitary(gs)?,
        Method::Mgda { rescale } => {
            if *rescale {
                let scaled = mgda_rescale_lenient(gs, losses)?;
                let sol = mgda(&scaled, qp)?;
                // Weights from the rescaled problem, applied to the rescaled rows.
                sol.without_trace()
            } else {
                mgda(gs, qp)?.without_trace()
            }
        }
        Method::Imtl => imtl_g_excluding_zero(gs)?.without_trace(),
        Method::Pcgrad => pcgrad(gs, rng)?.without_trace(),
        Method::Graddrop { flip_indicator } => {
            let options = GradDropOptions { flip_indicator: *flip_indicator };
            match (gs.space(), repr) {
                (Space::Representation, Some(layout)) => {
                    graddrop_repr(gs, layout.activations, layout.width, options, rng)?.without_trace()
                }
                (Space::Representation, None) => {
                    return Err(Error::Config("representation GradDrop needs the activation layout".into()))
                }
                (Space::Parameter, _) => graddrop(gs, options, rng)?.without_trace(),
            }
        }
        Method::Rlw { distribution, mass } => rlw(gs, *distribution, *mass, rng)?,
        Method::Rgd { p } => rgd(gs, *p, rng)?.without_trace(),
        Method::SignAgnosticGraddrop { p } => sign_agnostic_graddrop(gs, *p, rng)?.without_trace(),
    })
}
