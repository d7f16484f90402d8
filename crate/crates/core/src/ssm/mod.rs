//! SSM cells: S6 (ZOH), the linearized intermediate, and COFFEE.

mod canon;
mod coffee;
mod count;
mod linearized;
mod s6;
mod state;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoffeeError, Result};
use crate::numerics::{Matrix, RngState};

pub use canon::{canonicalize, ExplicitInputCoffee};
pub use coffee::{
    coffee_forward, coffee_gate, coffee_jacobian_diag, coffee_step, project_lambda,
    stability_project, CoffeeParams, LAMBDA_MAX, LAMBDA_MIN,
};
pub use count::{
    block_params, count_mnist_params, count_params, count_smnist_params, CountOptions,
    EmbeddingCount, MNIST_FEATURES, MNIST_HIDDEN_PARAMS, MNIST_OUTPUT_PARAMS, MNIST_VIEWS,
};
pub use linearized::{linearized_forward, linearized_step, LinearizedParams};
pub use s6::{
    s6_forward, s6_gate, s6_step, s6_step_with_delta, zoh_coefficients, S6Params, ZOH_LIMIT_EPS,
};
pub use state::{GateVector, LayerState, LayerTrace, StateTrajectory};

pub(crate) use coffee::output as coffee_output;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Coffee,
    S6,
    Linearized,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Coffee => "coffee",
            ModelKind::S6 => "s6",
            ModelKind::Linearized => "linearized",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = CoffeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coffee" => Ok(ModelKind::Coffee),
            "s6" => Ok(ModelKind::S6),
            "linearized" => Ok(ModelKind::Linearized),
            other => Err(CoffeeError::InvalidArgument(format!(
                "unknown model kind '{other}' (expected coffee, s6 or linearized)"
            ))),
        }
    }
}

/// One SSM layer of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SsmLayer {
    Coffee(CoffeeParams),
    S6(S6Params),
    Linearized(LinearizedParams),
}

impl SsmLayer {
    /// Default initialization for each kind. `output_filter` only applies to COFFEE.
    pub fn init(
        kind: ModelKind,
        rng: &mut RngState,
        d: usize,
        n: usize,
        output_filter: bool,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(CoffeeError::InvalidArgument("D and n must be positive".into()));
        }
        if output_filter && kind != ModelKind::Coffee {
            return Err(CoffeeError::InvalidArgument(
                "output filtering is only defined for the COFFEE cell".into(),
            ));
        }
        Ok(match kind {
            ModelKind::Coffee => SsmLayer::Coffee(CoffeeParams::init(rng, d, n, output_filter)),
            ModelKind::S6 => SsmLayer::S6(S6Params::init(rng, d, n)?),
            ModelKind::Linearized => SsmLayer::Linearized(LinearizedParams::init(rng, d, n)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            SsmLayer::Coffee(_) => ModelKind::Coffee,
            SsmLayer::S6(_) => ModelKind::S6,
            SsmLayer::Linearized(_) => ModelKind::Linearized,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            SsmLayer::Coffee(p) => p.d(),
            SsmLayer::S6(p) => p.d(),
            SsmLayer::Linearized(p) => p.d(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            SsmLayer::Coffee(p) => p.n(),
            SsmLayer::S6(p) => p.n(),
            SsmLayer::Linearized(p) => p.n(),
        }
    }

    pub fn forward(&self, embedded: &Matrix) -> Result<LayerTrace> {
        match self {
            SsmLayer::Coffee(p) => coffee_forward(p, embedded),
            SsmLayer::S6(p) => s6_forward(p, embedded),
            SsmLayer::Linearized(p) => linearized_forward(p, embedded),
        }
    }

    /// Learnable parameter count of this layer.
    pub fn param_count(&self) -> usize {
        let filter = matches!(self, SsmLayer::Coffee(p) if p.has_output_filter());
        block_params(self.kind(), self.n(), self.d(), filter)
    }

    /// Clamp COFFEE and linearized λ into `[-2, 0]`; S6 is stable by construction.
    pub fn project(&mut self) {
        match self {
            SsmLayer::Coffee(p) => project_lambda(&mut p.lambda),
            SsmLayer::Linearized(p) => project_lambda(&mut p.lambda),
            SsmLayer::S6(_) => {}
        }
    }
}
