//! Selective state-space core.
//!
//! * [`zoh_discretize`] and [`discretize`] turn continuous `(Δ, A, B)` into
//!   the per-step `(Ā, B̄·x)` pairs of a diagonal linear recurrence.
//! * [`scan_sequential`] runs the recurrence step by step and is the
//!   reference; [`scan_parallel`] evaluates the same recurrence with a
//!   work-efficient up-sweep/down-sweep over the associative operator
//!   `(a₁, b₁) ∘ (a₂, b₂) = (a₁a₂, a₂b₁ + b₂)`.
//! * [`gs6_forward`] is the grouped selective SSM: `Δ` and `A` live at width
//!   `D/g` and are repeated `g` times along channels before the scan.
//! * [`oracle`] holds the independent checks: the materialised causal
//!   attention matrix and an RK4 integrator for the continuous ODE.
//! * [`selective_scan`] records the whole discretize-and-scan step as one
//!   differentiable op on a [`Graph`](crate::numerics::Graph).

mod discretize;
mod forward;
mod op;
pub mod oracle;
mod params;
mod scan;

pub use discretize::{discretize, zoh_discretize, DiscretizedScanInputs};
pub use forward::{gs6_forward, s6_parameters, s6_reference, SelectiveParams};
pub use op::{gs6_layer, selective_scan};
pub use params::{GS6Ids, GS6Params};
pub use scan::{scan, scan_parallel, scan_sequential, ScanOutput, ScanState};

use serde::{Deserialize, Serialize};

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// `Ā = e^{ΔA}`, `B̄ = Δ·B`: the simplified form used by selective-scan
    /// implementations.
    #[default]
    Euler,
    /// Exact zero-order hold: `B̄ = (ΔA)⁻¹(e^{ΔA} − I)·ΔB`.
    Zoh,
}

/// Which evaluation strategy runs the linear recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}
