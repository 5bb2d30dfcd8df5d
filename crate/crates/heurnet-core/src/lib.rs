//! heurnet-core: classic numeric heuristics recompiled as trainable
//! computation graphs.
//!
//! Two model families are provided, both built on a small reverse-mode
//! autodiff tape over dense f64 tensors:
//!
//! - [`deepnewton`]: a fixed-depth unrolled Newton root-finder for small
//!   polynomial systems, with per-layer candidate step/hysteresis/momentum
//!   matrices selected by residual argmin. At its identity initialization it
//!   reproduces damped Newton (and Newton with line search) bit for bit, so
//!   training starts from a known performance baseline.
//! - [`clusternet`]: a prototype-based image classifier whose shifted,
//!   masked L1 patch distance, flow-smoothness penalty, softmax mixing and
//!   label averaging are all expressed as graph ops with trainable weights.
//!
//! Supporting modules: [`tensor`] (values, kernels, graph, gradient
//! checking), [`tensorize`] (identity-recoverable builders: dense metric
//! forms, Toeplitz kernels, branch gates, loop unrolling), [`polysys`]
//! (polynomial systems, Newton baselines, root oracles), [`trainer`]
//! (seeded SGD), [`dataio`] (IDX parsing, dataset fetching, checkpoints,
//! CSV), and [`batch`] (data-parallel map with a sequential fallback).

pub mod batch;
pub mod clusternet;
pub mod dataio;
pub mod deepnewton;
pub mod polysys;
pub mod tensor;
pub mod tensorize;
pub mod trainer;

pub use tensor::graph::{Graph, NodeId};
pub use tensor::{Tensor, TensorError};

/// A named, optionally trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}
