//! Builders that turn fixed heuristic structure into trainable graph
//! pieces while keeping the original behavior recoverable at the initial
//! parameter values:
//!
//! - dense metric matrices initialized to the identity (Euclidean distance
//!   is the starting point of the Mahalanobis form),
//! - Toeplitz-structured operators stored as kernels and applied as valid
//!   convolutions (parameter count stays that of a conv layer),
//! - 0/1 gate weights that replace if/else branches with a weighted merge,
//! - fixed-count loop unrolling with optional settle gates that freeze a
//!   state once a convergence predicate holds.

use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{kernels, Tensor, TensorError};
use crate::Parameter;

/// A scalar branch weight initialized from a truth value, exactly 0.0 or
/// 1.0; unconstrained once training starts.
#[derive(Debug, Clone)]
pub struct GateWeight {
    pub param: Parameter,
}

impl GateWeight {
    pub fn from_bool(name: impl Into<String>, truth: bool) -> Self {
        GateWeight {
            param: Parameter::new(name, Tensor::scalar(if truth { 1.0 } else { 0.0 })),
        }
    }
}

/// Toeplitz-structured operator stored as its kernel (1-D length k, or 2-D
/// kh x kw). The materialized dense matrix has constant diagonals.
#[derive(Debug, Clone)]
pub struct ToeplitzParam {
    pub kernel: Parameter,
}

impl ToeplitzParam {
    pub fn new(name: impl Into<String>, kernel: Tensor) -> Self {
        ToeplitzParam {
            kernel: Parameter::new(name, kernel),
        }
    }

    /// Dense (n-k+1) x n matrix equal to the valid 1-D correlation with
    /// this kernel; the test oracle for `toeplitz_apply_1d`.
    pub fn materialize_1d(&self, n: usize) -> Result<Tensor, TensorError> {
        let k = self.kernel.value.len();
        if k > n {
            return Err(TensorError::ShapeMismatch {
                op: "toeplitz_materialize",
                lhs: vec![k],
                rhs: vec![n],
            });
        }
        let rows = n - k + 1;
        let mut m = Tensor::zeros(&[rows, n]);
        for i in 0..rows {
            for j in 0..k {
                m.data_mut()[i * n + i + j] = self.kernel.value.data()[j];
            }
        }
        Ok(m)
    }
}

/// Trainable dense d x d matrix initialized to the identity, so the
/// quadratic form it induces starts out as the squared Euclidean distance.
pub fn identity_dense(name: impl Into<String>, d: usize) -> Parameter {
    Parameter::new(name, Tensor::eye(d, 1.0))
}

/// Record the quadratic form (x - y)^T A (x - y) as a scalar node.
pub fn mahalanobis(
    g: &mut Graph,
    a: NodeId,
    x: NodeId,
    y: NodeId,
) -> Result<NodeId, TensorError> {
    let d = g.value(x).len();
    let diff = g.sub(x, y)?;
    let col = g.reshape(diff, vec![d, 1])?;
    let row = g.transpose(col)?;
    let ad = g.matmul(a, col)?;
    let out = g.matmul(row, ad)?;
    g.reshape(out, vec![1])
}

/// Apply a 1-D Toeplitz operator (valid region) to a 1-D node. Equals a
/// dense matmul with the materialized matrix.
pub fn toeplitz_apply_1d(
    g: &mut Graph,
    kernel: NodeId,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let n = g.value(x).len();
    let k = g.value(kernel).len();
    if g.value(kernel).shape().len() != 1 || g.value(x).shape().len() != 1 || k > n {
        return Err(TensorError::ShapeMismatch {
            op: "toeplitz_apply_1d",
            lhs: g.value(kernel).shape().to_vec(),
            rhs: g.value(x).shape().to_vec(),
        });
    }
    let x2 = g.reshape(x, vec![1, n])?;
    let k2 = g.reshape(kernel, vec![1, k])?;
    let out = g.conv2d_valid(x2, k2)?;
    let m = n - k + 1;
    g.reshape(out, vec![m])
}

/// Apply a 2-D Toeplitz-block-Toeplitz operator: valid cross-correlation
/// with the kernel.
pub fn toeplitz_apply_2d(
    g: &mut Graph,
    kernel: NodeId,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    g.conv2d_valid(x, kernel)
}

/// Merge two branches with a gate weight: `w * branch_true +
/// (1 - w) * branch_false`. At w in {0, 1} this reproduces the original
/// conditional exactly.
pub fn gate_merge(
    g: &mut Graph,
    w: NodeId,
    branch_true: NodeId,
    branch_false: NodeId,
) -> Result<NodeId, TensorError> {
    if g.value(branch_true).shape() != g.value(branch_false).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gate_merge",
            lhs: g.value(branch_true).shape().to_vec(),
            rhs: g.value(branch_false).shape().to_vec(),
        });
    }
    let one = g.constant(1.0);
    let wt = g.mul(w, branch_true)?;
    let inv = g.sub(one, w)?;
    let wf = g.mul(inv, branch_false)?;
    g.add(wt, wf)
}

/// Unroll a fixed-count loop into `count` chained steps.
///
/// With a settle predicate, each step is wrapped in a gate whose 0/1 weight
/// is computed from the pre-step state and treated as a constant in the
/// backward pass: once the predicate holds the state freezes, emulating an
/// early exit inside the unrolled graph.
pub fn unroll<F, P>(
    g: &mut Graph,
    count: usize,
    init: NodeId,
    mut step: F,
    settle: Option<P>,
) -> Result<NodeId, TensorError>
where
    F: FnMut(&mut Graph, NodeId, usize) -> Result<NodeId, TensorError>,
    P: Fn(&Tensor) -> bool,
{
    if count == 0 {
        return Err(TensorError::InvalidShape {
            op: "unroll",
            shape: vec![],
            msg: "count must be >= 1".into(),
        });
    }
    let mut state = init;
    for i in 0..count {
        let settled = settle
            .as_ref()
            .map(|p| p(g.value(state)))
            .unwrap_or(false);
        let next = step(g, state, i)?;
        state = if settle.is_some() {
            let indicator = g.constant(if settled { 1.0 } else { 0.0 });
            gate_merge(g, indicator, state, next)?
        } else {
            next
        };
    }
    Ok(state)
}

/// Dense-oracle check value: materialized Toeplitz matmul, used by tests.
pub fn toeplitz_dense_oracle_1d(p: &ToeplitzParam, x: &Tensor) -> Result<Tensor, TensorError> {
    let m = p.materialize_1d(x.len())?;
    let col = x.reshaped(vec![x.len(), 1])?;
    let out = kernels::matmul(&m, &col)?;
    out.reshaped(vec![x.len() - p.kernel.value.len() + 1])
}
