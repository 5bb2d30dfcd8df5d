//! Recorded computation traces with reverse-mode differentiation.
//!
//! The trace is append-only and eagerly evaluated: recording an op computes
//! its forward value immediately via the shared kernels, so data-dependent
//! decisions (candidate selection, settle gates) can be made while building
//! the graph. `backward` then sweeps the tape once in reverse, accumulating
//! adjoints additively across fan-out.

use super::kernels;
use super::{Tensor, TensorError};

/// Reference to a node in a [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Abs(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv2d { input: NodeId, kernel: NodeId },
    Shift { input: NodeId, di: i64, dj: i64 },
    MinOverFirst { stack: NodeId, indices: Vec<usize> },
    Softmax(NodeId),
    MatInverse(NodeId),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Index(NodeId, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    adjoint: Option<Tensor>,
}

/// Append-only computation trace. Node inputs always reference earlier
/// nodes, so the trace is topologically ordered by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Adjoint of a node after [`Graph::backward`]. `None` when no gradient
    /// reached it.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].adjoint.as_ref()
    }

    /// Adjoint of a node, materializing zeros when nothing reached it.
    pub fn gradient(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].adjoint {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            adjoint: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a value as a leaf (constant or parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::sub(self.value(a), self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = kernels::abs(self.value(a));
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = kernels::square(self.value(a));
        self.push(Op::Square(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = kernels::scale(self.value(a), c);
        self.push(Op::Scale(a, c), v)
    }

    /// Sum all entries to a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(kernels::sum(self.value(a)));
        self.push(Op::Sum(a), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    pub fn conv2d_valid(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::conv2d_valid(self.value(input), self.value(kernel))?;
        Ok(self.push(Op::Conv2d { input, kernel }, v))
    }

    pub fn shift2d(&mut self, input: NodeId, di: i64, dj: i64) -> Result<NodeId, TensorError> {
        let v = kernels::shift2d(self.value(input), di, dj)?;
        Ok(self.push(Op::Shift { input, di, dj }, v))
    }

    /// Per-position min over the leading axis. The returned indices are
    /// plain data (no gradient); the values node routes gradient only to
    /// the selected slice, max-pooling style.
    pub fn reduce_min_indexed(
        &mut self,
        stack: NodeId,
    ) -> Result<(NodeId, Vec<usize>), TensorError> {
        let (v, indices) = kernels::reduce_min_indexed(self.value(stack))?;
        let id = self.push(
            Op::MinOverFirst {
                stack,
                indices: indices.clone(),
            },
            v,
        );
        Ok((id, indices))
    }

    pub fn softmax(&mut self, z: NodeId) -> Result<NodeId, TensorError> {
        let v = kernels::softmax(self.value(z))?;
        Ok(self.push(Op::Softmax(z), v))
    }

    pub fn mat_inverse_small(&mut self, a: NodeId, eps_det: f64) -> Result<NodeId, TensorError> {
        let v = kernels::mat_inverse_small(self.value(a), eps_det)?;
        Ok(self.push(Op::MatInverse(a), v))
    }

    /// Concatenate 1-D nodes into one 1-D node.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                msg: "no inputs".into(),
            });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    /// Stack equally-shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "stack",
                shape: vec![],
                msg: "no inputs".into(),
            });
        }
        let base = self.value(parts[0]).shape().to_vec();
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: base,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Stack(parts.to_vec()), v))
    }

    /// Extract one element (by flat position) as a one-element node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId, TensorError> {
        let src = self.value(a);
        if i >= src.len() {
            return Err(TensorError::InvalidShape {
                op: "index",
                shape: src.shape().to_vec(),
                msg: format!("flat index {i} out of range"),
            });
        }
        let v = Tensor::scalar(src.data()[i]);
        Ok(self.push(Op::Index(a, i), v))
    }

    /// Reverse sweep from a scalar loss node. Adjoints accumulate additively
    /// across fan-out; each node is visited exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.adjoint = None;
        }
        self.nodes[loss.0].adjoint = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let (inputs, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = match &node.adjoint {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let ga = reduce_for(&inputs[a.0].value, g);
                    add_adjoint(inputs, *a, ga);
                    let gb = reduce_for(&inputs[b.0].value, g);
                    add_adjoint(inputs, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_for(&inputs[a.0].value, g);
                    add_adjoint(inputs, *a, ga);
                    let gb = reduce_for(&inputs[b.0].value, &kernels::scale(g, -1.0));
                    add_adjoint(inputs, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&inputs[a.0].value, &inputs[b.0].value);
                    let ga = reduce_for(av, &kernels::mul(g, bv).expect("mul bwd"));
                    let gb = reduce_for(bv, &kernels::mul(g, av).expect("mul bwd"));
                    add_adjoint(inputs, *a, ga);
                    add_adjoint(inputs, *b, gb);
                }
                Op::Abs(a) => {
                    let av = &inputs[a.0].value;
                    // subgradient at 0 is 0
                    let sign = Tensor::from_fn(av.shape(), |i| {
                        let v = av.data()[i];
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let ga = kernels::mul(g, &sign).expect("abs bwd");
                    add_adjoint(inputs, *a, ga);
                }
                Op::Square(a) => {
                    let av = &inputs[a.0].value;
                    let two_a = kernels::scale(av, 2.0);
                    let ga = kernels::mul(g, &two_a).expect("square bwd");
                    add_adjoint(inputs, *a, ga);
                }
                Op::Scale(a, c) => {
                    add_adjoint(inputs, *a, kernels::scale(g, *c));
                }
                Op::Sum(a) => {
                    let shape = inputs[a.0].value.shape().to_vec();
                    add_adjoint(inputs, *a, Tensor::filled(&shape, g.item()));
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&inputs[a.0].value, &inputs[b.0].value);
                    let bt = kernels::transpose(bv).expect("matmul bwd");
                    let ga = kernels::matmul(g, &bt).expect("matmul bwd");
                    let at = kernels::transpose(av).expect("matmul bwd");
                    let gb = kernels::matmul(&at, g).expect("matmul bwd");
                    add_adjoint(inputs, *a, ga);
                    add_adjoint(inputs, *b, gb);
                }
                Op::Transpose(a) => {
                    add_adjoint(inputs, *a, kernels::transpose(g).expect("transpose bwd"));
                }
                Op::Reshape(a) => {
                    let shape = inputs[a.0].value.shape().to_vec();
                    add_adjoint(inputs, *a, g.reshaped(shape).expect("reshape bwd"));
                }
                Op::Conv2d { input, kernel } => {
                    let (iv, kv) = (&inputs[input.0].value, &inputs[kernel.0].value);
                    let (h, w) = (iv.shape()[0], iv.shape()[1]);
                    let (kh, kw) = (kv.shape()[0], kv.shape()[1]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let mut gi = Tensor::zeros(&[h, w]);
                    let mut gk = Tensor::zeros(&[kh, kw]);
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g.data()[i * ow + j];
                            if go == 0.0 {
                                continue;
                            }
                            for u in 0..kh {
                                for v in 0..kw {
                                    gi.data_mut()[(i + u) * w + (j + v)] +=
                                        go * kv.data()[u * kw + v];
                                    gk.data_mut()[u * kw + v] +=
                                        go * iv.data()[(i + u) * w + (j + v)];
                                }
                            }
                        }
                    }
                    add_adjoint(inputs, *input, gi);
                    add_adjoint(inputs, *kernel, gk);
                }
                Op::Shift { input, di, dj } => {
                    let gi = kernels::shift2d(g, -di, -dj).expect("shift bwd");
                    add_adjoint(inputs, *input, gi);
                }
                Op::MinOverFirst { stack, indices } => {
                    let shape = inputs[stack.0].value.shape().to_vec();
                    let inner: usize = shape[1..].iter().product();
                    let mut gs = Tensor::zeros(&shape);
                    for (p, &t) in indices.iter().enumerate() {
                        gs.data_mut()[t * inner + p] = g.data()[p];
                    }
                    add_adjoint(inputs, *stack, gs);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dot = 0.0;
                    for (gv, yv) in g.data().iter().zip(y.data()) {
                        dot += gv * yv;
                    }
                    let ga = Tensor::from_fn(y.shape(), |i| y.data()[i] * (g.data()[i] - dot));
                    add_adjoint(inputs, *a, ga);
                }
                Op::MatInverse(a) => {
                    // dA = -B^T g B^T with B = A^{-1}
                    let b = &node.value;
                    let bt = kernels::transpose(b).expect("inverse bwd");
                    let tmp = kernels::matmul(&bt, g).expect("inverse bwd");
                    let ga = kernels::scale(&kernels::matmul(&tmp, &bt).expect("inverse bwd"), -1.0);
                    add_adjoint(inputs, *a, ga);
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = inputs[p.0].value.len();
                        let shape = inputs[p.0].value.shape().to_vec();
                        let gp = Tensor::new(shape, g.data()[offset..offset + len].to_vec())
                            .expect("concat bwd");
                        add_adjoint(inputs, p, gp);
                        offset += len;
                    }
                }
                Op::Stack(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = inputs[p.0].value.len();
                        let shape = inputs[p.0].value.shape().to_vec();
                        let gp = Tensor::new(shape, g.data()[offset..offset + len].to_vec())
                            .expect("stack bwd");
                        add_adjoint(inputs, p, gp);
                        offset += len;
                    }
                }
                Op::Index(a, pos) => {
                    let mut ga = Tensor::zeros(inputs[a.0].value.shape());
                    ga.data_mut()[*pos] = g.item();
                    add_adjoint(inputs, *a, ga);
                }
            }
        }
        Ok(())
    }
}

/// Reduce an output-shaped gradient back to an operand's shape; handles the
/// one-element broadcast by summing.
fn reduce_for(operand: &Tensor, g: &Tensor) -> Tensor {
    if operand.shape() == g.shape() {
        g.clone()
    } else {
        debug_assert!(operand.is_scalar());
        Tensor::scalar(kernels::sum(g))
    }
}

fn add_adjoint(nodes: &mut [Node], id: NodeId, contrib: Tensor) {
    match &mut nodes[id.0].adjoint {
        Some(adj) => {
            for (a, c) in adj.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.adjoint(w).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_square_at_three() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0));
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.adjoint(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(w),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn fanout_accumulates() {
        // loss = x*x + x -> dloss/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(4.0));
        let xx = g.mul(x, x).unwrap();
        let s = g.add(xx, x).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.adjoint(x).unwrap().data(), &[9.0]);
    }

    #[test]
    fn min_routes_exactly_one_unit_per_position() {
        let mut g = Graph::new();
        let stack = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 5.0, 3.0, 2.0, 4.0, 0.0]).unwrap());
        let (vals, idx) = g.reduce_min_indexed(stack).unwrap();
        assert_eq!(idx, vec![0, 1, 1]);
        let loss = g.sum(vals);
        g.backward(loss).unwrap();
        let adj = g.adjoint(stack).unwrap();
        assert_eq!(adj.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        // indicator: one unit per spatial position
        let per_pos: Vec<f64> = (0..3).map(|p| adj.data()[p] + adj.data()[3 + p]).collect();
        assert_eq!(per_pos, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn scalar_broadcast_gradients() {
        // loss = sum(s * v); dl/ds = sum(v), dl/dv = s each
        let mut g = Graph::new();
        let s = g.leaf(Tensor::scalar(3.0));
        let v = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 4.0]).unwrap());
        let prod = g.mul(s, v).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.adjoint(s).unwrap().data(), &[7.0]);
        assert_eq!(g.adjoint(v).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        // A diamond: loss = (x + x) * x. Adjoint of x must be exact, not doubled.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let two_x = g.add(x, x).unwrap();
        let prod = g.mul(two_x, x).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        // d/dx 2x^2 = 4x = 8
        assert_eq!(g.adjoint(x).unwrap().data(), &[8.0]);
    }
}
