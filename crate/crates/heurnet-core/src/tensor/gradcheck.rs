//! Central-difference gradient checking.
//!
//! The numeric differentiator here is the independent oracle used by the
//! test suites and by `heurnet gradcheck`; it never calls into the reverse
//! sweep it is checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::graph::Graph;
use super::{Tensor, TensorError};

/// Central differences `(f(w+h) - f(w-h)) / 2h` per coordinate of every
/// parameter tensor. `f` must be deterministic.
pub fn finite_diff_gradient<F>(
    f: F,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>, TensorError>
where
    F: Fn(&[Tensor]) -> Result<f64, TensorError>,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        let mut grad = Tensor::zeros(params[pi].shape());
        for ci in 0..params[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = f(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = f(&work)?;
            work[pi].data_mut()[ci] = orig;
            grad.data_mut()[ci] = (up - down) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Relative error with an absolute floor so that near-zero gradients are
/// compared absolutely instead of blowing up the ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(av, nv));
        }
    }
    worst
}

/// One row of the gradient-check report.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const OP_TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-5;

/// Margin keeping sampled inputs away from the kinks of abs/min selections.
const KINK_MARGIN: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform samples with `|v| > margin`, for ops with a kink at zero.
fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() > KINK_MARGIN {
            break v;
        }
    })
}

/// Loss used by the per-op checks: a fixed random weighting of the op
/// output, so adjoints are non-trivial.
fn weighted_sum(g: &mut Graph, out: super::graph::NodeId, weights: &Tensor) -> super::graph::NodeId {
    let w = g.leaf(weights.clone());
    let prod = g.mul(out, w).expect("weighted_sum");
    g.sum(prod)
}

struct OpCase {
    name: &'static str,
    /// Builds parameter tensors for one instance.
    make_params: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    /// Builds the scalar loss from leaves bound to the parameters.
    build: fn(&mut Graph, &[super::graph::NodeId], &Tensor) -> super::graph::NodeId,
    /// Shape of the op output (for the loss weighting).
    out_shape: fn() -> Vec<usize>,
}

fn run_case(case: &OpCase, instances: usize, rng: &mut ChaCha8Rng) -> OpReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let params = (case.make_params)(rng);
        let weights = uniform(rng, &(case.out_shape)());
        let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
            let mut g = Graph::new();
            let leaves: Vec<_> = ps.iter().map(|p| g.leaf(p.clone())).collect();
            let loss = (case.build)(&mut g, &leaves, &weights);
            Ok(g.value(loss).item())
        };
        let numeric = finite_diff_gradient(eval, &params, STEP).expect("finite diff");
        let mut g = Graph::new();
        let leaves: Vec<_> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = (case.build)(&mut g, &leaves, &weights);
        g.backward(loss).expect("backward");
        let analytic: Vec<Tensor> = leaves.iter().map(|&l| g.gradient(l)).collect();
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    OpReport {
        op: case.name.to_string(),
        max_rel_err: worst,
        pass: worst < OP_TOLERANCE,
    }
}

/// Gradient-check every differentiable op over `instances` random instances
/// each. Entries are drawn from U[-1,1], kept away from abs/min kinks by a
/// small margin.
pub fn run_op_suite(seed: u64, instances: usize) -> Vec<OpReport> {
    let cases: Vec<OpCase> = vec![
        OpCase {
            name: "add",
            make_params: |r| vec![uniform(r, &[6]), uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.add(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "sub",
            make_params: |r| vec![uniform(r, &[6]), uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.sub(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "mul",
            make_params: |r| vec![uniform(r, &[6]), uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.mul(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "mul_scalar_broadcast",
            make_params: |r| vec![uniform(r, &[1]), uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.mul(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "abs",
            make_params: |r| vec![uniform_away_from_zero(r, &[6])],
            build: |g, l, w| {
                let out = g.abs(l[0]);
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "square",
            make_params: |r| vec![uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.square(l[0]);
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "scale",
            make_params: |r| vec![uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.scale(l[0], -1.7);
                weighted_sum(g, out, w)
            },
            out_shape: || vec![6],
        },
        OpCase {
            name: "matmul",
            make_params: |r| vec![uniform(r, &[4, 4]), uniform(r, &[4, 4])],
            build: |g, l, w| {
                let out = g.matmul(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![4, 4],
        },
        OpCase {
            name: "transpose",
            make_params: |r| vec![uniform(r, &[3, 5])],
            build: |g, l, w| {
                let out = g.transpose(l[0]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![5, 3],
        },
        OpCase {
            name: "conv2d_valid",
            make_params: |r| vec![uniform(r, &[6, 6]), uniform(r, &[3, 3])],
            build: |g, l, w| {
                let out = g.conv2d_valid(l[0], l[1]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![4, 4],
        },
        OpCase {
            name: "shift2d",
            make_params: |r| vec![uniform(r, &[5, 5])],
            build: |g, l, w| {
                let out = g.shift2d(l[0], 1, -2).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![5, 5],
        },
        OpCase {
            name: "reduce_min_indexed",
            make_params: |r| loop {
                let stack = uniform(r, &[3, 4]);
                // keep min gaps above the kink margin so +/-h cannot flip
                // the selection
                let (_, idx) = super::kernels::reduce_min_indexed(&stack).unwrap();
                let mut ok = true;
                for p in 0..4 {
                    for t in 0..3 {
                        if t != idx[p] {
                            let gap = stack.data()[t * 4 + p] - stack.data()[idx[p] * 4 + p];
                            if gap < KINK_MARGIN {
                                ok = false;
                            }
                        }
                    }
                }
                if ok {
                    break vec![stack];
                }
            },
            build: |g, l, w| {
                let (vals, _) = g.reduce_min_indexed(l[0]).unwrap();
                weighted_sum(g, vals, w)
            },
            out_shape: || vec![4],
        },
        OpCase {
            name: "softmax",
            make_params: |r| vec![uniform(r, &[5])],
            build: |g, l, w| {
                let out = g.softmax(l[0]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![5],
        },
        OpCase {
            name: "mat_inverse_small",
            make_params: |r| loop {
                let a = uniform(r, &[2, 2]);
                if let Ok(det) = super::kernels::det_small(&a) {
                    if det.abs() > 0.1 {
                        break vec![a];
                    }
                }
            },
            build: |g, l, w| {
                let out = g.mat_inverse_small(l[0], 1e-12).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![2, 2],
        },
        OpCase {
            name: "concat",
            make_params: |r| vec![uniform(r, &[3]), uniform(r, &[2])],
            build: |g, l, w| {
                let out = g.concat(&[l[0], l[1]]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![5],
        },
        OpCase {
            name: "stack",
            make_params: |r| vec![uniform(r, &[4]), uniform(r, &[4])],
            build: |g, l, w| {
                let out = g.stack(&[l[0], l[1]]).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![2, 4],
        },
        OpCase {
            name: "index",
            make_params: |r| vec![uniform(r, &[6])],
            build: |g, l, w| {
                let out = g.index(l[0], 2).unwrap();
                weighted_sum(g, out, w)
            },
            out_shape: || vec![1],
        },
        OpCase {
            name: "sum",
            make_params: |r| vec![uniform(r, &[7])],
            build: |g, l, w| {
                let out = g.sum(l[0]);
                weighted_sum(g, out, w)
            },
            out_shape: || vec![1],
        },
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .iter()
        .map(|case| run_case(case, instances, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let f = |p: &[Tensor]| Ok(p[0].item() * p[0].item());
        let grads = finite_diff_gradient(f, &[Tensor::scalar(1.0)], 1e-5).unwrap();
        assert!((grads[0].item() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let f = |_: &[Tensor]| Ok(3.25);
        let grads = finite_diff_gradient(f, &[Tensor::scalar(0.7)], 1e-5).unwrap();
        assert_eq!(grads[0].item(), 0.0);
    }

    #[test]
    fn op_suite_passes() {
        for report in run_op_suite(7, 100) {
            assert!(
                report.pass,
                "{} failed gradcheck: max rel err {:e}",
                report.op, report.max_rel_err
            );
        }
    }

    #[test]
    fn comparator_flags_wrong_gradient() {
        // negative control: a deliberately wrong analytic gradient must fail
        let analytic = vec![Tensor::scalar(1.0)];
        let numeric = vec![Tensor::scalar(2.0)];
        assert!(max_rel_error(&analytic, &numeric) > OP_TOLERANCE);
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_op_suite(11, 5);
        let b = run_op_suite(11, 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.op, y.op);
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
