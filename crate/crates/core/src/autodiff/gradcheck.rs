//! Finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent of
//! the backward rules it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, GradMode, NodeId, Tensor};
use crate::error::Result;

/// Central differences of `f` at `x` with step `eps`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

type Builder = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// One primitive op applied to random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Builder,
}

impl OpCase {
    pub fn build(&self, graph: &mut Graph, inputs: &[NodeId]) -> Result<NodeId> {
        (self.build)(graph, inputs)
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values bounded away from zero so kinks are not straddled by the FD step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = rng.gen_range(0.1..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

/// Names of every op covered by [`op_cases`].
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "scale",
    "add_scalar",
    "pow",
    "relu",
    "step",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "expand",
    "sum",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "pad_rows",
    "pad_cols",
    "embedding",
    "scatter_rows",
    "index_select",
    "scatter_cols",
    "cross_entropy",
];

/// Random instances of every differentiable primitive, seeded.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(1..4);
    let c = rng.gen_range(1..5);
    let k = rng.gen_range(1..4);
    let mut cases = Vec::new();
    let mut case = |name, inputs, build: Builder| cases.push(OpCase { name, inputs, build });

    case("add", vec![uniform(&mut rng, r, c, -1.0, 1.0), uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| {
        g.add(x[0], x[1])
    });
    case("sub", vec![uniform(&mut rng, r, c, -1.0, 1.0), uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| {
        g.sub(x[0], x[1])
    });
    case("mul", vec![uniform(&mut rng, r, c, -1.0, 1.0), uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| {
        g.mul(x[0], x[1])
    });
    case("matmul", vec![uniform(&mut rng, r, k, -1.0, 1.0), uniform(&mut rng, k, c, -1.0, 1.0)], |g, x| {
        g.matmul(x[0], x[1])
    });
    case("transpose", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| g.transpose(x[0]));
    case("scale", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| g.scale(x[0], -1.7));
    case("add_scalar", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| g.add_scalar(x[0], 0.3));
    case("pow", vec![uniform(&mut rng, r, c, 0.5, 2.0)], |g, x| {
        let a = g.pow(x[0], -0.5)?;
        let b = g.pow(x[0], 2.5)?;
        g.add(a, b)
    });
    case("relu", vec![away_from_zero(&mut rng, r, c)], |g, x| {
        // Squared so the second derivative through the mask is exercised.
        let y = g.relu(x[0])?;
        g.mul(y, y)
    });
    case("step", vec![away_from_zero(&mut rng, r, c)], |g, x| {
        let s = g.step(x[0])?;
        g.mul(s, x[0])
    });
    case("tanh", vec![uniform(&mut rng, r, c, -2.0, 2.0)], |g, x| g.tanh(x[0]));
    case("exp", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| g.exp(x[0]));
    case("log", vec![uniform(&mut rng, r, c, 0.3, 2.0)], |g, x| g.log(x[0]));
    case("softmax", vec![uniform(&mut rng, r, c + 1, -2.0, 2.0)], |g, x| g.softmax(x[0]));
    case("log_softmax", vec![uniform(&mut rng, r, c + 1, -2.0, 2.0)], |g, x| g.log_softmax(x[0]));
    case("expand", vec![uniform(&mut rng, 1, c, -1.0, 1.0), uniform(&mut rng, r, 1, -1.0, 1.0)], |g, x| {
        let a = g.expand(x[0], 3, g.shape(x[0]).1)?;
        let rows = g.shape(x[1]).0;
        let b = g.expand(x[1], rows, 3)?;
        let bt = g.matmul(b, a)?;
        Ok(bt)
    });
    case("sum", vec![uniform(&mut rng, r + 1, c, -1.0, 1.0)], |g, x| {
        let (rows, cols) = g.shape(x[0]);
        let rs = g.sum_to(x[0], 1, cols)?;
        let cs = g.sum_to(x[0], rows, 1)?;
        let outer = g.matmul(cs, rs)?;
        let all = g.sum(x[0])?;
        let all = g.expand(all, rows, cols)?;
        let prod = g.mul(outer, all)?;
        g.tanh(prod)
    });
    case("concat_rows", vec![uniform(&mut rng, r, c, -1.0, 1.0), uniform(&mut rng, k, c, -1.0, 1.0)], |g, x| {
        let y = g.concat_rows(&[x[0], x[1], x[0]])?;
        g.tanh(y)
    });
    case("concat_cols", vec![uniform(&mut rng, r, c, -1.0, 1.0), uniform(&mut rng, r, k, -1.0, 1.0)], |g, x| {
        let y = g.concat_cols(&[x[1], x[0]])?;
        g.mul(y, y)
    });
    case("slice_rows", vec![uniform(&mut rng, r + 2, c, -1.0, 1.0)], |g, x| {
        let a = g.slice_rows(x[0], 1, 2)?;
        g.mul(a, a)
    });
    case("slice_cols", vec![uniform(&mut rng, r, c + 2, -1.0, 1.0)], |g, x| {
        let a = g.slice_cols(x[0], 1, 2)?;
        g.mul(a, a)
    });
    case("pad_rows", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| {
        let rows = g.shape(x[0]).0;
        let a = g.pad_rows(x[0], 1, rows + 2)?;
        g.exp(a)
    });
    case("pad_cols", vec![uniform(&mut rng, r, c, -1.0, 1.0)], |g, x| {
        let cols = g.shape(x[0]).1;
        let a = g.pad_cols(x[0], 2, cols + 3)?;
        g.exp(a)
    });
    case("embedding", vec![uniform(&mut rng, 4, c, -1.0, 1.0)], |g, x| {
        let a = g.embedding(x[0], &[2, 0, 2, 3])?;
        g.mul(a, a)
    });
    case("scatter_rows", vec![uniform(&mut rng, 3, c, -1.0, 1.0)], |g, x| {
        let a = g.scatter_rows(x[0], &[1, 4, 1], 5)?;
        g.mul(a, a)
    });
    case("index_select", vec![uniform(&mut rng, r, 5, -1.0, 1.0)], |g, x| {
        let a = g.index_select(x[0], &[4, 1, 1])?;
        g.mul(a, a)
    });
    case("scatter_cols", vec![uniform(&mut rng, r, 3, -1.0, 1.0)], |g, x| {
        let a = g.scatter_cols(x[0], &[0, 3, 0], 4)?;
        g.mul(a, a)
    });
    case("cross_entropy", vec![uniform(&mut rng, 3, c + 2, -2.0, 2.0)], |g, x| {
        let cols = g.shape(x[0]).1;
        let ce = g.cross_entropy(x[0], &[0, cols - 1, 1])?;
        Ok(ce)
    });
    cases
}

fn projection(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Tensor {
    uniform(rng, shape.0, shape.1, -1.0, 1.0)
}

/// Loss `sum(w ⊙ op(inputs))` with a fixed random projection `w`.
fn projected_loss(case: &OpCase, inputs: &[Tensor], w: &Tensor, graph: &mut Graph, params: bool) -> Result<(NodeId, Vec<NodeId>)> {
    let ids: Vec<NodeId> =
        inputs.iter().map(|t| if params { graph.param(t.clone()) } else { graph.constant(t.clone()) }).collect();
    let y = case.build(graph, &ids)?;
    let wn = graph.constant(w.clone());
    let p = graph.mul(y, wn)?;
    Ok((graph.sum(p)?, ids))
}

fn output_shape(case: &OpCase) -> Result<(usize, usize)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = case.build(&mut g, &ids)?;
    Ok(g.shape(y))
}

fn flat(inputs: &[Tensor]) -> Vec<f64> {
    inputs.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflat(like: &[Tensor], x: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.rows(), t.cols(), x[off..off + n].to_vec());
            off += n;
            out
        })
        .collect()
}

fn analytic_gradient(case: &OpCase, inputs: &[Tensor], w: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (loss, ids) = projected_loss(case, inputs, w, &mut g, true)?;
    let grads = g.grad(loss, &ids, GradMode::Detached)?;
    Ok(grads.iter().flat_map(|&n| g.value(n).data().to_vec()).collect())
}

/// Relative error of the analytic first derivative against central differences.
pub fn check_first_order(case: &OpCase, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = projection(&mut rng, output_shape(case)?);
    let analytic = analytic_gradient(case, &case.inputs, &w)?;
    let x0 = flat(&case.inputs);
    let numeric = central_difference(
        |x| {
            let mut g = Graph::new();
            let (loss, _) = projected_loss(case, &unflat(&case.inputs, x), &w, &mut g, false)
                .expect("forward evaluation failed during finite differences");
            g.value(loss).item()
        },
        &x0,
        eps,
    );
    Ok(relative_error(&analytic, &numeric))
}

/// Relative error of the Hessian-vector product obtained by differentiating the
/// recorded gradient, against central differences of the first derivative.
pub fn check_second_order(case: &OpCase, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let w = projection(&mut rng, output_shape(case)?);
    let x0 = flat(&case.inputs);
    let v: Vec<f64> = (0..x0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let (loss, ids) = projected_loss(case, &case.inputs, &w, &mut g, true)?;
    let grads = g.grad(loss, &ids, GradMode::CreateGraph)?;
    let vt = unflat(&case.inputs, &v);
    let mut dot = None;
    for (gn, vtensor) in grads.iter().zip(&vt) {
        let vn = g.constant(vtensor.clone());
        let p = g.mul(*gn, vn)?;
        let s = g.sum(p)?;
        dot = Some(match dot {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let hv_nodes = g.grad(dot.expect("at least one input"), &ids, GradMode::Detached)?;
    let analytic: Vec<f64> = hv_nodes.iter().flat_map(|&n| g.value(n).data().to_vec()).collect();

    let shifted = |sign: f64| -> Result<Vec<f64>> {
        let x: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + sign * eps * b).collect();
        analytic_gradient(case, &unflat(&case.inputs, &x), &w)
    };
    let hi = shifted(1.0)?;
    let lo = shifted(-1.0)?;
    let numeric: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    Ok(relative_error(&analytic, &numeric))
}
