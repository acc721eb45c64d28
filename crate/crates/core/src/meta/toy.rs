use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Task;
use crate::autodiff::{Graph, NodeId, ParamLayout, ParamNodes, ParamVector, Tensor};
use crate::error::Result;

/// Two-parameter quadratic task, `L(t) = 0.5 t A t' + b t'` for support and query.
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub a_support: [[f64; 2]; 2],
    pub b_support: [f64; 2],
    pub a_query: [[f64; 2]; 2],
    pub b_query: [f64; 2],
}

fn quad(g: &mut Graph, theta: NodeId, a: &[[f64; 2]; 2], b: &[f64; 2]) -> Result<NodeId> {
    let a = g.constant(Tensor::from_rows(&[a[0].to_vec(), a[1].to_vec()]));
    let b = g.constant(Tensor::new(2, 1, b.to_vec()));
    let ta = g.matmul(theta, a)?;
    let tt = g.transpose(theta)?;
    let q = g.matmul(ta, tt)?;
    let q = g.scale(q, 0.5)?;
    let lin = g.matmul(theta, b)?;
    g.add(q, lin)
}

fn random_spd(rng: &mut ChaCha8Rng) -> [[f64; 2]; 2] {
    let m: [[f64; 2]; 2] = [[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]];
    let mut a = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] = m[0][i] * m[0][j] + m[1][i] * m[1][j] + if i == j { 0.5 } else { 0.0 };
        }
    }
    a
}

impl QuadraticTask {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_support = random_spd(&mut rng);
        let a_query = random_spd(&mut rng);
        let b_support = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let b_query = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        Self { a_support, b_support, a_query, b_query }
    }

    pub fn layout() -> Arc<ParamLayout> {
        let mut l = ParamLayout::new();
        l.push("theta", 1, 2);
        Arc::new(l)
    }

    pub fn params(values: [f64; 2]) -> ParamVector {
        ParamVector::from_data(Self::layout(), values.to_vec()).expect("two values")
    }

    fn eval(a: &[[f64; 2]; 2], b: &[f64; 2], t: [f64; 2]) -> f64 {
        let at = [a[0][0] * t[0] + a[0][1] * t[1], a[1][0] * t[0] + a[1][1] * t[1]];
        0.5 * (t[0] * at[0] + t[1] * at[1]) + b[0] * t[0] + b[1] * t[1]
    }

    fn grad(a: &[[f64; 2]; 2], b: &[f64; 2], t: [f64; 2]) -> [f64; 2] {
        [a[0][0] * t[0] + a[0][1] * t[1] + b[0], a[1][0] * t[0] + a[1][1] * t[1] + b[1]]
    }

    /// Plain-arithmetic query loss after one inner SGD step.
    pub fn bilevel_loss(&self, t: [f64; 2], alpha: f64) -> f64 {
        let g = Self::grad(&self.a_support, &self.b_support, t);
        let adapted = [t[0] - alpha * g[0], t[1] - alpha * g[1]];
        Self::eval(&self.a_query, &self.b_query, adapted)
    }

    /// Closed-form outer gradient `(I - alpha A_s) grad L_q(t')` for one step.
    pub fn analytic_outer_grad(&self, t: [f64; 2], alpha: f64) -> [f64; 2] {
        let g = Self::grad(&self.a_support, &self.b_support, t);
        let adapted = [t[0] - alpha * g[0], t[1] - alpha * g[1]];
        let gq = Self::grad(&self.a_query, &self.b_query, adapted);
        let a = &self.a_support;
        [
            (1.0 - alpha * a[0][0]) * gq[0] - alpha * a[1][0] * gq[1],
            -alpha * a[0][1] * gq[0] + (1.0 - alpha * a[1][1]) * gq[1],
        ]
    }
}

impl Task for QuadraticTask {
    fn has_support(&self) -> bool {
        true
    }

    fn support_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>> {
        quad(g, theta.node(0), &self.a_support, &self.b_support).map(Some)
    }

    fn query_loss(&self, g: &mut Graph, theta: &ParamNodes) -> Result<Option<NodeId>> {
        quad(g, theta.node(0), &self.a_query, &self.b_query).map(Some)
    }
}
