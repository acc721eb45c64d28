use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Ordered, named segment table shared by every parameter vector of a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        let index = self.segments.len();
        self.segments.push(Segment { name: name.into(), rows, cols, offset: self.len });
        self.len += rows * cols;
        index
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total flat length.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }
}

/// Flat view of all trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    pub fn from_data(layout: Arc<ParamLayout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Shape {
                op: "param_vector",
                detail: format!("{} values for layout of {}", data.len(), layout.len()),
            });
        }
        Ok(Self { layout, data })
    }

    /// Pack per-segment tensors into a flat vector.
    pub fn pack(layout: Arc<ParamLayout>, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != layout.segments().len() {
            return Err(Error::Shape {
                op: "pack",
                detail: format!("{} tensors for {} segments", tensors.len(), layout.segments().len()),
            });
        }
        let mut data = Vec::with_capacity(layout.len());
        for (seg, t) in layout.segments().iter().zip(tensors) {
            if t.shape() != (seg.rows, seg.cols) {
                return Err(Error::Shape {
                    op: "pack",
                    detail: format!("segment {} expects {}x{}, got {:?}", seg.name, seg.rows, seg.cols, t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        Ok(Self { layout, data })
    }

    pub fn unpack(&self) -> Vec<Tensor> {
        (0..self.layout.segments().len()).map(|i| self.segment(i)).collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, index: usize) -> Tensor {
        let s = &self.layout.segments()[index];
        Tensor::new(s.rows, s.cols, self.data[s.offset..s.offset + s.numel()].to_vec())
    }

    pub fn segment_slice_mut(&mut self, index: usize) -> &mut [f64] {
        let s = &self.layout.segments()[index];
        &mut self.data[s.offset..s.offset + s.numel()]
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.layout.index_of(name).map(|i| self.segment(i))
    }

    /// Register every segment as a trainable leaf of `graph`.
    pub fn to_nodes(&self, graph: &mut Graph) -> ParamNodes {
        let nodes = (0..self.layout.segments().len()).map(|i| graph.param(self.segment(i))).collect();
        ParamNodes { layout: self.layout.clone(), nodes }
    }
}

/// A parameter vector living inside a graph, one node per segment.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub layout: Arc<ParamLayout>,
    pub nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub fn node(&self, index: usize) -> NodeId {
        self.nodes[index]
    }

    /// Read the current values back out of the graph.
    pub fn values(&self, graph: &Graph) -> ParamVector {
        let mut data = Vec::with_capacity(self.layout.len());
        for &n in &self.nodes {
            data.extend_from_slice(graph.value(n).data());
        }
        ParamVector { layout: self.layout.clone(), data }
    }
}

/// Differentiable gradient step `theta - alpha * grads`.
///
/// The returned nodes are marked trainable so a subsequent inner step can
/// differentiate with respect to them.
pub fn sgd_step(graph: &mut Graph, theta: &ParamNodes, grads: &[NodeId], alpha: f64) -> Result<ParamNodes> {
    if grads.len() != theta.nodes.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!("{} gradients for {} segments", grads.len(), theta.nodes.len()),
        });
    }
    let mut nodes = Vec::with_capacity(grads.len());
    for (&t, &g) in theta.nodes.iter().zip(grads) {
        if graph.shape(t) != graph.shape(g) {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("{:?} vs {:?}", graph.shape(t), graph.shape(g)),
            });
        }
        let step = graph.scale(g, alpha)?;
        let next = graph.sub(t, step)?;
        graph.mark_trainable(next);
        nodes.push(next);
    }
    Ok(ParamNodes { layout: theta.layout.clone(), nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradMode;
    use proptest::prelude::*;

    fn layout() -> Arc<ParamLayout> {
        let mut l = ParamLayout::new();
        l.push("w", 2, 3);
        l.push("b", 1, 3);
        Arc::new(l)
    }

    #[test]
    fn layout_length_is_sum_of_segments() {
        let l = layout();
        assert_eq!(l.len(), 9);
        assert_eq!(l.segments()[1].offset, 6);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut l = ParamLayout::new();
        l.push("t", 1, 2);
        let theta = ParamVector::from_data(Arc::new(l), vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let nodes = theta.to_nodes(&mut g);
        let grad = g.constant(Tensor::row(&[10.0, 10.0]));
        let next = sgd_step(&mut g, &nodes, &[grad], 0.1).unwrap();
        assert_eq!(next.values(&g).data(), &[0.0, 1.0]);
        let same = sgd_step(&mut g, &nodes, &[grad], 0.0).unwrap();
        assert_eq!(same.values(&g).data(), theta.data());
        let bad = g.constant(Tensor::row(&[1.0]));
        assert!(sgd_step(&mut g, &nodes, &[bad], 0.1).is_err());
    }

    #[test]
    fn adapted_nodes_are_differentiable_targets() {
        let mut l = ParamLayout::new();
        l.push("t", 1, 1);
        let theta = ParamVector::from_data(Arc::new(l), vec![1.0]).unwrap();
        let mut g = Graph::new();
        let p = theta.to_nodes(&mut g);
        let loss = g.mul(p.node(0), p.node(0)).unwrap();
        let grad = g.grad(loss, &p.nodes, GradMode::CreateGraph).unwrap();
        let next = sgd_step(&mut g, &p, &grad, 0.1).unwrap();
        assert!((next.values(&g).data()[0] - 0.8).abs() < 1e-15);
        let loss2 = g.mul(next.node(0), next.node(0)).unwrap();
        assert!(g.grad(loss2, &next.nodes, GradMode::CreateGraph).is_ok());
    }

    proptest! {
        #[test]
        fn pack_unpack_pack_is_identity(data in prop::collection::vec(-1e3f64..1e3, 9)) {
            let v = ParamVector::from_data(layout(), data).unwrap();
            let again = ParamVector::pack(layout(), &v.unpack()).unwrap();
            prop_assert_eq!(v, again);
        }
    }
}
