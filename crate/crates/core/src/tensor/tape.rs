use super::ops::{forward, Primitive};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitive applications in execution order. Inputs always precede
/// outputs, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(None, Vec::new(), value, requires_grad)
    }

    /// Records a non-differentiable leaf, taking ownership of `t`.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let value = Tensor::from_parts(t.shape().to_vec(), t.into_data());
        self.push(None, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Evaluates `prim` on recorded inputs and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = forward(&prim, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Some(prim), inputs.to_vec(), value, requires_grad))
    }

    fn push(&mut self, op: Option<Primitive>, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Conv2d, &[x, kernel])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: f32) -> Result<NodeId> {
        self.apply(Primitive::MulScalar(s), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ReduceMean, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape), &[x])
    }

    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::CosineRows, &[a, b])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SoftmaxRows, &[x])
    }

    pub fn group_max(&mut self, x: NodeId, group_of: Vec<usize>, groups: usize) -> Result<NodeId> {
        self.apply(Primitive::GroupMax { group_of, groups }, &[x])
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::NormalizeRows, &[x])
    }

    pub fn nll_mean(&mut self, p: NodeId, targets: Vec<usize>, ignore: Option<usize>) -> Result<NodeId> {
        self.apply(Primitive::NllMean { targets, ignore }, &[p])
    }

    /// Reverse sweep from a single-element `loss`. Consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let leaves = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match (node.op, node.requires_grad, g) {
                (None, true, Some(g)) => {
                    if g.iter().all(|v| v.is_finite()) {
                        Ok(Some(Tensor::from_parts(node.value.shape().to_vec(), g)))
                    } else {
                        Err(TensorError::NonFinite { op: "backward" })
                    }
                }
                (None, true, None) => Ok(Some(Tensor::zeros(node.value.shape()))),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { leaves })
    }
}

/// Gradients of the loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(id.0).and_then(Option::as_ref)
    }

    /// Adds the gradient for `id` into `target`'s grad slot.
    pub fn write_into(&self, id: NodeId, target: &mut Tensor) -> Result<()> {
        match self.get(id) {
            Some(g) => target.accumulate_grad(g.data()),
            None => Ok(()),
        }
    }
}
