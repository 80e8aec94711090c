//! Reverse-mode differentiation over a linear record of forward operations.

use super::ops::{self, FeatureWindow, LayerParams, Padding, Stride};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Tape handles for the kernel and bias leaves of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHandle {
    pub kernels: NodeId,
    pub biases: NodeId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        layer: LayerHandle,
        padding: Padding,
        stride: Stride,
    },
    Relu {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    RoiPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        input: NodeId,
        layer: LayerHandle,
    },
    Reshape {
        input: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward operations so gradients can be replayed backwards.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradientTape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when nothing flowed into it.
    pub fn leaf(&self, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    pub fn layer(&self, handle: LayerHandle) -> LayerParams {
        LayerParams {
            kernels: self.leaf(handle.kernels),
            biases: self.leaf(handle.biases),
        }
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn layer(&mut self, params: &LayerParams, trainable: bool) -> LayerHandle {
        let (k, b) = (params.kernels.clone(), params.biases.clone());
        if trainable {
            LayerHandle {
                kernels: self.variable(k),
                biases: self.variable(b),
            }
        } else {
            LayerHandle {
                kernels: self.constant(k),
                biases: self.constant(b),
            }
        }
    }

    fn layer_params(&self, layer: LayerHandle) -> LayerParams {
        LayerParams {
            kernels: self.nodes[layer.kernels].value.clone(),
            biases: self.nodes[layer.biases].value.clone(),
        }
    }

    pub fn conv2d(&mut self, input: NodeId, layer: LayerHandle, padding: Padding, stride: Stride) -> Result<NodeId> {
        let params = self.layer_params(layer);
        let out = ops::conv2d(&self.nodes[input].value, &params, padding, stride)?;
        let rg = self.needs(input) || self.needs(layer.kernels) || self.needs(layer.biases);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                layer,
                padding,
                stride,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(&self.nodes[input].value);
        let rg = self.needs(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn max_pool(&mut self, input: NodeId, window: (usize, usize), stride: Stride) -> Result<NodeId> {
        let (out, argmax) = ops::max_pool(&self.nodes[input].value, window, stride)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Output shape `(windows, C * grid_h * grid_w)`, ready for a linear layer.
    pub fn roi_pool(&mut self, input: NodeId, windows: &[FeatureWindow], grid: (usize, usize)) -> Result<NodeId> {
        let pooled = ops::roi_pool(&self.nodes[input].value, windows, grid)?;
        let n = windows.len();
        let per = if n == 0 { 0 } else { pooled.output.len() / n };
        let out = pooled.output.reshape(&[n, per])?;
        let rg = self.needs(input);
        Ok(self.push(
            out,
            Op::RoiPool {
                input,
                argmax: pooled.argmax,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: NodeId, layer: LayerHandle) -> Result<NodeId> {
        let params = self.layer_params(layer);
        let out = ops::linear(&self.nodes[input].value, &params)?;
        let rg = self.needs(input) || self.needs(layer.kernels) || self.needs(layer.biases);
        Ok(self.push(out, Op::Linear { input, layer }, rg))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[input].value.clone().reshape(shape)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Propagates the seed gradients back to every node that requires one.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.nodes[*id].value.shape() {
                return Err(Error::Shape(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.nodes[*id].value.shape()
                )));
            }
            accumulate(&mut grads[*id], g.clone())?;
        }

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d {
                    input,
                    layer,
                    padding,
                    stride,
                } => {
                    let params = self.layer_params(*layer);
                    let cg = ops::conv2d_backward_impl(&self.nodes[*input].value, &params, *padding, *stride, &g, self.needs(*input))?;
                    if self.needs(*input) {
                        accumulate(&mut grads[*input], cg.input)?;
                    }
                    if self.needs(layer.kernels) {
                        accumulate(&mut grads[layer.kernels], cg.kernels)?;
                    }
                    if self.needs(layer.biases) {
                        accumulate(&mut grads[layer.biases], cg.biases)?;
                    }
                }
                Op::Relu { input } => {
                    let gi = ops::relu_backward(&self.nodes[*input].value, &g);
                    accumulate(&mut grads[*input], gi)?;
                }
                Op::MaxPool { input, argmax } | Op::RoiPool { input, argmax } => {
                    let gi = ops::scatter_backward(self.nodes[*input].value.shape(), argmax, &g);
                    accumulate(&mut grads[*input], gi)?;
                }
                Op::Linear { input, layer } => {
                    let params = self.layer_params(*layer);
                    let lg = ops::linear_backward(&self.nodes[*input].value, &params, &g)?;
                    if self.needs(*input) {
                        accumulate(&mut grads[*input], lg.input)?;
                    }
                    if self.needs(layer.kernels) {
                        accumulate(&mut grads[layer.kernels], lg.weights)?;
                    }
                    if self.needs(layer.biases) {
                        accumulate(&mut grads[layer.biases], lg.biases)?;
                    }
                }
                Op::Reshape { input } => {
                    let gi = g.reshape(self.nodes[*input].value.shape())?;
                    accumulate(&mut grads[*input], gi)?;
                }
            }
        }

        // Only leaves keep their gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: "backward pass".into(),
                });
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_trainable_leaf_gets_a_gradient_of_its_shape() {
        let mut tape = GradientTape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 5, 5], |i| (i as f64).sin()));
        let conv = LayerParams::new(
            Tensor::from_fn(&[2, 1, 3, 3], |i| 0.1 * i as f64 - 0.4),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let unused = LayerParams::new(Tensor::filled(&[3, 2, 1, 1], 0.5), Tensor::zeros(&[3])).unwrap();
        let l1 = tape.layer(&conv, true);
        let l2 = tape.layer(&unused, true);
        let y = tape.conv2d(x, l1, Padding::uniform(1), Stride::ONE).unwrap();
        let y = tape.relu(y);
        let seed = Tensor::filled(tape.value(y).shape(), 1.0);
        let grads = tape.backward(&[(y, seed)]).unwrap();
        let g1 = grads.layer(l1);
        assert_eq!(g1.kernels.shape(), conv.kernels.shape());
        assert_eq!(g1.biases.shape(), conv.biases.shape());
        let g2 = grads.layer(l2);
        assert_eq!(g2.kernels.shape(), unused.kernels.shape());
        assert!(g2.kernels.data().iter().all(|&v| v == 0.0));
        assert!(grads.get(x).is_none());
    }
}
