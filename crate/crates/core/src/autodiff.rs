//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! handed out in evaluation order, so the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::objective;
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    AddBias { x: NodeId, bias: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    DepthwiseConv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Relu(NodeId),
    GlobalAvgPool(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Sum(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    L0Hat { x: NodeId, sigma: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter name. Shapes match the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.grads.insert(name.into(), grad);
    }

    /// Fails on the first parameter whose gradient holds NaN or ±inf.
    pub fn ensure_finite(&self) -> Result<()> {
        for (name, g) in &self.grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                    layer: layer_of(name),
                });
            }
        }
        Ok(())
    }
}

/// Parses the layer index out of `layerNN.*` parameter names.
pub(crate) fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?.split('.').next()?.parse().ok()
}

/// A single-threaded evaluation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Param(name.into()), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_channel_bias(self.value(x), self.value(bias))?;
        Ok(self.push(Op::AddBias { x, bias }, v))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(Op::Conv2d { input, kernel, stride, padding }, v))
    }

    pub fn depthwise_conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = ops::depthwise_conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(Op::DepthwiseConv2d { input, kernel, stride, padding }, v))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        self.push(Op::Relu(x), v)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), v))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum()).ensure_finite("sum")?;
        Ok(self.push(Op::Sum(x), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?.ensure_finite("add")?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?.ensure_finite("mul")?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * factor).ensure_finite("scale")?;
        Ok(self.push(Op::Scale(x, factor), v))
    }

    /// Scalar `Σ φ²/(φ²+σ)` over every entry of `x`.
    pub fn l0_hat(&mut self, x: NodeId, sigma: f64) -> Result<NodeId> {
        let v = objective::l0_hat(self.value(x), sigma)?;
        Ok(self.push(Op::L0Hat { x, sigma }, Tensor::scalar(v)))
    }

    /// Reverse sweep from a scalar `root`, returning gradients for every
    /// parameter the root depends on.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(root_value.shape()));
        let mut out = GradientMap::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match out.grads.get_mut(name) {
                    Some(existing) => *existing = existing.zip_map(&g, |a, b| a + b)?,
                    None => out.insert(name.clone(), g),
                },
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddBias { x, bias } => {
                    let gb = ops::add_channel_bias_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *bias, gb)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Conv2d { input, kernel, stride, padding } => {
                    let (gx, gk) =
                        ops::conv2d_backward(self.value(*input), self.value(*kernel), &g, *stride, *padding)?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *kernel, gk)?;
                }
                Op::DepthwiseConv2d { input, kernel, stride, padding } => {
                    let (gx, gk) = ops::depthwise_conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate(&mut grads, *kernel, gk)?;
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GlobalAvgPool(x) => {
                    let gx = ops::global_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let gl = ops::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    accumulate(&mut grads, *logits, gl)?;
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v)?;
                    let gb = g.zip_map(self.value(*a), |u, v| u * v)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(x, factor) => {
                    let gx = g.map(|v| v * factor);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::L0Hat { x, sigma } => {
                    let up = g.data()[0];
                    let gx = objective::l0_hat_grad(self.value(*x), *sigma)?.map(|v| v * up);
                    accumulate(&mut grads, *x, gx)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.zip_map(&g, |a, b| a + b)?,
        None => g,
    });
    Ok(())
}
