//! Compact convolutional networks with activation recording.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::objective::ObjectiveScope;
use crate::ops;
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    GlobalAvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Dense,
    Relu,
    GlobalAvgPool,
}

/// A parameter tensor a layer owns, with the fan-in used for initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub is_bias: bool,
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer:02}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer:02}.bias")
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv { .. } => LayerKind::Conv,
            LayerSpec::DepthwiseConv { .. } => LayerKind::DepthwiseConv,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::GlobalAvgPool => LayerKind::GlobalAvgPool,
        }
    }

    /// Whether the layer performs multiply-accumulates.
    pub fn has_macs(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::DepthwiseConv { .. } | LayerSpec::Dense { .. }
        )
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Conv { out_channels, kernel, stride, padding }, &[_, h, w]) => {
                if *out_channels == 0 {
                    return Err(Error::InvalidArgument("conv needs at least one output channel".into()));
                }
                Ok(vec![
                    *out_channels,
                    ops::conv_output_extent(h, *kernel, *stride, *padding)?,
                    ops::conv_output_extent(w, *kernel, *stride, *padding)?,
                ])
            }
            (LayerSpec::DepthwiseConv { kernel, stride, padding }, &[c, h, w]) => Ok(vec![
                c,
                ops::conv_output_extent(h, *kernel, *stride, *padding)?,
                ops::conv_output_extent(w, *kernel, *stride, *padding)?,
            ]),
            (LayerSpec::Dense { units }, &[_]) => {
                if *units == 0 {
                    return Err(Error::InvalidArgument("dense needs at least one unit".into()));
                }
                Ok(vec![*units])
            }
            (LayerSpec::Relu, s) => Ok(s.to_vec()),
            (LayerSpec::GlobalAvgPool, &[c, _, _]) => Ok(vec![c]),
            (spec, s) => Err(Error::shape(
                "layer",
                format!("{:?} cannot consume per-sample shape {s:?}", spec.kind()),
            )),
        }
    }

    /// Parameter slots for layer `index` given its per-sample input shape.
    pub fn param_slots(&self, index: usize, input: &[usize]) -> Vec<ParamSlot> {
        let slot = |name: String, shape: Vec<usize>, fan_in: usize, is_bias: bool| ParamSlot {
            name,
            shape,
            fan_in,
            is_bias,
        };
        match (self, input) {
            (LayerSpec::Conv { out_channels, kernel, .. }, &[c, _, _]) => vec![
                slot(weight_name(index), vec![*out_channels, c, *kernel, *kernel], c * kernel * kernel, false),
                slot(bias_name(index), vec![*out_channels], c * kernel * kernel, true),
            ],
            (LayerSpec::DepthwiseConv { kernel, .. }, &[c, _, _]) => vec![
                slot(weight_name(index), vec![c, *kernel, *kernel], kernel * kernel, false),
                slot(bias_name(index), vec![c], kernel * kernel, true),
            ],
            (LayerSpec::Dense { units }, &[k]) => vec![
                slot(weight_name(index), vec![k, *units], k, false),
                slot(bias_name(index), vec![*units], k, true),
            ],
            _ => Vec::new(),
        }
    }
}

/// One recorded layer output.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub layer: usize,
    pub kind: LayerKind,
    pub activation: Tensor,
}

/// Layer outputs captured during one forward pass, in layer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    entries: Vec<TraceEntry>,
}

impl ActivationTrace {
    pub fn from_entries(entries: Vec<TraceEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn restrict(&self, scope: ObjectiveScope) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|e| scope.includes(e.kind))
                .cloned()
                .collect(),
        }
    }

    pub fn concat(mut self, other: ActivationTrace) -> Self {
        self.entries.extend(other.entries);
        self
    }
}

/// A sequential network: layer specs plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

/// Per-sample input shape of every layer, plus the final output shape.
fn layer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input_shape.to_vec()];
    for (k, layer) in layers.iter().enumerate() {
        let next = layer.output_shape(shapes.last().unwrap()).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("model", format!("layer {k}: {detail}")),
            other => other,
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

fn validate_architecture(input_shape: &[usize], num_classes: usize, layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.len() != 3 || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::shape("model", format!("input shape must be C×H×W, got {input_shape:?}")));
    }
    if !layers.iter().any(|l| l.kind() == LayerKind::Relu) {
        return Err(Error::InvalidArgument("model needs at least one ReLU layer".into()));
    }
    let shapes = layer_shapes(input_shape, layers)?;
    if shapes.last().unwrap() != &[num_classes] {
        return Err(Error::shape(
            "model",
            format!("final shape {:?} is not {num_classes} logits", shapes.last().unwrap()),
        ));
    }
    Ok(shapes)
}

impl Model {
    /// Builds a model with He-normal weights (`std = sqrt(2 / fan_in)`) and
    /// zero biases, drawn from a generator seeded with `seed`.
    pub fn new(input_shape: &[usize], num_classes: usize, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = validate_architecture(input_shape, num_classes, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (k, layer) in layers.iter().enumerate() {
            for slot in layer.param_slots(k, &shapes[k]) {
                let t = if slot.is_bias {
                    Tensor::zeros(&slot.shape)
                } else {
                    Tensor::randn(&slot.shape, (2.0 / slot.fan_in as f64).sqrt(), &mut rng)
                };
                params.insert(slot.name, t);
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            params,
            seed,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(
        input_shape: &[usize],
        num_classes: usize,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
        seed: u64,
    ) -> Result<Self> {
        let shapes = validate_architecture(input_shape, num_classes, &layers)?;
        let mut expected = 0;
        for (k, layer) in layers.iter().enumerate() {
            for slot in layer.param_slots(k, &shapes[k]) {
                expected += 1;
                match params.get(&slot.name) {
                    Some(t) if t.shape() == slot.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::shape(
                            "model",
                            format!("{} has shape {:?}, expected {:?}", slot.name, t.shape(), slot.shape),
                        ))
                    }
                    None => return Err(Error::shape("model", format!("missing parameter {}", slot.name))),
                }
            }
        }
        if expected != params.len() {
            return Err(Error::shape("model", "unexpected extra parameters"));
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
            params,
            seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces a parameter with a tensor of the same shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Per-sample input shape of each layer.
    pub fn layer_input_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = layer_shapes(&self.input_shape, &self.layers).expect("validated at construction");
        shapes.pop();
        shapes
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} does not match input N×{:?}", batch.shape(), self.input_shape),
            ));
        }
        Ok(())
    }

    fn weight(&self, k: usize) -> &Tensor {
        &self.params[&weight_name(k)]
    }

    fn bias(&self, k: usize) -> &Tensor {
        &self.params[&bias_name(k)]
    }

    fn apply(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        match &self.layers[k] {
            LayerSpec::Conv { stride, padding, .. } => {
                ops::add_channel_bias(&ops::conv2d(x, self.weight(k), *stride, *padding)?, self.bias(k))
            }
            LayerSpec::DepthwiseConv { stride, padding, .. } => ops::add_channel_bias(
                &ops::depthwise_conv2d(x, self.weight(k), *stride, *padding)?,
                self.bias(k),
            ),
            LayerSpec::Dense { .. } => ops::add_channel_bias(&ops::matmul(x, self.weight(k))?, self.bias(k)),
            LayerSpec::Relu => Ok(ops::relu(x)),
            LayerSpec::GlobalAvgPool => ops::global_avg_pool(x),
        }
    }

    /// Logits for an N×C×H×W batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for k in 0..self.layers.len() {
            x = self.apply(k, &x)?;
        }
        Ok(x)
    }

    /// Logits plus the output of every layer.
    pub fn forward_traced(&self, batch: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        self.check_batch(batch)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            x = self.apply(k, &x)?;
            entries.push(TraceEntry {
                layer: k,
                kind: layer.kind(),
                activation: x.clone(),
            });
        }
        Ok((x, ActivationTrace { entries }))
    }

    /// Records the forward pass on `graph`, registering every parameter as a
    /// named leaf. Returns the logits node and one node per layer output.
    pub fn forward_graph(&self, graph: &mut Graph, batch: &Tensor) -> Result<(NodeId, Vec<(LayerKind, NodeId)>)> {
        self.check_batch(batch)?;
        let mut x = graph.constant(batch.clone());
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let w = graph.param(weight_name(k), self.weight(k).clone());
                    let b = graph.param(bias_name(k), self.bias(k).clone());
                    let y = graph.conv2d(x, w, *stride, *padding)?;
                    graph.add_bias(y, b)?
                }
                LayerSpec::DepthwiseConv { stride, padding, .. } => {
                    let w = graph.param(weight_name(k), self.weight(k).clone());
                    let b = graph.param(bias_name(k), self.bias(k).clone());
                    let y = graph.depthwise_conv2d(x, w, *stride, *padding)?;
                    graph.add_bias(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let w = graph.param(weight_name(k), self.weight(k).clone());
                    let b = graph.param(bias_name(k), self.bias(k).clone());
                    let y = graph.matmul(x, w)?;
                    graph.add_bias(y, b)?
                }
                LayerSpec::Relu => graph.relu(x),
                LayerSpec::GlobalAvgPool => graph.global_avg_pool(x)?,
            };
            outputs.push((layer.kind(), x));
        }
        Ok((x, outputs))
    }

    /// Top-1 predictions; ties go to the lowest class index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(argmax_rows(&logits))
    }
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// The default desk-scale network: a 3×3 stem conv followed by two
/// depthwise-separable blocks, all unpadded, each conv followed by a ReLU,
/// then global average pooling and a dense classifier.
///
/// Channel widths are `8w`, `16w` and `32w` for width multiplier `w`.
pub fn toy_mobile_net_layers(num_classes: usize, width_multiplier: f64) -> Result<Vec<LayerSpec>> {
    if !(width_multiplier.is_finite() && width_multiplier > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "width multiplier must be positive, got {width_multiplier}"
        )));
    }
    let ch = |base: f64| ((base * width_multiplier).round() as usize).max(1);
    let (stem, mid, top) = (ch(8.0), ch(16.0), ch(32.0));
    Ok(vec![
        LayerSpec::Conv { out_channels: stem, kernel: 3, stride: 1, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::DepthwiseConv { kernel: 3, stride: 1, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::Conv { out_channels: mid, kernel: 1, stride: 1, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::DepthwiseConv { kernel: 3, stride: 1, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::Conv { out_channels: top, kernel: 1, stride: 1, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { units: num_classes },
    ])
}

pub fn build_toy_mobile_net(input_shape: &[usize], num_classes: usize, width_multiplier: f64, seed: u64) -> Result<Model> {
    let layers = toy_mobile_net_layers(num_classes, width_multiplier)?;
    Model::new(input_shape, num_classes, layers, seed).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::shape(
            "build_toy_mobile_net",
            format!("input {input_shape:?} too small for the block stack ({detail})"),
        ),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let a = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 7).unwrap();
        let b = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 7).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|((_, x), (_, y))| x.bits_eq(y)));
        let c = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn rejects_small_inputs_and_bad_width() {
        assert!(build_toy_mobile_net(&[1, 6, 6], 10, 1.0, 0).is_err());
        assert!(build_toy_mobile_net(&[1, 8, 8], 10, 0.0, 0).is_err());
        assert!(build_toy_mobile_net(&[1, 7, 7], 10, 1.0, 0).is_ok());
    }

    #[test]
    fn needs_a_relu() {
        let layers = vec![
            LayerSpec::Conv { out_channels: 2, kernel: 1, stride: 1, padding: 0 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { units: 3 },
        ];
        assert!(Model::new(&[1, 2, 2], 3, layers, 0).is_err());
    }

    #[test]
    fn zero_input_yields_bias_logits() {
        let mut m = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 3).unwrap();
        let bias = Tensor::from_vec((0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        m.set_param(&bias_name(11), bias.clone()).unwrap();
        let (logits, trace) = m.forward_traced(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        for row in logits.data().chunks(10) {
            assert_eq!(row, bias.data());
        }
        for e in trace.entries().iter().filter(|e| e.kind == LayerKind::Relu) {
            assert!(e.activation.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn trace_covers_every_layer() {
        let m = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 3).unwrap();
        let (_, trace) = m.forward_traced(&Tensor::ones(&[1, 1, 8, 8])).unwrap();
        assert_eq!(trace.len(), m.layers().len());
        assert_eq!(trace.restrict(ObjectiveScope::PostRelu).len(), 5);
        let shapes = layer_shapes(m.input_shape(), m.layers()).unwrap();
        for (e, s) in trace.entries().iter().zip(&shapes[1..]) {
            assert_eq!(&e.activation.shape()[1..], s.as_slice());
        }
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = build_toy_mobile_net(&[1, 8, 8], 10, 1.0, 3).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 8, 8])).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::new(vec![2, 3], vec![1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
