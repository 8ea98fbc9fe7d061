//! Zero-skipping accelerator cost model.
//!
//! Every multiply site of a conv, depthwise conv or dense layer costs one
//! unit unless the skip rule gates it. Padded taps read a zero activation
//! and are gated by the activation rules like any other zero. ReLU and
//! pooling cost nothing. The energy ratio is consumed units over the
//! no-skip worst case.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::objective::nonzero_count;
use crate::ops::conv_output_extent;
use crate::tensor::Tensor;
use crate::trainer::chunks;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipRule {
    #[default]
    SkipOnZeroActivation,
    SkipOnZeroWeight,
    SkipOnEither,
}

impl SkipRule {
    pub fn name(self) -> &'static str {
        match self {
            SkipRule::SkipOnZeroActivation => "skip_on_zero_activation",
            SkipRule::SkipOnZeroWeight => "skip_on_zero_weight",
            SkipRule::SkipOnEither => "skip_on_either",
        }
    }
}

impl fmt::Display for SkipRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SkipRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "skip_on_zero_activation" | "activation" => Ok(SkipRule::SkipOnZeroActivation),
            "skip_on_zero_weight" | "weight" => Ok(SkipRule::SkipOnZeroWeight),
            "skip_on_either" | "either" => Ok(SkipRule::SkipOnEither),
            other => Err(Error::InvalidArgument(format!("unknown skip rule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    #[serde(rename = "k")]
    pub layer: usize,
    #[serde(rename = "worst")]
    pub worst_case_macs: u64,
    #[serde(rename = "skipped")]
    pub skipped_macs: u64,
    /// Exact non-zero fraction of the layer's input activations.
    #[serde(rename = "density")]
    pub activation_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergy>,
    pub total_worst: u64,
    pub total_consumed: u64,
    pub energy_ratio: f64,
}

impl EnergyReport {
    /// Builds totals and the ratio from per-layer counts.
    pub fn from_layers(layers: Vec<LayerEnergy>) -> Result<Self> {
        let total_worst: u64 = layers.iter().map(|l| l.worst_case_macs).sum();
        let skipped: u64 = layers.iter().map(|l| l.skipped_macs).sum();
        if total_worst == 0 {
            return Err(Error::InvalidArgument("report has no multiply-accumulate layers".into()));
        }
        if layers.iter().any(|l| l.skipped_macs > l.worst_case_macs) {
            return Err(Error::InvalidArgument("skipped count exceeds worst case".into()));
        }
        let total_consumed = total_worst - skipped;
        Ok(Self {
            layers,
            total_worst,
            total_consumed,
            energy_ratio: total_consumed as f64 / total_worst as f64,
        })
    }

    pub fn total_skipped(&self) -> u64 {
        self.total_worst - self.total_consumed
    }
}

fn batch_dims(input_shape: &[usize]) -> Result<(usize, &[usize])> {
    match input_shape.split_first() {
        Some((&n, rest)) if n > 0 => Ok((n, rest)),
        _ => Err(Error::shape("energy", format!("expected a batched shape, got {input_shape:?}"))),
    }
}

/// Multiply sites of `layer` for a batched input of `input_shape`.
pub fn worst_case_macs(layer: &LayerSpec, input_shape: &[usize]) -> Result<u64> {
    let (n, sample) = batch_dims(input_shape)?;
    let out = layer.output_shape(sample)?;
    let n = n as u64;
    Ok(match layer {
        LayerSpec::Conv { kernel, .. } => {
            n * (out[0] * out[1] * out[2]) as u64 * (sample[0] * kernel * kernel) as u64
        }
        LayerSpec::DepthwiseConv { kernel, .. } => n * (out[0] * out[1] * out[2]) as u64 * (kernel * kernel) as u64,
        LayerSpec::Dense { units } => n * (sample[0] * units) as u64,
        LayerSpec::Relu | LayerSpec::GlobalAvgPool => 0,
    })
}

fn expect_weights<'a>(weights: Option<&'a Tensor>, shape: &[usize]) -> Result<&'a Tensor> {
    match weights {
        Some(w) if w.shape() == shape => Ok(w),
        Some(w) => Err(Error::shape(
            "skipped_macs",
            format!("weights {:?}, expected {shape:?}", w.shape()),
        )),
        None => Err(Error::shape("skipped_macs", "layer needs weights")),
    }
}

/// Gated multiply sites of `layer` for the given operands.
pub fn skipped_macs(layer: &LayerSpec, input: &Tensor, weights: Option<&Tensor>, rule: SkipRule) -> Result<u64> {
    let (n, sample) = batch_dims(input.shape())?;
    let x = input.data();
    match layer {
        LayerSpec::Relu | LayerSpec::GlobalAvgPool => Ok(0),
        LayerSpec::Dense { units } => {
            let &[k] = sample else {
                return Err(Error::shape("skipped_macs", format!("dense input must be N×K, got {:?}", input.shape())));
            };
            let w = expect_weights(weights, &[k, *units])?;
            // Zero-weight count for each input feature's fan-out row.
            let zero_w: Vec<u64> = w
                .data()
                .chunks_exact(*units)
                .map(|row| row.iter().filter(|&&v| v == 0.0).count() as u64)
                .collect();
            let full = *units as u64;
            let mut skipped = 0;
            for s in 0..n {
                for (i, &zw) in zero_w.iter().enumerate() {
                    skipped += site_cost(rule, x[s * k + i] == 0.0, zw, full);
                }
            }
            Ok(skipped)
        }
        LayerSpec::Conv { out_channels, kernel, stride, padding } => {
            let &[c, h, wd] = sample else {
                return Err(Error::shape("skipped_macs", format!("conv input must be rank 4, got {:?}", input.shape())));
            };
            let w = expect_weights(weights, &[*out_channels, c, *kernel, *kernel])?;
            let kk = kernel * kernel;
            let mut zero_w = vec![0u64; c * kk];
            for f in 0..*out_channels {
                for t in 0..c * kk {
                    if w.data()[f * c * kk + t] == 0.0 {
                        zero_w[t] += 1;
                    }
                }
            }
            let geom = Window::new(h, wd, *kernel, *stride, *padding)?;
            let full = *out_channels as u64;
            let mut skipped = 0;
            for s in 0..n {
                for ch in 0..c {
                    let plane = &x[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
                    geom.for_each_tap(plane, |tap, zero| {
                        skipped += site_cost(rule, zero, zero_w[ch * kk + tap], full);
                    });
                }
            }
            Ok(skipped)
        }
        LayerSpec::DepthwiseConv { kernel, stride, padding } => {
            let &[c, h, wd] = sample else {
                return Err(Error::shape("skipped_macs", format!("depthwise input must be rank 4, got {:?}", input.shape())));
            };
            let w = expect_weights(weights, &[c, *kernel, *kernel])?;
            let kk = kernel * kernel;
            let geom = Window::new(h, wd, *kernel, *stride, *padding)?;
            let mut skipped = 0;
            for s in 0..n {
                for ch in 0..c {
                    let plane = &x[(s * c + ch) * h * wd..(s * c + ch + 1) * h * wd];
                    geom.for_each_tap(plane, |tap, zero| {
                        skipped += site_cost(rule, zero, u64::from(w.data()[ch * kk + tap] == 0.0), 1);
                    });
                }
            }
            Ok(skipped)
        }
    }
}

/// Gated sites among the `fan_out` multiplies sharing one activation read,
/// `zero_weights` of which have a zero weight.
#[inline]
fn site_cost(rule: SkipRule, activation_zero: bool, zero_weights: u64, fan_out: u64) -> u64 {
    match rule {
        SkipRule::SkipOnZeroActivation => if activation_zero { fan_out } else { 0 },
        SkipRule::SkipOnZeroWeight => zero_weights,
        SkipRule::SkipOnEither => if activation_zero { fan_out } else { zero_weights },
    }
}

struct Window {
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        Ok(Self {
            h,
            w,
            kernel,
            stride,
            padding,
            oh: conv_output_extent(h, kernel, stride, padding)?,
            ow: conv_output_extent(w, kernel, stride, padding)?,
        })
    }

    /// Visits every (output site, tap) pair with the tap index and whether the
    /// activation read there is zero (padding included).
    fn for_each_tap(&self, plane: &[f64], mut visit: impl FnMut(usize, bool)) {
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky).checked_sub(self.padding).filter(|&v| v < self.h);
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx).checked_sub(self.padding).filter(|&v| v < self.w);
                        let zero = match (iy, ix) {
                            (Some(y), Some(x)) => plane[y * self.w + x] == 0.0,
                            _ => true,
                        };
                        visit(ky * self.kernel + kx, zero);
                    }
                }
            }
        }
    }
}

/// Per-layer counts for one batch, without totals.
fn layer_counts(model: &Model, batch: &Tensor, rule: SkipRule) -> Result<Vec<(LayerEnergy, usize, usize)>> {
    let (_, trace) = model.forward_traced(batch)?;
    let mut out = Vec::new();
    for (k, layer) in model.layers().iter().enumerate() {
        if !layer.has_macs() {
            continue;
        }
        let input = if k == 0 { batch } else { &trace.entries()[k - 1].activation };
        let worst = worst_case_macs(layer, input.shape())?;
        let skipped = skipped_macs(layer, input, model.param(&crate::model::weight_name(k)), rule)?;
        let nonzero = nonzero_count(input, 0.0);
        out.push((
            LayerEnergy {
                layer: k,
                worst_case_macs: worst,
                skipped_macs: skipped,
                activation_density: nonzero as f64 / input.len() as f64,
            },
            nonzero,
            input.len(),
        ));
    }
    Ok(out)
}

/// Runs one traced forward pass and counts each layer's gated work from its
/// input activations and current weights.
pub fn energy_report(model: &Model, batch: &Tensor, rule: SkipRule) -> Result<EnergyReport> {
    EnergyReport::from_layers(layer_counts(model, batch, rule)?.into_iter().map(|(l, _, _)| l).collect())
}

/// [`energy_report`] over a whole dataset, evaluated in chunks and summed.
pub fn energy_report_dataset(model: &Model, data: &Dataset, rule: SkipRule) -> Result<EnergyReport> {
    let mut acc: Vec<(LayerEnergy, usize, usize)> = Vec::new();
    for (images, _) in chunks(data)? {
        let counts = layer_counts(model, &images, rule)?;
        if acc.is_empty() {
            acc = counts;
            continue;
        }
        for ((a, anz, alen), (b, bnz, blen)) in acc.iter_mut().zip(counts) {
            a.worst_case_macs += b.worst_case_macs;
            a.skipped_macs += b.skipped_macs;
            *anz += bnz;
            *alen += blen;
        }
    }
    let layers = acc
        .into_iter()
        .map(|(mut l, nz, len)| {
            l.activation_density = nz as f64 / len as f64;
            l
        })
        .collect();
    EnergyReport::from_layers(layers)
}

/// `attacked.energy_ratio − clean.energy_ratio`; multiply by 100 for points.
pub fn energy_gap(attacked: &EnergyReport, clean: &EnergyReport) -> Result<f64> {
    let same = attacked.layers.len() == clean.layers.len()
        && attacked
            .layers
            .iter()
            .zip(&clean.layers)
            .all(|(a, c)| a.layer == c.layer && a.worst_case_macs == c.worst_case_macs);
    if !same {
        return Err(Error::shape("energy_gap", "reports describe different architectures"));
    }
    Ok(attacked.energy_ratio - clean.energy_ratio)
}
