//! The differentiable activation-density objective and exact density counts.
//!
//! `l0_hat(φ) = Σ_j φ_j² / (φ_j² + σ)` is a smooth stand-in for the number
//! of non-zero entries of `φ`. Summing it over a forward trace gives the
//! energy objective that the sponge update ascends.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, LayerKind};
use crate::tensor::Tensor;

/// The attack triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpongeParams {
    /// Surrogate smoothness. Smaller is closer to the true count.
    pub sigma: f64,
    /// Weight of the energy term in the update.
    pub lambda: f64,
    /// Fraction of the training set whose updates carry the energy term.
    pub poison_fraction: f64,
}

impl SpongeParams {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        check_fraction(self.poison_fraction)
    }

    /// True when the energy term can influence training at all.
    pub fn is_active(&self) -> bool {
        self.lambda > 0.0 && self.poison_fraction > 0.0
    }
}

impl Default for SpongeParams {
    fn default() -> Self {
        Self {
            sigma: 1e-6,
            lambda: 0.0,
            poison_fraction: 0.25,
        }
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")))
    }
}

pub(crate) fn check_fraction(fraction: f64) -> Result<()> {
    if (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("poison fraction must lie in [0, 1], got {fraction}")))
    }
}

/// Which recorded activations enter the energy objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveScope {
    /// Every layer output, including pre-activation conv/dense outputs and the pool.
    AllLayers,
    /// Only the outputs of ReLU layers.
    #[default]
    PostRelu,
}

impl ObjectiveScope {
    pub fn includes(self, kind: LayerKind) -> bool {
        match self {
            ObjectiveScope::AllLayers => true,
            ObjectiveScope::PostRelu => kind == LayerKind::Relu,
        }
    }
}

impl FromStr for ObjectiveScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "all_layers" | "all" => Ok(ObjectiveScope::AllLayers),
            "post_relu" | "relu" => Ok(ObjectiveScope::PostRelu),
            other => Err(Error::InvalidArgument(format!("unknown objective scope `{other}`"))),
        }
    }
}

/// How per-layer surrogate values combine into the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyNormalization {
    /// `Σ_k l0_hat(φ_k) / batch_size`.
    Sum,
    /// `(1/K) Σ_k l0_hat(φ_k) / |φ_k|`: the mean smoothed density per layer.
    #[default]
    LayerMean,
}

impl FromStr for EnergyNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sum" => Ok(EnergyNormalization::Sum),
            "layer_mean" | "mean" => Ok(EnergyNormalization::LayerMean),
            other => Err(Error::InvalidArgument(format!("unknown energy normalization `{other}`"))),
        }
    }
}

pub fn l0_hat(phi: &Tensor, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(phi
        .data()
        .iter()
        .map(|&v| {
            let sq = v * v;
            sq / (sq + sigma)
        })
        .sum())
}

/// Elementwise derivative `2σφ / (φ² + σ)²`.
pub fn l0_hat_grad(phi: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    phi.map(|v| {
        let denom = v * v + sigma;
        2.0 * sigma * v / (denom * denom)
    })
    .ensure_finite("l0_hat_grad")
}

/// Sum of [`l0_hat`] over every entry of the trace.
pub fn energy_objective(trace: &ActivationTrace, sigma: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("energy objective needs a non-empty trace".into()));
    }
    check_sigma(sigma)?;
    trace
        .entries()
        .iter()
        .map(|e| l0_hat(&e.activation, sigma))
        .sum()
}

/// Graph form of [`energy_objective`] over already-recorded activation nodes.
pub fn energy_objective_node(graph: &mut Graph, activations: &[NodeId], sigma: f64) -> Result<NodeId> {
    let (first, rest) = activations
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("energy objective needs a non-empty trace".into()))?;
    let mut total = graph.l0_hat(*first, sigma)?;
    for &node in rest {
        let term = graph.l0_hat(node, sigma)?;
        total = graph.add(total, term)?;
    }
    Ok(total)
}

/// Training form of the objective over recorded activation nodes of one batch.
pub fn training_objective_node(
    graph: &mut Graph,
    activations: &[NodeId],
    sigma: f64,
    normalization: EnergyNormalization,
) -> Result<NodeId> {
    match normalization {
        EnergyNormalization::Sum => {
            let batch = activations
                .first()
                .map(|&id| graph.value(id).shape()[0])
                .ok_or_else(|| Error::InvalidArgument("energy objective needs a non-empty trace".into()))?;
            let total = energy_objective_node(graph, activations, sigma)?;
            graph.scale(total, 1.0 / batch as f64)
        }
        EnergyNormalization::LayerMean => {
            let k = activations.len() as f64;
            let mut total: Option<NodeId> = None;
            for &node in activations {
                let numel = graph.value(node).len() as f64;
                let term = graph.l0_hat(node, sigma)?;
                let term = graph.scale(term, 1.0 / (k * numel))?;
                total = Some(match total {
                    Some(t) => graph.add(t, term)?,
                    None => term,
                });
            }
            total.ok_or_else(|| Error::InvalidArgument("energy objective needs a non-empty trace".into()))
        }
    }
}

/// Fraction of entries with magnitude strictly above `tolerance`.
pub fn true_density(phi: &Tensor, tolerance: f64) -> f64 {
    nonzero_count(phi, tolerance) as f64 / phi.len() as f64
}

pub(crate) fn nonzero_count(phi: &Tensor, tolerance: f64) -> usize {
    phi.data().iter().filter(|v| v.abs() > tolerance).count()
}

/// Element-weighted mean of the exact per-layer densities, for reports.
///
/// Returns 0 for an empty trace.
pub fn mean_density(trace: &ActivationTrace) -> f64 {
    let (nonzero, total) = trace.entries().iter().fold((0usize, 0usize), |(nz, n), e| {
        (nz + nonzero_count(&e.activation, 0.0), n + e.activation.len())
    });
    if total == 0 {
        0.0
    } else {
        nonzero as f64 / total as f64
    }
}
