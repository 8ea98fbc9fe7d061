//! Sponge poisoning training loop.
//!
//! Samples in a fixed poisoned subset update the weights with
//! `w ← w − α(∇L − λ∇E)`; every other sample uses plain SGD, `w ← w − α∇L`.
//! Each epoch's shuffled order is cut into batches that are either entirely
//! poisoned or entirely clean, so every batch takes exactly one branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{layer_of, GradientMap, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ActivationTrace, Model};
use crate::objective::{self, check_fraction, EnergyNormalization, ObjectiveScope, SpongeParams};
use crate::tensor::Tensor;

/// Forward passes during evaluation run in chunks of this many samples.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives the poison subset and the per-epoch shuffles.
    pub seed: u64,
    pub sponge: SpongeParams,
    pub scope: ObjectiveScope,
    pub normalization: EnergyNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            epochs: 15,
            batch_size: 32,
            seed: 0,
            sponge: SpongeParams::default(),
            scope: ObjectiveScope::default(),
            normalization: EnergyNormalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        self.sponge.validate()
    }
}

/// Which training samples belong to the attacker-controlled subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoisonMask {
    bits: Vec<bool>,
}

impl PoisonMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.bits.get(index).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Stream reserved for the poison subset; epoch shuffles use streams `1..`.
const MASK_STREAM: u64 = u64::MAX;

/// Marks `round(fraction · size)` samples, chosen uniformly without replacement.
pub fn partition_poison(dataset_size: usize, poison_fraction: f64, seed: u64) -> Result<PoisonMask> {
    check_fraction(poison_fraction)?;
    let count = ((poison_fraction * dataset_size as f64).round() as usize).min(dataset_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    let mut bits = vec![false; dataset_size];
    for i in rand::seq::index::sample(&mut rng, dataset_size, count) {
        bits[i] = true;
    }
    Ok(PoisonMask { bits })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub poisoned: bool,
}

/// Batch order for one epoch.
///
/// Without a mask the shuffled order is chunked directly. With one, the
/// shuffled order is split into poisoned and clean streams, each chunked,
/// and the resulting batches are shuffled together.
pub fn epoch_batches(n: usize, mask: Option<&PoisonMask>, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let chunk = |ids: &[usize], poisoned: bool| -> Vec<Batch> {
        ids.chunks(batch_size)
            .map(|c| Batch { indices: c.to_vec(), poisoned })
            .collect()
    };
    match mask {
        None => chunk(&order, false),
        Some(mask) => {
            let (poisoned, clean): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&i| mask.contains(i));
            let mut batches = chunk(&poisoned, true);
            batches.extend(chunk(&clean, false));
            batches.shuffle(&mut rng);
            batches
        }
    }
}

/// Gradients of one batch, kept separate so the update rule is auditable.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub task_loss: f64,
    pub task: GradientMap,
    /// Batch-averaged energy objective and its gradient, for poisoned batches.
    pub energy: Option<(f64, GradientMap)>,
}

/// Mean cross-entropy of the batch and its gradient.
pub fn task_gradients(model: &Model, images: &Tensor, labels: &[usize]) -> Result<(f64, GradientMap)> {
    let mut graph = Graph::new();
    let (logits, _) = model.forward_graph(&mut graph, images)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    let grads = graph.backward(loss)?;
    grads.ensure_finite()?;
    Ok((graph.value(loss).data()[0], grads))
}

/// Task gradients plus the gradient of the normalized energy objective from
/// the same forward pass.
pub fn sponge_gradients(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    sigma: f64,
    scope: ObjectiveScope,
    normalization: EnergyNormalization,
) -> Result<StepGradients> {
    let mut graph = Graph::new();
    let (logits, outputs) = model.forward_graph(&mut graph, images)?;
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    let recorded: Vec<_> = outputs
        .iter()
        .filter(|(kind, _)| scope.includes(*kind))
        .map(|&(_, id)| id)
        .collect();
    let energy = objective::training_objective_node(&mut graph, &recorded, sigma, normalization)?;
    let task = graph.backward(loss)?;
    task.ensure_finite()?;
    let energy_grads = graph.backward(energy)?;
    energy_grads.ensure_finite()?;
    Ok(StepGradients {
        task_loss: graph.value(loss).data()[0],
        task,
        energy: Some((graph.value(energy).data()[0], energy_grads)),
    })
}

/// `w ← w − α(∇L − λ∇E)`, or `w ← w − α∇L` when there is no energy term.
pub fn apply_step(model: &mut Model, grads: &StepGradients, alpha: f64, lambda: f64) -> Result<()> {
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let Some(task) = grads.task.get(&name) else { continue };
        let step = match &grads.energy {
            Some((_, energy)) if lambda != 0.0 => match energy.get(&name) {
                Some(ge) => task.zip_map(ge, |gl, ge| gl - lambda * ge)?,
                None => task.clone(),
            },
            _ => task.clone(),
        };
        let updated = model.param(&name).unwrap().zip_map(&step, |w, s| w - alpha * s)?;
        let updated = updated.ensure_finite("sgd step").map_err(|_| Error::NonFiniteGradient {
            param: name.clone(),
            layer: layer_of(&name),
        })?;
        model.set_param(&name, updated)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub energy: Option<f64>,
}

/// One update on a poisoned batch.
pub fn sponge_update(model: &mut Model, images: &Tensor, labels: &[usize], config: &TrainConfig) -> Result<StepStats> {
    let s = &config.sponge;
    s.validate()?;
    if s.lambda == 0.0 {
        return clean_update(model, images, labels, config);
    }
    let grads = sponge_gradients(model, images, labels, s.sigma, config.scope, config.normalization)?;
    apply_step(model, &grads, config.alpha, s.lambda)?;
    Ok(StepStats {
        task_loss: grads.task_loss,
        energy: grads.energy.map(|(e, _)| e),
    })
}

/// One plain SGD update.
pub fn clean_update(model: &mut Model, images: &Tensor, labels: &[usize], config: &TrainConfig) -> Result<StepStats> {
    let (task_loss, task) = task_gradients(model, images, labels)?;
    let grads = StepGradients { task_loss, task, energy: None };
    apply_step(model, &grads, config.alpha, 0.0)?;
    Ok(StepStats { task_loss, energy: None })
}

/// Top-1 accuracy over `valset`.
pub fn validate(model: &Model, valset: &Dataset) -> Result<f64> {
    if valset.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut correct = 0usize;
    for (images, labels) in chunks(valset)? {
        let logits = model.forward(&images)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / valset.len() as f64)
}

pub(crate) fn chunks(ds: &Dataset) -> Result<Vec<(Tensor, Vec<usize>)>> {
    (0..ds.len())
        .step_by(EVAL_CHUNK)
        .map(|start| {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
            ds.batch(&idx)
        })
        .collect()
}

/// Held-out statistics of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Energy objective per sample over the configured scope.
    pub energy_objective: f64,
    /// Element-weighted exact density of the ReLU outputs.
    pub mean_density: f64,
}

pub fn evaluate(model: &Model, valset: &Dataset, sigma: f64, scope: ObjectiveScope) -> Result<Evaluation> {
    if valset.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut energy = 0.0;
    let mut relu = ActivationTrace::default();
    for (images, labels) in chunks(valset)? {
        let (logits, trace) = model.forward_traced(&images)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        energy += objective::energy_objective(&trace.restrict(scope), sigma)?;
        relu = relu.concat(trace.restrict(ObjectiveScope::PostRelu));
    }
    let n = valset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        energy_objective: energy / n,
        mean_density: objective::mean_density(&relu),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub task_loss: f64,
    pub energy_objective: f64,
    pub val_accuracy: f64,
    pub mean_density: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Runs the full poisoning schedule and returns the final weights.
///
/// When the energy term is inactive (`λ = 0` or no poisoned samples) no
/// mask is used and the run is plain SGD over the shuffled order.
pub fn train(mut model: Model, trainset: &Dataset, valset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mask = if config.sponge.is_active() {
        Some(partition_poison(trainset.len(), config.sponge.poison_fraction, config.seed)?).filter(|m| m.count() > 0)
    } else {
        None
    };
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for batch in epoch_batches(trainset.len(), mask.as_ref(), config.batch_size, config.seed, epoch) {
            let (images, labels) = trainset.batch(&batch.indices)?;
            let stats = if batch.poisoned {
                sponge_update(&mut model, &images, &labels, config)?
            } else {
                clean_update(&mut model, &images, &labels, config)?
            };
            loss_sum += stats.task_loss * batch.indices.len() as f64;
        }
        let eval = evaluate(&model, valset, config.sponge.sigma, config.scope)?;
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            task_loss: loss_sum / trainset.len() as f64,
            energy_objective: eval.energy_objective,
            val_accuracy: eval.accuracy,
            mean_density: eval.mean_density,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        assert_eq!(partition_poison(40, 0.0, 1).unwrap().count(), 0);
        assert_eq!(partition_poison(40, 1.0, 1).unwrap().count(), 40);
        assert!(partition_poison(40, 1.1, 1).is_err());
    }

    #[test]
    fn mask_is_reproducible() {
        let a = partition_poison(1000, 0.25, 9).unwrap();
        let b = partition_poison(1000, 0.25, 9).unwrap();
        assert_eq!(a.count(), 250);
        assert_eq!(a, b);
        assert_ne!(a, partition_poison(1000, 0.25, 10).unwrap());
    }

    #[test]
    fn batches_are_homogeneous_and_cover_everything() {
        let mask = partition_poison(103, 0.3, 4).unwrap();
        let batches = epoch_batches(103, Some(&mask), 8, 4, 2);
        let mut seen = vec![0; 103];
        for b in &batches {
            assert!(b.indices.len() <= 8);
            for &i in &b.indices {
                assert_eq!(mask.contains(i), b.poisoned);
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_ne!(epoch_batches(103, None, 8, 4, 0), epoch_batches(103, None, 8, 4, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
