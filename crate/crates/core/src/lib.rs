//! Sponge poisoning at desk scale.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`], [`ops`], [`autodiff`]: dense `f64` tensors, kernels and a
//!   reverse-mode graph.
//! - [`model`], [`checkpoint`]: compact depthwise-separable networks with
//!   activation tracing and a binary checkpoint format.
//! - [`objective`]: the smooth activation-count surrogate and exact densities.
//! - [`trainer`]: the poisoned SGD loop.
//! - [`energy`]: zero-skipping MAC accounting and the energy ratio.
//! - [`data`], [`sweep`], [`streaming`], [`report`], [`config`]: experiment
//!   harness behind the `sponge` binary.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod model;
pub mod objective;
pub mod ops;
pub mod report;
pub mod streaming;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use autodiff::{GradientMap, Graph, NodeId};
pub use data::{Dataset, Split};
pub use energy::{EnergyReport, LayerEnergy, SkipRule};
pub use error::{Error, Result};
pub use model::{build_toy_mobile_net, ActivationTrace, LayerKind, LayerSpec, Model};
pub use objective::{ObjectiveScope, SpongeParams};
pub use streaming::{BatteryModel, DischargeReport, StreamingConfig};
pub use sweep::{SweepAxis, SweepReport, SweepSpec};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainHistory};
