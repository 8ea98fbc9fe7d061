//! C ABI over `sponge-core`.
//!
//! Every function returns a [`SpongeStatus`]. On failure the message is kept
//! per thread and can be read with [`sponge_last_error`]. Handles are opaque
//! and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sponge_core::data::{load_cifar10, load_idx, synth_dataset};
use sponge_core::energy::energy_report_dataset;
use sponge_core::objective::{l0_hat, true_density, EnergyNormalization};
use sponge_core::{
    build_toy_mobile_net, checkpoint, report, trainer, Dataset, Error, Model, ObjectiveScope, SkipRule,
    SpongeParams, Tensor, TrainConfig,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpongeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Io = 6,
    BatteryExhausted = 7,
    Panic = 8,
}

pub const SPONGE_SKIP_ON_ZERO_ACTIVATION: u32 = 0;
pub const SPONGE_SKIP_ON_ZERO_WEIGHT: u32 = 1;
pub const SPONGE_SKIP_ON_EITHER: u32 = 2;

pub const SPONGE_SCOPE_POST_RELU: u32 = 0;
pub const SPONGE_SCOPE_ALL_LAYERS: u32 = 1;

pub const SPONGE_NORM_LAYER_MEAN: u32 = 0;
pub const SPONGE_NORM_SUM: u32 = 1;

/// A trained or freshly initialised network.
pub struct SpongeModel {
    inner: Model,
}

/// Images and labels.
pub struct SpongeDataset {
    inner: Dataset,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SpongeTrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma: f64,
    pub lambda: f64,
    pub poison_fraction: f64,
    /// One of the `SPONGE_SCOPE_*` constants.
    pub scope: u32,
    /// One of the `SPONGE_NORM_*` constants.
    pub normalization: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpongeTrainSummary {
    pub epochs: usize,
    pub task_loss: f64,
    pub val_accuracy: f64,
    pub mean_density: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SpongeEnergySummary {
    pub total_worst_macs: u64,
    pub total_consumed_macs: u64,
    pub energy_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpongeStatus {
    match e {
        Error::Shape { .. } | Error::NonScalarRoot(_) => SpongeStatus::Shape,
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => SpongeStatus::NonFinite,
        Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } => SpongeStatus::InvalidArgument,
        Error::Format { .. } | Error::Csv { .. } | Error::Json(_) => SpongeStatus::Format,
        Error::Io { .. } => SpongeStatus::Io,
        Error::BatteryExhausted { .. } => SpongeStatus::BatteryExhausted,
    }
}

struct Failure(SpongeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SpongeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SpongeStatus::InvalidArgument, msg.into())
}

/// Runs `body`, mapping errors and panics to a status and recording the message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SpongeStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SpongeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SpongeStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(data: *const f64, len: usize) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Err(invalid("buffer is empty"));
    }
    if data.is_null() {
        return Err(null("data"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

fn skip_rule(rule: u32) -> Result<SkipRule, Failure> {
    match rule {
        SPONGE_SKIP_ON_ZERO_ACTIVATION => Ok(SkipRule::SkipOnZeroActivation),
        SPONGE_SKIP_ON_ZERO_WEIGHT => Ok(SkipRule::SkipOnZeroWeight),
        SPONGE_SKIP_ON_EITHER => Ok(SkipRule::SkipOnEither),
        other => Err(invalid(format!("unknown skip rule {other}"))),
    }
}

fn boxed<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sponge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `config` with the library defaults.
#[no_mangle]
pub unsafe extern "C" fn sponge_train_config_default(config: *mut SpongeTrainConfig) -> SpongeStatus {
    guard(|| {
        let d = TrainConfig::default();
        *out(config, "config")? = SpongeTrainConfig {
            alpha: d.alpha,
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed: d.seed,
            sigma: d.sponge.sigma,
            lambda: d.sponge.lambda,
            poison_fraction: d.sponge.poison_fraction,
            scope: SPONGE_SCOPE_POST_RELU,
            normalization: SPONGE_NORM_LAYER_MEAN,
        };
        Ok(())
    })
}

fn train_config(c: &SpongeTrainConfig) -> Result<TrainConfig, Failure> {
    let scope = match c.scope {
        SPONGE_SCOPE_POST_RELU => ObjectiveScope::PostRelu,
        SPONGE_SCOPE_ALL_LAYERS => ObjectiveScope::AllLayers,
        other => return Err(invalid(format!("unknown scope {other}"))),
    };
    let normalization = match c.normalization {
        SPONGE_NORM_LAYER_MEAN => EnergyNormalization::LayerMean,
        SPONGE_NORM_SUM => EnergyNormalization::Sum,
        other => return Err(invalid(format!("unknown normalization {other}"))),
    };
    let cfg = TrainConfig {
        alpha: c.alpha,
        epochs: c.epochs,
        batch_size: c.batch_size,
        seed: c.seed,
        sponge: SpongeParams { sigma: c.sigma, lambda: c.lambda, poison_fraction: c.poison_fraction },
        scope,
        normalization,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Synthetic class-prototype images of shape `channels × height × width`.
#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_synth(
    samples: usize,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    dataset: *mut *mut SpongeDataset,
) -> SpongeStatus {
    guard(|| {
        let slot = out(dataset, "dataset")?;
        let inner = synth_dataset(samples, classes, &[channels, height, width], seed)?;
        *slot = boxed(SpongeDataset { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_load_cifar10(file: *const c_char, dataset: *mut *mut SpongeDataset) -> SpongeStatus {
    guard(|| {
        let slot = out(dataset, "dataset")?;
        let inner = load_cifar10(path(file, "path")?)?;
        *slot = boxed(SpongeDataset { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    dataset: *mut *mut SpongeDataset,
) -> SpongeStatus {
    guard(|| {
        let slot = out(dataset, "dataset")?;
        let inner = load_idx(path(images, "images path")?, path(labels, "labels path")?)?;
        *slot = boxed(SpongeDataset { inner });
        Ok(())
    })
}

/// Splits into the first `n_first` samples and the rest. The source is left untouched.
#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_split(
    dataset: *const SpongeDataset,
    n_first: usize,
    first: *mut *mut SpongeDataset,
    rest: *mut *mut SpongeDataset,
) -> SpongeStatus {
    guard(|| {
        let ds = as_ref(dataset, "dataset")?;
        let (a_slot, b_slot) = (out(first, "first")?, out(rest, "rest")?);
        let (a, b) = ds.inner.split_at(n_first)?;
        *a_slot = boxed(SpongeDataset { inner: a });
        *b_slot = boxed(SpongeDataset { inner: b });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_len(dataset: *const SpongeDataset, len: *mut usize) -> SpongeStatus {
    guard(|| {
        *out(len, "len")? = as_ref(dataset, "dataset")?.inner.len();
        Ok(())
    })
}

/// Grayscales then box-downsamples by `factor` (1 keeps the size), in place.
#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_shrink(dataset: *mut SpongeDataset, grayscale: bool, factor: usize) -> SpongeStatus {
    guard(|| {
        let ds = out(dataset, "dataset")?;
        let mut inner = if grayscale { ds.inner.grayscale() } else { ds.inner.clone() };
        if factor > 1 {
            inner = inner.downsample(factor)?;
        }
        ds.inner = inner;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_dataset_free(dataset: *mut SpongeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// The default depthwise-separable network for `channels × height × width` inputs.
#[no_mangle]
pub unsafe extern "C" fn sponge_model_build(
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    width_multiplier: f64,
    seed: u64,
    model: *mut *mut SpongeModel,
) -> SpongeStatus {
    guard(|| {
        let slot = out(model, "model")?;
        let inner = build_toy_mobile_net(&[channels, height, width], classes, width_multiplier, seed)?;
        *slot = boxed(SpongeModel { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_model_load(file: *const c_char, model: *mut *mut SpongeModel) -> SpongeStatus {
    guard(|| {
        let slot = out(model, "model")?;
        let inner = checkpoint::load(path(file, "path")?)?;
        *slot = boxed(SpongeModel { inner });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_model_save(model: *const SpongeModel, file: *const c_char) -> SpongeStatus {
    guard(|| {
        checkpoint::save(&as_ref(model, "model")?.inner, path(file, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_model_param_count(model: *const SpongeModel, count: *mut usize) -> SpongeStatus {
    guard(|| {
        *out(count, "count")? = as_ref(model, "model")?.inner.param_count();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_model_free(model: *mut SpongeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains `model` in place; on failure the model is unchanged.
/// `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn sponge_train(
    model: *mut SpongeModel,
    trainset: *const SpongeDataset,
    valset: *const SpongeDataset,
    config: *const SpongeTrainConfig,
    summary: *mut SpongeTrainSummary,
) -> SpongeStatus {
    guard(|| {
        let m = out(model, "model")?;
        let (tr, va) = (as_ref(trainset, "trainset")?, as_ref(valset, "valset")?);
        let cfg = train_config(as_ref(config, "config")?)?;
        let (trained, history) = trainer::train(m.inner.clone(), &tr.inner, &va.inner, &cfg)?;
        m.inner = trained;
        if let (Some(s), Some(last)) = (summary.as_mut(), history.last()) {
            *s = SpongeTrainSummary {
                epochs: last.epoch,
                task_loss: last.task_loss,
                val_accuracy: last.val_accuracy,
                mean_density: last.mean_density,
            };
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_validate(model: *const SpongeModel, dataset: *const SpongeDataset, accuracy: *mut f64) -> SpongeStatus {
    guard(|| {
        let slot = out(accuracy, "accuracy")?;
        *slot = trainer::validate(&as_ref(model, "model")?.inner, &as_ref(dataset, "dataset")?.inner)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_energy(
    model: *const SpongeModel,
    dataset: *const SpongeDataset,
    rule: u32,
    summary: *mut SpongeEnergySummary,
) -> SpongeStatus {
    guard(|| {
        let slot = out(summary, "summary")?;
        let r = energy_report_dataset(&as_ref(model, "model")?.inner, &as_ref(dataset, "dataset")?.inner, skip_rule(rule)?)?;
        *slot = SpongeEnergySummary {
            total_worst_macs: r.total_worst,
            total_consumed_macs: r.total_consumed,
            energy_ratio: r.energy_ratio,
        };
        Ok(())
    })
}

/// Per-layer energy report as JSON. Release the string with [`sponge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sponge_energy_json(
    model: *const SpongeModel,
    dataset: *const SpongeDataset,
    rule: u32,
    json: *mut *mut c_char,
) -> SpongeStatus {
    guard(|| {
        let slot = out(json, "json")?;
        let r = energy_report_dataset(&as_ref(model, "model")?.inner, &as_ref(dataset, "dataset")?.inner, skip_rule(rule)?)?;
        let text = report::to_json(&r)?;
        *slot = CString::new(text).map_err(|e| invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sponge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Smoothed non-zero count `Σ x² / (x² + σ)` of a buffer.
#[no_mangle]
pub unsafe extern "C" fn sponge_l0_hat(data: *const f64, len: usize, sigma: f64, value: *mut f64) -> SpongeStatus {
    guard(|| {
        let slot = out(value, "value")?;
        *slot = l0_hat(&Tensor::from_vec(slice(data, len)?.to_vec())?, sigma)?;
        Ok(())
    })
}

/// Fraction of entries with magnitude above `tolerance`.
#[no_mangle]
pub unsafe extern "C" fn sponge_true_density(data: *const f64, len: usize, tolerance: f64, value: *mut f64) -> SpongeStatus {
    guard(|| {
        let slot = out(value, "value")?;
        if !(tolerance >= 0.0) {
            return Err(invalid("tolerance must be >= 0"));
        }
        *slot = true_density(&Tensor::from_vec(slice(data, len)?.to_vec())?, tolerance);
        Ok(())
    })
}
