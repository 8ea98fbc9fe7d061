use std::ffi::{CStr, CString};
use std::ptr;

use sponge_ffi::*;

fn last_error() -> String {
    let p = sponge_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn full_workflow() {
    unsafe {
        let mut all = ptr::null_mut();
        assert_eq!(sponge_dataset_synth(240, 4, 1, 8, 8, 3, &mut all), SpongeStatus::Ok);
        let (mut train, mut val) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(sponge_dataset_split(all, 200, &mut train, &mut val), SpongeStatus::Ok);
        let mut n = 0;
        assert_eq!(sponge_dataset_len(val, &mut n), SpongeStatus::Ok);
        assert_eq!(n, 40);

        let mut model = ptr::null_mut();
        assert_eq!(sponge_model_build(1, 8, 8, 4, 1.0, 0, &mut model), SpongeStatus::Ok);

        let mut cfg = std::mem::zeroed();
        assert_eq!(sponge_train_config_default(&mut cfg), SpongeStatus::Ok);
        cfg.epochs = 2;
        cfg.lambda = 5.0;
        let mut summary = SpongeTrainSummary::default();
        assert_eq!(sponge_train(model, train, val, &cfg, &mut summary), SpongeStatus::Ok);
        assert_eq!(summary.epochs, 2);
        assert!(summary.task_loss.is_finite());

        let mut acc = -1.0;
        assert_eq!(sponge_validate(model, val, &mut acc), SpongeStatus::Ok);
        assert!((acc - summary.val_accuracy).abs() < 1e-12);

        let mut energy = SpongeEnergySummary::default();
        assert_eq!(sponge_energy(model, val, SPONGE_SKIP_ON_ZERO_ACTIVATION, &mut energy), SpongeStatus::Ok);
        assert!(energy.total_consumed_macs <= energy.total_worst_macs);
        assert!((0.0..=1.0).contains(&energy.energy_ratio));

        let mut json = ptr::null_mut();
        assert_eq!(sponge_energy_json(model, val, SPONGE_SKIP_ON_ZERO_ACTIVATION, &mut json), SpongeStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        sponge_string_free(json);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["total_worst"].as_u64(), Some(energy.total_worst_macs));

        let dir = tempfile::tempdir().unwrap();
        let file = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(sponge_model_save(model, file.as_ptr()), SpongeStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(sponge_model_load(file.as_ptr(), &mut reloaded), SpongeStatus::Ok);
        let mut again = SpongeEnergySummary::default();
        assert_eq!(sponge_energy(reloaded, val, SPONGE_SKIP_ON_ZERO_ACTIVATION, &mut again), SpongeStatus::Ok);
        assert_eq!(again.total_consumed_macs, energy.total_consumed_macs);

        sponge_model_free(reloaded);
        sponge_model_free(model);
        for ds in [all, train, val] {
            sponge_dataset_free(ds);
        }
    }
}

#[test]
fn default_model_has_expected_parameter_count() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sponge_model_build(1, 8, 8, 10, 1.0, 0, &mut model), SpongeStatus::Ok);
        let mut count = 0;
        assert_eq!(sponge_model_param_count(model, &mut count), SpongeStatus::Ok);
        assert_eq!(count, 1338);
        sponge_model_free(model);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut n = 0;
        assert_eq!(sponge_dataset_len(ptr::null(), &mut n), SpongeStatus::NullPointer);
        assert!(last_error().contains("dataset"));

        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(sponge_model_load(missing.as_ptr(), &mut model), SpongeStatus::Io);
        assert!(model.is_null());

        let mut v = 0.0;
        assert_eq!(sponge_l0_hat([1.0].as_ptr(), 1, -1.0, &mut v), SpongeStatus::InvalidArgument);
        assert_eq!(sponge_true_density([1.0].as_ptr(), 0, 0.0, &mut v), SpongeStatus::InvalidArgument);

        let mut ds = ptr::null_mut();
        assert_eq!(sponge_dataset_synth(10, 2, 1, 8, 8, 0, &mut ds), SpongeStatus::Ok);
        let mut m = ptr::null_mut();
        assert_eq!(sponge_model_build(1, 8, 8, 2, 1.0, 0, &mut m), SpongeStatus::Ok);
        let mut e = SpongeEnergySummary::default();
        assert_eq!(sponge_energy(m, ds, 99, &mut e), SpongeStatus::InvalidArgument);
        assert!(last_error().contains("99"));

        let mut cfg = std::mem::zeroed();
        sponge_train_config_default(&mut cfg);
        cfg.poison_fraction = 2.0;
        assert_ne!(sponge_train(m, ds, ds, &cfg, ptr::null_mut()), SpongeStatus::Ok);
        sponge_model_free(m);
        sponge_dataset_free(ds);
    }
}

#[test]
fn buffer_helpers() {
    let data = [0.0, 1.0, -1.0, 0.3];
    let mut v = 0.0;
    unsafe {
        assert_eq!(sponge_l0_hat(data.as_ptr(), data.len(), 1e-12, &mut v), SpongeStatus::Ok);
        assert!((v - 3.0).abs() < 1e-9);
        assert_eq!(sponge_true_density(data.as_ptr(), data.len(), 0.5, &mut v), SpongeStatus::Ok);
        assert_eq!(v, 0.5);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sponge.h")).unwrap();
    for name in [
        "sponge_last_error",
        "sponge_dataset_synth",
        "sponge_model_build",
        "sponge_train",
        "sponge_energy_json",
        "sponge_string_free",
        "SPONGE_STATUS_BATTERY_EXHAUSTED",
        "typedef struct SpongeModel SpongeModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
