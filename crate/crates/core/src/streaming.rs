//! Simulated battery drain under continuous inference over a validation set.
//!
//! Each epoch runs the model once over every validation sample. Energy is
//! affine in executed multiply-accumulates:
//! `joules = executed_macs · joules_per_mac + N · per_inference_overhead`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{energy_report_dataset, SkipRule};
use crate::error::{Error, Result};
use crate::model::Model;

/// Joules in one mAh at one mV.
const JOULES_PER_MAH_MV: f64 = 3.6e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryModel {
    pub capacity_mah: f64,
    pub nominal_voltage_mv: f64,
    /// Calibration knob; no hardware value is implied.
    pub joules_per_mac: f64,
    pub per_inference_overhead_joules: f64,
}

impl Default for BatteryModel {
    fn default() -> Self {
        Self {
            capacity_mah: 4600.0,
            nominal_voltage_mv: 4200.0,
            joules_per_mac: 1.2e-5,
            per_inference_overhead_joules: 0.0,
        }
    }
}

impl BatteryModel {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.capacity_mah) || !positive(self.nominal_voltage_mv) {
            return Err(Error::InvalidArgument("battery capacity and voltage must be positive".into()));
        }
        if !non_negative(self.joules_per_mac) || !non_negative(self.per_inference_overhead_joules) {
            return Err(Error::InvalidArgument("energy costs must be non-negative".into()));
        }
        Ok(())
    }

    pub fn capacity_joules(&self) -> f64 {
        self.capacity_mah * self.nominal_voltage_mv * JOULES_PER_MAH_MV
    }

    pub fn joules(&self, executed_macs: u64, inferences: usize) -> f64 {
        executed_macs as f64 * self.joules_per_mac + inferences as f64 * self.per_inference_overhead_joules
    }

    /// Battery percentage consumed by the given work.
    pub fn percent_drop(&self, executed_macs: u64, inferences: usize) -> f64 {
        self.joules(executed_macs, inferences) / self.capacity_joules() * 100.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamingConfig {
    pub epochs: usize,
    /// Wall time of one inference, used only for the hourly rate.
    pub seconds_per_inference: f64,
}

impl Default for StreamingConfig {
    fn default() -> Self {
        Self { epochs: 100, seconds_per_inference: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DischargeRow {
    pub epoch: usize,
    pub executed_macs: u64,
    pub joules: f64,
    pub percent_drop: f64,
    pub cumulative_percent: f64,
    /// Percentage points per simulated hour.
    pub discharge_rate_per_hour: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DischargeReport {
    pub rows: Vec<DischargeRow>,
}

impl DischargeReport {
    pub fn cumulative_percent(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_percent)
    }
}

/// Discharge for a fixed per-epoch workload of `executed_macs` over
/// `inferences` samples.
pub fn discharge(
    executed_macs: u64,
    inferences: usize,
    battery: &BatteryModel,
    config: &StreamingConfig,
) -> Result<DischargeReport> {
    battery.validate()?;
    if !(config.seconds_per_inference.is_finite() && config.seconds_per_inference > 0.0) {
        return Err(Error::InvalidArgument("seconds per inference must be positive".into()));
    }
    let hours = inferences as f64 * config.seconds_per_inference / 3600.0;
    let mut cumulative = 0.0;
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let joules = battery.joules(executed_macs, inferences);
        let percent = battery.percent_drop(executed_macs, inferences);
        cumulative += percent;
        if cumulative > 100.0 {
            return Err(Error::BatteryExhausted { epoch, cumulative_percent: cumulative });
        }
        rows.push(DischargeRow {
            epoch,
            executed_macs,
            joules,
            percent_drop: percent,
            cumulative_percent: cumulative,
            discharge_rate_per_hour: if hours > 0.0 { percent / hours } else { 0.0 },
        });
    }
    Ok(DischargeReport { rows })
}

/// Runs the model over `valset` once per epoch under `rule` and converts the
/// executed work into battery drain.
pub fn simulate_streaming(
    model: &Model,
    valset: &Dataset,
    battery: &BatteryModel,
    rule: SkipRule,
    config: &StreamingConfig,
) -> Result<DischargeReport> {
    battery.validate()?;
    let report = energy_report_dataset(model, valset, rule)?;
    discharge(report.total_consumed, valset.len(), battery, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_of_default_battery() {
        let b = BatteryModel::default();
        assert!((b.capacity_joules() - 4600.0 * 4.2 * 3.6).abs() < 1e-9);
    }

    #[test]
    fn free_compute_drains_nothing() {
        let b = BatteryModel { joules_per_mac: 0.0, per_inference_overhead_joules: 0.0, ..Default::default() };
        let r = discharge(1_000_000, 500, &b, &StreamingConfig::default()).unwrap();
        assert_eq!(r.cumulative_percent(), 0.0);
        assert_eq!(r.rows.len(), 100);
    }

    #[test]
    fn exhaustion_reports_epoch() {
        let b = BatteryModel { joules_per_mac: 1.0, ..Default::default() };
        let cap = b.capacity_joules() as u64;
        match discharge(cap / 3, 1, &b, &StreamingConfig { epochs: 10, seconds_per_inference: 1.0 }) {
            Err(Error::BatteryExhausted { epoch, .. }) => assert_eq!(epoch, 4),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_battery() {
        let b = BatteryModel { capacity_mah: 0.0, ..Default::default() };
        assert!(discharge(1, 1, &b, &StreamingConfig::default()).is_err());
        let b = BatteryModel { per_inference_overhead_joules: -1.0, ..Default::default() };
        assert!(b.validate().is_err());
    }

    #[test]
    fn hourly_rate() {
        let b = BatteryModel { joules_per_mac: 1.0, ..Default::default() };
        let cfg = StreamingConfig { epochs: 1, seconds_per_inference: 36.0 };
        let r = discharge(100, 10, &b, &cfg).unwrap();
        // Ten 36 s inferences take 0.1 h.
        assert!((r.rows[0].discharge_rate_per_hour - r.rows[0].percent_drop * 10.0).abs() < 1e-12);
    }
}
