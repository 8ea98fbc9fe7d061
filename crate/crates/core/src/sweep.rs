//! Hyperparameter sweeps over one attack axis.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::energy::{energy_report_dataset, SkipRule};
use crate::error::{Error, Result};
use crate::model::{build_toy_mobile_net, Model};
use crate::objective::{check_fraction, check_sigma};
use crate::trainer::{evaluate, train, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    Lambda,
    PoisonFraction,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::Lambda => "lambda",
            SweepAxis::PoisonFraction => "poison_fraction",
        }
    }

    fn check(self, value: f64) -> Result<()> {
        match self {
            SweepAxis::Sigma => check_sigma(value),
            SweepAxis::Lambda if value.is_finite() && value >= 0.0 => Ok(()),
            SweepAxis::Lambda => Err(Error::InvalidArgument(format!("lambda must be >= 0, got {value}"))),
            SweepAxis::PoisonFraction => check_fraction(value),
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> TrainConfig {
        let mut cfg = *base;
        match self {
            SweepAxis::Sigma => cfg.sponge.sigma = value,
            SweepAxis::Lambda => cfg.sponge.lambda = value,
            SweepAxis::PoisonFraction => cfg.sponge.poison_fraction = value,
        }
        cfg
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sigma" => Ok(SweepAxis::Sigma),
            "lambda" => Ok(SweepAxis::Lambda),
            "poison_fraction" | "poison_frac" | "p" => Ok(SweepAxis::PoisonFraction),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// Architecture and initialization shared by every grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub width_multiplier: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { width_multiplier: 1.0, seed: 0 }
    }
}

impl ModelSpec {
    pub fn build(&self, data: &Dataset) -> Result<Model> {
        build_toy_mobile_net(data.sample_shape(), data.num_classes(), self.width_multiplier, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    /// Training settings; its sponge triple supplies the two fixed axes.
    pub base: TrainConfig,
    pub model: ModelSpec,
    pub rule: SkipRule,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        for &v in &self.grid {
            self.axis.check(v)?;
        }
        self.base.validate()
    }

    /// Grid points in run order: the unattacked baseline first, then the
    /// grid sorted ascending with duplicates removed.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut grid = self.grid.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let mut points = Vec::with_capacity(grid.len() + 1);
        match self.axis {
            SweepAxis::Lambda => {
                if grid.first() != Some(&0.0) {
                    points.push(SweepPoint { axis_value: 0.0, baseline: true });
                }
                points.extend(grid.into_iter().map(|v| SweepPoint { axis_value: v, baseline: v == 0.0 }));
            }
            _ => {
                points.push(SweepPoint { axis_value: 0.0, baseline: true });
                points.extend(grid.into_iter().map(|v| SweepPoint { axis_value: v, baseline: false }));
            }
        }
        points
    }

    /// Training configuration for one point. Baselines train with `λ = 0`.
    pub fn config_for(&self, point: SweepPoint) -> TrainConfig {
        if point.baseline {
            let mut cfg = self.base;
            cfg.sponge.lambda = 0.0;
            cfg
        } else {
            self.axis.apply(&self.base, point.axis_value)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub axis_value: f64,
    /// The unattacked reference run.
    pub baseline: bool,
}

/// One grid point's outcome. Metric fields are empty when the point failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub energy_ratio: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub mean_density: Option<f64>,
    pub task_loss: Option<f64>,
    pub baseline: bool,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rule: SkipRule,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn baseline(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.baseline)
    }

    /// Non-baseline rows (for the λ axis, the `λ = 0` row is included).
    pub fn grid_rows(&self) -> impl Iterator<Item = &SweepRow> {
        let axis = self.axis;
        self.rows.iter().filter(move |r| !r.baseline || axis == SweepAxis::Lambda)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.is_failed()).count()
    }
}

/// Outcome metrics of one trained model.
#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub model: Model,
    pub history: TrainHistory,
    pub energy_ratio: f64,
    pub val_accuracy: f64,
    pub mean_density: f64,
}

/// Trains a fresh model with `config` and evaluates it on `valset`.
pub fn run_point(
    model: &ModelSpec,
    config: &TrainConfig,
    rule: SkipRule,
    trainset: &Dataset,
    valset: &Dataset,
) -> Result<PointOutcome> {
    let init = model.build(trainset)?;
    let (trained, history) = train(init, trainset, valset, config)?;
    let eval = evaluate(&trained, valset, config.sponge.sigma, config.scope)?;
    let energy = energy_report_dataset(&trained, valset, rule)?;
    Ok(PointOutcome {
        model: trained,
        history,
        energy_ratio: energy.energy_ratio,
        val_accuracy: eval.accuracy,
        mean_density: eval.mean_density,
    })
}

/// Trains and evaluates every grid point plus the baseline. Points run in
/// parallel; rows come back in [`SweepSpec::points`] order. A failing point
/// becomes a row with an error message.
pub fn run_sweep(spec: &SweepSpec, trainset: &Dataset, valset: &Dataset) -> Result<SweepReport> {
    spec.validate()?;
    let rows = spec
        .points()
        .into_par_iter()
        .map(|point| {
            let cfg = spec.config_for(point);
            match run_point(&spec.model, &cfg, spec.rule, trainset, valset) {
                Ok(out) => SweepRow {
                    axis_value: point.axis_value,
                    energy_ratio: Some(out.energy_ratio),
                    val_accuracy: Some(out.val_accuracy),
                    mean_density: Some(out.mean_density),
                    task_loss: out.history.last().map(|r| r.task_loss),
                    baseline: point.baseline,
                    error: None,
                },
                Err(e) => SweepRow {
                    axis_value: point.axis_value,
                    energy_ratio: None,
                    val_accuracy: None,
                    mean_density: None,
                    task_loss: None,
                    baseline: point.baseline,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepReport { axis: spec.axis, rule: spec.rule, rows })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(axis: SweepAxis, grid: Vec<f64>) -> SweepSpec {
        SweepSpec {
            axis,
            grid,
            base: TrainConfig::default(),
            model: ModelSpec::default(),
            rule: SkipRule::default(),
        }
    }

    #[test]
    fn lambda_points_include_zero_once() {
        let pts = spec(SweepAxis::Lambda, vec![5.0, 1.0, 0.0, 1.0]).points();
        let values: Vec<f64> = pts.iter().map(|p| p.axis_value).collect();
        assert_eq!(values, vec![0.0, 1.0, 5.0]);
        assert!(pts[0].baseline && !pts[1].baseline);
        let pts = spec(SweepAxis::Lambda, vec![2.0]).points();
        assert_eq!(pts.len(), 2);
        assert!(pts[0].baseline);
    }

    #[test]
    fn sigma_points_lead_with_baseline() {
        let s = spec(SweepAxis::Sigma, vec![1e-1, 1e-6]);
        let pts = s.points();
        assert_eq!(pts.len(), 3);
        assert!(pts[0].baseline);
        assert_eq!(pts[1].axis_value, 1e-6);
        assert_eq!(s.config_for(pts[0]).sponge.lambda, 0.0);
        assert_eq!(s.config_for(pts[2]).sponge.sigma, 1e-1);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(spec(SweepAxis::Lambda, vec![]).validate().is_err());
        assert!(spec(SweepAxis::Sigma, vec![0.0]).validate().is_err());
        assert!(spec(SweepAxis::PoisonFraction, vec![1.2]).validate().is_err());
        assert!(spec(SweepAxis::Lambda, vec![-1.0]).validate().is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]), Some(1.0));
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]), Some(-1.0));
        assert_eq!(spearman(&[1., 2.], &[5., 5.]), None);
        let r = spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("poison-frac".parse::<SweepAxis>().unwrap(), SweepAxis::PoisonFraction);
        assert!("x".parse::<SweepAxis>().is_err());
    }
}
