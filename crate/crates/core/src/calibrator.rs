//! Test-time calibration of the binarization threshold.
//!
//! The model output is left untouched. A grid of thresholds is evaluated on
//! a validation set and the one minimizing the CIMT error objective is kept.
//! Temperature scaling is provided as an ablation; it never moves a value
//! across 0.5 and therefore cannot change a 0.5-threshold decision.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::band::{AggregationPolicy, ProbabilityMap, DEFAULT_THRESHOLD};
use crate::calibration::CalibrationRecord;
use crate::error::{CimtError, Result};
use crate::pipeline::{measure, MeasureOptions};
use crate::stats;

/// One calibration image with its reference CIMT.
#[derive(Debug, Clone)]
pub struct ValidationImage {
    pub prob: ProbabilityMap,
    pub calibration: CalibrationRecord,
    pub reference_um: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    MaeUm,
    RmseUm,
    AbsBiasUm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::MaeUm => "mae_um",
            Objective::RmseUm => "rmse_um",
            Objective::AbsBiasUm => "abs_bias_um",
        })
    }
}

impl FromStr for Objective {
    type Err = CimtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae_um" | "mae" => Ok(Objective::MaeUm),
            "rmse_um" | "rmse" => Ok(Objective::RmseUm),
            "abs_bias_um" | "abs_bias" => Ok(Objective::AbsBiasUm),
            other => Err(CimtError::InvalidConfig(format!(
                "unknown objective {other:?}, expected mae_um|rmse_um|abs_bias_um"
            ))),
        }
    }
}

/// Thresholds 0.05, 0.10, ..., 0.95.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| f64::from(k) / 20.0).collect()
}

pub fn default_temperature_grid() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 5.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub threshold_grid: Vec<f64>,
    pub temperature_grid: Vec<f64>,
    pub objective: Objective,
    pub aggregation: AggregationPolicy,
    pub largest_component: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            threshold_grid: default_threshold_grid(),
            temperature_grid: default_temperature_grid(),
            objective: Objective::MaeUm,
            aggregation: AggregationPolicy::Mean,
            largest_component: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        check_grid("threshold", &self.threshold_grid, |t| t > 0.0 && t < 1.0)?;
        check_grid("temperature", &self.temperature_grid, |t| {
            t > 0.0 && t.is_finite()
        })?;
        self.aggregation.validate()
    }

    fn measure_options(&self, threshold: f64) -> MeasureOptions {
        MeasureOptions {
            threshold,
            aggregation: self.aggregation,
            largest_component: self.largest_component,
        }
    }
}

fn check_grid(name: &str, grid: &[f64], valid: impl Fn(f64) -> bool) -> Result<()> {
    if grid.is_empty() {
        return Err(CimtError::InvalidConfig(format!("{name} grid is empty")));
    }
    if let Some(&bad) = grid.iter().find(|&&v| !valid(v)) {
        return Err(CimtError::InvalidConfig(format!(
            "{name} grid value {bad} out of range"
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CimtError::InvalidConfig(format!(
            "{name} grid must be strictly increasing"
        )));
    }
    Ok(())
}

/// Parses `start:stop:step` (inclusive stop) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || CimtError::InvalidConfig(format!("cannot parse grid {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let [start, stop, step] =
            [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>().map_err(|_| bad()));
        let (start, stop, step) = (start?, stop?, step?);
        if !(step > 0.0) {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor();
        if !(count >= 0.0) {
            return Err(bad());
        }
        // round to 1e-12 so 0.05 steps land on the decimal grid values
        return Ok((0..=count as usize)
            .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
            .collect());
    }
    spec.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

/// Error statistics of one threshold over the validation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mae_um: f64,
    pub rmse_um: f64,
    pub bias_um: f64,
    /// Images that produced a band at this threshold.
    pub n_valid: usize,
}

impl SweepPoint {
    pub fn objective(&self, objective: Objective) -> f64 {
        match objective {
            Objective::MaeUm => self.mae_um,
            Objective::RmseUm => self.rmse_um,
            Objective::AbsBiasUm => self.bias_um.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub per_point: Vec<SweepPoint>,
    pub objective: Objective,
    pub best_threshold: f64,
    pub best_mae_um: f64,
    pub best_objective: f64,
}

impl SweepResult {
    pub fn point_at(&self, threshold: f64) -> Option<&SweepPoint> {
        self.per_point.iter().find(|p| p.threshold == threshold)
    }
}

/// Predicted CIMT per image at one threshold; `None` where no band survives.
pub fn predictions_at(
    images: &[ValidationImage],
    opts: &MeasureOptions,
) -> Result<Vec<Option<f64>>> {
    images
        .iter()
        .map(|img| Ok(measure(&img.prob, &img.calibration, opts)?.cimt_um()))
        .collect()
}

/// Scores predictions against references. A missing prediction is scored
/// as 0 µm, so its absolute error is the full reference value.
pub fn score_predictions(
    threshold: f64,
    images: &[ValidationImage],
    preds: &[Option<f64>],
) -> SweepPoint {
    let diffs: Vec<f64> = images
        .iter()
        .zip(preds)
        .map(|(img, p)| p.unwrap_or(0.0) - img.reference_um)
        .collect();
    let n = diffs.len() as f64;
    SweepPoint {
        threshold,
        mae_um: stats::sum(diffs.iter().map(|d| d.abs())) / n,
        rmse_um: (stats::sum(diffs.iter().map(|d| d * d)) / n).sqrt(),
        bias_um: stats::sum(diffs.iter().copied()) / n,
        n_valid: preds.iter().flatten().count(),
    }
}

pub fn evaluate_threshold(
    images: &[ValidationImage],
    threshold: f64,
    cfg: &CalibrationConfig,
) -> Result<SweepPoint> {
    let preds = predictions_at(images, &cfg.measure_options(threshold))?;
    Ok(score_predictions(threshold, images, &preds))
}

/// Picks the grid point with the smallest objective. Exact ties go to the
/// threshold nearest 0.5, then to the smaller threshold.
pub fn select_best(points: &[SweepPoint], objective: Objective) -> Option<&SweepPoint> {
    points.iter().min_by(|a, b| {
        a.objective(objective)
            .total_cmp(&b.objective(objective))
            .then_with(|| {
                (a.threshold - DEFAULT_THRESHOLD)
                    .abs()
                    .total_cmp(&(b.threshold - DEFAULT_THRESHOLD).abs())
            })
            .then_with(|| a.threshold.total_cmp(&b.threshold))
    })
}

pub fn sweep_threshold(images: &[ValidationImage], cfg: &CalibrationConfig) -> Result<SweepResult> {
    if images.is_empty() {
        return Err(CimtError::invalid_input("", "calibration set is empty"));
    }
    cfg.validate()?;
    if let Some(img) = images
        .iter()
        .find(|i| !(i.reference_um.is_finite() && i.reference_um >= 0.0))
    {
        return Err(CimtError::invalid_input(
            img.prob.image_id(),
            format!(
                "reference CIMT {} is not a valid thickness",
                img.reference_um
            ),
        ));
    }
    let per_point = cfg
        .threshold_grid
        .par_iter()
        .map(|&t| evaluate_threshold(images, t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = *select_best(&per_point, cfg.objective).expect("grid is non-empty");
    Ok(SweepResult {
        objective: cfg.objective,
        best_threshold: best.threshold,
        best_mae_um: best.mae_um,
        best_objective: best.objective(cfg.objective),
        per_point,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `v -> sigmoid(logit(v) / T)`, with 0 and 1 left in place.
pub fn temperature_scale(p: &ProbabilityMap, temperature: f64) -> Result<ProbabilityMap> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CimtError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(p.clone());
    }
    let half_up = f64::from_bits(DEFAULT_THRESHOLD.to_bits() + 1);
    let half_down = f64::from_bits(DEFAULT_THRESHOLD.to_bits() - 1);
    let mut values = Vec::with_capacity(p.values().len());
    for (idx, &v) in p.values().iter().enumerate() {
        let scaled = if v <= 0.0 || v >= 1.0 || v == 0.5 {
            v
        } else {
            let logit = (v / (1.0 - v)).ln();
            let s = sigmoid(logit / temperature);
            // rounding may not carry a value onto or across 0.5
            if v > 0.5 && s <= 0.5 {
                half_up
            } else if v < 0.5 && s >= 0.5 {
                half_down
            } else {
                s
            }
        };
        if !scaled.is_finite() {
            return Err(CimtError::Numeric {
                image_id: p.image_id().to_string(),
                x: idx % p.width(),
                y: idx / p.width(),
                reason: format!("temperature {temperature} produced {scaled} from {v}"),
            });
        }
        values.push(scaled);
    }
    ProbabilityMap::new(p.image_id(), p.width(), p.height(), values)
}

/// MAE at a fixed threshold after temperature scaling every map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePoint {
    pub temperature: f64,
    pub mae_um: f64,
    pub improvement_um: f64,
}

pub fn temperature_ablation(
    images: &[ValidationImage],
    threshold: f64,
    cfg: &CalibrationConfig,
) -> Result<Vec<TemperaturePoint>> {
    cfg.validate()?;
    let baseline = evaluate_threshold(images, threshold, cfg)?.mae_um;
    cfg.temperature_grid
        .par_iter()
        .map(|&t| {
            let scaled = images
                .iter()
                .map(|img| {
                    Ok(ValidationImage {
                        prob: temperature_scale(&img.prob, t)?,
                        ..img.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mae_um = evaluate_threshold(&scaled, threshold, cfg)?.mae_um;
            Ok(TemperaturePoint {
                temperature: t,
                mae_um,
                improvement_um: baseline - mae_um,
            })
        })
        .collect()
}

/// Baseline vs calibrated threshold on held-out images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationComparison {
    pub baseline_threshold: f64,
    pub baseline_mae_um: f64,
    pub baseline_bias_um: f64,
    pub threshold_best: f64,
    pub threshold_mae_um: f64,
    pub threshold_bias_um: f64,
    /// `baseline - calibrated`; negative when calibration hurts.
    pub threshold_improvement_um: f64,
}

pub fn evaluate_calibrated(
    test_images: &[ValidationImage],
    best_threshold: f64,
    baseline_threshold: f64,
    cfg: &CalibrationConfig,
) -> Result<CalibrationComparison> {
    if test_images.is_empty() {
        return Err(CimtError::invalid_input("", "evaluation set is empty"));
    }
    crate::band::validate_threshold(best_threshold)?;
    crate::band::validate_threshold(baseline_threshold)?;
    let base = evaluate_threshold(test_images, baseline_threshold, cfg)?;
    let cal = evaluate_threshold(test_images, best_threshold, cfg)?;
    Ok(CalibrationComparison {
        baseline_threshold,
        baseline_mae_um: base.mae_um,
        baseline_bias_um: base.bias_um,
        threshold_best: best_threshold,
        threshold_mae_um: cal.mae_um,
        threshold_bias_um: cal.bias_um,
        threshold_improvement_um: base.mae_um - cal.mae_um,
    })
}
