//! Overlap metrics for masks and agreement statistics for CIMT values.
//!
//! Differences are always `pred - ref`, so a positive bias means the
//! prediction is too thick.

use crate::band::BinaryMask;
use crate::error::{CimtError, Result};
use crate::stats::{self, CompensatedSum};

/// Bland-Altman limits of agreement multiplier.
pub const LOA_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    pub intersection_px: usize,
    pub union_px: usize,
    pub pred_px: usize,
    pub ref_px: usize,
    /// Both masks empty; dice and iou are defined as 1.
    pub both_empty: bool,
}

pub fn overlap(pred: &BinaryMask, reference: &BinaryMask) -> Result<OverlapReport> {
    if pred.width() != reference.width() || pred.height() != reference.height() {
        return Err(CimtError::invalid_input(
            pred.image_id(),
            format!(
                "mask dimensions differ: prediction {}x{}, reference {}x{}",
                pred.width(),
                pred.height(),
                reference.width(),
                reference.height()
            ),
        ));
    }
    let (mut inter, mut pred_px, mut ref_px) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(reference.bits()) {
        pred_px += a as usize;
        ref_px += b as usize;
        inter += (a && b) as usize;
    }
    let union = pred_px + ref_px - inter;
    let both_empty = union == 0;
    let (dice, iou) = if both_empty {
        (1.0, 1.0)
    } else {
        (
            2.0 * inter as f64 / (pred_px + ref_px) as f64,
            inter as f64 / union as f64,
        )
    };
    Ok(OverlapReport {
        image_id: pred.image_id().to_string(),
        dice,
        iou,
        intersection_px: inter,
        union_px: union,
        pred_px,
        ref_px,
        both_empty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PearsonAbsence {
    TooFewPairs,
    ZeroVariance,
}

impl std::fmt::Display for PearsonAbsence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PearsonAbsence::TooFewPairs => write!(f, "fewer than 2 pairs"),
            PearsonAbsence::ZeroVariance => write!(f, "zero variance"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    pub n: usize,
    /// Images dropped because either side had no CIMT.
    pub n_excluded: usize,
    pub mae_um: f64,
    pub rmse_um: f64,
    pub bias_um: f64,
    pub pearson_r: std::result::Result<f64, PearsonAbsence>,
    /// `(mean, diff)` per pair.
    pub bland_altman: Vec<(f64, f64)>,
    pub sd_diff_um: Option<f64>,
    pub loa_low_um: Option<f64>,
    pub loa_high_um: Option<f64>,
}

impl AgreementReport {
    pub fn pearson(&self) -> Option<f64> {
        self.pearson_r.ok()
    }
}

/// Agreement over `(pred_um, ref_um)` pairs.
pub fn agreement(pairs: &[(f64, f64)]) -> Result<AgreementReport> {
    if pairs.is_empty() {
        return Err(CimtError::invalid_input(
            "",
            "agreement needs at least one pair",
        ));
    }
    let n = pairs.len();
    let nf = n as f64;
    let diffs: Vec<f64> = pairs.iter().map(|(p, r)| p - r).collect();
    let bias = stats::sum(diffs.iter().copied()) / nf;
    let mae = stats::sum(diffs.iter().map(|d| d.abs())) / nf;
    let rmse = (stats::sum(diffs.iter().map(|d| d * d)) / nf).sqrt();
    let sd_diff = stats::sample_sd(&diffs);

    Ok(AgreementReport {
        n,
        n_excluded: 0,
        mae_um: mae,
        rmse_um: rmse,
        bias_um: bias,
        pearson_r: pearson(pairs),
        bland_altman: pairs.iter().map(|&(p, r)| ((p + r) / 2.0, p - r)).collect(),
        sd_diff_um: sd_diff,
        loa_low_um: sd_diff.map(|sd| bias - LOA_Z * sd),
        loa_high_um: sd_diff.map(|sd| bias + LOA_Z * sd),
    })
}

/// Agreement over images where both sides exist; the rest are counted in
/// `n_excluded`.
pub fn agreement_mutual(items: &[(Option<f64>, Option<f64>)]) -> Result<AgreementReport> {
    let pairs: Vec<(f64, f64)> = items.iter().filter_map(|&(p, r)| Some((p?, r?))).collect();
    let mut report = agreement(&pairs)?;
    report.n_excluded = items.len() - pairs.len();
    Ok(report)
}

fn pearson(pairs: &[(f64, f64)]) -> std::result::Result<f64, PearsonAbsence> {
    if pairs.len() < 2 {
        return Err(PearsonAbsence::TooFewPairs);
    }
    let nf = pairs.len() as f64;
    let mx = stats::sum(pairs.iter().map(|p| p.0)) / nf;
    let my = stats::sum(pairs.iter().map(|p| p.1)) / nf;
    let (mut sxy, mut sxx, mut syy) = (
        CompensatedSum::new(),
        CompensatedSum::new(),
        CompensatedSum::new(),
    );
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let (sxx, syy) = (sxx.total(), syy.total());
    if sxx == 0.0 || syy == 0.0 {
        return Err(PearsonAbsence::ZeroVariance);
    }
    Ok((sxy.total() / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedSummary {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl SeedSummary {
    /// `"mean $\pm$ sd"` with a fixed number of decimals; sd renders as
    /// `nan` when absent.
    pub fn format(&self, decimals: usize) -> String {
        match self.sd {
            Some(sd) => format!("{:.*} $\\pm$ {:.*}", decimals, self.mean, decimals, sd),
            None => format!("{:.*} $\\pm$ nan", decimals, self.mean),
        }
    }
}

pub fn seed_summary(per_seed: &[f64]) -> Result<SeedSummary> {
    let mean = stats::mean(per_seed)
        .ok_or_else(|| CimtError::invalid_input("", "seed summary needs at least one value"))?;
    Ok(SeedSummary {
        mean,
        sd: stats::sample_sd(per_seed),
    })
}
