//! Binarization of probability maps and column-wise band geometry.
//!
//! A band mask is measured one column at a time: the uppermost and
//! lowermost foreground rows bound the band, and the thickness is the
//! inclusive row count between them. Interior gaps are bridged.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::error::{CimtError, Result};
use crate::stats;

/// Threshold used when no calibrated value is supplied.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel foreground probability for one image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    image_id: String,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    /// Builds a map, rejecting bad dimensions and any value that is not a
    /// finite probability. Errors name the offending pixel.
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if width == 0 || height == 0 {
            return Err(CimtError::invalid_input(
                &image_id,
                format!("dimensions must be positive, got {width}x{height}"),
            ));
        }
        if values.len() != width * height {
            return Err(CimtError::invalid_input(
                &image_id,
                format!(
                    "expected {} values for {width}x{height}, got {}",
                    width * height,
                    values.len()
                ),
            ));
        }
        if let Some(idx) = values
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(CimtError::invalid_input(
                &image_id,
                format!(
                    "pixel ({}, {}) holds {} which is not a probability in [0, 1]",
                    idx % width,
                    idx / width,
                    values[idx]
                ),
            ));
        }
        Ok(Self {
            image_id,
            width,
            height,
            values,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Row-major foreground mask. `threshold_used` is `None` for masks that
/// were rasterized from contours rather than thresholded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    image_id: String,
    width: usize,
    height: usize,
    bits: Vec<bool>,
    threshold_used: Option<ThresholdBits>,
}

// Stored as raw bits so the mask stays `Eq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ThresholdBits(u64);

impl BinaryMask {
    pub fn new(
        image_id: impl Into<String>,
        width: usize,
        height: usize,
        bits: Vec<bool>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if bits.len() != width * height {
            return Err(CimtError::invalid_input(
                &image_id,
                format!(
                    "mask has {} bits, expected {}x{}",
                    bits.len(),
                    width,
                    height
                ),
            ));
        }
        Ok(Self {
            image_id,
            width,
            height,
            bits,
            threshold_used: None,
        })
    }

    pub fn empty(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            bits: vec![false; width * height],
            threshold_used: None,
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn threshold_used(&self) -> Option<f64> {
        self.threshold_used.map(|b| f64::from_bits(b.0))
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Checks a binarization threshold lies strictly inside (0, 1).
pub fn validate_threshold(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(CimtError::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {t}"
        )))
    }
}

/// Foreground iff probability is strictly greater than `t`.
pub fn threshold_map(p: &ProbabilityMap, t: f64) -> Result<BinaryMask> {
    validate_threshold(t)?;
    Ok(BinaryMask {
        image_id: p.image_id.clone(),
        width: p.width,
        height: p.height,
        bits: p.values.iter().map(|&v| v > t).collect(),
        threshold_used: Some(ThresholdBits(t.to_bits())),
    })
}

/// Keeps only the largest 8-connected foreground component. Ties go to
/// the component reached first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let (x, y) = ((idx % w) as isize, (idx / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.bits[n] && label[n] == 0 {
                        label[n] = next;
                        queue.push_back(n);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }

    let keep = best.map_or(0, |(l, _)| l);
    BinaryMask {
        image_id: mask.image_id.clone(),
        width: w,
        height: h,
        bits: label.iter().map(|&l| l != 0 && l == keep).collect(),
        threshold_used: mask.threshold_used,
    }
}

/// Uppermost and lowermost foreground row of one column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnSpan {
    pub upper: usize,
    pub lower: usize,
}

impl ColumnSpan {
    /// Inclusive row count.
    pub fn thickness(&self) -> u32 {
        (self.lower - self.upper + 1) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryProfiles {
    height: usize,
    spans: Vec<Option<ColumnSpan>>,
}

impl BoundaryProfiles {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.spans.len()
    }

    pub fn spans(&self) -> &[Option<ColumnSpan>] {
        &self.spans
    }

    pub fn upper(&self, x: usize) -> Option<usize> {
        self.spans[x].map(|s| s.upper)
    }

    pub fn lower(&self, x: usize) -> Option<usize> {
        self.spans[x].map(|s| s.lower)
    }
}

pub fn extract_boundaries(m: &BinaryMask) -> BoundaryProfiles {
    let spans = (0..m.width)
        .map(|x| {
            let mut rows = (0..m.height).filter(|&y| m.get(x, y));
            let upper = rows.next()?;
            let lower = rows.next_back().unwrap_or(upper);
            Some(ColumnSpan { upper, lower })
        })
        .collect();
    BoundaryProfiles {
        height: m.height,
        spans,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThicknessProfile {
    image_id: String,
    per_column_px: Vec<Option<u32>>,
    valid_column_count: usize,
}

impl ThicknessProfile {
    pub fn from_columns(image_id: impl Into<String>, per_column_px: Vec<Option<u32>>) -> Self {
        let valid_column_count = per_column_px.iter().flatten().count();
        Self {
            image_id: image_id.into(),
            per_column_px,
            valid_column_count,
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn per_column_px(&self) -> &[Option<u32>] {
        &self.per_column_px
    }

    pub fn valid_column_count(&self) -> usize {
        self.valid_column_count
    }

    /// Present thicknesses as floats, in column order.
    pub fn valid_values(&self) -> Vec<f64> {
        self.per_column_px
            .iter()
            .flatten()
            .map(|&t| f64::from(t))
            .collect()
    }
}

pub fn thickness_profile(image_id: &str, b: &BoundaryProfiles) -> ThicknessProfile {
    ThicknessProfile::from_columns(
        image_id,
        b.spans.iter().map(|s| s.map(|s| s.thickness())).collect(),
    )
}

/// How column thicknesses are reduced to one per-image value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AggregationPolicy {
    #[default]
    Mean,
    Median,
    /// Drops `floor(fraction * n)` values from each end before averaging.
    TrimmedMean(f64),
}

impl AggregationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationPolicy::TrimmedMean(f) if !(0.0..0.5).contains(&f) => {
                Err(CimtError::InvalidConfig(format!(
                    "trimmed-mean fraction must be in [0, 0.5), got {f}"
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationPolicy::Mean => write!(f, "mean"),
            AggregationPolicy::Median => write!(f, "median"),
            AggregationPolicy::TrimmedMean(frac) => write!(f, "trimmed:{frac}"),
        }
    }
}

impl FromStr for AggregationPolicy {
    type Err = CimtError;

    fn from_str(s: &str) -> Result<Self> {
        let policy = match s.trim() {
            "mean" => AggregationPolicy::Mean,
            "median" => AggregationPolicy::Median,
            other => {
                let frac = other
                    .strip_prefix("trimmed:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| {
                        CimtError::InvalidConfig(format!(
                            "unknown aggregation {other:?}, expected mean|median|trimmed:<f>"
                        ))
                    })?;
                AggregationPolicy::TrimmedMean(frac)
            }
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Reduces arbitrary per-column values under `policy`; `None` when empty.
pub fn aggregate(values: &[f64], policy: AggregationPolicy) -> Result<Option<f64>> {
    policy.validate()?;
    if values.is_empty() {
        return Ok(None);
    }
    let value = match policy {
        AggregationPolicy::Mean => stats::mean(values),
        AggregationPolicy::Median => {
            let sorted = sorted(values);
            let n = sorted.len();
            Some(if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            })
        }
        AggregationPolicy::TrimmedMean(frac) => {
            let sorted = sorted(values);
            let k = (frac * sorted.len() as f64).floor() as usize;
            stats::mean(&sorted[k..sorted.len() - k])
        }
    };
    Ok(value)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn aggregate_cimt_px(tp: &ThicknessProfile, policy: AggregationPolicy) -> Result<Option<f64>> {
    aggregate(&tp.valid_values(), policy)
}
