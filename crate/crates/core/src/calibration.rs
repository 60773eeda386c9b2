//! Physical units: per-image calibration factors and the correction for
//! measuring on a resized grid.
//!
//! The calibration factor is defined at the original resolution. When the
//! probability map has been resized to `target_height` rows, one working
//! pixel spans `mm_per_pixel_orig * orig_height / target_height` mm
//! vertically. Only the vertical factor enters thickness conversion.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{CimtError, Result};

/// Hard validity band for mm/pixel.
pub const MM_PER_PIXEL_LIMITS: (f64, f64) = (0.001, 1.0);
/// Values outside this band are accepted with a warning.
pub const MM_PER_PIXEL_PLAUSIBLE: (f64, f64) = (0.01, 0.2);

/// Column header of the calibration CSV.
pub const CALIBRATION_HEADER: [&str; 4] = ["image_id", "mm_per_pixel", "orig_width", "orig_height"];

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub image_id: String,
    pub mm_per_pixel_orig: f64,
    pub orig_width: u32,
    pub orig_height: u32,
}

impl CalibrationRecord {
    pub fn new(
        image_id: impl Into<String>,
        mm_per_pixel_orig: f64,
        orig_width: u32,
        orig_height: u32,
    ) -> Result<Self> {
        let record = Self {
            image_id: image_id.into(),
            mm_per_pixel_orig,
            orig_width,
            orig_height,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let mm = self.mm_per_pixel_orig;
        let (lo, hi) = MM_PER_PIXEL_LIMITS;
        if !mm.is_finite() || mm <= lo || mm >= hi {
            return Err(CimtError::invalid_input(
                &self.image_id,
                format!("mm_per_pixel {mm} outside the valid range ({lo}, {hi})"),
            ));
        }
        let (plo, phi) = MM_PER_PIXEL_PLAUSIBLE;
        if mm <= plo || mm >= phi {
            warn!(image_id = %self.image_id, mm_per_pixel = mm, "calibration factor outside the usual ({plo}, {phi}) mm/px band");
        }
        if self.orig_width == 0 || self.orig_height == 0 {
            return Err(CimtError::invalid_input(
                &self.image_id,
                "original dimensions must be positive",
            ));
        }
        Ok(())
    }
}

/// Vertical pixel size on the grid the thickness was measured on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingScale {
    pub target_height: u32,
    pub mm_per_pixel_working: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementResult {
    pub image_id: String,
    pub cimt_px_working: f64,
    pub cimt_um: f64,
    /// `None` for reference measurements taken from contours.
    pub threshold_used: Option<f64>,
    pub scale: WorkingScale,
}

pub fn working_pixel_size(c: &CalibrationRecord, target_height: u32) -> Result<WorkingScale> {
    if target_height == 0 {
        return Err(CimtError::InvalidConfig(
            "target height must be positive".into(),
        ));
    }
    let mm_per_pixel_working = if target_height == c.orig_height {
        c.mm_per_pixel_orig
    } else {
        c.mm_per_pixel_orig * f64::from(c.orig_height) / f64::from(target_height)
    };
    Ok(WorkingScale {
        target_height,
        mm_per_pixel_working,
    })
}

pub fn px_to_um(t_px: f64, s: &WorkingScale) -> Result<f64> {
    if !(t_px >= 0.0) || !t_px.is_finite() {
        return Err(CimtError::InvalidInput {
            image_id: String::new(),
            reason: format!("pixel thickness must be finite and non-negative, got {t_px}"),
        });
    }
    Ok(t_px * s.mm_per_pixel_working * 1000.0)
}

#[derive(Debug, Deserialize, Serialize)]
struct CalibrationRow {
    image_id: String,
    mm_per_pixel: f64,
    orig_width: u32,
    orig_height: u32,
}

/// Parses the calibration CSV. Surrounding whitespace in fields is ignored.
/// `source_name` is used in error messages.
pub fn parse_calibration_table<R: Read>(
    source: R,
    source_name: &str,
) -> Result<Vec<CalibrationRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let parse_err = |line: usize, reason: String| CimtError::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    for column in CALIBRATION_HEADER {
        if !headers.iter().any(|h| h == column) {
            return Err(parse_err(1, format!("missing column {column:?}")));
        }
    }

    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let parsed: CalibrationRow = row
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        match seen.entry(parsed.image_id.clone()) {
            Entry::Occupied(_) => {
                return Err(CimtError::DuplicateId {
                    image_id: parsed.image_id,
                    line,
                })
            }
            Entry::Vacant(v) => {
                v.insert(line);
            }
        }
        let record = CalibrationRecord {
            image_id: parsed.image_id,
            mm_per_pixel_orig: parsed.mm_per_pixel,
            orig_width: parsed.orig_width,
            orig_height: parsed.orig_height,
        };
        record
            .validate()
            .map_err(|e| parse_err(line, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_calibration_table<W: Write>(
    sink: W,
    records: &[CalibrationRecord],
) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    for r in records {
        writer.serialize(CalibrationRow {
            image_id: r.image_id.clone(),
            mm_per_pixel: r.mm_per_pixel_orig,
            orig_width: r.orig_width,
            orig_height: r.orig_height,
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Converts the space-separated CF files that ship with CUBS (a single
/// mm/pixel value per image) into calibration rows. Dimensions come from
/// the caller since CF files do not carry them.
pub fn record_from_cf_text(
    image_id: &str,
    cf_text: &str,
    orig_width: u32,
    orig_height: u32,
) -> Result<CalibrationRecord> {
    let token = cf_text
        .split_whitespace()
        .next()
        .ok_or_else(|| CimtError::invalid_input(image_id, "empty CF file"))?;
    let mm = token.parse::<f64>().map_err(|_| CimtError::Parse {
        source_name: format!("{image_id}_CF.txt"),
        line: 1,
        reason: format!("non-numeric calibration factor {token:?}"),
    })?;
    CalibrationRecord::new(image_id, mm, orig_width, orig_height)
}
