//! Per-image measurement: probability map to CIMT in micrometres.

use crate::band::{
    aggregate_cimt_px, extract_boundaries, largest_component, thickness_profile, threshold_map,
    AggregationPolicy, BinaryMask, ProbabilityMap, ThicknessProfile, DEFAULT_THRESHOLD,
};
use crate::calibration::{px_to_um, working_pixel_size, CalibrationRecord, MeasurementResult};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureOptions {
    pub threshold: f64,
    pub aggregation: AggregationPolicy,
    /// Keep only the largest connected component before measuring.
    pub largest_component: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            aggregation: AggregationPolicy::Mean,
            largest_component: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub profile: ThicknessProfile,
    /// `None` when no column holds a band.
    pub result: Option<MeasurementResult>,
}

impl Measurement {
    pub fn cimt_um(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.cimt_um)
    }
}

/// Measures a mask whose rows are on the working grid; its height is the
/// resize target used for the pixel-size correction.
pub fn measure_mask(
    mask: &BinaryMask,
    cal: &CalibrationRecord,
    aggregation: AggregationPolicy,
) -> Result<Measurement> {
    let profile = thickness_profile(mask.image_id(), &extract_boundaries(mask));
    let result = match aggregate_cimt_px(&profile, aggregation)? {
        Some(px) => {
            let scale = working_pixel_size(cal, mask.height() as u32)?;
            Some(MeasurementResult {
                image_id: mask.image_id().to_string(),
                cimt_px_working: px,
                cimt_um: px_to_um(px, &scale)?,
                threshold_used: mask.threshold_used(),
                scale,
            })
        }
        None => None,
    };
    Ok(Measurement { profile, result })
}

pub fn binarize(p: &ProbabilityMap, opts: &MeasureOptions) -> Result<BinaryMask> {
    let mask = threshold_map(p, opts.threshold)?;
    Ok(if opts.largest_component {
        largest_component(&mask)
    } else {
        mask
    })
}

pub fn measure(
    p: &ProbabilityMap,
    cal: &CalibrationRecord,
    opts: &MeasureOptions,
) -> Result<Measurement> {
    measure_mask(&binarize(p, opts)?, cal, opts.aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_of_ten_rows_on_half_height_grid() {
        // 4x64 map, rows 20..30 foreground; original image was 128 rows high
        let values = (0..4 * 64)
            .map(|i| {
                if (20..30).contains(&(i / 4)) {
                    0.9
                } else {
                    0.1
                }
            })
            .collect();
        let p = ProbabilityMap::new("img", 4, 64, values).unwrap();
        let cal = CalibrationRecord::new("img", 0.05, 8, 128).unwrap();
        let m = measure(&p, &cal, &MeasureOptions::default()).unwrap();
        let r = m.result.unwrap();
        assert_eq!(r.cimt_px_working, 10.0);
        assert_eq!(r.scale.mm_per_pixel_working, 0.1);
        assert!((r.cimt_um - 1000.0).abs() < 1e-9);
        assert_eq!(r.threshold_used, Some(0.5));
        assert_eq!(m.profile.valid_column_count(), 4);
    }

    #[test]
    fn empty_band_has_no_result() {
        let p = ProbabilityMap::new("img", 3, 3, vec![0.2; 9]).unwrap();
        let cal = CalibrationRecord::new("img", 0.05, 3, 3).unwrap();
        let m = measure(&p, &cal, &MeasureOptions::default()).unwrap();
        assert!(m.result.is_none());
        assert_eq!(m.profile.valid_column_count(), 0);
    }
}
