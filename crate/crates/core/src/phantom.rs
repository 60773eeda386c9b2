//! Synthetic bands with known thickness, used as end-to-end oracles.
//!
//! A phantom's probability at pixel `(x, y)` is
//! `sigmoid((c - li) / s) * sigmoid((li + thick - c) / s) + offset + noise`,
//! clamped to `[0, 1]`, where `c = y + 0.5` is the row centre and `s` the
//! edge softness. With `s = 0` the band is hard: 1 where
//! `li <= c <= li + thick`, else 0, which is the same pixel-centre rule the
//! contour rasterizer uses.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand_core::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::SplitMix64;

use crate::band::ProbabilityMap;
use crate::calibration::{
    px_to_um, working_pixel_size, write_calibration_table, CalibrationRecord,
};
use crate::contours::{write_polyline, ContourPair, Polyline, LI_SUFFIX, MA_SUFFIX};
use crate::error::{CimtError, Result};
use crate::pgm::{write_probability, PROB_SUFFIX};
use crate::stats;

pub const MAX_PROBABILITY_OFFSET: f64 = 0.3;
pub const MIN_THICKNESS_PX: f64 = 2.0;

/// Row-valued function of the column index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Curve {
    Constant(f64),
    Linear {
        start: f64,
        slope: f64,
    },
    Sinusoidal {
        base: f64,
        amplitude: f64,
        period: f64,
        phase: f64,
    },
}

impl Curve {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            Curve::Constant(v) => v,
            Curve::Linear { start, slope } => start + slope * x,
            Curve::Sinusoidal {
                base,
                amplitude,
                period,
                phase,
            } => base + amplitude * (TAU * x / period + phase).sin(),
        }
    }

    fn shifted(self, delta: f64) -> Self {
        match self {
            Curve::Constant(v) => Curve::Constant(v + delta),
            Curve::Linear { start, slope } => Curve::Linear {
                start: start + delta,
                slope,
            },
            Curve::Sinusoidal {
                base,
                amplitude,
                period,
                phase,
            } => Curve::Sinusoidal {
                base: base + delta,
                amplitude,
                period,
                phase,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub li_curve: Curve,
    pub thickness_curve: Curve,
    pub edge_softness: f64,
    pub probability_offset: f64,
    pub mm_per_pixel: f64,
    pub noise_sd: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_id: "clin_0001_L".into(),
            width: 256,
            height: 128,
            li_curve: Curve::Constant(50.0),
            thickness_curve: Curve::Constant(20.0),
            edge_softness: 0.0,
            probability_offset: 0.0,
            mm_per_pixel: 0.05,
            noise_sd: 0.0,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CimtError::InvalidSpec(msg));
        if self.width == 0 || self.height < 4 {
            return bad(format!("image {}x{} too small", self.width, self.height));
        }
        if !(self.edge_softness >= 0.0 && self.edge_softness.is_finite()) {
            return bad(format!("edge softness {} must be >= 0", self.edge_softness));
        }
        if !(self.probability_offset.abs() <= MAX_PROBABILITY_OFFSET) {
            return bad(format!(
                "probability offset {} outside [-0.3, 0.3]",
                self.probability_offset
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise sd {} must be >= 0", self.noise_sd));
        }
        let floor = self.height as f64 - 2.0;
        for x in 0..self.width {
            let (li, th) = self.band_at(x);
            if !(th >= MIN_THICKNESS_PX) {
                return bad(format!(
                    "thickness {th} below {MIN_THICKNESS_PX} px at column {x}"
                ));
            }
            if !(li >= 1.0 && li + th <= floor) {
                return bad(format!(
                    "band [{li}, {}] leaves the image at column {x}",
                    li + th
                ));
            }
        }
        CalibrationRecord::new(
            &self.image_id,
            self.mm_per_pixel,
            self.width as u32,
            self.height as u32,
        )
        .map_err(|e| CimtError::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    /// `(li row, thickness)` at integer column `x`.
    pub fn band_at(&self, x: usize) -> (f64, f64) {
        let xf = x as f64;
        (self.li_curve.at(xf), self.thickness_curve.at(xf))
    }
}

#[derive(Debug, Clone)]
pub struct PhantomBundle {
    pub prob: ProbabilityMap,
    pub contours: ContourPair,
    pub calibration: CalibrationRecord,
    pub analytic_cimt_um: f64,
    pub analytic_profile_px: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomBundle> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let bands: Vec<(f64, f64)> = (0..w)
        .map(|x| {
            let (li, th) = spec.band_at(x);
            (li, li + th)
        })
        .collect();

    let mut rng = SplitMix64::seed_from_u64(spec.rng_seed);
    let noise =
        (spec.noise_sd > 0.0).then(|| Normal::new(0.0, spec.noise_sd).expect("sd validated"));
    let s = spec.edge_softness;
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let c = y as f64 + 0.5;
        for &(top, bottom) in &bands {
            let base = if s == 0.0 {
                if top <= c && c <= bottom {
                    1.0
                } else {
                    0.0
                }
            } else {
                sigmoid((c - top) / s) * sigmoid((bottom - c) / s)
            };
            let jitter = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            values.push((base + spec.probability_offset + jitter).clamp(0.0, 1.0));
        }
    }
    let prob = ProbabilityMap::new(&spec.image_id, w, h, values)?;

    let li = Polyline::canonical((0..w).map(|x| (x as f64, bands[x].0)).collect())
        .map_err(|e| CimtError::InvalidSpec(e.to_string()))?;
    let ma = Polyline::canonical((0..w).map(|x| (x as f64, bands[x].1)).collect())
        .map_err(|e| CimtError::InvalidSpec(e.to_string()))?;
    let contours = ContourPair::new(&spec.image_id, li, ma)?;
    let calibration =
        CalibrationRecord::new(&spec.image_id, spec.mm_per_pixel, w as u32, h as u32)?;

    let analytic_profile_px: Vec<f64> = bands.iter().map(|&(top, bottom)| bottom - top).collect();
    let mean_px = stats::sum(analytic_profile_px.iter().copied()) / w as f64;
    let analytic_cimt_um = px_to_um(mean_px, &working_pixel_size(&calibration, h as u32)?)?;

    Ok(PhantomBundle {
        prob,
        contours,
        calibration,
        analytic_cimt_um,
        analytic_profile_px,
    })
}

/// Image id of the `i`-th phantom in a suite: two sides per synthetic
/// patient, so suites exercise patient-level splitting too.
pub fn suite_image_id(i: usize) -> String {
    format!(
        "clin_{:04}_{}",
        i / 2 + 1,
        if i.is_multiple_of(2) { "L" } else { "R" }
    )
}

/// `n` phantoms that share the base curve families with randomized
/// parameters:
///
/// * LI shifted by a whole number of rows in `[-height/8, height/8]`
/// * thickness changed by a whole number of pixels in `[-2, 6]`
/// * linear slope and sinusoid amplitude scaled by `U[0.5, 1.5]`, sinusoid
///   phase drawn from `U[0, 2pi)`
/// * mm/pixel scaled by `U[0.8, 1.2]`
/// * a fresh noise seed per phantom
///
/// Draws that push the band out of the image are retried (up to 16 times)
/// before falling back to the base geometry. Integer-valued base curves
/// stay integer-valued.
pub fn generate_suite(
    n: usize,
    base: &PhantomSpec,
    variation_seed: u64,
) -> Result<Vec<PhantomBundle>> {
    base.validate()?;
    let mut rng = SplitMix64::seed_from_u64(variation_seed);
    let max_shift = (base.height / 8) as i64;
    let shift = Uniform::new_inclusive(-max_shift, max_shift).expect("valid range");
    let thick = Uniform::new_inclusive(-2i64, 6).expect("valid range");
    let factor = Uniform::new(0.5, 1.5).expect("valid range");
    let phase = Uniform::new(0.0, TAU).expect("valid range");
    let mm_factor = Uniform::new(0.8, 1.2).expect("valid range");

    (0..n)
        .map(|i| {
            let mut chosen = None;
            for _ in 0..16 {
                let li_curve = vary_shape(
                    base.li_curve,
                    factor.sample(&mut rng),
                    phase.sample(&mut rng),
                )
                .shifted(shift.sample(&mut rng) as f64);
                let thickness_curve = base.thickness_curve.shifted(thick.sample(&mut rng) as f64);
                let spec = PhantomSpec {
                    image_id: suite_image_id(i),
                    li_curve,
                    thickness_curve,
                    mm_per_pixel: base.mm_per_pixel * mm_factor.sample(&mut rng),
                    rng_seed: rng.next_u64(),
                    ..base.clone()
                };
                if spec.validate().is_ok() {
                    chosen = Some(spec);
                    break;
                }
            }
            let spec = chosen.unwrap_or_else(|| PhantomSpec {
                image_id: suite_image_id(i),
                ..base.clone()
            });
            generate(&spec)
        })
        .collect()
}

fn vary_shape(curve: Curve, scale: f64, new_phase: f64) -> Curve {
    match curve {
        Curve::Constant(v) => Curve::Constant(v),
        Curve::Linear { start, slope } => Curve::Linear {
            start,
            slope: slope * scale,
        },
        Curve::Sinusoidal {
            base,
            amplitude,
            period,
            ..
        } => Curve::Sinusoidal {
            base,
            amplitude: amplitude * scale,
            period,
            phase: new_phase,
        },
    }
}

/// Writes the files the pipeline consumes: `<id>.prob.pgm`, `<id>.li.txt`,
/// `<id>.ma.txt`, `calibration.csv`, plus `analytic.csv` with the known CIMT.
pub fn write_suite(dir: &Path, bundles: &[PhantomBundle]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CimtError::io(dir, e))?;
    let mut sorted: Vec<&PhantomBundle> = bundles.iter().collect();
    sorted.sort_by(|a, b| a.prob.image_id().cmp(b.prob.image_id()));
    for b in &sorted {
        let id = b.prob.image_id();
        write_probability(&dir.join(format!("{id}{PROB_SUFFIX}")), &b.prob)?;
        for (suffix, line) in [(LI_SUFFIX, &b.contours.li), (MA_SUFFIX, &b.contours.ma)] {
            let path = dir.join(format!("{id}{suffix}"));
            fs::write(&path, write_polyline(line)).map_err(|e| CimtError::io(&path, e))?;
        }
    }
    let cal_path = dir.join("calibration.csv");
    let records: Vec<CalibrationRecord> = sorted.iter().map(|b| b.calibration.clone()).collect();
    let file = fs::File::create(&cal_path).map_err(|e| CimtError::io(&cal_path, e))?;
    write_calibration_table(file, &records).map_err(|e| CimtError::csv(&cal_path, e))?;

    let analytic_path = dir.join("analytic.csv");
    let mut w =
        csv::Writer::from_path(&analytic_path).map_err(|e| CimtError::csv(&analytic_path, e))?;
    w.write_record(["image_id", "analytic_cimt_um"])
        .map_err(|e| CimtError::csv(&analytic_path, e))?;
    for b in &sorted {
        w.write_record([
            b.prob.image_id().to_string(),
            format!("{:.3}", b.analytic_cimt_um),
        ])
        .map_err(|e| CimtError::csv(&analytic_path, e))?;
    }
    w.flush().map_err(|e| CimtError::io(&analytic_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band::AggregationPolicy;
    use crate::calibrator::temperature_scale;
    use crate::contours::reference_cimt;
    use crate::pipeline::{measure, MeasureOptions};

    #[test]
    fn hard_constant_band_measures_exactly() {
        let b = generate(&PhantomSpec::default()).unwrap();
        assert_eq!(b.analytic_cimt_um, 1000.0);
        let m = measure(&b.prob, &b.calibration, &MeasureOptions::default()).unwrap();
        let r = m.result.unwrap();
        assert_eq!(r.cimt_px_working, 20.0);
        assert_eq!(r.cimt_um, 1000.0);
    }

    #[test]
    fn temperature_does_not_change_hard_band() {
        let b = generate(&PhantomSpec::default()).unwrap();
        let base = measure(&b.prob, &b.calibration, &MeasureOptions::default()).unwrap();
        for t in [0.5, 2.0, 5.0] {
            let scaled = temperature_scale(&b.prob, t).unwrap();
            let m = measure(&scaled, &b.calibration, &MeasureOptions::default()).unwrap();
            assert_eq!(m, base);
        }
    }

    #[test]
    fn positive_offset_thickens_band() {
        let spec = PhantomSpec {
            edge_softness: 3.0,
            probability_offset: 0.2,
            ..Default::default()
        };
        let b = generate(&spec).unwrap();
        let m = measure(&b.prob, &b.calibration, &MeasureOptions::default()).unwrap();
        assert!(m.cimt_um().unwrap() > b.analytic_cimt_um);
    }

    #[test]
    fn soft_band_within_one_pixel() {
        for li_curve in [
            Curve::Constant(40.3),
            Curve::Linear {
                start: 30.0,
                slope: 0.07,
            },
            Curve::Sinusoidal {
                base: 50.0,
                amplitude: 6.0,
                period: 90.0,
                phase: 0.4,
            },
        ] {
            let spec = PhantomSpec {
                li_curve,
                thickness_curve: Curve::Sinusoidal {
                    base: 15.0,
                    amplitude: 3.0,
                    period: 70.0,
                    phase: 1.0,
                },
                edge_softness: 2.0,
                ..Default::default()
            };
            let b = generate(&spec).unwrap();
            let m = measure(&b.prob, &b.calibration, &MeasureOptions::default()).unwrap();
            let tol = 1.0 * spec.mm_per_pixel * 1000.0;
            assert!((m.cimt_um().unwrap() - b.analytic_cimt_um).abs() <= tol);
        }
    }

    #[test]
    fn reference_matches_analytic() {
        let spec = PhantomSpec {
            li_curve: Curve::Sinusoidal {
                base: 50.0,
                amplitude: 5.5,
                period: 80.0,
                phase: 0.3,
            },
            thickness_curve: Curve::Linear {
                start: 12.0,
                slope: 0.03,
            },
            ..Default::default()
        };
        let b = generate(&spec).unwrap();
        let r = reference_cimt(&b.contours, &b.calibration, AggregationPolicy::Mean)
            .unwrap()
            .unwrap();
        assert!((r.cimt_um - b.analytic_cimt_um).abs() <= 1e-9 * b.analytic_cimt_um);
    }

    #[test]
    fn invalid_specs() {
        let cases = [
            PhantomSpec {
                li_curve: Curve::Constant(0.5),
                ..Default::default()
            },
            PhantomSpec {
                li_curve: Curve::Constant(100.0),
                thickness_curve: Curve::Constant(30.0),
                ..Default::default()
            },
            PhantomSpec {
                thickness_curve: Curve::Constant(1.5),
                ..Default::default()
            },
            PhantomSpec {
                edge_softness: -1.0,
                ..Default::default()
            },
            PhantomSpec {
                probability_offset: 0.31,
                ..Default::default()
            },
            PhantomSpec {
                noise_sd: -0.1,
                ..Default::default()
            },
            PhantomSpec {
                mm_per_pixel: 0.0,
                ..Default::default()
            },
        ];
        for spec in cases {
            assert!(
                matches!(generate(&spec), Err(CimtError::InvalidSpec(_))),
                "{spec:?}"
            );
        }
    }

    #[test]
    fn noise_is_seeded() {
        let spec = PhantomSpec {
            noise_sd: 0.05,
            edge_softness: 2.0,
            rng_seed: 9,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.prob, b.prob);
        let c = generate(&PhantomSpec {
            rng_seed: 10,
            ..spec
        })
        .unwrap();
        assert_ne!(a.prob, c.prob);
    }

    #[test]
    fn suites_are_reproducible() {
        let base = PhantomSpec::default();
        let a = generate_suite(28, &base, 5).unwrap();
        assert_eq!(a.len(), 28);
        let b = generate_suite(28, &base, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prob, y.prob);
            assert_eq!(x.calibration, y.calibration);
        }
        assert_eq!(generate_suite(1, &base, 5).unwrap().len(), 1);
        assert_eq!(a[0].prob.image_id(), "clin_0001_L");
        assert_eq!(a[3].prob.image_id(), "clin_0002_R");
        // integer base geometry stays integer
        for bundle in &a {
            assert!(bundle.analytic_profile_px.iter().all(|t| t.fract() == 0.0));
        }
    }
}
