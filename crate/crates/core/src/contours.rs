//! Expert LI/MA polylines: parsing, per-column sampling, band rasterization,
//! and the reference CIMT taken directly from sub-pixel contour geometry.

use std::io::Read;

use tracing::warn;

use crate::band::{aggregate, AggregationPolicy, BinaryMask};
use crate::calibration::{px_to_um, working_pixel_size, CalibrationRecord, MeasurementResult};
use crate::error::{CimtError, Result};

pub const LI_SUFFIX: &str = ".li.txt";
pub const MA_SUFFIX: &str = ".ma.txt";

/// Share of sampled columns allowed to have MA above LI before a pair is
/// rejected.
pub const MAX_ORDER_VIOLATION_FRACTION: f64 = 0.01;

/// Piecewise-linear curve `y(x)` with strictly increasing vertex x.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<(f64, f64)>,
}

impl Polyline {
    /// Sorts by x and averages the rows of vertices sharing an x.
    pub fn canonical(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if let Some(&(x, y)) = points
            .iter()
            .find(|(x, y)| !x.is_finite() || !y.is_finite() || *x < 0.0 || *y < 0.0)
        {
            return Err(CimtError::InvalidInput {
                image_id: String::new(),
                reason: format!("contour vertex ({x}, {y}) must be finite and non-negative"),
            });
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(points.len());
        let mut i = 0;
        while i < points.len() {
            let x = points[i].0;
            let j = points[i..]
                .iter()
                .position(|p| p.0 != x)
                .map_or(points.len(), |k| i + k);
            let rows: Vec<f64> = points[i..j].iter().map(|p| p.1).collect();
            merged.push((
                x,
                crate::stats::sum(rows.iter().copied()) / rows.len() as f64,
            ));
            i = j;
        }
        if merged.len() < 2 {
            return Err(CimtError::InvalidInput {
                image_id: String::new(),
                reason: format!(
                    "a contour needs at least 2 distinct x positions, got {}",
                    merged.len()
                ),
            });
        }
        Ok(Self { points: merged })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn x_span(&self) -> (f64, f64) {
        (self.points[0].0, self.points[self.points.len() - 1].0)
    }

    /// Linear interpolation; `None` outside the vertex span. Vertex x
    /// positions return the vertex row exactly.
    pub fn row_at(&self, x: f64) -> Option<f64> {
        let (x0, xn) = self.x_span();
        if !(x >= x0 && x <= xn) {
            return None;
        }
        // first vertex with vx > x
        let k = self.points.partition_point(|p| p.0 <= x);
        if k == self.points.len() {
            return Some(self.points[k - 1].1);
        }
        let (ax, ay) = self.points[k - 1];
        let (bx, by) = self.points[k];
        Some(ay + (by - ay) * (x - ax) / (bx - ax))
    }

    pub fn scaled(&self, scale_x: f64, scale_y: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&(x, y)| (x * scale_x, y * scale_y))
                .collect(),
        }
    }

    /// Checks every vertex against `[0, dim + 0.5)`.
    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        let (w, h) = (f64::from(width) + 0.5, f64::from(height) + 0.5);
        match self.points.iter().find(|&&(x, y)| x >= w || y >= h) {
            Some(&(x, y)) => Err(CimtError::InvalidInput {
                image_id: String::new(),
                reason: format!("vertex ({x}, {y}) lies outside a {width}x{height} image"),
            }),
            None => Ok(()),
        }
    }
}

pub fn sample_at_columns(p: &Polyline, columns: &[i64]) -> Vec<Option<f64>> {
    columns.iter().map(|&x| p.row_at(x as f64)).collect()
}

/// Parses whitespace-separated `x y` lines. Blank lines are skipped.
pub fn parse_polyline(text: &str, source_name: &str) -> Result<Polyline> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let parse_err = |reason: String| CimtError::Parse {
            source_name: source_name.to_string(),
            line: lineno,
            reason,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 2 {
            return Err(parse_err(format!(
                "expected `x y`, found {} fields",
                tokens.len()
            )));
        }
        let mut xy = [0.0; 2];
        for (slot, tok) in xy.iter_mut().zip(&tokens) {
            *slot = tok
                .parse::<f64>()
                .map_err(|_| parse_err(format!("non-numeric token {tok:?}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate {tok:?}")));
            }
        }
        points.push((xy[0], xy[1]));
    }
    Polyline::canonical(points).map_err(|e| CimtError::Parse {
        source_name: source_name.to_string(),
        line: text.lines().count(),
        reason: match e {
            CimtError::InvalidInput { reason, .. } => reason,
            other => other.to_string(),
        },
    })
}

/// LI above MA in image coordinates (far wall).
#[derive(Debug, Clone, PartialEq)]
pub struct ContourPair {
    pub image_id: String,
    pub li: Polyline,
    pub ma: Polyline,
}

impl ContourPair {
    pub fn new(image_id: impl Into<String>, li: Polyline, ma: Polyline) -> Result<Self> {
        let pair = Self {
            image_id: image_id.into(),
            li,
            ma,
        };
        let gaps = pair.column_gaps();
        let violations = gaps.iter().filter(|(_, g)| *g < 0.0).count();
        if !gaps.is_empty() && violations as f64 > MAX_ORDER_VIOLATION_FRACTION * gaps.len() as f64
        {
            return Err(CimtError::Geometry {
                image_id: pair.image_id,
                reason: format!(
                    "MA lies above LI at {violations} of {} sampled columns",
                    gaps.len()
                ),
            });
        }
        Ok(pair)
    }

    /// Integer columns covered by both contours.
    pub fn overlap_columns(&self) -> Vec<i64> {
        let (l0, l1) = self.li.x_span();
        let (m0, m1) = self.ma.x_span();
        let lo = l0.max(m0).ceil() as i64;
        let hi = l1.min(m1).floor() as i64;
        (lo..=hi).collect()
    }

    /// Signed vertical gap `ma - li` at each overlapping integer column.
    pub fn column_gaps(&self) -> Vec<(i64, f64)> {
        self.overlap_columns()
            .into_iter()
            .filter_map(|x| {
                let li = self.li.row_at(x as f64)?;
                let ma = self.ma.row_at(x as f64)?;
                Some((x, ma - li))
            })
            .collect()
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<()> {
        for line in [&self.li, &self.ma] {
            line.check_within(width, height).map_err(|e| match e {
                CimtError::InvalidInput { reason, .. } => CimtError::Geometry {
                    image_id: self.image_id.clone(),
                    reason,
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

pub fn parse_contour_pair<R1: Read, R2: Read>(
    mut li_source: R1,
    mut ma_source: R2,
    image_id: &str,
) -> Result<ContourPair> {
    let mut li_text = String::new();
    let mut ma_text = String::new();
    let li_name = format!("{image_id}{LI_SUFFIX}");
    let ma_name = format!("{image_id}{MA_SUFFIX}");
    li_source
        .read_to_string(&mut li_text)
        .map_err(|e| CimtError::io(&li_name, e))?;
    ma_source
        .read_to_string(&mut ma_text)
        .map_err(|e| CimtError::io(&ma_name, e))?;
    let li = parse_polyline(&li_text, &li_name)?;
    let ma = parse_polyline(&ma_text, &ma_name)?;
    ContourPair::new(image_id, li, ma)
}

pub fn write_polyline(p: &Polyline) -> String {
    let mut out = String::new();
    for &(x, y) in &p.points {
        out.push_str(&format!("{x} {y}\n"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionTag {
    Original,
    Working,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandMaskSpec {
    pub width: usize,
    pub height: usize,
    pub resolution: ResolutionTag,
}

/// True when the centre of row `r` lies within `[top, bottom]`.
pub fn row_center_inside(r: usize, top: f64, bottom: f64) -> bool {
    let c = r as f64 + 0.5;
    top <= c && c <= bottom
}

/// Rows whose centres fall within `[top, bottom]`, clipped to the image.
pub fn rows_inside(top: f64, bottom: f64, height: usize) -> std::ops::Range<usize> {
    if !(top <= bottom) || height == 0 {
        return 0..0;
    }
    let centre = |r: usize| r as f64 + 0.5;
    let mut lo = (top - 0.5).ceil().clamp(0.0, height as f64) as usize;
    while lo > 0 && centre(lo - 1) >= top {
        lo -= 1;
    }
    while lo < height && centre(lo) < top {
        lo += 1;
    }
    let mut hi = ((bottom - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    while hi < height && centre(hi) <= bottom {
        hi += 1;
    }
    while hi > 0 && centre(hi - 1) > bottom {
        hi -= 1;
    }
    lo..hi.max(lo)
}

/// Marks every pixel whose row centre lies between the scaled LI and MA
/// rows, on each integer column of the scaled overlap span.
pub fn rasterize_band(
    c: &ContourPair,
    spec: BandMaskSpec,
    scale_x: f64,
    scale_y: f64,
) -> Result<BinaryMask> {
    if !(scale_x > 0.0 && scale_y > 0.0) || !scale_x.is_finite() || !scale_y.is_finite() {
        return Err(CimtError::InvalidConfig(format!(
            "rasterization scales must be positive, got ({scale_x}, {scale_y})"
        )));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(CimtError::InvalidConfig(
            "mask dimensions must be positive".into(),
        ));
    }
    let li = c.li.scaled(scale_x, scale_y);
    let ma = c.ma.scaled(scale_x, scale_y);
    let scaled = ContourPair {
        image_id: c.image_id.clone(),
        li,
        ma,
    };
    let mut mask = BinaryMask::empty(c.image_id.clone(), spec.width, spec.height);
    let columns: Vec<i64> = scaled
        .overlap_columns()
        .into_iter()
        .filter(|&x| x >= 0 && (x as usize) < spec.width)
        .collect();
    if columns.is_empty() {
        warn!(image_id = %c.image_id, "contours share no column inside the mask; returning an empty mask");
        return Ok(mask);
    }
    for x in columns {
        let (Some(top), Some(bottom)) = (scaled.li.row_at(x as f64), scaled.ma.row_at(x as f64))
        else {
            continue;
        };
        for r in rows_inside(top, bottom, spec.height) {
            mask.set(x as usize, r, true);
        }
    }
    Ok(mask)
}

/// Reference CIMT from the vertical LI-MA gap at each overlapping integer
/// column, at original resolution. `None` when the contours do not overlap.
pub fn reference_cimt(
    c: &ContourPair,
    cal: &CalibrationRecord,
    policy: AggregationPolicy,
) -> Result<Option<MeasurementResult>> {
    let gaps: Vec<f64> = c
        .column_gaps()
        .into_iter()
        .map(|(_, g)| g.max(0.0))
        .collect();
    let Some(px) = aggregate(&gaps, policy)? else {
        return Ok(None);
    };
    let scale = working_pixel_size(cal, cal.orig_height)?;
    Ok(Some(MeasurementResult {
        image_id: c.image_id.clone(),
        cimt_px_working: px,
        cimt_um: px_to_um(px, &scale)?,
        threshold_used: None,
        scale,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[(f64, f64)]) -> Polyline {
        Polyline::canonical(points.to_vec()).unwrap()
    }

    fn flat(row: f64, x_end: f64) -> Polyline {
        line(&[(0.0, row), (x_end, row)])
    }

    fn cal(mm: f64) -> CalibrationRecord {
        CalibrationRecord::new("img", mm, 200, 300).unwrap()
    }

    fn text(points: &[(f64, f64)]) -> String {
        points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }

    #[test]
    fn constant_band_parses() {
        let li: Vec<_> = (0..100).map(|x| (x as f64, 100.0)).collect();
        let ma: Vec<_> = (0..100).map(|x| (x as f64, 150.0)).collect();
        let pair = parse_contour_pair(text(&li).as_bytes(), text(&ma).as_bytes(), "img").unwrap();
        assert_eq!(pair.li.points().len(), 100);
        assert_eq!(pair.overlap_columns(), (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn inverted_pair_is_geometry_error() {
        let li = text(&[(0.0, 150.0), (99.0, 150.0)]);
        let ma = text(&[(0.0, 100.0), (99.0, 100.0)]);
        let err = parse_contour_pair(li.as_bytes(), ma.as_bytes(), "img").unwrap_err();
        assert!(matches!(err, CimtError::Geometry { .. }), "{err}");
    }

    #[test]
    fn small_crossing_is_tolerated() {
        // MA dips above LI at exactly one of 200 columns
        let li = line(&[(0.0, 100.0), (199.0, 100.0)]);
        let ma = line(&[
            (0.0, 120.0),
            (99.0, 120.0),
            (100.0, 90.0),
            (101.0, 120.0),
            (199.0, 120.0),
        ]);
        assert!(ContourPair::new("img", li, ma).is_ok());
    }

    #[test]
    fn parse_errors_report_line() {
        let err =
            parse_contour_pair("5 7\n".as_bytes(), "0 1\n2 3\n".as_bytes(), "img").unwrap_err();
        assert!(matches!(err, CimtError::Parse { .. }), "{err}");

        let err = parse_polyline("0 1\n2 x\n", "f").unwrap_err();
        assert!(matches!(err, CimtError::Parse { line: 2, .. }), "{err}");

        let err = parse_polyline("0 1\nNaN 3\n", "f").unwrap_err();
        assert!(matches!(err, CimtError::Parse { line: 2, .. }), "{err}");

        let err = parse_polyline("0 1 2\n", "f").unwrap_err();
        assert!(matches!(err, CimtError::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn canonicalization_sorts_and_averages() {
        let p = parse_polyline("4 10\n0 2\n4 20\n\n2 6\n", "f").unwrap();
        assert_eq!(p.points(), &[(0.0, 2.0), (2.0, 6.0), (4.0, 15.0)]);
        assert!(parse_polyline("3 1\n3 5\n", "f").is_err());
    }

    #[test]
    fn sampling() {
        let p = line(&[(0.0, 10.0), (10.0, 20.0)]);
        assert_eq!(sample_at_columns(&p, &[5]), vec![Some(15.0)]);
        assert_eq!(sample_at_columns(&p, &[-1, 11]), vec![None, None]);

        let p = line(&[(0.0, 10.0), (4.0, 10.0), (8.0, 18.0)]);
        // independent piecewise-linear evaluation at x=6: 10 + (18-10) * (6-4)/(8-4)
        let expected = 10.0 + 8.0 * 0.5;
        assert_eq!(sample_at_columns(&p, &[6]), vec![Some(expected)]);
        assert_eq!(
            sample_at_columns(&p, &[0, 4, 8]),
            vec![Some(10.0), Some(10.0), Some(18.0)]
        );
    }

    #[test]
    fn bounds_check() {
        let p = line(&[(0.0, 10.0), (100.3, 20.0)]);
        assert!(p.check_within(100, 50).is_ok());
        assert!(p.check_within(99, 50).is_err());
    }

    #[test]
    fn rasterize_constant_band_pixel_centres() {
        let pair = ContourPair::new("img", flat(100.0, 9.0), flat(150.0, 9.0)).unwrap();
        let spec = BandMaskSpec {
            width: 10,
            height: 200,
            resolution: ResolutionTag::Original,
        };
        let m = rasterize_band(&pair, spec, 1.0, 1.0).unwrap();
        // rows r with 100 <= r + 0.5 <= 150, enumerated independently
        let expected: Vec<usize> = (0..200)
            .filter(|&r| 100.0 <= r as f64 + 0.5 && r as f64 + 0.5 <= 150.0)
            .collect();
        assert_eq!(expected, (100..150).collect::<Vec<_>>());
        for x in 0..10 {
            let rows: Vec<usize> = (0..200).filter(|&y| m.get(x, y)).collect();
            assert_eq!(rows, expected);
        }
    }

    #[test]
    fn zero_thickness_band() {
        for row in [100.0, 100.5, 37.25] {
            let pair = ContourPair::new("img", flat(row, 9.0), flat(row, 9.0)).unwrap();
            let spec = BandMaskSpec {
                width: 10,
                height: 200,
                resolution: ResolutionTag::Original,
            };
            let m = rasterize_band(&pair, spec, 1.0, 1.0).unwrap();
            for x in 0..10 {
                assert!((0..200).filter(|&y| m.get(x, y)).count() <= 1);
            }
        }
    }

    #[test]
    fn half_vertical_scale_halves_thickness() {
        let pair = ContourPair::new("img", flat(101.0, 63.0), flat(141.0, 63.0)).unwrap();
        let spec = BandMaskSpec {
            width: 64,
            height: 100,
            resolution: ResolutionTag::Working,
        };
        let scaled = rasterize_band(&pair, spec, 1.0, 0.5).unwrap();
        let pre_scaled = ContourPair::new("img", flat(50.5, 63.0), flat(70.5, 63.0)).unwrap();
        let oracle = rasterize_band(&pre_scaled, spec, 1.0, 1.0).unwrap();
        assert_eq!(scaled, oracle);
        for x in 0..64 {
            let n = (0..100).filter(|&y| scaled.get(x, y)).count() as i64;
            assert!((n - 20).abs() <= 1, "column {x} has {n} rows");
        }
    }

    #[test]
    fn empty_overlap_yields_empty_mask() {
        let li = line(&[(0.0, 10.0), (5.0, 10.0)]);
        let ma = line(&[(10.0, 20.0), (15.0, 20.0)]);
        let pair = ContourPair::new("img", li, ma).unwrap();
        let spec = BandMaskSpec {
            width: 20,
            height: 30,
            resolution: ResolutionTag::Original,
        };
        assert_eq!(rasterize_band(&pair, spec, 1.0, 1.0).unwrap().count(), 0);
        assert!(reference_cimt(&pair, &cal(0.06), AggregationPolicy::Mean)
            .unwrap()
            .is_none());
    }

    #[test]
    fn bad_scale_rejected() {
        let pair = ContourPair::new("img", flat(1.0, 3.0), flat(2.0, 3.0)).unwrap();
        let spec = BandMaskSpec {
            width: 4,
            height: 4,
            resolution: ResolutionTag::Original,
        };
        assert!(rasterize_band(&pair, spec, 0.0, 1.0).is_err());
    }

    #[test]
    fn reference_constant_band() {
        let pair = ContourPair::new("img", flat(100.0, 99.0), flat(150.0, 99.0)).unwrap();
        let r = reference_cimt(&pair, &cal(0.06), AggregationPolicy::Mean)
            .unwrap()
            .unwrap();
        assert_eq!(r.cimt_px_working, 50.0);
        assert!((r.cimt_um - 3000.0).abs() < 1e-9);

        let pair = ContourPair::new("img", flat(100.0, 99.0), flat(100.0, 99.0)).unwrap();
        let r = reference_cimt(&pair, &cal(0.06), AggregationPolicy::Mean)
            .unwrap()
            .unwrap();
        assert_eq!(r.cimt_um, 0.0);
    }

    #[test]
    fn reference_sloped_gap() {
        // gap g(x) = 20 + 0.1 x over x in [0, 100]; mean over integer columns = 25
        let li = line(&[(0.0, 50.0), (100.0, 60.0)]);
        let ma = line(&[(0.0, 70.0), (100.0, 90.0)]);
        let pair = ContourPair::new("img", li, ma).unwrap();
        let r = reference_cimt(&pair, &cal(0.05), AggregationPolicy::Mean)
            .unwrap()
            .unwrap();
        assert!((r.cimt_px_working - 25.0).abs() < 1e-12);
        assert!((r.cimt_um - 1250.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn vertices_sample_exactly(ys in proptest::collection::vec(0.0f64..500.0, 2..20)) {
            let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| (3.0 * i as f64, y)).collect();
            let p = line(&pts);
            let cols: Vec<i64> = (0..ys.len() as i64).map(|i| 3 * i).collect();
            let sampled = sample_at_columns(&p, &cols);
            for (s, &y) in sampled.iter().zip(&ys) {
                prop_assert_eq!(*s, Some(y));
            }
        }

        #[test]
        fn rows_inside_matches_scan(top in -5.0f64..60.0, len in 0.0f64..40.0) {
            let bottom = top + len;
            let scan: Vec<usize> = (0..50).filter(|&r| row_center_inside(r, top, bottom)).collect();
            let fast: Vec<usize> = rows_inside(top, bottom, 50).collect();
            prop_assert_eq!(fast, scan);
        }

        #[test]
        fn scaling_equivariance(top in 20.0f64..60.0, gap in 4.0f64..40.0, s in 0.3f64..2.0) {
            let pair = ContourPair::new("img", flat(top, 31.0), flat(top + gap, 31.0)).unwrap();
            let spec = BandMaskSpec { width: 32, height: 256, resolution: ResolutionTag::Working };
            let m = rasterize_band(&pair, spec, 1.0, s).unwrap();
            let unscaled = rasterize_band(&pair, spec, 1.0, 1.0).unwrap();
            for x in 0..32 {
                let a = (0..256).filter(|&y| m.get(x, y)).count() as f64;
                let b = (0..256).filter(|&y| unscaled.get(x, y)).count() as f64;
                prop_assert!((a - b * s).abs() <= 1.0 + s, "{} vs {}", a, b * s);
                prop_assert!((a - gap * s).abs() <= 1.0, "{} vs {}", a, gap * s);
            }
        }
    }
}
