//! Batch commands behind the `cimt-kit` binary.
//!
//! Every command reads a flat data directory:
//!
//! ```text
//! <root>/<image_id>.prob.pgm   probability map on the working grid
//! <root>/<image_id>.li.txt     reference LI contour, original pixels
//! <root>/<image_id>.ma.txt     reference MA contour, original pixels
//! <root>/<image_id>.mask.pgm   optional reference mask, working grid
//! <root>/calibration.csv       image_id,mm_per_pixel,orig_width,orig_height
//! ```
//!
//! Per-image problems are recorded in `failures.csv` and never stop a
//! batch. Output rows are ordered by image id and floats are written with
//! fixed precision, so identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tracing::{info, warn};

use crate::band::{AggregationPolicy, BinaryMask, ProbabilityMap, DEFAULT_THRESHOLD};
use crate::calibration::{parse_calibration_table, CalibrationRecord};
use crate::calibrator::{
    default_temperature_grid, default_threshold_grid, evaluate_calibrated, sweep_threshold,
    temperature_ablation, CalibrationComparison, CalibrationConfig, Objective, ValidationImage,
};
use crate::contours::{
    parse_contour_pair, rasterize_band, reference_cimt, BandMaskSpec, ContourPair, ResolutionTag,
    LI_SUFFIX, MA_SUFFIX,
};
use crate::error::{CimtError, Result};
use crate::metrics::{agreement_mutual, overlap, seed_summary, AgreementReport};
use crate::pgm::{
    image_id_from_path, read_mask, read_probability, write_mask, MASK_SUFFIX, PROB_SUFFIX,
};
use crate::phantom::{generate_suite, write_suite, Curve, PhantomSpec};
use crate::pipeline::{binarize, measure_mask, MeasureOptions};
use crate::splits::{
    make_image_split, read_manifest, verify_no_leakage, write_manifest, Partition, SplitRatios,
};
use crate::stats;

pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const DEFAULT_TARGET_HEIGHT: u32 = 512;

/// How a batch ended. Configuration and I/O problems surface as `Err`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PartialFailure { failed: usize },
}

impl Outcome {
    fn from_failures(failed: usize) -> Self {
        if failed == 0 {
            Outcome::Success
        } else {
            Outcome::PartialFailure { failed }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::PartialFailure { .. } => 1,
        }
    }
}

/// Exit code for errors that abort a command.
pub const CONFIG_ERROR_EXIT: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Failure {
    pub image_id: String,
    pub stage: &'static str,
    pub error: String,
}

impl Failure {
    fn new(image_id: &str, stage: &'static str, err: impl std::fmt::Display) -> Self {
        Self {
            image_id: image_id.to_string(),
            stage,
            error: err.to_string(),
        }
    }
}

/// Options shared by the commands that read a data directory.
#[derive(Debug, Clone)]
pub struct DataOptions {
    pub data_root: PathBuf,
    /// Defaults to `<data_root>/calibration.csv`.
    pub calibration: Option<PathBuf>,
    /// Restrict to images listed in a split manifest...
    pub manifest: Option<PathBuf>,
    /// ...and in this partition.
    pub partition: Option<Partition>,
    /// Restrict to ids listed one per line.
    pub ids: Option<PathBuf>,
    /// Expected probability map height; maps of another height fail.
    pub target_height: Option<u32>,
    pub jobs: Option<usize>,
}

impl DataOptions {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        Self {
            data_root: data_root.into(),
            calibration: None,
            manifest: None,
            partition: None,
            ids: None,
            target_height: Some(DEFAULT_TARGET_HEIGHT),
            jobs: None,
        }
    }

    fn calibration_path(&self) -> PathBuf {
        self.calibration
            .clone()
            .unwrap_or_else(|| self.data_root.join(CALIBRATION_FILE))
    }
}

fn fixed(v: f64, decimals: usize) -> String {
    // avoid "-0.000"
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:.decimals$}")
}

fn opt_fixed(v: Option<f64>, decimals: usize) -> String {
    v.map(|v| fixed(v, decimals)).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CimtError::io(dir, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CimtError::csv(path, e))?;
    w.write_record(header)
        .map_err(|e| CimtError::csv(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CimtError::csv(path, e))?;
    }
    w.flush().map_err(|e| CimtError::io(path, e))
}

fn write_failures(dir: &Path, failures: &mut [Failure]) -> Result<()> {
    failures.sort();
    let rows: Vec<Vec<String>> = failures
        .iter()
        .map(|f| vec![f.image_id.clone(), f.stage.to_string(), f.error.clone()])
        .collect();
    write_csv(
        &dir.join(FAILURES_FILE),
        &["image_id", "stage", "error"],
        &rows,
    )
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(CimtError::InvalidConfig("--jobs must be at least 1".into()));
        }
        builder = builder.num_threads(j);
    }
    builder
        .build()
        .map_err(|e| CimtError::InvalidConfig(format!("cannot start worker pool: {e}")))
}

pub fn load_calibration(path: &Path) -> Result<BTreeMap<String, CalibrationRecord>> {
    let file = fs::File::open(path).map_err(|e| CimtError::io(path, e))?;
    let name = path.display().to_string();
    Ok(parse_calibration_table(file, &name)?
        .into_iter()
        .map(|r| (r.image_id.clone(), r))
        .collect())
}

/// `<id>.prob.pgm` files in `dir`, sorted by id.
pub fn discover_probability_maps(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CimtError::io(dir, e))?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CimtError::io(dir, e))?.path();
        if let Some(id) = image_id_from_path(&path, PROB_SUFFIX) {
            found.insert(id, path);
        }
    }
    Ok(found)
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CimtError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Probability maps selected by the id filters, in id order.
fn select_maps(opts: &DataOptions) -> Result<BTreeMap<String, PathBuf>> {
    let mut maps = discover_probability_maps(&opts.data_root)?;
    if let Some(path) = &opts.manifest {
        let file = fs::File::open(path).map_err(|e| CimtError::io(path, e))?;
        let manifest = read_manifest(file, SplitRatios::default())?;
        let keep: Vec<String> = manifest
            .image_assignment
            .iter()
            .filter(|(_, p)| opts.partition.is_none_or(|want| **p == want))
            .map(|(id, _)| id.clone())
            .collect();
        maps.retain(|id, _| keep.binary_search(id).is_ok());
    }
    if let Some(path) = &opts.ids {
        let mut keep = read_id_list(path)?;
        keep.sort();
        maps.retain(|id, _| keep.binary_search(id).is_ok());
    }
    Ok(maps)
}

fn load_map(
    id: &str,
    path: &Path,
    opts: &DataOptions,
) -> std::result::Result<ProbabilityMap, Failure> {
    let map = read_probability(path).map_err(|e| Failure::new(id, "read", e))?;
    if let Some(t) = opts.target_height {
        if map.height() != t as usize {
            return Err(Failure::new(
                id,
                "read",
                format!("map height {} differs from target height {t}", map.height()),
            ));
        }
    }
    Ok(map)
}

fn lookup_cal<'a>(
    id: &str,
    table: &'a BTreeMap<String, CalibrationRecord>,
) -> std::result::Result<&'a CalibrationRecord, Failure> {
    table
        .get(id)
        .ok_or_else(|| Failure::new(id, "calibration", "no calibration row for this image"))
}

// ---------------------------------------------------------------- measure

#[derive(Debug, Clone)]
pub struct MeasureConfig {
    pub data: DataOptions,
    pub output_dir: PathBuf,
    pub measure: MeasureOptions,
    /// Also write the binarized masks as 8-bit PGM.
    pub export_masks: bool,
}

pub const MEASURE_FILE: &str = "measurements.csv";

pub fn cmd_measure(cfg: &MeasureConfig) -> Result<Outcome> {
    crate::band::validate_threshold(cfg.measure.threshold)?;
    cfg.measure.aggregation.validate()?;
    let maps = select_maps(&cfg.data)?;
    if maps.is_empty() {
        return Err(CimtError::InvalidConfig(format!(
            "no *{PROB_SUFFIX} files found in {}",
            cfg.data.data_root.display()
        )));
    }
    let table = load_calibration(&cfg.data.calibration_path())?;
    create_dir(&cfg.output_dir)?;
    let mask_dir = cfg.output_dir.join("masks");
    if cfg.export_masks {
        create_dir(&mask_dir)?;
    }

    let entries: Vec<(&String, &PathBuf)> = maps.iter().collect();
    let results: Vec<std::result::Result<Vec<String>, Failure>> = thread_pool(cfg.data.jobs)?
        .install(|| {
            entries
                .par_iter()
                .map(|&(id, path)| {
                    let map = load_map(id, path, &cfg.data)?;
                    let cal = lookup_cal(id, &table)?;
                    let mask =
                        binarize(&map, &cfg.measure).map_err(|e| Failure::new(id, "measure", e))?;
                    if cfg.export_masks {
                        write_mask(&mask_dir.join(format!("{id}{MASK_SUFFIX}")), &mask)
                            .map_err(|e| Failure::new(id, "write", e))?;
                    }
                    let m = measure_mask(&mask, cal, cfg.measure.aggregation)
                        .map_err(|e| Failure::new(id, "measure", e))?;
                    Ok(vec![
                        id.clone(),
                        fixed(cfg.measure.threshold, 3),
                        opt_fixed(m.result.as_ref().map(|r| r.cimt_px_working), 4),
                        opt_fixed(m.cimt_um(), 3),
                        m.profile.valid_column_count().to_string(),
                    ])
                })
                .collect()
        });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => {
                warn!(image_id = %f.image_id, stage = f.stage, "{}", f.error);
                failures.push(f);
            }
        }
    }
    write_csv(
        &cfg.output_dir.join(MEASURE_FILE),
        &[
            "image_id",
            "threshold",
            "cimt_px",
            "cimt_um",
            "valid_columns",
        ],
        &rows,
    )?;
    write_failures(&cfg.output_dir, &mut failures)?;
    let meta = format!(
        "threshold={}\naggregation={}\nthickness_convention=inclusive\nlargest_component={}\ntarget_height={}\n",
        fixed(cfg.measure.threshold, 3),
        cfg.measure.aggregation,
        cfg.measure.largest_component,
        cfg.data.target_height.map_or("any".to_string(), |t| t.to_string()),
    );
    let meta_path = cfg.output_dir.join("measure_meta.txt");
    fs::write(&meta_path, meta).map_err(|e| CimtError::io(&meta_path, e))?;
    info!(
        measured = rows.len(),
        failed = failures.len(),
        "measure finished"
    );
    Ok(Outcome::from_failures(failures.len()))
}

// ------------------------------------------------------------- references

/// Reference geometry for one image: the contours when present, otherwise
/// a reference mask on the working grid.
enum Reference {
    Contours(ContourPair),
    Mask(BinaryMask),
}

fn load_reference(root: &Path, id: &str) -> std::result::Result<Reference, Failure> {
    let li = root.join(format!("{id}{LI_SUFFIX}"));
    let ma = root.join(format!("{id}{MA_SUFFIX}"));
    if li.exists() && ma.exists() {
        let open = |p: &Path| {
            fs::File::open(p).map_err(|e| Failure::new(id, "reference", CimtError::io(p, e)))
        };
        let pair = parse_contour_pair(open(&li)?, open(&ma)?, id)
            .map_err(|e| Failure::new(id, "reference", e))?;
        return Ok(Reference::Contours(pair));
    }
    let mask = root.join(format!("{id}{MASK_SUFFIX}"));
    if mask.exists() {
        return read_mask(&mask)
            .map(Reference::Mask)
            .map_err(|e| Failure::new(id, "reference", e));
    }
    Err(Failure::new(
        id,
        "reference",
        "no contours or reference mask",
    ))
}

fn has_reference(root: &Path, id: &str) -> bool {
    (root.join(format!("{id}{LI_SUFFIX}")).exists()
        && root.join(format!("{id}{MA_SUFFIX}")).exists())
        || root.join(format!("{id}{MASK_SUFFIX}")).exists()
}

/// Reference mask on the map's grid and reference CIMT in µm.
fn reference_for(
    reference: &Reference,
    map: &ProbabilityMap,
    cal: &CalibrationRecord,
    aggregation: AggregationPolicy,
) -> Result<(BinaryMask, Option<f64>)> {
    match reference {
        Reference::Contours(pair) => {
            pair.check_within(cal.orig_width, cal.orig_height)?;
            let spec = BandMaskSpec {
                width: map.width(),
                height: map.height(),
                resolution: if map.height() as u32 == cal.orig_height
                    && map.width() as u32 == cal.orig_width
                {
                    ResolutionTag::Original
                } else {
                    ResolutionTag::Working
                },
            };
            let sx = map.width() as f64 / f64::from(cal.orig_width);
            let sy = map.height() as f64 / f64::from(cal.orig_height);
            let mask = rasterize_band(pair, spec, sx, sy)?;
            let um = reference_cimt(pair, cal, aggregation)?.map(|r| r.cimt_um);
            Ok((mask, um))
        }
        Reference::Mask(mask) => {
            let um = measure_mask(mask, cal, aggregation)?.cimt_um();
            Ok((mask.clone(), um))
        }
    }
}

// --------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateConfig {
    pub data: DataOptions,
    /// Directory holding contours / reference masks; defaults to the data root.
    pub references: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Explicit threshold; otherwise the calibrated one, otherwise 0.5.
    pub threshold: Option<f64>,
    /// Calibration manifest written by `calibrate`.
    pub calibrated: Option<PathBuf>,
    pub baseline_threshold: f64,
    pub aggregation: AggregationPolicy,
    pub largest_component: bool,
    /// Label written into the summary row.
    pub seed: Option<u64>,
}

impl EvaluateConfig {
    pub fn new(data: DataOptions, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            data,
            references: None,
            output_dir: output_dir.into(),
            threshold: None,
            calibrated: None,
            baseline_threshold: DEFAULT_THRESHOLD,
            aggregation: AggregationPolicy::Mean,
            largest_component: false,
            seed: None,
        }
    }
}

pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BLAND_ALTMAN_FILE: &str = "bland_altman.csv";
pub const COMPARISON_FILE: &str = "calibration_comparison.csv";

pub const SUMMARY_HEADER: [&str; 13] = [
    "seed",
    "n",
    "test_dice",
    "test_iou",
    "cimt_mae_um",
    "cimt_rmse_um",
    "cimt_bias_um",
    "cimt_pearson_r",
    "n_cimt",
    "n_excluded",
    "loa_low_um",
    "loa_high_um",
    "threshold",
];

struct EvalRow {
    id: String,
    dice: f64,
    iou: f64,
    pred_um: Option<f64>,
    ref_um: Option<f64>,
    map: ProbabilityMap,
    cal: CalibrationRecord,
}

/// Summary numbers of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSummary {
    pub n: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub agreement: Option<AgreementReport>,
    pub threshold: f64,
    pub comparison: Option<CalibrationComparison>,
}

pub fn resolve_threshold(explicit: Option<f64>, calibrated: Option<&Path>) -> Result<f64> {
    let t = match (explicit, calibrated) {
        (Some(t), _) => t,
        (None, Some(path)) => read_calibration_manifest(path)?,
        (None, None) => DEFAULT_THRESHOLD,
    };
    crate::band::validate_threshold(t)?;
    Ok(t)
}

pub fn cmd_evaluate(cfg: &EvaluateConfig) -> Result<(Outcome, EvaluationSummary)> {
    let threshold = resolve_threshold(cfg.threshold, cfg.calibrated.as_deref())?;
    crate::band::validate_threshold(cfg.baseline_threshold)?;
    cfg.aggregation.validate()?;
    let ref_root = cfg
        .references
        .clone()
        .unwrap_or_else(|| cfg.data.data_root.clone());
    let table = load_calibration(&cfg.data.calibration_path())?;
    let maps: BTreeMap<String, PathBuf> = select_maps(&cfg.data)?
        .into_iter()
        .filter(|(id, _)| table.contains_key(id) && has_reference(&ref_root, id))
        .collect();
    if maps.is_empty() {
        return Err(CimtError::InvalidConfig(
            "no image id has a probability map, a reference and a calibration row".into(),
        ));
    }
    create_dir(&cfg.output_dir)?;
    let opts = MeasureOptions {
        threshold,
        aggregation: cfg.aggregation,
        largest_component: cfg.largest_component,
    };

    let entries: Vec<(&String, &PathBuf)> = maps.iter().collect();
    let results: Vec<std::result::Result<EvalRow, Failure>> =
        thread_pool(cfg.data.jobs)?.install(|| {
            entries
                .par_iter()
                .map(|&(id, path)| {
                    let map = load_map(id, path, &cfg.data)?;
                    let cal = lookup_cal(id, &table)?.clone();
                    let reference = load_reference(&ref_root, id)?;
                    let (ref_mask, ref_um) = reference_for(&reference, &map, &cal, cfg.aggregation)
                        .map_err(|e| Failure::new(id, "reference", e))?;
                    let pred_mask =
                        binarize(&map, &opts).map_err(|e| Failure::new(id, "measure", e))?;
                    let ov = overlap(&pred_mask, &ref_mask)
                        .map_err(|e| Failure::new(id, "overlap", e))?;
                    let pred_um = measure_mask(&pred_mask, &cal, cfg.aggregation)
                        .map_err(|e| Failure::new(id, "measure", e))?
                        .cimt_um();
                    Ok(EvalRow {
                        id: id.clone(),
                        dice: ov.dice,
                        iou: ov.iou,
                        pred_um,
                        ref_um,
                        map,
                        cal,
                    })
                })
                .collect()
        });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => {
                warn!(image_id = %f.image_id, stage = f.stage, "{}", f.error);
                failures.push(f);
            }
        }
    }
    if rows.is_empty() {
        write_failures(&cfg.output_dir, &mut failures)?;
        return Err(CimtError::InvalidConfig(
            "every image failed evaluation".into(),
        ));
    }

    let per_image: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let diff = r.pred_um.zip(r.ref_um).map(|(p, q)| p - q);
            vec![
                r.id.clone(),
                fixed(r.dice, 6),
                fixed(r.iou, 6),
                opt_fixed(r.pred_um, 3),
                opt_fixed(r.ref_um, 3),
                opt_fixed(diff, 3),
            ]
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(PER_IMAGE_FILE),
        &["image_id", "dice", "iou", "pred_um", "ref_um", "diff_um"],
        &per_image,
    )?;

    let pairs: Vec<(Option<f64>, Option<f64>)> =
        rows.iter().map(|r| (r.pred_um, r.ref_um)).collect();
    let agreement = agreement_mutual(&pairs).ok();
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let iou: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let mean_dice = stats::mean(&dice).unwrap_or(0.0);
    let mean_iou = stats::mean(&iou).unwrap_or(0.0);

    let ba_rows: Vec<Vec<String>> = rows
        .iter()
        .filter_map(|r| {
            let (p, q) = (r.pred_um?, r.ref_um?);
            Some(vec![r.id.clone(), fixed((p + q) / 2.0, 3), fixed(p - q, 3)])
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(BLAND_ALTMAN_FILE),
        &["image_id", "mean_um", "diff_um"],
        &ba_rows,
    )?;

    let a = agreement.as_ref();
    let summary_row = vec![
        cfg.seed.map(|s| s.to_string()).unwrap_or_default(),
        rows.len().to_string(),
        fixed(mean_dice, 6),
        fixed(mean_iou, 6),
        opt_fixed(a.map(|a| a.mae_um), 3),
        opt_fixed(a.map(|a| a.rmse_um), 3),
        opt_fixed(a.map(|a| a.bias_um), 3),
        opt_fixed(a.and_then(|a| a.pearson()), 6),
        a.map_or(0, |a| a.n).to_string(),
        a.map_or(pairs.len(), |a| a.n_excluded).to_string(),
        opt_fixed(a.and_then(|a| a.loa_low_um), 3),
        opt_fixed(a.and_then(|a| a.loa_high_um), 3),
        fixed(threshold, 3),
    ];
    write_csv(
        &cfg.output_dir.join(SUMMARY_FILE),
        &SUMMARY_HEADER,
        &[summary_row],
    )?;

    let comparison = if cfg.calibrated.is_some() {
        let images: Vec<ValidationImage> = rows
            .iter()
            .filter_map(|r| {
                Some(ValidationImage {
                    prob: r.map.clone(),
                    calibration: r.cal.clone(),
                    reference_um: r.ref_um?,
                })
            })
            .collect();
        let ccfg = CalibrationConfig {
            aggregation: cfg.aggregation,
            largest_component: cfg.largest_component,
            ..Default::default()
        };
        let c = evaluate_calibrated(&images, threshold, cfg.baseline_threshold, &ccfg)?;
        write_csv(
            &cfg.output_dir.join(COMPARISON_FILE),
            &[
                "seed",
                "baseline_threshold",
                "baseline_mae_um",
                "threshold_best",
                "threshold_mae_um",
                "threshold_improvement_um",
            ],
            &[vec![
                cfg.seed.map(|s| s.to_string()).unwrap_or_default(),
                fixed(c.baseline_threshold, 3),
                fixed(c.baseline_mae_um, 3),
                fixed(c.threshold_best, 3),
                fixed(c.threshold_mae_um, 3),
                fixed(c.threshold_improvement_um, 3),
            ]],
        )?;
        Some(c)
    } else {
        None
    };

    write_failures(&cfg.output_dir, &mut failures)?;
    Ok((
        Outcome::from_failures(failures.len()),
        EvaluationSummary {
            n: rows.len(),
            mean_dice,
            mean_iou,
            agreement,
            threshold,
            comparison,
        },
    ))
}

/// Columns averaged across seeds, with the decimals used when printing
/// `mean $\pm$ sd`.
pub const SEED_COLUMNS: [(&str, usize); 6] = [
    ("test_dice", 4),
    ("test_iou", 4),
    ("cimt_mae_um", 2),
    ("cimt_rmse_um", 2),
    ("cimt_bias_um", 2),
    ("cimt_pearson_r", 3),
];

/// Reads per-seed `summary.csv` files and writes one row per seed plus a
/// final `mean$\pm$std` row. Returns the formatted summary cells.
pub fn combine_seed_summaries(inputs: &[PathBuf], output: &Path) -> Result<Vec<(String, String)>> {
    if inputs.len() < 2 {
        return Err(CimtError::InvalidConfig(
            "combining needs at least two summaries".into(),
        ));
    }
    let mut seeds = Vec::new();
    let mut ns = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); SEED_COLUMNS.len()];
    for path in inputs {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CimtError::csv(path, e))?;
        let headers = reader
            .headers()
            .map_err(|e| CimtError::csv(path, e))?
            .clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CimtError::Parse {
                    source_name: path.display().to_string(),
                    line: 1,
                    reason: format!("missing column {name:?}"),
                })
        };
        let seed_idx = col("seed")?;
        let n_idx = col("n")?;
        let idx: Vec<usize> = SEED_COLUMNS
            .iter()
            .map(|(c, _)| col(c))
            .collect::<Result<_>>()?;
        let record = reader
            .records()
            .next()
            .ok_or_else(|| CimtError::Parse {
                source_name: path.display().to_string(),
                line: 2,
                reason: "summary has no data row".into(),
            })?
            .map_err(|e| CimtError::csv(path, e))?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| CimtError::Parse {
                    source_name: path.display().to_string(),
                    line: 2,
                    reason: format!(
                        "non-numeric value {:?} in column {}",
                        &record[i], &headers[i]
                    ),
                })
        };
        seeds.push(record[seed_idx].to_string());
        ns.push(num(n_idx)?);
        for (k, &i) in idx.iter().enumerate() {
            columns[k].push(num(i)?);
        }
    }

    let mut header = vec!["seed", "n"];
    header.extend(SEED_COLUMNS.iter().map(|(c, _)| *c));
    let mut rows: Vec<Vec<String>> = (0..seeds.len())
        .map(|s| {
            let mut row = vec![seeds[s].clone(), fixed(ns[s], 0)];
            row.extend(columns.iter().map(|c| fixed(c[s], 3)));
            row
        })
        .collect();
    let mut cells = Vec::new();
    let mut last = vec![
        "mean$\\pm$std".to_string(),
        fixed(stats::sum(ns.iter().copied()), 0),
    ];
    for ((name, decimals), values) in SEED_COLUMNS.iter().zip(&columns) {
        let s = seed_summary(values)?.format(*decimals);
        cells.push((name.to_string(), s.clone()));
        last.push(s);
    }
    rows.push(last);
    write_csv(output, &header, &rows)?;
    Ok(cells)
}

// -------------------------------------------------------------- calibrate

#[derive(Debug, Clone)]
pub struct CalibrateConfig {
    pub data: DataOptions,
    pub references: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub calibration: CalibrationConfig,
}

pub const SWEEP_FILE: &str = "sweep.csv";
pub const TEMPERATURE_FILE: &str = "temperature.csv";
pub const CALIBRATION_MANIFEST_FILE: &str = "calibration.txt";

/// Loads probability maps with reference CIMT for calibration.
fn load_validation_set(
    data: &DataOptions,
    references: &Path,
    aggregation: AggregationPolicy,
) -> Result<(Vec<ValidationImage>, Vec<Failure>)> {
    let table = load_calibration(&data.calibration_path())?;
    let maps = select_maps(data)?;
    let entries: Vec<(&String, &PathBuf)> = maps.iter().collect();
    let results: Vec<std::result::Result<ValidationImage, Failure>> = thread_pool(data.jobs)?
        .install(|| {
            entries
                .par_iter()
                .map(|&(id, path)| {
                    let map = load_map(id, path, data)?;
                    let cal = lookup_cal(id, &table)?.clone();
                    let reference = load_reference(references, id)?;
                    let (_, ref_um) = reference_for(&reference, &map, &cal, aggregation)
                        .map_err(|e| Failure::new(id, "reference", e))?;
                    let reference_um = ref_um.ok_or_else(|| {
                        Failure::new(id, "reference", "reference has no overlapping columns")
                    })?;
                    Ok(ValidationImage {
                        prob: map,
                        calibration: cal,
                        reference_um,
                    })
                })
                .collect()
        });
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => images.push(v),
            Err(f) => {
                warn!(image_id = %f.image_id, stage = f.stage, "{}", f.error);
                failures.push(f);
            }
        }
    }
    Ok((images, failures))
}

pub fn cmd_calibrate(cfg: &CalibrateConfig) -> Result<(Outcome, crate::calibrator::SweepResult)> {
    cfg.calibration.validate()?;
    let references = cfg
        .references
        .clone()
        .unwrap_or_else(|| cfg.data.data_root.clone());
    let (images, mut failures) =
        load_validation_set(&cfg.data, &references, cfg.calibration.aggregation)?;
    if images.is_empty() {
        return Err(CimtError::InvalidConfig("validation set is empty".into()));
    }
    create_dir(&cfg.output_dir)?;
    let sweep =
        thread_pool(cfg.data.jobs)?.install(|| sweep_threshold(&images, &cfg.calibration))?;
    let rows: Vec<Vec<String>> = sweep
        .per_point
        .iter()
        .map(|p| {
            vec![
                fixed(p.threshold, 3),
                fixed(p.mae_um, 3),
                fixed(p.rmse_um, 3),
                fixed(p.bias_um, 3),
                p.n_valid.to_string(),
            ]
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(SWEEP_FILE),
        &["threshold", "mae_um", "rmse_um", "bias_um", "n_valid"],
        &rows,
    )?;

    let temps = thread_pool(cfg.data.jobs)?
        .install(|| temperature_ablation(&images, DEFAULT_THRESHOLD, &cfg.calibration))?;
    let rows: Vec<Vec<String>> = temps
        .iter()
        .map(|t| {
            vec![
                fixed(t.temperature, 3),
                fixed(t.mae_um, 3),
                fixed(t.improvement_um, 3),
            ]
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(TEMPERATURE_FILE),
        &["temperature", "mae_um", "improvement_um"],
        &rows,
    )?;

    let baseline =
        crate::calibrator::evaluate_threshold(&images, DEFAULT_THRESHOLD, &cfg.calibration)?;
    let manifest = format!(
        "best_threshold={}\nobjective={}\nbest_objective={}\nbest_mae_um={}\nbaseline_threshold={}\nbaseline_mae_um={}\nbaseline_bias_um={}\nn_images={}\n",
        fixed(sweep.best_threshold, 3),
        sweep.objective,
        fixed(sweep.best_objective, 3),
        fixed(sweep.best_mae_um, 3),
        fixed(DEFAULT_THRESHOLD, 3),
        fixed(baseline.mae_um, 3),
        fixed(baseline.bias_um, 3),
        images.len(),
    );
    let path = cfg.output_dir.join(CALIBRATION_MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| CimtError::io(&path, e))?;
    write_failures(&cfg.output_dir, &mut failures)?;
    Ok((Outcome::from_failures(failures.len()), sweep))
}

/// Reads `best_threshold=` from a calibration manifest.
pub fn read_calibration_manifest(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| CimtError::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if let Some(v) = line.trim().strip_prefix("best_threshold=") {
            return v.trim().parse::<f64>().map_err(|_| CimtError::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                reason: format!("bad threshold {v:?}"),
            });
        }
    }
    Err(CimtError::Parse {
        source_name: path.display().to_string(),
        line: 0,
        reason: "no best_threshold entry".into(),
    })
}

pub fn default_calibration_config(
    aggregation: AggregationPolicy,
    objective: Objective,
    largest_component: bool,
) -> CalibrationConfig {
    CalibrationConfig {
        threshold_grid: default_threshold_grid(),
        temperature_grid: default_temperature_grid(),
        objective,
        aggregation,
        largest_component,
    }
}

// ------------------------------------------------------------------ split

#[derive(Debug, Clone)]
pub struct SplitConfig {
    /// Image ids one per line; if absent, ids come from the calibration
    /// CSV, else from the probability maps in `data_root`.
    pub ids: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub ratios: SplitRatios,
    pub output_dir: PathBuf,
}

pub fn manifest_file_name(seed: u64) -> String {
    format!("split_seed{seed}.csv")
}

pub fn cmd_split(cfg: &SplitConfig) -> Result<Vec<crate::splits::SplitManifest>> {
    let ids: Vec<String> = if let Some(p) = &cfg.ids {
        read_id_list(p)?
    } else if let Some(p) = &cfg.calibration {
        load_calibration(p)?.into_keys().collect()
    } else if let Some(root) = &cfg.data_root {
        discover_probability_maps(root)?.into_keys().collect()
    } else {
        return Err(CimtError::InvalidConfig(
            "split needs --ids, --calibration or a data root".into(),
        ));
    };
    if cfg.seeds.is_empty() {
        return Err(CimtError::InvalidConfig(
            "at least one --seed is required".into(),
        ));
    }
    create_dir(&cfg.output_dir)?;
    let mut manifests = Vec::new();
    for &seed in &cfg.seeds {
        let m = make_image_split(&ids, seed, cfg.ratios)?;
        let report = verify_no_leakage(&m);
        if !report.is_clean() {
            return Err(CimtError::InvalidConfig(format!(
                "seed {seed}: {} leakage violations",
                report.violations.len()
            )));
        }
        let path = cfg.output_dir.join(manifest_file_name(seed));
        let file = fs::File::create(&path).map_err(|e| CimtError::io(&path, e))?;
        write_manifest(file, &m)?;
        info!(
            seed,
            train = m.patients_in(Partition::Train),
            val = m.patients_in(Partition::Val),
            test = m.patients_in(Partition::Test),
            "split written"
        );
        manifests.push(m);
    }
    Ok(manifests)
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomShape {
    Constant,
    Linear,
    Sinusoidal,
}

impl std::str::FromStr for PhantomShape {
    type Err = CimtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(PhantomShape::Constant),
            "linear" => Ok(PhantomShape::Linear),
            "sinusoidal" | "sine" => Ok(PhantomShape::Sinusoidal),
            other => Err(CimtError::InvalidConfig(format!(
                "unknown phantom shape {other:?}, expected constant|linear|sinusoidal"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub n: usize,
    pub output_dir: PathBuf,
    pub width: usize,
    pub height: usize,
    pub shape: PhantomShape,
    pub thickness_px: f64,
    pub edge_softness: f64,
    pub probability_offset: f64,
    pub noise_sd: f64,
    pub mm_per_pixel: f64,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn new(n: usize, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            n,
            output_dir: output_dir.into(),
            width: 512,
            height: 512,
            shape: PhantomShape::Constant,
            thickness_px: 16.0,
            edge_softness: 0.0,
            probability_offset: 0.0,
            noise_sd: 0.0,
            mm_per_pixel: 0.06,
            seed: 0,
        }
    }

    pub fn base_spec(&self) -> PhantomSpec {
        let li_row = (self.height as f64 * 0.55).round();
        let li_curve = match self.shape {
            PhantomShape::Constant => Curve::Constant(li_row),
            PhantomShape::Linear => Curve::Linear {
                start: li_row,
                slope: -0.02,
            },
            PhantomShape::Sinusoidal => Curve::Sinusoidal {
                base: li_row,
                amplitude: (self.height as f64 / 64.0).max(1.0),
                period: self.width as f64 * 0.75,
                phase: 0.0,
            },
        };
        PhantomSpec {
            image_id: crate::phantom::suite_image_id(0),
            width: self.width,
            height: self.height,
            li_curve,
            thickness_curve: Curve::Constant(self.thickness_px),
            edge_softness: self.edge_softness,
            probability_offset: self.probability_offset,
            mm_per_pixel: self.mm_per_pixel,
            noise_sd: self.noise_sd,
            rng_seed: self.seed,
        }
    }
}

pub fn cmd_phantom(cfg: &PhantomConfig) -> Result<usize> {
    if cfg.n == 0 {
        return Err(CimtError::InvalidConfig(
            "phantom count must be at least 1".into(),
        ));
    }
    let bundles = generate_suite(cfg.n, &cfg.base_spec(), cfg.seed)?;
    write_suite(&cfg.output_dir, &bundles)?;
    Ok(bundles.len())
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone)]
pub struct ReportConfig {
    /// A `per_image.csv` written by `evaluate`.
    pub input: PathBuf,
    pub output_dir: PathBuf,
}

pub const LOA_FILE: &str = "limits_of_agreement.csv";

pub fn cmd_report(cfg: &ReportConfig) -> Result<AgreementReport> {
    let path = &cfg.input;
    let mut reader = csv::Reader::from_path(path).map_err(|e| CimtError::csv(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| CimtError::csv(path, e))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CimtError::Parse {
                source_name: path.display().to_string(),
                line: 1,
                reason: format!("missing column {name:?}"),
            })
    };
    let (id_i, pred_i, ref_i) = (col("image_id")?, col("pred_um")?, col("ref_um")?);
    let mut items = Vec::new();
    let mut ids = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CimtError::csv(path, e))?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let s = rec[i].trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>().map(Some).map_err(|_| CimtError::Parse {
                source_name: path.display().to_string(),
                line: k + 2,
                reason: format!("non-numeric value {s:?}"),
            })
        };
        items.push((parse(pred_i)?, parse(ref_i)?));
        ids.push(rec[id_i].to_string());
    }
    let report = agreement_mutual(&items)?;
    create_dir(&cfg.output_dir)?;
    let rows: Vec<Vec<String>> = ids
        .iter()
        .zip(&items)
        .filter_map(|(id, &(p, q))| {
            let (p, q) = (p?, q?);
            Some(vec![id.clone(), fixed((p + q) / 2.0, 3), fixed(p - q, 3)])
        })
        .collect();
    write_csv(
        &cfg.output_dir.join(BLAND_ALTMAN_FILE),
        &["image_id", "mean_um", "diff_um"],
        &rows,
    )?;
    write_csv(
        &cfg.output_dir.join(LOA_FILE),
        &[
            "n",
            "n_excluded",
            "bias_um",
            "sd_diff_um",
            "loa_low_um",
            "loa_high_um",
        ],
        &[vec![
            report.n.to_string(),
            report.n_excluded.to_string(),
            fixed(report.bias_um, 3),
            opt_fixed(report.sd_diff_um, 3),
            opt_fixed(report.loa_low_um, 3),
            opt_fixed(report.loa_high_um, 3),
        ]],
    )?;
    Ok(report)
}
