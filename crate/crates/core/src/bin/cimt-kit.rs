use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use cimt_kit::band::{AggregationPolicy, DEFAULT_THRESHOLD};
use cimt_kit::calibrator::{parse_grid, Objective};
use cimt_kit::harness::{self, DataOptions, Outcome, PhantomShape, CONFIG_ERROR_EXIT};
use cimt_kit::pipeline::MeasureOptions;
use cimt_kit::splits::{Partition, SplitRatios, DEFAULT_SEEDS};

/// Calibrated CIMT measurement from probability maps.
#[derive(Parser)]
#[command(name = "cimt-kit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure CIMT on every probability map in a directory.
    Measure(MeasureArgs),
    /// Compare predictions with reference contours, or combine seed summaries.
    Evaluate(EvaluateArgs),
    /// Sweep the binarization threshold on validation images.
    Calibrate(CalibrateArgs),
    /// Write patient-level split manifests.
    Split(SplitArgs),
    /// Generate synthetic probability maps with known CIMT.
    Phantom(PhantomArgs),
    /// Bland-Altman data and limits of agreement from per-image results.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory with <id>.prob.pgm files.
    data_root: PathBuf,
    /// Calibration CSV [default: <data_root>/calibration.csv]
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Restrict to images listed in a split manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Partition of the manifest to use.
    #[arg(long, requires = "manifest")]
    partition: Option<Partition>,
    /// Restrict to ids listed one per line.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Working grid height; maps of another height are reported as failures.
    #[arg(long, default_value_t = harness::DEFAULT_TARGET_HEIGHT)]
    target_height: u32,
    /// Accept maps of any height.
    #[arg(long, conflicts_with = "target_height")]
    any_height: bool,
    /// Worker threads [default: all cores]
    #[arg(long)]
    jobs: Option<usize>,
}

impl DataArgs {
    fn options(&self) -> DataOptions {
        DataOptions {
            data_root: self.data_root.clone(),
            calibration: self.calibration.clone(),
            manifest: self.manifest.clone(),
            partition: self.partition,
            ids: self.ids.clone(),
            target_height: (!self.any_height).then_some(self.target_height),
            jobs: self.jobs,
        }
    }
}

#[derive(Args)]
struct MeasureArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// mean | median | trimmed:<fraction>
    #[arg(long, default_value = "mean")]
    aggregation: AggregationPolicy,
    /// Keep only the largest 8-connected component.
    #[arg(long)]
    largest_component: bool,
    /// Also write binary masks to <output>/masks.
    #[arg(long)]
    export_masks: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory with <id>.prob.pgm files (omit with --combine).
    #[arg(required_unless_present = "combine")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    partition: Option<Partition>,
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long, default_value_t = harness::DEFAULT_TARGET_HEIGHT)]
    target_height: u32,
    #[arg(long, conflicts_with = "target_height")]
    any_height: bool,
    #[arg(long)]
    jobs: Option<usize>,
    /// Directory with reference contours or masks [default: data_root]
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    /// Binarization threshold [default: calibrated, else 0.5]
    #[arg(long)]
    threshold: Option<f64>,
    /// calibration.txt written by `calibrate`.
    #[arg(long)]
    calibrated: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    baseline_threshold: f64,
    #[arg(long, default_value = "mean")]
    aggregation: AggregationPolicy,
    #[arg(long)]
    largest_component: bool,
    /// Seed label for the summary row.
    #[arg(long)]
    seed: Option<u64>,
    /// Combine per-seed summary.csv files into mean ± sd (repeatable).
    #[arg(long, conflicts_with = "data_root")]
    combine: Vec<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    /// Threshold grid as start:stop:step or a comma list [default: 0.05:0.95:0.05]
    #[arg(long)]
    grid: Option<String>,
    /// Temperatures for the scaling ablation [default: 0.5,1,2,5]
    #[arg(long)]
    temperatures: Option<String>,
    /// mae_um | rmse_um | abs_bias_um
    #[arg(long, default_value = "mae_um")]
    objective: Objective,
    #[arg(long, default_value = "mean")]
    aggregation: AggregationPolicy,
    #[arg(long)]
    largest_component: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Directory with <id>.prob.pgm files, used when no id source is given.
    data_root: Option<PathBuf>,
    /// Image ids one per line.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Take image ids from a calibration CSV.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Split seed (repeatable) [default: 42 123 999]
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// train,val,test fractions
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: SplitRatios,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 28)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 512)]
    height: usize,
    /// constant | linear | sinusoidal
    #[arg(long, default_value = "constant")]
    shape: PhantomShape,
    #[arg(long, default_value_t = 16.0)]
    thickness: f64,
    /// Sigmoid edge width in pixels; 0 gives a hard band.
    #[arg(long, default_value_t = 0.0)]
    softness: f64,
    /// Constant added to every probability before clamping.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    offset: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.06)]
    mm_per_pixel: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// per_image.csv written by `evaluate`.
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Measure(a) => {
            let cfg = harness::MeasureConfig {
                data: a.data.options(),
                output_dir: a.output,
                measure: MeasureOptions {
                    threshold: a.threshold,
                    aggregation: a.aggregation,
                    largest_component: a.largest_component,
                },
                export_masks: a.export_masks,
            };
            Ok(harness::cmd_measure(&cfg)?)
        }
        Command::Evaluate(a) => {
            if !a.combine.is_empty() {
                std::fs::create_dir_all(&a.output)
                    .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", a.output.display()))?;
                let cells =
                    harness::combine_seed_summaries(&a.combine, &a.output.join("seeds.csv"))?;
                for (name, value) in cells {
                    println!("{name}: {value}");
                }
                return Ok(Outcome::Success);
            }
            let data_root = a.data_root.context("data root is required")?;
            let data = DataOptions {
                data_root,
                calibration: a.calibration,
                manifest: a.manifest,
                partition: a.partition,
                ids: a.ids,
                target_height: (!a.any_height).then_some(a.target_height),
                jobs: a.jobs,
            };
            let mut cfg = harness::EvaluateConfig::new(data, a.output);
            cfg.references = a.references;
            cfg.threshold = a.threshold;
            cfg.calibrated = a.calibrated;
            cfg.baseline_threshold = a.baseline_threshold;
            cfg.aggregation = a.aggregation;
            cfg.largest_component = a.largest_component;
            cfg.seed = a.seed;
            let (outcome, summary) = harness::cmd_evaluate(&cfg)?;
            println!(
                "n={} dice={:.4} iou={:.4} threshold={:.3}",
                summary.n, summary.mean_dice, summary.mean_iou, summary.threshold
            );
            if let Some(ag) = &summary.agreement {
                println!(
                    "mae_um={:.2} rmse_um={:.2} bias_um={:.2}",
                    ag.mae_um, ag.rmse_um, ag.bias_um
                );
            }
            Ok(outcome)
        }
        Command::Calibrate(a) => {
            let mut calibration = harness::default_calibration_config(
                a.aggregation,
                a.objective,
                a.largest_component,
            );
            if let Some(g) = &a.grid {
                calibration.threshold_grid = parse_grid(g)?;
            }
            if let Some(t) = &a.temperatures {
                calibration.temperature_grid = parse_grid(t)?;
            }
            let cfg = harness::CalibrateConfig {
                data: a.data.options(),
                references: a.references,
                output_dir: a.output,
                calibration,
            };
            let (outcome, sweep) = harness::cmd_calibrate(&cfg)?;
            println!(
                "best_threshold={:.3} {}={:.3}",
                sweep.best_threshold, sweep.objective, sweep.best_objective
            );
            Ok(outcome)
        }
        Command::Split(a) => {
            let cfg = harness::SplitConfig {
                ids: a.ids,
                calibration: a.calibration,
                data_root: a.data_root,
                seeds: if a.seeds.is_empty() {
                    DEFAULT_SEEDS.to_vec()
                } else {
                    a.seeds
                },
                ratios: a.ratios,
                output_dir: a.output,
            };
            for m in harness::cmd_split(&cfg)? {
                println!(
                    "seed={} train={} val={} test={}",
                    m.seed,
                    m.patients_in(Partition::Train),
                    m.patients_in(Partition::Val),
                    m.patients_in(Partition::Test)
                );
            }
            Ok(Outcome::Success)
        }
        Command::Phantom(a) => {
            let mut cfg = harness::PhantomConfig::new(a.n, a.output);
            cfg.seed = a.seed;
            cfg.width = a.width;
            cfg.height = a.height;
            cfg.shape = a.shape;
            cfg.thickness_px = a.thickness;
            cfg.edge_softness = a.softness;
            cfg.probability_offset = a.offset;
            cfg.noise_sd = a.noise;
            cfg.mm_per_pixel = a.mm_per_pixel;
            let n = harness::cmd_phantom(&cfg)?;
            println!("wrote {n} phantoms to {}", cfg.output_dir.display());
            Ok(Outcome::Success)
        }
        Command::Report(a) => {
            let report = harness::cmd_report(&harness::ReportConfig {
                input: a.input,
                output_dir: a.output,
            })?;
            println!("n={} bias_um={:.2}", report.n, report.bias_um);
            if let (Some(lo), Some(hi)) = (report.loa_low_um, report.loa_high_um) {
                println!("loa_um=[{lo:.2}, {hi:.2}]");
            }
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("CIMT_KIT_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(outcome) => {
            if let Outcome::PartialFailure { failed } = outcome {
                eprintln!("{failed} image(s) failed; see failures.csv");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CONFIG_ERROR_EXIT as u8)
        }
    }
}
