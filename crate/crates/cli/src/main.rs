//! wildflow command line: generate synthetic parks, train models, score
//! months, evaluate held-out years, and compare models.
//!
//! Every failure exits nonzero with a single line `E<code>: message`:
//! E1 config parse, E2 schema or argument, E3 numeric, E4 missing artifact.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wildflow_core::data::{load_dataset, save_dataset, window_split, MonthKey, ParkDataset};
use wildflow_core::error::Error;
use wildflow_core::eval::{
    case_study, evaluate, predict_month, realized_visits, save_case_study, EvalReport,
    MonthPrediction, RegionSchedule, RegionSpec,
};
use wildflow_core::synth::{generate_park, GeneratorConfig};
use wildflow_core::train::{
    train_ablation, train_baseline, train_wildflow, write_train_log, AblationKind, BaselineKind,
    LogRow, ModelKind, TrainedModel,
};

use crate::config::{load_run_config, parse_model_kind, RunConfig};

#[derive(Parser)]
#[command(
    name = "wildflow",
    version,
    about = "Spatiotemporal event-risk forecasting from ranger patrol records"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic park dataset from a config file.
    Gen(GenArgs),
    /// Train one model on the years before the held-out test year.
    Train(TrainArgs),
    /// Score every cell of one month with a trained checkpoint.
    Predict(PredictArgs),
    /// Evaluate a checkpoint over the held-out test year.
    Eval(EvalArgs),
    /// Train and evaluate wildflow next to its two ablations.
    Ablate(AblateArgs),
    /// Compare where one report most outperforms another, feature by feature.
    CaseStudy(CaseStudyArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Run config (TOML).
    config: PathBuf,
    /// Dataset output directory; defaults to `paths.data_dir` from the config.
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Run config (TOML).
    config: PathBuf,
    /// Dataset directory; defaults to `paths.data_dir` from the config.
    data_dir: Option<PathBuf>,
    /// Output directory; defaults to `paths.out_dir` from the config.
    out_dir: Option<PathBuf>,
    /// Model kind to train; defaults to `model` from the config.
    #[arg(long, value_parser = MODEL_KINDS)]
    model: Option<String>,
}

#[derive(clap::Args)]
struct PredictArgs {
    /// Checkpoint directory written by `train`.
    checkpoint: PathBuf,
    /// Dataset directory.
    data_dir: PathBuf,
    /// Output CSV path.
    out: PathBuf,
    /// Year of the month to score.
    #[arg(long)]
    year: i32,
    /// Month to score (1-12).
    #[arg(long)]
    month: u8,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    checkpoint: PathBuf,
    /// Dataset directory.
    data_dir: PathBuf,
    /// Directory for the report files.
    out_dir: PathBuf,
    /// Held-out test year; defaults to the last year in the dataset.
    #[arg(long)]
    test_year: Option<i32>,
    /// When the high-risk regions are recomputed.
    #[arg(long, value_enum, default_value_t = ScheduleArg::Monthly)]
    region_schedule: ScheduleArg,
    /// Number of region seed cells.
    #[arg(long, default_value_t = 20)]
    seed_count: usize,
    /// Maximum cells per region.
    #[arg(long, default_value_t = 25)]
    max_region_size: usize,
}

#[derive(clap::Args)]
struct AblateArgs {
    /// Run config (TOML).
    config: PathBuf,
    /// Dataset directory; defaults to `paths.data_dir` from the config.
    data_dir: Option<PathBuf>,
    /// Output directory; defaults to `paths.out_dir` from the config.
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CaseStudyArgs {
    /// Report directory of the model being highlighted.
    report_a: PathBuf,
    /// Report directory of the model compared against.
    report_b: PathBuf,
    /// Dataset directory the reports were computed on.
    data_dir: PathBuf,
    /// Output CSV path.
    out: PathBuf,
    /// Fraction of cell-months, by lowest log-loss difference A minus B.
    #[arg(long, default_value_t = 0.1)]
    quantile: f64,
}

const MODEL_KINDS: [&str; 6] = [
    "wildflow",
    "logreg",
    "mlp",
    "gnn",
    "no_composite_base",
    "no_detection_head",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Monthly,
    Fixed,
}

impl From<ScheduleArg> for RegionSchedule {
    fn from(s: ScheduleArg) -> RegionSchedule {
        match s {
            ScheduleArg::Monthly => RegionSchedule::Monthly,
            ScheduleArg::Fixed => RegionSchedule::Fixed,
        }
    }
}

/// Exit code (1-4) plus a one-line message.
struct CliError {
    code: u8,
    message: String,
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        let code = match &e {
            Error::Parse { .. } | Error::Schema { .. } | Error::InvalidArgument(_) => 2,
            Error::Numeric { .. } | Error::UndefinedMetric(_) => 3,
            Error::MissingArtifact(_) | Error::Io(_) => 4,
        };
        CliError {
            code,
            message: single_line(&e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        Error::Io(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("E2: {}", single_line(&e.to_string()));
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help or --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::CaseStudy(args) => cmd_case_study(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("E{}: {}", e.code, e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Loads a config, classifying TOML parse failures as E1.
fn load_config(path: &Path) -> CliResult<RunConfig> {
    load_run_config(path).map_err(|e| match e {
        parse @ Error::Parse { .. } => CliError {
            code: 1,
            message: single_line(&parse.to_string()),
        },
        other => other.into(),
    })
}

fn resolve_dir(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        Error::invalid(format!(
            "no {what} given on the command line or under [paths] in the config"
        ))
        .into()
    })
}

fn last_year(ds: &ParkDataset) -> i32 {
    ds.months().last().expect("datasets hold at least one month").year
}

fn check_feature_dim(model: &TrainedModel, ds: &ParkDataset) -> CliResult<()> {
    if model.feature_dim != ds.feature_dim() {
        return Err(Error::schema(
            "model.json",
            format!(
                "checkpoint expects feature dimension {} but the dataset provides {}",
                model.feature_dim,
                ds.feature_dim()
            ),
        )
        .into());
    }
    Ok(())
}

fn csv_write_err(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io).into(),
        other => Error::invalid(format!("csv write failure: {other:?}")).into(),
    }
}

#[derive(Serialize)]
struct GeneratorManifest<'a> {
    generator: &'a GeneratorConfig,
    files: Vec<&'static str>,
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let out = resolve_dir(args.out_dir, &config.paths.data_dir, "output directory")?;
    let ds = generate_park(&config.generator)?;
    save_dataset(&ds, &out)?;
    let manifest = GeneratorManifest {
        generator: &config.generator,
        files: vec!["cells.csv", "dynamics.csv", "visits.csv", "ground_truth.csv"],
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::from(Error::schema("generator_manifest.json", e.to_string())))?;
    std::fs::write(out.join("generator_manifest.json"), json + "\n")?;
    println!(
        "generated {} cells x {} months into {}",
        ds.node_count(),
        ds.months().len(),
        out.display()
    );
    Ok(())
}

fn train_model(
    kind: ModelKind,
    ds: &ParkDataset,
    config: &RunConfig,
) -> Result<(TrainedModel, Vec<LogRow>), Error> {
    match kind {
        ModelKind::Wildflow => train_wildflow(ds, &config.train, &config.flow),
        ModelKind::Logreg => train_baseline(BaselineKind::Logreg, ds, &config.train, &config.flow),
        ModelKind::Mlp => train_baseline(BaselineKind::Mlp, ds, &config.train, &config.flow),
        ModelKind::Gnn => train_baseline(BaselineKind::Gnn, ds, &config.train, &config.flow),
        ModelKind::WildflowNoBase => {
            train_ablation(AblationKind::NoCompositeBase, ds, &config.train, &config.flow)
        }
        ModelKind::WildflowNoDet => {
            train_ablation(AblationKind::NoDetectionHead, ds, &config.train, &config.flow)
        }
    }
}

/// Trains `kind` on the window before the test year and writes its
/// checkpoint directory, named after the kind, under `out`.
fn train_into(
    kind: ModelKind,
    ds: &ParkDataset,
    config: &RunConfig,
    out: &Path,
) -> CliResult<PathBuf> {
    let test_year = config.eval.test_year.unwrap_or_else(|| last_year(ds));
    let (train_ds, _) = window_split(ds, test_year, config.eval.train_window_years)?;
    let (model, log) = train_model(kind, &train_ds, config)?;
    let dir = out.join(kind.name());
    model.save(&dir)?;
    write_train_log(&dir.join("train_log.csv"), &log)?;
    Ok(dir)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let data_dir = resolve_dir(args.data_dir, &config.paths.data_dir, "data directory")?;
    let out = resolve_dir(args.out_dir, &config.paths.out_dir, "output directory")?;
    let kind = match &args.model {
        Some(name) => parse_model_kind(name)?,
        None => config.model,
    };
    let ds = load_dataset(&data_dir)?;
    let dir = train_into(kind, &ds, &config, &out)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn write_scores(path: &Path, pred: &MonthPrediction) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_write_err)?;
    w.write_record(["cell_id", "risk", "p_any"]).map_err(csv_write_err)?;
    for (cell, (risk, p_any)) in pred.risk.iter().zip(&pred.p_any).enumerate() {
        w.write_record(&[cell.to_string(), format!("{risk}"), format!("{p_any}")])
            .map_err(csv_write_err)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CliResult<()> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data_dir)?;
    check_feature_dim(&model, &ds)?;
    let key = MonthKey::new(args.year, args.month)?;
    let t = ds
        .month_index(key)
        .ok_or_else(|| CliError::from(Error::invalid(format!("month {key} is not in the dataset"))))?;
    let planned = realized_visits(&ds, t);
    let pred = predict_month(&model, &ds, t, &planned)?;
    write_scores(&args.out, &pred)?;
    println!("scores for {key} written to {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let model = TrainedModel::load(&args.checkpoint)?;
    let ds = load_dataset(&args.data_dir)?;
    check_feature_dim(&model, &ds)?;
    let test_year = args.test_year.unwrap_or_else(|| last_year(&ds));
    let spec = RegionSpec {
        schedule: args.region_schedule.into(),
        seed_count: args.seed_count,
        max_region_size: args.max_region_size,
    };
    let report = evaluate(&model, &ds, test_year, &spec)?;
    report.save(&args.out_dir)?;
    println!(
        "{} test year {}: aupr {} over {} cell-months; report written to {}",
        model.kind.name(),
        test_year,
        report.summary.aupr,
        report.summary.cell_months,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let data_dir = resolve_dir(args.data_dir, &config.paths.data_dir, "data directory")?;
    let out = resolve_dir(args.out_dir, &config.paths.out_dir, "output directory")?;
    let ds = load_dataset(&data_dir)?;
    let test_year = config.eval.test_year.unwrap_or_else(|| last_year(&ds));
    for kind in [
        ModelKind::Wildflow,
        ModelKind::WildflowNoBase,
        ModelKind::WildflowNoDet,
    ] {
        let dir = train_into(kind, &ds, &config, &out)?;
        let model = TrainedModel::load(&dir)?;
        let report = evaluate(&model, &ds, test_year, &config.eval.regions)?;
        report.save(&dir)?;
        println!("{} test year {}: aupr {}", kind.name(), test_year, report.summary.aupr);
    }
    Ok(())
}

fn feature_names(ds: &ParkDataset) -> Vec<String> {
    let d_static = ds.static_dim();
    let d_dynamic = ds.feature_dim() - d_static;
    (1..=d_static)
        .map(|i| format!("static_feature_{i}"))
        .chain((1..=d_dynamic).map(|i| format!("dynamic_feature_{i}")))
        .collect()
}

fn cmd_case_study(args: CaseStudyArgs) -> CliResult<()> {
    let report_a = EvalReport::load(&args.report_a)?;
    let report_b = EvalReport::load(&args.report_b)?;
    let ds = load_dataset(&args.data_dir)?;
    let names = feature_names(&ds);
    let table = case_study(&report_a, &report_b, &ds, &names, args.quantile)?;
    save_case_study(&table, &args.out)?;
    println!(
        "feature medians over the {} best-separated cell-months written to {}",
        table.subset_size,
        args.out.display()
    );
    Ok(())
}
