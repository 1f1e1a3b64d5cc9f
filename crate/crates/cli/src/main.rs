//! `kag`: train MNIST MLPs and measure Kolmogorov-Arnold geometry.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 data error, 4 partial sweep (failed or unfinished cells).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kag_core::experiment::runner::{read_csv, PER_INPUT_CSV};
use kag_core::experiment::{
    aggregate_dir, emit_report, ExperimentConfig, PerInputRecord, ReportFormat, RunOptions,
    RunSummary, Runner, Stages,
};
use kag_core::metrics::RotationSide;
use kag_core::minors::{MinorCaps, MinorPlan, MinorSample};
use kag_core::mlp::{layer_jacobian, read_snapshot, Layer, Regime};
use kag_core::mnist::{MnistData, NormalizationSpec, IMAGE_PIXELS};
use kag_core::spatial::PatchRegion;
use kag_core::{participation_ratio, Error};

#[derive(Parser)]
#[command(name = "kag", version, about)]
struct Cli {
    /// Experiment configuration (TOML). Defaults to `<out>/config.toml`
    /// when that exists, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Result directory; overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true, env = "KAG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train every (h, seed, regime) cell and store snapshots.
    Train(TrainOpts),
    /// Unrestricted minor metrics for every stored snapshot.
    Analyze {
        #[command(flatten)]
        minors: MinorOpts,
        /// Recompute even when results are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Metrics with minor columns restricted to balls, patches or
    /// separated pixels.
    Spatial {
        #[command(flatten)]
        spatial: SpatialOpts,
        #[arg(long)]
        force: bool,
    },
    /// Train, analyze, spatial, aggregate and report in one go.
    All {
        #[command(flatten)]
        train: TrainOpts,
        #[command(flatten)]
        minors: MinorOpts,
        #[command(flatten)]
        spatial: SpatialOpts,
        #[arg(long)]
        force: bool,
    },
    /// Mean and ±2 SD over seeds into summary.csv / summary.json.
    Aggregate,
    /// Emit tables and SVG charts from the aggregated results.
    Report {
        #[arg(long, value_delimiter = ',', default_values = ["csv", "json", "svg"])]
        format: Vec<String>,
        /// Defaults to `<out>/report`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Dump the minors of one snapshot's Jacobian at one test image.
    Minors(MinorsArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args, Default)]
struct TrainOpts {
    /// Hidden widths, e.g. `64,128,256`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Seeds as a list (`0,1`) or inclusive range (`0..4`).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train only the augmented regime.
    #[arg(long, conflicts_with = "regimes")]
    augment: bool,
    /// Regimes to train, e.g. `standard,augmented`.
    #[arg(long, value_delimiter = ',')]
    regimes: Option<Vec<Regime>>,
    #[arg(long)]
    max_shift: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Args, Default)]
struct MinorOpts {
    /// Minor orders, e.g. `1,2,3`.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    row_cap: Option<usize>,
    #[arg(long)]
    col_cap: Option<usize>,
    #[arg(long)]
    pair_budget: Option<usize>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    minor_seed: Option<u64>,
    /// Number of random rotations for the rotation ratio.
    #[arg(long)]
    rotations: Option<usize>,
    #[arg(long)]
    rotation_side: Option<Side>,
    /// Evaluation images on which rotations are measured.
    #[arg(long)]
    rotation_images: Option<usize>,
    /// Fixed evaluation images drawn from the test split.
    #[arg(long)]
    eval_images: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Hidden,
    Input,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Ball,
    Patch,
    Separated,
}

#[derive(Args, Default)]
struct SpatialOpts {
    /// Condition families to run; others are skipped.
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<Mode>>,
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// `all` or a list such as `top_left,center`.
    #[arg(long, value_delimiter = ',')]
    regions: Option<Vec<String>>,
    #[arg(long = "min-dist", value_delimiter = ',')]
    min_dists: Option<Vec<f64>>,
    /// Leading evaluation images used for spatial conditions.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args)]
struct MinorsArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value = "L1")]
    layer: Layer,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    input: usize,
    #[arg(long = "k", default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 10_000)]
    row_cap: usize,
    #[arg(long, default_value_t = 10_000)]
    col_cap: usize,
    #[arg(long, default_value_t = 100_000)]
    pair_budget: usize,
    #[arg(long, default_value_t = 500)]
    chunk: usize,
    #[arg(long, default_value_t = 42)]
    minor_seed: u64,
    /// CSV destination (`k,rows,cols,value`).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(SeedList)
}

enum Failure {
    Config(String),
    Data(String),
    Partial(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else if matches!(e, Error::EmptyResults(_)) {
            Failure::Data(e.to_string())
        } else {
            Failure::Other(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = match (&cli.config, &cli.out) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(out)) if out.join("config.toml").exists() => Some(out.join("config.toml")),
        _ => None,
    };
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut ExperimentConfig, t: &TrainOpts) {
    if let Some(v) = &t.hidden {
        cfg.hidden_dims = v.clone();
    }
    if let Some(v) = &t.seeds {
        cfg.seeds = v.0.clone();
    }
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.eval_every {
        cfg.eval_every = v;
    }
    if t.augment {
        cfg.regimes = vec![Regime::Augmented];
    }
    if let Some(v) = &t.regimes {
        cfg.regimes = v.clone();
    }
    if let Some(v) = t.max_shift {
        cfg.optimizer.max_shift = v;
    }
    if t.train_limit.is_some() {
        cfg.train_limit = t.train_limit;
    }
}

fn apply_minors(cfg: &mut ExperimentConfig, m: &MinorOpts) {
    let c = &mut cfg.minors;
    if let Some(v) = &m.ks {
        c.ks = v.clone();
    }
    if let Some(v) = m.row_cap {
        c.row_cap = v;
    }
    if let Some(v) = m.col_cap {
        c.col_cap = v;
    }
    if let Some(v) = m.pair_budget {
        c.pair_budget = Some(v);
    }
    if let Some(v) = m.chunk {
        c.chunk = v;
    }
    if let Some(v) = m.minor_seed {
        c.seed = v;
    }
    if let Some(v) = m.rotations {
        cfg.rotation.count = v;
    }
    if let Some(v) = m.rotation_side {
        cfg.rotation.side = match v {
            Side::Hidden => RotationSide::Hidden,
            Side::Input => RotationSide::Input,
        };
    }
    if let Some(v) = m.rotation_images {
        cfg.rotation.images = v;
    }
    if let Some(v) = m.eval_images {
        cfg.eval_images = v;
    }
}

fn apply_spatial(cfg: &mut ExperimentConfig, s: &SpatialOpts) -> Result<(), Failure> {
    let c = &mut cfg.spatial;
    if let Some(v) = &s.radii {
        c.radii = v.clone();
    }
    if let Some(v) = &s.regions {
        c.regions = if v.iter().any(|r| r == "all") {
            PatchRegion::ALL.to_vec()
        } else {
            v.iter()
                .map(|r| r.parse())
                .collect::<Result<_, Error>>()
                .map_err(|e| Failure::Config(e.to_string()))?
        };
    }
    if let Some(v) = &s.min_dists {
        c.min_dists = v.clone();
    }
    if let Some(v) = s.images {
        c.images = Some(v);
    }
    if let Some(v) = s.repetitions {
        c.ball_repetitions = v;
    }
    if let Some(modes) = &s.mode {
        if !modes.contains(&Mode::Ball) {
            c.radii.clear();
        }
        if !modes.contains(&Mode::Patch) {
            c.regions.clear();
        }
        if !modes.contains(&Mode::Separated) {
            c.min_dists.clear();
        }
    }
    Ok(())
}

fn load_data(cli: &Cli) -> Result<Arc<MnistData>, Failure> {
    let dir = MnistData::resolve_dir(cli.data_dir.as_deref());
    MnistData::load(&dir).map(Arc::new).map_err(|e| {
        Failure::Data(format!(
            "{e}\nexpected MNIST IDX files in {} (set --data-dir or {})",
            dir.display(),
            MnistData::DIR_ENV
        ))
    })
}

fn progress(cli: &Cli) -> Option<kag_core::experiment::runner::ProgressFn> {
    (!cli.quiet).then(|| Arc::new(|msg: &str| eprintln!("{msg}")) as _)
}

fn run_sweep(
    cli: &Cli,
    cfg: ExperimentConfig,
    stages: Stages,
    force: bool,
) -> Result<RunSummary, Failure> {
    cfg.validate()?;
    let data = load_data(cli)?;
    let runner = Runner::new(cfg, data)?;
    let summary = runner.run(&RunOptions {
        stages,
        force_reanalysis: force,
        progress: progress(cli),
        ..RunOptions::default()
    })?;
    report_summary(cli, &summary);
    Ok(summary)
}

fn report_summary(cli: &Cli, s: &RunSummary) {
    if cli.quiet {
        return;
    }
    eprintln!(
        "{} cells complete, {} failed, {} incomplete",
        s.completed.len(),
        s.failed.len(),
        s.incomplete.len()
    );
    for (id, err) in &s.failed {
        eprintln!("  failed {id}: {err}");
    }
}

/// `all_stages`: cells missing a later stage count as unfinished. A single
/// stage run only fails on failed or interrupted cells.
fn partial_check(s: &RunSummary, all_stages: bool) -> Result<(), Failure> {
    let ok = if all_stages {
        s.is_complete()
    } else {
        s.failed.is_empty() && !s.interrupted
    };
    if ok {
        Ok(())
    } else {
        Err(Failure::Partial(format!(
            "sweep incomplete: {} failed, {} unfinished",
            s.failed.len(),
            s.incomplete.len()
        )))
    }
}

fn aggregate(cli: &Cli, dir: &Path) -> Result<(), Failure> {
    let summary = aggregate_dir(dir)?;
    emit_report(&summary, &[], ReportFormat::Csv, dir)?;
    emit_report(&summary, &[], ReportFormat::Json, dir)?;
    if !cli.quiet {
        eprintln!(
            "{} summary rows written to {}",
            summary.rows.len(),
            dir.display()
        );
    }
    Ok(())
}

fn report(
    cli: &Cli,
    dir: &Path,
    formats: &[String],
    report_dir: Option<&Path>,
) -> Result<(), Failure> {
    let formats = formats
        .iter()
        .map(|f| f.parse::<ReportFormat>())
        .collect::<Result<Vec<_>, _>>()?;
    let summary = aggregate_dir(dir)?;
    let per_input_path = dir.join(PER_INPUT_CSV);
    let per_input: Vec<PerInputRecord> = if per_input_path.exists() {
        read_csv(&per_input_path)?
    } else {
        Vec::new()
    };
    let out = report_dir.map_or_else(|| dir.join("report"), Path::to_path_buf);
    for f in formats {
        for path in emit_report(&summary, &per_input, f, &out)? {
            if !cli.quiet {
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn dump_minors(cli: &Cli, a: &MinorsArgs) -> Result<(), Failure> {
    let (snap, digest) = read_snapshot(&a.snapshot)?;
    let data = load_data(cli)?;
    if a.input >= data.test_images.len() {
        return Err(Failure::Config(format!(
            "input {} outside the test split ({} images)",
            a.input,
            data.test_images.len()
        )));
    }
    let norm = NormalizationSpec::MNIST;
    let x: Vec<f64> = data
        .test_images
        .image(a.input)
        .iter()
        .map(|&p| norm.apply(p))
        .collect();
    let j = layer_jacobian(&snap.params, &x, a.layer);
    let caps = MinorCaps {
        row_cap: a.row_cap,
        col_cap: a.col_cap,
        pair_budget: Some(a.pair_budget),
    };
    let plan = MinorPlan::sample(j.rows(), IMAGE_PIXELS, a.k, caps, a.minor_seed, None)?;
    let sample = MinorSample::evaluate(Arc::new(plan), j.entries.view(), a.chunk)?;
    sample.write_dump(&a.output)?;
    println!(
        "snapshot {} (sha256 {}), {} minors, PR {:.6e}",
        a.snapshot.display(),
        &digest[..12],
        sample.len(),
        participation_ratio(&sample.values)?
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let only = |train, analyze, spatial| Stages {
        train,
        analyze,
        spatial,
    };
    match &cli.command {
        Command::Train(t) => {
            apply_train(&mut cfg, t);
            partial_check(
                &run_sweep(cli, cfg, only(true, false, false), false)?,
                false,
            )
        }
        Command::Analyze { minors, force } => {
            apply_minors(&mut cfg, minors);
            partial_check(
                &run_sweep(cli, cfg, only(false, true, false), *force)?,
                false,
            )
        }
        Command::Spatial { spatial, force } => {
            apply_spatial(&mut cfg, spatial)?;
            cfg.spatial.enabled = true;
            partial_check(
                &run_sweep(cli, cfg, only(false, false, true), *force)?,
                false,
            )
        }
        Command::All {
            train,
            minors,
            spatial,
            force,
        } => {
            apply_train(&mut cfg, train);
            apply_minors(&mut cfg, minors);
            apply_spatial(&mut cfg, spatial)?;
            let dir = cfg.output_dir.clone();
            let summary = run_sweep(cli, cfg, Stages::ALL, *force)?;
            if !summary.completed.is_empty() {
                let formats = ["csv", "json", "svg"].map(String::from);
                report(cli, &dir, &formats, None)?;
                aggregate(cli, &dir)?;
            }
            partial_check(&summary, true)
        }
        Command::Aggregate => aggregate(cli, &cfg.output_dir),
        Command::Report { format, report_dir } => {
            report(cli, &cfg.output_dir, format, report_dir.as_deref())
        }
        Command::Minors(a) => dump_minors(cli, a),
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Other(m) => (1, m),
                Failure::Config(m) => (2, m),
                Failure::Data(m) => (3, m),
                Failure::Partial(m) => (4, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
