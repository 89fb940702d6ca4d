//! Command-line surface: schedules, datasets, training, generation,
//! editing, analysis, and benchmarks.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation failure, 3 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lpd::analysis::{near_mass, pta_csv, pta_profile};
use lpd::data::{dataset_load, dataset_save, gen_grid, DataConfig, TokenGrid};
use lpd::generator::{generate, prefill_and_generate, EditOrder, SamplingParams};
use lpd::grid::{GridPos, GridSpec};
use lpd::manifest::{KvFile, Manifest};
use lpd::metrics::{cooccurrence_divergence, teacher_forced_nll};
use lpd::model::{init, load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use lpd::schedule::{
    cosine_group_sizes, farthest_point_sampling, halton_order, locality_aware_order, random_order,
    raster_order, read_schedule_text, validate_schedule, write_schedule_text, FirstTokenPolicy,
    GroupSizes, OrderSchedule, ScheduleMeta, SchedulerConfig,
};
use lpd::trainer::{metrics_csv, train, TrainConfig};

enum CliError {
    Usage(String),
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn usage_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn validation_err(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Parser)]
#[command(name = "lpd", about = "Parallel decoding lab for token grids", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, validate, or compare generation-order schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Synthesize a dataset of token grids.
    Data(DataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Generate grids from a checkpoint.
    Generate(GenerateArgs),
    /// Regenerate the unknown region of an existing grid.
    Edit(EditArgs),
    /// Record attention during generation and report its locality profile.
    Analyze(AnalyzeArgs),
    /// Time generation across step counts on one checkpoint.
    Bench(BenchArgs),
    /// Run a preset ablation and report co-occurrence divergences.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchedulerKind {
    Raster,
    Random,
    Halton,
    /// Locality-aware order (proximity + repulsion + FPS remainder).
    Lpd,
    /// Proximity principle only: repulsion disabled.
    LpdNear,
    /// Dispersion principle only: farthest point sampling each step.
    LpdFps,
}

impl SchedulerKind {
    fn name(self) -> &'static str {
        match self {
            SchedulerKind::Raster => "raster",
            SchedulerKind::Random => "random",
            SchedulerKind::Halton => "halton",
            SchedulerKind::Lpd => "lpd",
            SchedulerKind::LpdNear => "lpd-near",
            SchedulerKind::LpdFps => "lpd-fps",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FirstTokenArg {
    Center,
    Random,
}

#[derive(Subcommand)]
enum ScheduleAction {
    /// Build a schedule and write it as a text file.
    Build(ScheduleBuildArgs),
    /// Check a schedule file; exits 2 with a report if invalid.
    Validate {
        #[arg(long)]
        file: PathBuf,
    },
    /// Validate-statistics CSV across schedulers and seeds.
    Compare {
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 32)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ScheduleBuildArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    scheduler: Option<SchedulerKind>,
    #[arg(long)]
    near_cutoff: Option<f64>,
    #[arg(long)]
    repulsion: Option<f64>,
    #[arg(long, value_enum)]
    first_token: Option<FirstTokenArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the per-step position listing as text grids.
    #[arg(long)]
    print_grids: bool,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    smoothness: Option<f64>,
    /// Comma-separated per-class anisotropy exponents.
    #[arg(long)]
    anisotropy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    cond_dropout: Option<f64>,
    /// Comma-separated step-count menu.
    #[arg(long)]
    step_menu: Option<String>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "lpd")]
    scheduler: SchedulerKind,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    top_k: Option<usize>,
    /// Disable mutual visibility within a step (ablation).
    #[arg(long)]
    no_mutual_visibility: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KnownRegion {
    /// Left half of the grid is kept.
    Half,
    /// Top half is kept.
    Top,
    /// Every other cell is kept.
    Checker,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file supplying the input grid.
    #[arg(long)]
    data: PathBuf,
    /// Index of the input grid in the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, value_enum, default_value = "half")]
    known_mask: KnownRegion,
    #[arg(long)]
    new_class: usize,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    traces: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, value_enum, default_value = "lpd")]
    scheduler: SchedulerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated step counts.
    #[arg(long, default_value = "256,64,32,20")]
    steps: String,
    #[arg(long, value_enum, default_value = "lpd")]
    scheduler: SchedulerKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationPreset {
    /// Mutual visibility on vs off across a step count.
    Visibility,
    /// Scheduler comparison at a fixed step count.
    Schedulers,
    /// Proximity-only vs dispersion-only vs combined.
    Principles,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    preset: AblationPreset,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference dataset for the divergence metric.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Samples generated per seed.
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output is a success, not a usage error.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Schedule { action } => match action {
            ScheduleAction::Build(args) => schedule_build(args),
            ScheduleAction::Validate { file } => schedule_validate(&file),
            ScheduleAction::Compare { side, steps, seeds, out } => {
                schedule_compare(side, steps, seeds, out.as_deref())
            }
        },
        Command::Data(args) => data_gen(args),
        Command::Train(args) => train_cmd(args),
        Command::Generate(args) => generate_cmd(args),
        Command::Edit(args) => edit_cmd(args),
        Command::Analyze(args) => analyze_cmd(args),
        Command::Bench(args) => bench_cmd(args),
        Command::Ablate(args) => ablate_cmd(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<KvFile, CliError> {
    match path {
        None => Ok(KvFile::default()),
        Some(p) => KvFile::load(p).map_err(|e| match e {
            lpd::manifest::ManifestError::Io(e) => io_err(e),
            other => validation_err(other),
        }),
    }
}

/// Flag beats config file beats default.
fn resolve<T: std::str::FromStr + Copy>(
    flag: Option<T>,
    cfg: &KvFile,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(s) => s
            .parse()
            .map_err(|_| usage_err(format!("config key {key}: cannot parse {s:?}"))),
        None => Ok(default),
    }
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| usage_err(format!("bad {what} entry {t:?}"))))
        .collect()
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(io_err)
}

fn write_manifest(mut manifest: Manifest, outputs: &[(&str, &Path)]) -> Result<(), CliError> {
    if let Ok(threads) = std::env::var("LPD_THREADS") {
        manifest.set("threads", threads);
    }
    let Some((_, first)) = outputs.first() else { return Ok(()) };
    for (label, path) in outputs {
        manifest.hash_artifact(label, path).map_err(io_err)?;
    }
    let mpath = first.with_extension(format!(
        "{}manifest",
        first
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    manifest.save(&mpath).map_err(io_err)
}

fn build_schedule(
    kind: SchedulerKind,
    side: usize,
    steps: usize,
    cfg: &SchedulerConfig,
    seed: u64,
) -> Result<OrderSchedule, CliError> {
    let grid = GridSpec::new(side);
    let sizes = cosine_group_sizes(grid.token_count(), steps).map_err(usage_err)?;
    match kind {
        SchedulerKind::Raster => raster_order(grid, &sizes),
        SchedulerKind::Random => random_order(grid, &sizes, seed),
        SchedulerKind::Halton => halton_order(grid, &sizes),
        SchedulerKind::Lpd => locality_aware_order(grid, &sizes, cfg),
        SchedulerKind::LpdNear => {
            let near_only = SchedulerConfig { repulsion: 0.0, ..*cfg };
            locality_aware_order(grid, &sizes, &near_only)
        }
        SchedulerKind::LpdFps => fps_order(grid, &sizes),
    }
    .map_err(validation_err)
}

/// Dispersion-only schedule: farthest point sampling over the remaining
/// cells at every step, seeded by everything already selected.
fn fps_order(grid: GridSpec, sizes: &GroupSizes) -> Result<OrderSchedule, lpd::schedule::ScheduleError> {
    let mut remaining = grid.positions();
    let mut selected: Vec<GridPos> = Vec::new();
    let mut groups = Vec::with_capacity(sizes.sizes.len());
    for &sz in &sizes.sizes {
        let group = farthest_point_sampling(&remaining, &selected, sz)?;
        remaining.retain(|p| !group.contains(p));
        selected.extend_from_slice(&group);
        groups.push(group);
    }
    Ok(OrderSchedule { grid, groups })
}

/// Per-step position listing: each cell shows the 1-based step that
/// decodes it.
fn schedule_grids_text(s: &OrderSchedule) -> String {
    let side = s.grid.side;
    let mut step_of = vec![0usize; side * side];
    for (k, group) in s.groups.iter().enumerate() {
        for p in group {
            step_of[p.row * side + p.col] = k + 1;
        }
    }
    let width = s.groups.len().to_string().len().max(2);
    let mut out = String::new();
    for r in 0..side {
        for c in 0..side {
            out.push_str(&format!("{:>width$} ", step_of[r * side + c]));
        }
        out.push('\n');
    }
    out
}

fn schedule_build(args: ScheduleBuildArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let side = resolve(args.side, &cfg, "side", 16)?;
    let steps = resolve(args.steps, &cfg, "steps", 20)?;
    let near_cutoff = resolve(args.near_cutoff, &cfg, "near_cutoff", 2.0)?;
    let repulsion = resolve(args.repulsion, &cfg, "repulsion", 2.0)?;
    let seed = resolve(args.seed, &cfg, "seed", 0)?;
    let kind = args.scheduler.unwrap_or(match cfg.get("scheduler") {
        Some("raster") => SchedulerKind::Raster,
        Some("random") => SchedulerKind::Random,
        Some("halton") => SchedulerKind::Halton,
        Some("lpd-near") => SchedulerKind::LpdNear,
        Some("lpd-fps") => SchedulerKind::LpdFps,
        _ => SchedulerKind::Lpd,
    });
    let first_token = match args.first_token.unwrap_or(FirstTokenArg::Center) {
        FirstTokenArg::Center => FirstTokenPolicy::Center,
        FirstTokenArg::Random => FirstTokenPolicy::Random,
    };
    let sched_cfg = SchedulerConfig { near_cutoff, repulsion, first_token, seed };
    let schedule = build_schedule(kind, side, steps, &sched_cfg, seed)?;

    let meta = ScheduleMeta {
        scheduler: kind.name().to_string(),
        seed: Some(seed),
        near_cutoff: Some(near_cutoff),
        repulsion: Some(repulsion),
        first_token: Some(
            match first_token {
                FirstTokenPolicy::Center => "center",
                FirstTokenPolicy::Random => "random",
            }
            .to_string(),
        ),
    };
    let text = write_schedule_text(&schedule, &meta);
    if args.print_grids {
        print!("{}", schedule_grids_text(&schedule));
    }
    match &args.out {
        Some(out) => {
            write_output(out, text.as_bytes())?;
            let mut m = Manifest::new("schedule-build");
            m.set("scheduler", kind.name());
            m.set("side", side);
            m.set("steps", steps);
            m.set("near_cutoff", near_cutoff);
            m.set("repulsion", repulsion);
            m.set("seed", seed);
            write_manifest(m, &[("schedule", out)])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn schedule_validate(file: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(file).map_err(io_err)?;
    let (schedule, _) = read_schedule_text(&text).map_err(validation_err)?;
    let report = validate_schedule(&schedule);
    if report.valid {
        println!("valid: {} steps, {} tokens", schedule.steps(), schedule.grid.token_count());
        Ok(())
    } else {
        Err(validation_err(format!(
            "invalid schedule: {} duplicates {:?}, {} missing, {} out of grid, empty groups {:?}",
            report.duplicates.len(),
            report.duplicates,
            report.missing.len(),
            report.out_of_grid.len(),
            report.empty_groups,
        )))
    }
}

fn schedule_compare(side: usize, steps: usize, seeds: u64, out: Option<&Path>) -> Result<(), CliError> {
    let mut csv = String::from("scheduler,seed,mean_dist_to_context,min_intra_step_dist\n");
    let kinds = [
        SchedulerKind::Raster,
        SchedulerKind::Random,
        SchedulerKind::Halton,
        SchedulerKind::Lpd,
    ];
    for kind in kinds {
        for seed in 0..seeds {
            let cfg = SchedulerConfig { seed, ..SchedulerConfig::default() };
            let s = build_schedule(kind, side, steps, &cfg, seed)?;
            let report = validate_schedule(&s);
            // Aggregate over steps after the first (step 1 has no context).
            let later = &report.step_stats[1..];
            let mean_ctx = later.iter().filter_map(|st| st.mean_dist_to_context).sum::<f64>()
                / later.len() as f64;
            let min_intra = later
                .iter()
                .filter_map(|st| st.min_intra_step_dist)
                .fold(f64::INFINITY, f64::min);
            csv.push_str(&format!("{},{seed},{mean_ctx:.4},{min_intra:.4}\n", kind.name()));
        }
    }
    match out {
        Some(p) => {
            write_output(p, csv.as_bytes())?;
            let mut m = Manifest::new("schedule-compare");
            m.set("side", side);
            m.set("steps", steps);
            m.set("seeds", seeds);
            write_manifest(m, &[("csv", p)])
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn data_gen(args: DataArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let side = resolve(args.side, &cfg, "side", 16)?;
    let vocab = resolve(args.vocab, &cfg, "vocab", 8)?;
    let classes = resolve(args.classes, &cfg, "classes", 2)?;
    let count = resolve(args.count, &cfg, "count", 256)?;
    let smoothness = resolve(args.smoothness, &cfg, "smoothness", 1.5)?;
    let seed = resolve(args.seed, &cfg, "seed", 0)?;
    let aniso_text = args
        .anisotropy
        .or_else(|| cfg.get("anisotropy").map(str::to_string))
        .unwrap_or_else(|| "1.0,-1.0".to_string());
    let anisotropy: Vec<f64> = aniso_text
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| usage_err(format!("bad anisotropy entry {t:?}"))))
        .collect::<Result<_, _>>()?;
    if anisotropy.len() != classes {
        return Err(usage_err(format!(
            "{} anisotropy entries for {} classes",
            anisotropy.len(),
            classes
        )));
    }
    let dc = DataConfig { side, vocab_size: vocab, num_classes: classes, smoothness, anisotropy, seed };
    let grids: Vec<TokenGrid> = (0..count)
        .map(|i| gen_grid(&dc, i % classes, i as u64).map_err(validation_err))
        .collect::<Result<_, _>>()?;
    dataset_save(&args.out, side, vocab, classes, &grids).map_err(io_err)?;
    let mut m = Manifest::new("data-gen");
    m.set("side", side);
    m.set("vocab", vocab);
    m.set("classes", classes);
    m.set("count", count);
    m.set("smoothness", smoothness);
    m.set("anisotropy", aniso_text);
    m.set("seed", seed);
    write_manifest(m, &[("dataset", &args.out)])
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let (header, grids) = dataset_load(&args.data).map_err(|e| match e {
        lpd::data::DataError::Io(e) => io_err(e),
        other => validation_err(other),
    })?;
    let layers = resolve(args.layers, &cfg, "layers", 2)?;
    let heads = resolve(args.heads, &cfg, "heads", 4)?;
    let embed_dim = resolve(args.embed_dim, &cfg, "embed_dim", 48)?;
    let epochs = resolve(args.epochs, &cfg, "epochs", 50)?;
    let batch_size = resolve(args.batch_size, &cfg, "batch_size", 16)?;
    let base_lr = resolve(args.base_lr, &cfg, "base_lr", 1e-3)?;
    let weight_decay = resolve(args.weight_decay, &cfg, "weight_decay", 0.01)?;
    let cond_dropout = resolve(args.cond_dropout, &cfg, "cond_dropout", 0.1)?;
    let val_frac = resolve(args.val_frac, &cfg, "val_frac", 0.1)?;
    let seed = resolve(args.seed, &cfg, "seed", 0)?;
    let menu_text = args
        .step_menu
        .or_else(|| cfg.get("step_menu").map(str::to_string))
        .unwrap_or_else(|| "4,8,12,16,20,32,64,256".to_string());
    let menu = parse_usize_list(&menu_text, "step menu")?;

    let model_cfg = ModelConfig {
        layers,
        heads,
        embed_dim,
        vocab_size: header.vocab_size,
        side: header.side,
        num_classes: header.num_classes,
        cond_dropout_rate: cond_dropout,
    };
    let mut state = init(&model_cfg, seed).map_err(usage_err)?;
    let val_len = ((grids.len() as f64 * val_frac) as usize).min(grids.len().saturating_sub(1));
    let (train_set, val_set) = grids.split_at(grids.len() - val_len);
    let tc = TrainConfig {
        step_count_menu: menu,
        epochs,
        batch_size,
        base_lr,
        warmup_frac: 1.0 / 9.0,
        weight_decay,
        cond_dropout_rate: cond_dropout,
        seed,
    };
    let rows = train(&mut state, train_set, val_set, &tc).map_err(validation_err)?;
    save_checkpoint(&args.out, &state).map_err(io_err)?;

    let metrics_path = args
        .metrics
        .unwrap_or_else(|| args.out.with_extension("metrics.csv"));
    write_output(&metrics_path, metrics_csv(&rows).as_bytes())?;

    let mut m = Manifest::new("train");
    m.set("layers", layers);
    m.set("heads", heads);
    m.set("embed_dim", embed_dim);
    m.set("epochs", epochs);
    m.set("batch_size", batch_size);
    m.set("base_lr", base_lr);
    m.set("weight_decay", weight_decay);
    m.set("cond_dropout", cond_dropout);
    m.set("step_menu", menu_text);
    m.set("val_frac", val_frac);
    m.set("seed", seed);
    m.hash_artifact("dataset", &args.data).map_err(io_err)?;
    write_manifest(m, &[("checkpoint", &args.out), ("metrics", &metrics_path)])
}

fn load_state(path: &Path) -> Result<ModelState, CliError> {
    load_checkpoint(path).map_err(|e| match e {
        lpd::model::ModelError::Io(e) => io_err(e),
        other => validation_err(other),
    })
}

fn grid_text(g: &TokenGrid) -> String {
    let mut out = format!("side={} class={}\n", g.side, g.class_id);
    for r in 0..g.side {
        let row: Vec<String> =
            (0..g.side).map(|c| g.tokens[r * g.side + c].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn generate_cmd(args: GenerateArgs) -> Result<(), CliError> {
    let state = load_state(&args.checkpoint)?;
    let sched_cfg = SchedulerConfig { seed: args.seed, ..SchedulerConfig::default() };
    let schedule =
        build_schedule(args.scheduler, state.config.side, args.steps, &sched_cfg, args.seed)?;
    let sampling = SamplingParams {
        temperature: args.temperature,
        top_k: args.top_k.unwrap_or(usize::MAX),
        cfg_scale: args.cfg_scale,
        seed: args.seed,
    };
    let out = generate(
        &state,
        &schedule,
        args.class,
        &sampling,
        !args.no_mutual_visibility,
        false,
        false,
    )
    .map_err(validation_err)?;
    let text = grid_text(&out.grid);
    eprintln!(
        "steps={} forward_passes={} wall_ms={:.1}",
        out.stats.decoding_steps, out.stats.forward_passes, out.stats.wall_ms
    );
    match &args.out {
        Some(p) => {
            write_output(p, text.as_bytes())?;
            let mut m = Manifest::new("generate");
            m.set("scheduler", args.scheduler.name());
            m.set("steps", args.steps);
            m.set("class", args.class);
            m.set("seed", args.seed);
            m.set("cfg_scale", args.cfg_scale);
            m.set("temperature", args.temperature);
            m.set("mutual_visibility", !args.no_mutual_visibility);
            m.hash_artifact("checkpoint", &args.checkpoint).map_err(io_err)?;
            write_manifest(m, &[("grid", p)])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn known_mask(region: KnownRegion, side: usize) -> Vec<bool> {
    (0..side * side)
        .map(|i| match region {
            KnownRegion::Half => i % side < side / 2,
            KnownRegion::Top => i / side < side / 2,
            KnownRegion::Checker => (i / side + i % side) % 2 == 0,
        })
        .collect()
}

fn edit_cmd(args: EditArgs) -> Result<(), CliError> {
    let state = load_state(&args.checkpoint)?;
    let (_, grids) = dataset_load(&args.data).map_err(|e| match e {
        lpd::data::DataError::Io(e) => io_err(e),
        other => validation_err(other),
    })?;
    let input = grids
        .get(args.index)
        .ok_or_else(|| usage_err(format!("index {} out of range ({} grids)", args.index, grids.len())))?;
    let mask = known_mask(args.known_mask, state.config.side);
    let sampling = SamplingParams { temperature: args.temperature, seed: args.seed, ..SamplingParams::default() };
    let order = EditOrder::Random { steps: args.steps, seed: args.seed };
    let (grid, stats) =
        prefill_and_generate(&state, input, &mask, args.new_class, order, &sampling)
            .map_err(validation_err)?;
    eprintln!("steps={} forward_passes={}", stats.decoding_steps, stats.forward_passes);
    let text = grid_text(&grid);
    match &args.out {
        Some(p) => {
            write_output(p, text.as_bytes())?;
            let mut m = Manifest::new("edit");
            m.set("index", args.index);
            m.set("new_class", args.new_class);
            m.set("steps", args.steps);
            m.set("seed", args.seed);
            m.hash_artifact("checkpoint", &args.checkpoint).map_err(io_err)?;
            m.hash_artifact("dataset", &args.data).map_err(io_err)?;
            write_manifest(m, &[("grid", p)])
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze_cmd(args: AnalyzeArgs) -> Result<(), CliError> {
    let state = load_state(&args.checkpoint)?;
    let grid = GridSpec::new(state.config.side);
    let mut record = lpd::model::AttentionRecord::default();
    for t in 0..args.traces {
        let seed = args.seed.wrapping_add(t as u64);
        let sched_cfg = SchedulerConfig { seed, ..SchedulerConfig::default() };
        let schedule =
            build_schedule(args.scheduler, state.config.side, args.steps, &sched_cfg, seed)?;
        let sampling = SamplingParams { seed, ..SamplingParams::default() };
        let class = (t % state.config.num_classes.max(1)) as usize;
        let out = generate(&state, &schedule, class, &sampling, true, true, false)
            .map_err(validation_err)?;
        record.steps.extend(out.record.expect("recording enabled").steps);
    }
    let profile = pta_profile(&record, grid);
    let csv = pta_csv(&profile);
    eprintln!("near_mass(2.0)={:.4}", near_mass(&record, 2.0));
    match &args.out {
        Some(p) => {
            write_output(p, csv.as_bytes())?;
            let mut m = Manifest::new("analyze");
            m.set("traces", args.traces);
            m.set("steps", args.steps);
            m.set("scheduler", args.scheduler.name());
            m.set("seed", args.seed);
            m.hash_artifact("checkpoint", &args.checkpoint).map_err(io_err)?;
            write_manifest(m, &[("csv", p)])
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn bench_cmd(args: BenchArgs) -> Result<(), CliError> {
    let state = load_state(&args.checkpoint)?;
    let step_counts = parse_usize_list(&args.steps, "steps")?;
    let mut csv = String::from("steps,forward_passes,wall_ms\n");
    for &k in &step_counts {
        let sched_cfg = SchedulerConfig { seed: args.seed, ..SchedulerConfig::default() };
        let schedule = build_schedule(args.scheduler, state.config.side, k, &sched_cfg, args.seed)?;
        let sampling = SamplingParams { seed: args.seed, ..SamplingParams::default() };
        let out = generate(&state, &schedule, 0, &sampling, true, false, false)
            .map_err(validation_err)?;
        csv.push_str(&format!("{k},{},{:.2}\n", out.stats.forward_passes, out.stats.wall_ms));
    }
    match &args.out {
        Some(p) => {
            write_output(p, csv.as_bytes())?;
            let mut m = Manifest::new("bench");
            m.set("steps", &args.steps);
            m.set("scheduler", args.scheduler.name());
            m.set("seed", args.seed);
            m.hash_artifact("checkpoint", &args.checkpoint).map_err(io_err)?;
            write_manifest(m, &[("csv", p)])
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn ablate_cmd(args: AblateArgs) -> Result<(), CliError> {
    let state = load_state(&args.checkpoint)?;
    let (header, reference) = dataset_load(&args.data).map_err(|e| match e {
        lpd::data::DataError::Io(e) => io_err(e),
        other => validation_err(other),
    })?;

    // (variant name, scheduler, mutual visibility)
    let variants: Vec<(&str, SchedulerKind, bool)> = match args.preset {
        AblationPreset::Visibility => vec![
            ("mutual_on", SchedulerKind::Lpd, true),
            ("mutual_off", SchedulerKind::Lpd, false),
        ],
        AblationPreset::Schedulers => vec![
            ("lpd", SchedulerKind::Lpd, true),
            ("halton", SchedulerKind::Halton, true),
            ("random", SchedulerKind::Random, true),
        ],
        AblationPreset::Principles => vec![
            ("proximity_only", SchedulerKind::LpdNear, true),
            ("dispersion_only", SchedulerKind::LpdFps, true),
            ("combined", SchedulerKind::Lpd, true),
        ],
    };

    let mut csv = String::from("variant,seed,divergence\n");
    for (name, kind, mutual) in &variants {
        for seed in 0..args.seeds {
            let sched_cfg = SchedulerConfig { seed, ..SchedulerConfig::default() };
            let schedule =
                build_schedule(*kind, state.config.side, args.steps, &sched_cfg, seed)?;
            let samples: Vec<TokenGrid> = (0..args.samples)
                .map(|i| {
                    let sampling = SamplingParams {
                        seed: seed.wrapping_mul(1 << 20).wrapping_add(i as u64),
                        ..SamplingParams::default()
                    };
                    generate(
                        &state,
                        &schedule,
                        i % state.config.num_classes,
                        &sampling,
                        *mutual,
                        false,
                        false,
                    )
                    .map(|o| o.grid)
                    .map_err(validation_err)
                })
                .collect::<Result<_, _>>()?;
            let d = cooccurrence_divergence(&samples, &reference, header.vocab_size)
                .map_err(validation_err)?;
            csv.push_str(&format!("{name},{seed},{d:.6}\n"));
        }
    }
    // Reference NLL makes the CSV self-contained for reports.
    let nll = teacher_forced_nll(&state, &reference[..reference.len().min(16)], &[args.steps], 0)
        .map_err(validation_err)?;
    csv.push_str(&format!("reference_nll_bits,,{nll:.4}\n"));
    match &args.out {
        Some(p) => {
            write_output(p, csv.as_bytes())?;
            let mut m = Manifest::new("ablate");
            m.set("preset", format!("{:?}", args.preset as u8));
            m.set("steps", args.steps);
            m.set("seeds", args.seeds);
            m.set("samples", args.samples);
            m.hash_artifact("checkpoint", &args.checkpoint).map_err(io_err)?;
            m.hash_artifact("dataset", &args.data).map_err(io_err)?;
            write_manifest(m, &[("csv", p)])
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
