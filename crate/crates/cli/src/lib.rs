//! Command implementations behind the `refshare` binary.
//!
//! Every command is a pure function of its flags, the optional JSON config
//! and the input files. The only nondeterministic output is the `timestamp`
//! field of generation sidecars.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use refshare_core::caption::{compensate, encode_png, CaptionMode, ChatRequest, RequestInput};
use refshare_core::model::{init_model, ToyMMDiT};
use refshare_core::pipeline::{generate, ErrorKind, GenerationConfig, GenerationRequest, GenerationResult, Metadata};
use refshare_core::schedule::{compute_mu, NoiseSchedule, ScheduleVariant, ShiftParams};
use refshare_core::tensor::sha256_hex;
use refshare_core::{selftest, LayerStrategy, Scalar};
use serde::Serialize;

pub const EXIT_SELFTEST: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_CAPTION: u8 = 4;
pub const EXIT_INTERNAL: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("[io] {}: {e}", path.display()))
    }

    fn config(message: impl std::fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, format!("[config] {message}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<refshare_core::PipelineError> for CliError {
    fn from(e: refshare_core::PipelineError) -> Self {
        let code = match e.kind {
            ErrorKind::Io => EXIT_IO,
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Caption => EXIT_CAPTION,
            ErrorKind::Internal => EXIT_INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "refshare", version, about = "Reference attention sharing on a toy MM-DiT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one image of the reference subject.
    Generate(GenerateArgs),
    /// Noise schedule tools.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    /// Run an ablation grid and write a summary CSV.
    Ablate(AblateArgs),
    /// Caption a reference image with the configured backend.
    Caption(CaptionArgs),
    /// Run the built-in invariant suite.
    Selftest,
    /// Model weight snapshots.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Flags shared by `generate` and `ablate`. Every knob is optional so a
/// config file value survives unless a flag names it.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Noise seed of the target sampler.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Sets both λ_r and λ_p.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    /// Multiplier of μ for the reference trajectory.
    #[arg(long, allow_hyphen_values = true)]
    pub shift_factor: Option<f64>,
    /// Skip subject captioning.
    #[arg(long)]
    pub no_caption: bool,
}

impl Overrides {
    pub fn apply(&self, config: &mut GenerationConfig) {
        if let Some(s) = self.seed {
            config.seeds.noise = s;
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(g) = self.guidance {
            config.guidance = g;
        }
        if let Some(l) = self.lambda {
            config.lambda_r = l;
            config.lambda_p = l;
        }
        if let Some(l) = self.lambda_r {
            config.lambda_r = l;
        }
        if let Some(l) = self.lambda_p {
            config.lambda_p = l;
        }
        if let Some(k) = self.shift_factor {
            config.shift_factor_k = k;
        }
        if self.no_caption {
            config.caption_enabled = false;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Reference image (PNG).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Subject mask (PNG, white = subject).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// JSON config; missing keys take defaults, unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output stem: writes `<out>.png` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    /// Write σ(t) for several shift factors as CSV.
    Export(ScheduleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 30)]
    pub steps: usize,
    #[arg(long, default_value_t = 1024)]
    pub seq_len: usize,
    /// Shift factors k; the no-shift column (k = 0) is always included.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,-1")]
    pub factors: Vec<f64>,
    /// Base μ, replacing the value derived from `--seq-len`.
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Shift,
    Lambda,
    Layers,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: Grid,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the grid's default cell values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Option<Vec<String>>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct CaptionArgs {
    /// Image to caption.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Print the mock fixture key of the image request and exit.
    #[arg(long)]
    pub key: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Subject,
    SubjectDetailed,
    Style,
}

impl From<ModeArg> for CaptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Subject => CaptionMode::Subject,
            ModeArg::SubjectDetailed => CaptionMode::SubjectDetailed,
            ModeArg::Style => CaptionMode::Style,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    /// Write the seeded weights of the configured model.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load a snapshot and print its configuration and checksum.
    Inspect { path: PathBuf },
}

/// Reads a config file over the defaults. A missing file is an I/O error,
/// malformed JSON or an unknown key a config error.
pub fn load_config(path: Option<&Path>) -> CliResult<GenerationConfig> {
    let Some(path) = path else {
        return Ok(GenerationConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// File, then flags, then validation.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<GenerationConfig> {
    let mut config = load_config(path)?;
    overrides.apply(&mut config);
    config.validate().map_err(CliError::config)?;
    Ok(config)
}

/// `(<out>.png, <out>.json)`; an explicit `.png` extension is not doubled.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        (out.to_path_buf(), out.with_extension("json"))
    } else {
        let mut png = out.as_os_str().to_owned();
        png.push(".png");
        let mut json = out.as_os_str().to_owned();
        json.push(".json");
        (png.into(), json.into())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn png_bytes(image: &image::RgbImage) -> CliResult<Vec<u8>> {
    encode_png(image).map_err(|e| CliError::new(EXIT_INTERNAL, format!("[encode] {e}")))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes the PNG and its sidecar; returns the completed metadata.
pub fn write_artifacts<T: Scalar>(result: &GenerationResult<T>, out: &Path) -> CliResult<Metadata> {
    let (png_path, json_path) = output_paths(out);
    let png = png_bytes(&result.image)?;
    let mut meta = result.metadata.clone();
    meta.output_png_sha256 = Some(sha256_hex(&png));
    meta.timestamp = Some(now());
    write_file(&png_path, &png)?;
    let mut json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
    json.push('\n');
    write_file(&json_path, json.as_bytes())?;
    Ok(meta)
}

fn run_generation<T: Scalar>(request: &GenerationRequest) -> CliResult<GenerationResult<T>> {
    let clients = if request.config.caption_enabled {
        match request.config.caption.clients() {
            Ok(c) => Some(c),
            Err(e) if request.config.caption_fallback => {
                eprintln!("warning: caption backend unavailable ({e}); continuing without caption");
                None
            }
            Err(e) => return Err(CliError::new(EXIT_CAPTION, format!("[caption] {e}"))),
        }
    } else {
        None
    };
    Ok(generate::<T>(request, clients.as_ref())?)
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<Metadata> {
    let config = resolve_config(args.config.as_deref(), &args.overrides)?;
    let request = GenerationRequest {
        reference_image: args.reference.clone(),
        subject_mask: args.mask.clone(),
        target_prompt: args.prompt.clone(),
        config,
    };
    match args.precision {
        Precision::F32 => write_artifacts(&run_generation::<f32>(&request)?, &args.out),
        Precision::F64 => write_artifacts(&run_generation::<f64>(&request)?, &args.out),
    }
}

/// Column name of the σ curve for shift factor `k`.
pub fn factor_column(k: f64) -> String {
    if k == 1.0 {
        "sigma_standard".into()
    } else if k == 0.0 {
        "sigma_none".into()
    } else if k == -1.0 {
        "sigma_reversed".into()
    } else {
        format!("sigma_k{k}")
    }
}

/// Schedule table: the `t` column followed by one σ column per factor,
/// factors sorted from most positive to most negative.
pub fn schedule_table(args: &ScheduleArgs) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    if args.steps == 0 {
        return Err(CliError::config("--steps must be >= 1"));
    }
    let mut factors: Vec<f64> = args.factors.clone();
    if let Some(k) = factors.iter().find(|k| !k.is_finite()) {
        return Err(CliError::config(format!("factor {k} is not finite")));
    }
    factors.push(0.0);
    factors.sort_by(|a, b| b.total_cmp(a));
    factors.dedup();
    let base = match args.mu {
        Some(mu) => mu,
        None => compute_mu(&ShiftParams::new(args.seq_len, 1.0)).map_err(CliError::config)?,
    };
    let curves: Vec<NoiseSchedule<f64>> = factors
        .iter()
        .map(|&k| NoiseSchedule::from_mu(args.steps, k * base, ScheduleVariant::from_factor(k)))
        .collect::<Result<_, _>>()
        .map_err(CliError::config)?;
    let mut header = vec!["t".to_string()];
    header.extend(factors.iter().map(|&k| factor_column(k)));
    let rows = (0..=args.steps)
        .map(|i| {
            let mut row = vec![curves[0].timesteps[i]];
            row.extend(curves.iter().map(|c| c.sigmas[i]));
            row
        })
        .collect();
    Ok((header, rows))
}

fn csv_bytes<S: Serialize>(header: &[String], rows: impl IntoIterator<Item = S>) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::new(EXIT_INTERNAL, e.to_string());
    w.write_record(header).map_err(internal)?;
    for r in rows {
        w.serialize(r).map_err(internal)?;
    }
    w.into_inner().map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

pub fn cmd_schedule(args: &ScheduleArgs) -> CliResult<()> {
    let (header, rows) = schedule_table(args)?;
    let bytes = csv_bytes(&header, rows)?;
    match &args.out {
        Some(path) => write_file(path, &bytes),
        None => io::stdout().write_all(&bytes).map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}

/// One grid point: a name for files, the swept value, and the config it runs with.
#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub value: String,
    pub config: GenerationConfig,
}

pub fn default_values(grid: Grid) -> Vec<String> {
    let v: &[&str] = match grid {
        Grid::Shift => &["0", "-0.5", "-1", "-2"],
        Grid::Lambda => &["1.0", "1.05", "1.1", "1.15"],
        Grid::Layers => &["vital", "random_nonvital", "all_dropout"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn parse_value(grid: Grid, v: &str) -> CliResult<f64> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| CliError::config(format!("{grid:?} grid value {v:?} is not a number")))
}

/// Expands a grid over `base`. Cells differ only in the swept knob.
pub fn grid_cells(grid: Grid, values: &[String], base: &GenerationConfig) -> CliResult<Vec<Cell>> {
    values
        .iter()
        .map(|v| {
            let mut config = base.clone();
            let name = match grid {
                Grid::Shift => {
                    config.shift_factor_k = parse_value(grid, v)?;
                    format!("shift_k{}", v.trim())
                }
                Grid::Lambda => {
                    let l = parse_value(grid, v)?;
                    config.lambda_r = l;
                    config.lambda_p = l;
                    format!("lambda_{}", v.trim())
                }
                Grid::Layers => {
                    match v.trim() {
                        "vital" => config.layer_strategy = LayerStrategy::Vital,
                        "random_nonvital" => config.layer_strategy = LayerStrategy::RandomNonvital,
                        "all" => config.layer_strategy = LayerStrategy::All,
                        "all_dropout" => {
                            config.layer_strategy = LayerStrategy::All;
                            config.dropout_rate = 5.0 / 6.0;
                        }
                        other => return Err(CliError::config(format!("unknown layer cell {other:?}"))),
                    }
                    format!("layers_{}", v.trim())
                }
            };
            config.validate().map_err(|e| CliError::config(format!("cell {name}: {e}")))?;
            Ok(Cell { name, value: v.trim().to_string(), config })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub grid: String,
    pub cell: String,
    pub value: String,
    pub proxy_subject_similarity: f64,
    pub noise_seed: u64,
    pub weight_seed: u64,
    pub dropout_seed: u64,
    pub image_sha256: String,
    pub png: String,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "grid",
    "cell",
    "value",
    "proxy_subject_similarity",
    "noise_seed",
    "weight_seed",
    "dropout_seed",
    "image_sha256",
    "png",
];

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<Vec<SummaryRow>> {
    let base = resolve_config(args.config.as_deref(), &args.overrides)?;
    let values = args.values.clone().unwrap_or_else(|| default_values(args.grid));
    let cells = grid_cells(args.grid, &values, &base)?;
    let grid_name = format!("{:?}", args.grid).to_lowercase();
    let run = || -> Vec<CliResult<GenerationResult<f32>>> {
        cells
            .par_iter()
            .map(|cell| {
                run_generation::<f32>(&GenerationRequest {
                    reference_image: args.reference.clone(),
                    subject_mask: args.mask.clone(),
                    target_prompt: args.prompt.clone(),
                    config: cell.config.clone(),
                })
            })
            .collect()
    };
    let results = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?
        .install(run);
    let mut rows = Vec::with_capacity(cells.len());
    for (cell, result) in cells.iter().zip(results) {
        let result = result.map_err(|e| CliError::new(e.code, format!("cell {}: {}", cell.name, e.message)))?;
        let meta = write_artifacts(&result, &args.out.join(&cell.name))?;
        rows.push(SummaryRow {
            grid: grid_name.clone(),
            cell: cell.name.clone(),
            value: cell.value.clone(),
            proxy_subject_similarity: meta.proxy_score,
            noise_seed: meta.seeds.noise,
            weight_seed: meta.seeds.weights,
            dropout_seed: meta.seeds.dropout,
            image_sha256: meta.image_sha256.clone(),
            png: format!("{}.png", cell.name),
        });
    }
    let header: Vec<String> = SUMMARY_COLUMNS.iter().map(|s| s.to_string()).collect();
    write_file(&args.out.join("summary.csv"), &csv_bytes(&header, &rows)?)?;
    Ok(rows)
}

pub fn cmd_caption(args: &CaptionArgs) -> CliResult<String> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(m) = args.mode {
        config.caption.mode = m.into();
    }
    config.caption.validate().map_err(CliError::config)?;
    let image = image::open(&args.image).map_err(|e| CliError::io(&args.image, e))?.to_rgb8();
    if args.key {
        let png = encode_png(&image).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
        let request = ChatRequest {
            template: config.caption.mode.caption_template(),
            prompt: String::new(),
            input: RequestInput::ImagePng(png),
            max_tokens: 0,
        };
        return Ok(request.fixture_key());
    }
    let clients = config.caption.clients().map_err(|e| CliError::new(EXIT_CAPTION, format!("[caption] {e}")))?;
    let bundle = compensate(&image, &clients, config.caption.mode, &config.caption.subject_class)
        .map_err(|e| CliError::new(EXIT_CAPTION, format!("[caption] {e}")))?;
    serde_json::to_string_pretty(&bundle).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

/// Report text and whether every property passed.
pub fn cmd_selftest() -> (String, bool) {
    let report = selftest::run();
    (report.render(), report.passed())
}

pub fn cmd_weights(command: &WeightsCommand) -> CliResult<String> {
    match command {
        WeightsCommand::Export { config, out } => {
            let config = load_config(config.as_deref())?;
            config.validate().map_err(CliError::config)?;
            let model: ToyMMDiT<f32> = init_model(&config.model_config()).map_err(CliError::config)?;
            let mut bytes = Vec::new();
            model.save_snapshot(&mut bytes).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;
            write_file(out, &bytes)?;
            Ok(model.weight_checksum())
        }
        WeightsCommand::Inspect { path } => {
            let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            let model = ToyMMDiT::<f32>::load_snapshot(BufReader::new(file))
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let config = serde_json::to_string(model.config()).unwrap_or_default();
            Ok(format!("{config}\n{}", model.weight_checksum()))
        }
    }
}

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($arg)*);
    }};
}

/// Runs one parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args).map(|m| {
            say!("{}", output_paths(&args.out).0.display());
            say!("proxy_subject_similarity {:.6}", m.proxy_score);
        }),
        Command::Schedule(ScheduleCommand::Export(args)) => cmd_schedule(&args),
        Command::Ablate(args) => cmd_ablate(&args).map(|rows| {
            for r in rows {
                say!("{}\t{:.6}", r.cell, r.proxy_subject_similarity);
            }
        }),
        Command::Caption(args) => cmd_caption(&args).map(|s| say!("{s}")),
        Command::Selftest => {
            let (text, ok) = cmd_selftest();
            say!("{}", text.trim_end());
            return if ok { 0 } else { EXIT_SELFTEST };
        }
        Command::Weights(cmd) => cmd_weights(&cmd).map(|s| say!("{s}")),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
