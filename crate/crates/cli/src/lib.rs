//! Command-line front end: flag and config-file parsing, the headless
//! pipeline run and the `serve` subcommand.
//!
//! Every interactive choice has a numeric flag, so a whole comparison runs
//! without the browser UI. A config file of `key = value` lines may supply
//! any run flag; flags given on the command line win.

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use seqmap_core::ingest::ScanSpec;
use seqmap_core::model::{PixelCoord, PolygonRoi, RectRoi};
use seqmap_core::pipeline::{run_pipeline, Display, RegMode, RunConfig, RunStatus, SegMode, MANIFEST_FILE};
use seqmap_core::segmentation::GroupCount;
use seqmap_core::stats::{Bandwidths, FdrMode, Sidedness};
use seqmap_server::{ServerConfig, DEFAULT_PORT, PORT_ENV, SESSION_DIR_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
}

#[derive(Debug, Parser)]
#[command(
    name = "seqmap",
    version,
    about = "Compare two longitudinal image sequences and map where they differ",
    args_conflicts_with_subcommands = true,
    args_override_self = true,
    subcommand_negates_reqs = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API (and the UI assets, if given).
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScanArg {
    Row,
    Col,
    Blank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ModeArg {
    #[default]
    Auto,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum DisplayArg {
    #[default]
    Basic,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum SidedArg {
    #[default]
    Two,
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum FdrArg {
    #[default]
    PerFrame,
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Points(pub Vec<PixelCoord>);

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<Bandwidths>);

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Plain-text `key = value` file supplying any of the flags below.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// CSV holding the first sequence.
    #[arg(long, required = true)]
    pub seq1: Option<PathBuf>,
    /// CSV holding the second sequence.
    #[arg(long, required = true)]
    pub seq2: Option<PathBuf>,
    /// How frames are delimited in the CSV files.
    #[arg(long, value_enum, required = true)]
    pub scan: Option<ScanArg>,
    #[arg(long, required = true)]
    pub nframe: Option<usize>,
    #[arg(long, required = true)]
    pub nrow: Option<usize>,
    #[arg(long, required = true)]
    pub ncol: Option<usize>,
    /// Label of the frame header rows (`--scan row`).
    #[arg(long, allow_hyphen_values = true)]
    pub row_id: Option<String>,
    /// 1-based column holding the frame number (`--scan col`).
    #[arg(long)]
    pub col_id: Option<usize>,
    /// Inputs are already cropped, segmented and aligned frame by frame.
    #[arg(long)]
    pub preprocessed: bool,

    #[arg(long, value_enum, default_value_t)]
    pub seg: ModeArg,
    #[arg(long, allow_negative_numbers = true)]
    pub seg_cutoff1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub seg_cutoff2: Option<f64>,
    /// Mixture components for automatic segmentation, 2 to 5.
    #[arg(long)]
    pub seg_groups: Option<usize>,

    #[arg(long, value_enum, default_value_t)]
    pub reg: ModeArg,
    /// Reference and direction points on sequence 1, then on sequence 2.
    #[arg(long, value_name = "r,c;r,c;r,c;r,c", value_parser = parse_points, allow_hyphen_values = true)]
    pub reg_points: Option<Points>,

    #[arg(long, value_name = "r0,c0,h,w", value_parser = parse_rect)]
    pub roi1: Option<RectRoi>,
    #[arg(long, value_name = "r0,c0,h,w", value_parser = parse_rect)]
    pub roi2: Option<RectRoi>,
    /// Analysis region on the registered frames.
    #[arg(long, value_name = "r,c;...", value_parser = parse_points, allow_hyphen_values = true)]
    pub polygon: Option<Points>,

    #[arg(long, value_enum, default_value_t)]
    pub display: DisplayArg,
    /// 3 also writes each P map as a JSON height field.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub pmap_dim: u8,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t)]
    pub sided: SidedArg,
    /// Candidate bandwidth pairs for cross-validation.
    #[arg(long, value_name = "h1,h2;...", value_parser = parse_grid)]
    pub bandwidths: Option<Grid>,
    /// FDR family: each frame pair, or all pairs together.
    #[arg(long, value_enum, default_value_t)]
    pub fdr: FdrArg,

    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Pass the alignment check without stopping.
    #[arg(long)]
    pub assume_aligned: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, required = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Serve the API only.
    #[arg(long)]
    pub no_ui: bool,
    /// Directory of built UI assets.
    #[arg(long, env = "SEQMAP_UI_DIR", conflicts_with = "no_ui")]
    pub ui_dir: Option<PathBuf>,
    /// Persist sessions here and resume analysed ones on restart.
    #[arg(long, env = SESSION_DIR_ENV)]
    pub session_dir: Option<PathBuf>,
}

fn numbers(s: &str, what: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{what}: {t:?} is not a finite number"))
        })
        .collect()
}

/// `"r,c;r,c;..."`.
pub fn parse_points(s: &str) -> Result<Points, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match numbers(p, "point")?.as_slice() {
            &[row, col] => Ok(PixelCoord::new(row, col)),
            _ => Err(format!("point {p:?} must be \"row,col\"")),
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Points)
}

/// `"r0,c0,h,w"`.
pub fn parse_rect(s: &str) -> Result<RectRoi, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("{t:?} is not a non-negative integer")))
        .collect::<Result<_, _>>()?;
    match *parts.as_slice() {
        [r0, c0, h, w] if h > 0 && w > 0 => Ok(RectRoi::new(r0, c0, h, w)),
        [_, _, _, _] => Err("rectangle height and width must be positive".into()),
        _ => Err(format!("rectangle {s:?} must be \"row0,col0,height,width\"")),
    }
}

/// `"h1,h2;h1,h2;..."`.
pub fn parse_grid(s: &str) -> Result<Grid, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| match numbers(p, "bandwidth")?.as_slice() {
            &[h1, h2] => Bandwidths::new(h1, h2).map_err(|e| e.to_string()),
            _ => Err(format!("bandwidth pair {p:?} must be \"h1,h2\"")),
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|g| if g.is_empty() { Err("empty bandwidth grid".into()) } else { Ok(Grid(g)) })
}

impl RunArgs {
    fn scan_spec(&self) -> Result<ScanSpec, CliError> {
        let (n, r, c) = (self.nframe.unwrap_or(0), self.nrow.unwrap_or(0), self.ncol.unwrap_or(0));
        Ok(match self.scan.unwrap_or(ScanArg::Blank) {
            ScanArg::Blank => ScanSpec::blank(n, r, c),
            ScanArg::Row => {
                let id = self.row_id.clone().ok_or_else(|| CliError::Usage("--scan row needs --row-id".into()))?;
                ScanSpec::row_id(n, r, c, id)
            }
            ScanArg::Col => {
                let col = self.col_id.ok_or_else(|| CliError::Usage("--scan col needs --col-id".into()))?;
                ScanSpec::col_id(n, r, c, col)
            }
        })
    }

    pub fn to_config(&self) -> Result<RunConfig, CliError> {
        let usage = |m: &str| CliError::Usage(m.to_string());
        let required = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| usage(&format!("{flag} is required")));
        let mut cfg = RunConfig::new(
            required(&self.seq1, "--seq1")?,
            required(&self.seq2, "--seq2")?,
            self.scan_spec()?,
            required(&self.out, "--out")?,
        );
        cfg.preprocessed = self.preprocessed;
        cfg.seg = match self.seg {
            ModeArg::Manual => {
                if self.seg_groups.is_some() {
                    return Err(usage("--seg-groups applies to --seg auto"));
                }
                match (self.seg_cutoff1, self.seg_cutoff2) {
                    (Some(c1), Some(c2)) => SegMode::Manual { c1, c2 },
                    _ => return Err(usage("--seg manual needs --seg-cutoff1 and --seg-cutoff2")),
                }
            }
            ModeArg::Auto => {
                if self.seg_cutoff1.is_some() || self.seg_cutoff2.is_some() {
                    return Err(usage("segmentation cutoffs apply to --seg manual"));
                }
                SegMode::Auto {
                    groups: self.seg_groups.map_or(GroupCount::Auto, GroupCount::Fixed),
                }
            }
        };
        cfg.reg = match (self.reg, &self.reg_points) {
            (ModeArg::Manual, Some(Points(p))) if p.len() == 4 => RegMode::Manual {
                seq1: [p[0], p[1]],
                seq2: [p[2], p[3]],
            },
            (ModeArg::Manual, Some(_)) => return Err(usage("--reg-points needs exactly four points")),
            (ModeArg::Manual, None) => return Err(usage("--reg manual needs --reg-points")),
            (ModeArg::Auto, Some(_)) => return Err(usage("--reg-points applies to --reg manual")),
            (ModeArg::Auto, None) => RegMode::Auto,
        };
        cfg.roi1 = self.roi1;
        cfg.roi2 = self.roi2;
        cfg.polygon = match &self.polygon {
            Some(Points(p)) => Some(PolygonRoi::new(p.clone()).map_err(|e| CliError::Usage(format!("--polygon: {e}")))?),
            None => None,
        };
        cfg.display = match self.display {
            DisplayArg::Basic => Display::Basic,
            DisplayArg::All => Display::All,
        };
        cfg.pmap_dim = self.pmap_dim;
        cfg.snm.alpha = self.alpha;
        cfg.snm.sidedness = match self.sided {
            SidedArg::Two => Sidedness::TwoSided,
            SidedArg::Greater => Sidedness::GreaterThanZero,
        };
        if let Some(Grid(g)) = &self.bandwidths {
            cfg.snm.grid = g.clone();
        }
        cfg.snm.fdr = match self.fdr {
            FdrArg::PerFrame => FdrMode::PerFrame,
            FdrArg::Pooled => FdrMode::Pooled,
        };
        cfg.parallel = self.parallel;
        cfg.workers = self.workers;
        cfg.assume_aligned = self.assume_aligned;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

/// Reads a config file into `(key, value)` pairs. Keys are long flag names
/// with `-` or `_`; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let bad = |message: String| CliError::ConfigFile {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value", i + 1)))?;
        let v = v.trim().trim_matches('"');
        out.push((k.trim().replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

/// Finds `--config FILE` or `--config=FILE` among the raw arguments.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Splices config-file entries in front of the command-line flags, so
/// clap's last-occurrence-wins rule lets the flags override the file.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let mut injected = Vec::new();
    for (key, value) in read_config_file(&path)? {
        let unknown = || CliError::ConfigFile {
            path: path.clone(),
            message: format!("unknown key {key:?}"),
        };
        if key == "config" {
            return Err(unknown());
        }
        let arg = cmd.get_arguments().find(|a| a.get_long() == Some(key.as_str())).ok_or_else(unknown)?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "no" | "0" => {}
                other => {
                    return Err(CliError::ConfigFile {
                        path: path.clone(),
                        message: format!("{key} must be true or false, got {other:?}"),
                    })
                }
            }
        }
    }
    let mut out = Vec::with_capacity(args.len() + injected.len());
    let mut rest = args.into_iter();
    out.extend(rest.next());
    out.extend(injected);
    out.extend(rest);
    Ok(out)
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with(args: Vec<OsString>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match cli.command {
        Some(Command::Serve(s)) => serve(&s),
        None => run(&cli.run),
    }
}

fn run(args: &RunArgs) -> i32 {
    let config = match args.to_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INPUT;
        }
    };
    match run_pipeline(&config) {
        Ok(outcome) => {
            let m = &outcome.manifest;
            let manifest = config.out_dir.join(MANIFEST_FILE);
            match m.status {
                RunStatus::Completed => {
                    println!("completed: {} pairs analysed", m.parameters.pairs.len());
                }
                RunStatus::AwaitingAlignment => {
                    println!("alignment check: inspect the overlay, then re-run with --assume-aligned");
                    for s in &m.suggestions {
                        println!("  - {s}");
                    }
                }
            }
            println!("manifest: {}", manifest.display());
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn serve(args: &ServeArgs) -> i32 {
    let mut config = ServerConfig::from_env();
    if let Some(dir) = &args.session_dir {
        config.session_dir = dir.clone();
        config.persist = true;
    }
    config.ui_dir = if args.no_ui { None } else { args.ui_dir.clone() };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return 1;
        }
    };
    let addr = SocketAddr::new(args.host, args.port);
    runtime.block_on(async move {
        let listener = match seqmap_server::bind(addr).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_INPUT;
            }
        };
        if let Ok(local) = listener.local_addr() {
            println!("listening on http://{local}");
            let _ = std::io::stdout().flush();
        }
        match seqmap_server::serve(listener, config).await {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        }
    })
}
