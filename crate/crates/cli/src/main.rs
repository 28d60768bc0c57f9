//! `euigeo`: EUI-64 decoding, offset inference, BSSID fusion and router
//! clustering over supplied corpus files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{DedupeChoice, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "euigeo", version, about = "Geolocate EUI-64 CPE through WiFi BSSID offsets")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// TOML file with pipeline settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// WAN observations (JSONL or CSV with an `addr` column).
    #[arg(long, global = true)]
    pub wan: Option<PathBuf>,
    /// BSSID geolocations (JSONL or CSV with `bssid,lat,lon,source`).
    #[arg(long, global = true)]
    pub bssid: Option<PathBuf>,
    /// Persisted corpus index, used instead of --wan/--bssid.
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub traces: Option<PathBuf>,
    #[arg(long, global = true)]
    pub models: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub min_wan: Option<usize>,
    #[arg(long, global = true)]
    pub min_bssid: Option<usize>,
    #[arg(long, global = true)]
    pub min_consistency: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub dedupe: Option<DedupeChoice>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub dispersion_km: Option<f64>,
    #[arg(long, global = true)]
    pub prefix_len: Option<u8>,
    /// Only accept EUI-64 IIDs with the universal/local bit set.
    #[arg(long, global = true)]
    pub strict_ul: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
    Geojson,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the embedded MAC of each IPv6 address, or `-`.
    Decode {
        /// Input file; `-` or absent reads standard input.
        input: Option<PathBuf>,
    },
    /// Build and persist a corpus index.
    Ingest {
        /// OUI registry (`AA:BB:CC[,vendor]` per line) for U/L alias folding.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Keep WAN MACs observed from more than one AS.
        #[arg(long)]
        keep_multi_as: bool,
    },
    /// Infer per-OUI offset models.
    Infer {
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        keep_multi_as: bool,
    },
    /// Geolocate WAN MACs through predicted BSSIDs.
    Fuse {
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        keep_multi_as: bool,
    },
    /// Cluster geolocated CPE by upstream router and place the rest.
    Cluster {
        /// Geolocated CPE as written by `fuse`.
        #[arg(long)]
        cpe: PathBuf,
        /// Addresses to place, one per line; defaults to every traced
        /// target that is not already geolocated.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Distances between two BSSID geolocation sources.
    Compare { a: PathBuf, b: PathBuf },
    /// Generate a synthetic corpus with its ground-truth ledger.
    Synth(commands::SynthArgs),
    /// Tabulate geolocated CPE by country and OUI.
    Report {
        #[arg(long)]
        cpe: PathBuf,
        /// `mac-or-oui,country` per line.
        #[arg(long)]
        countries: PathBuf,
        /// `oui,vendor` per line.
        #[arg(long)]
        vendors: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Config(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Config(_) => 2,
        }
    }

    fn report(&self) -> String {
        let (kind, e) = match self {
            Failure::Input(e) => ("input", e),
            Failure::Config(e) => ("config", e),
        };
        serde_json::json!({ "level": "error", "kind": kind, "message": format!("{e:#}") }).to_string()
    }
}

pub trait FailureExt<T> {
    fn input(self) -> Result<T, Failure>;
    fn config(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> FailureExt<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
}

fn effective_config(g: &GlobalArgs) -> Result<PipelineConfig, Failure> {
    let mut c = match &g.config {
        Some(p) => PipelineConfig::load(p).config()?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = g.min_wan {
        c.min_wan = v;
    }
    if let Some(v) = g.min_bssid {
        c.min_bssid = v;
    }
    if let Some(v) = g.min_consistency {
        c.min_consistency = v;
    }
    if let Some(v) = g.dedupe {
        c.dedupe_policy = v;
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.threads {
        c.threads = Some(v);
    }
    if let Some(v) = g.dispersion_km {
        c.dispersion_threshold_km = v;
    }
    if let Some(v) = g.prefix_len {
        c.prefix_len = v;
    }
    c.strict_ul |= g.strict_ul;
    c.validate().config()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli.global)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().config()?;
    }
    let ctx = commands::Context { global: &cli.global, cfg: &cfg };
    match &cli.command {
        Command::Decode { input } => commands::decode(&ctx, input.as_deref()),
        Command::Ingest { registry, keep_multi_as } => commands::ingest(&ctx, registry.as_deref(), *keep_multi_as),
        Command::Infer { registry, keep_multi_as } => commands::infer(&ctx, registry.as_deref(), *keep_multi_as),
        Command::Fuse { registry, keep_multi_as } => commands::fuse(&ctx, registry.as_deref(), *keep_multi_as),
        Command::Cluster { cpe, targets } => commands::cluster(&ctx, cpe, targets.as_deref()),
        Command::Compare { a, b } => commands::compare(&ctx, a, b),
        Command::Synth(args) => commands::synth(&ctx, args),
        Command::Report { cpe, countries, vendors, top } => {
            commands::report(&ctx, cpe, countries, vendors.as_deref(), *top)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}
