use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mecflow::lifecycle::{signing_key_from_seed, write_descriptor, PipelineDescriptor};
use mecflow::service::{self, HubServiceConfig, NodeServiceConfig, ServiceError};
use mecflow::sim::{self, Provisioning, Scenario, SimError};
use mecflow::tilegrid::{self, BoundingBox, GeoPosition, Tile};

#[derive(Parser)]
#[command(name = "mecflow", version, about = "Demand-driven MEC data platform")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic simulation
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// MEC node HTTP service
    Node {
        #[command(subcommand)]
        command: ServeCommand,
    },
    /// Cloud hub HTTP service
    Hub {
        #[command(subcommand)]
        command: ServeCommand,
    },
    /// Tile and quadkey helpers
    Tile {
        #[command(subcommand)]
        command: TileCommand,
    },
    /// Pipeline descriptor tooling
    Descriptor {
        #[command(subcommand)]
        command: DescriptorCommand,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    AlwaysOn,
}

#[derive(Subcommand)]
enum ServeCommand {
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum TileCommand {
    /// Tile coordinates to quadkey
    Encode {
        #[arg(long)]
        x: u32,
        #[arg(long)]
        y: u32,
        #[arg(long)]
        level: u8,
    },
    /// Position to quadkey
    Locate {
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long)]
        level: u8,
    },
    /// Quadkeys covering a bounding box, comma separated
    Cover {
        /// S,W,N,E in degrees
        #[arg(long, allow_hyphen_values = true)]
        bbox: String,
        #[arg(long)]
        level: u8,
    },
    /// Quadkey to tile coordinates
    Decode {
        #[arg(long)]
        quadkey: String,
    },
}

#[derive(Subcommand)]
enum DescriptorCommand {
    /// Sign a descriptor JSON file and write it with its `.sig` sidecar
    Sign {
        #[arg(long)]
        input: PathBuf,
        /// 32-byte Ed25519 seed, hex
        #[arg(long)]
        seed_hex: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invalid(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) => Failure::Invalid(e.to_string()),
            ServiceError::Runtime(_) => Failure::Runtime(e.to_string()),
        }
    }
}

fn bad(e: impl ToString) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sim {
            command: SimCommand::Run { scenario, out, baseline },
        } => {
            let s = Scenario::load(&scenario)?;
            let mode = match baseline {
                Some(Baseline::AlwaysOn) => Provisioning::AlwaysOn,
                None => Provisioning::DemandDriven,
            };
            let m = sim::run_scenario(&s, mode)?;
            sim::export_metrics(&m, &out)?;
            println!(
                "ingested={} accepted={} discarded_no_demand={} rejected={} deployed={} reaped={} compute_mcpu_s={:.3}",
                m.ingested,
                m.accepted,
                m.discarded_no_demand,
                m.rejected,
                m.pipelines_deployed,
                m.pipelines_reaped,
                m.compute_mcpu_ms_total as f64 / 1000.0
            );
        }
        Command::Node {
            command: ServeCommand::Serve { config },
        } => {
            let cfg: NodeServiceConfig = service::load_config(&config)?;
            let dir = config_dir(&config);
            runtime()?.block_on(service::serve_node(cfg, &dir))?;
        }
        Command::Hub {
            command: ServeCommand::Serve { config },
        } => {
            let cfg: HubServiceConfig = service::load_config(&config)?;
            runtime()?.block_on(service::serve_hub(cfg))?;
        }
        Command::Tile { command } => match command {
            TileCommand::Encode { x, y, level } => {
                let t = Tile::new(x, y, level).map_err(bad)?;
                println!("{}", tilegrid::tile_to_quadkey(t));
            }
            TileCommand::Locate { lat, lon, level } => {
                let pos = GeoPosition::new(lat, lon).map_err(bad)?;
                println!("{}", tilegrid::locate(pos, level).map_err(bad)?);
            }
            TileCommand::Cover { bbox, level } => {
                let b: BoundingBox = bbox.parse().map_err(bad)?;
                let keys = tilegrid::cover_roi(&b, level).map_err(bad)?;
                println!("{}", keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","));
            }
            TileCommand::Decode { quadkey } => {
                let t = tilegrid::parse_quadkey_tile(&quadkey).map_err(bad)?;
                println!("{} {} {}", t.x(), t.y(), t.level());
            }
        },
        Command::Descriptor {
            command: DescriptorCommand::Sign { input, seed_hex, out },
        } => {
            let seed: [u8; 32] = hex::decode(seed_hex.trim())
                .map_err(bad)?
                .try_into()
                .map_err(|_| bad("seed must be 32 bytes"))?;
            let text = std::fs::read_to_string(&input).map_err(|e| bad(format!("{}: {e}", input.display())))?;
            let desc: PipelineDescriptor = serde_json::from_str(&text).map_err(bad)?;
            let key = signing_key_from_seed(seed);
            let desc = desc.sign(&key);
            write_descriptor(&out, &desc).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{}", hex::encode(key.verifying_key().as_bytes()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
