use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use synthdepth::pipeline::{self, ExperimentConfig, OutputLock};
use synthdepth::raster::toy::{make_toy_dataset, ToyConfig};
use synthdepth::train::Arm;
use synthdepth::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "synthdepth", version, about = "Synthetic depth for RGB-D building segmentation")]
struct Cli {
    /// Experiment configuration (TOML). Defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Require bitwise-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Network width multiplier; overrides the configuration.
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Dataset root; overrides the configuration.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output root; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural acceptance dataset.
    MakeToyDataset {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 40)]
        tiles: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        toy_seed: u64,
    },
    /// Validate the dataset and write the split manifest.
    Prepare,
    /// Train the segmentation network of one arm.
    TrainSeg {
        #[arg(long)]
        arm: Arm,
    },
    /// Train the RGB-to-depth generator.
    TrainGan,
    /// Generate synthetic depth for every RGB raster in a directory.
    InferDepth {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate trained arms on the test split.
    Evaluate {
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        arms: Option<Vec<Arm>>,
    },
    /// Prepare, train every arm and the generator, then evaluate.
    Run,
    /// Print the resolved configuration as TOML.
    ShowConfig,
    /// Comparison table over one or more output roots, averaging repeated arms.
    Report {
        #[arg(long, num_args = 1..)]
        roots: Vec<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Preset::Full) => ExperimentConfig::default(),
        (None, Preset::Toy) => ExperimentConfig::toy("data", "out"),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scale {
        if !(s > 0.0) {
            return Err(Error::Config(format!("scale {s} must be positive")));
        }
        cfg.scale_factor = s;
    }
    if let Some(d) = &cli.data {
        cfg.dataset_root = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.output_root = o.clone();
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::MakeToyDataset {
        root,
        tiles,
        size,
        toy_seed,
    } = &cli.command
    {
        let toy = ToyConfig {
            tiles: *tiles,
            size: *size,
            seed: *toy_seed,
            ..ToyConfig::default()
        };
        let ids = make_toy_dataset(root, &toy)?;
        println!("wrote {} tiles to {}", ids.len(), root.display());
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    let needs_data = !matches!(
        cli.command,
        Command::InferDepth { .. } | Command::Report { .. } | Command::ShowConfig
    );
    if needs_data && !cfg.dataset_root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist",
            cfg.dataset_root.display()
        )));
    }
    match cli.command {
        Command::MakeToyDataset { .. } => unreachable!("handled above"),
        Command::Prepare => {
            let _lock = OutputLock::acquire(&cfg.output_root)?;
            let o = pipeline::cmd_prepare(&cfg)?;
            let state = if o.up_to_date { "up to date" } else { "written" };
            println!(
                "manifest {state}: {} train / {} test tiles ({})",
                o.manifest.train_tiles.len(),
                o.manifest.test_tiles.len(),
                o.manifest_hash
            );
        }
        Command::TrainSeg { arm } => {
            let _lock = OutputLock::acquire(&cfg.output_root)?;
            let dir = pipeline::cmd_train_seg(&cfg, arm)?;
            println!("{}", dir.display());
        }
        Command::TrainGan => {
            let _lock = OutputLock::acquire(&cfg.output_root)?;
            let dir = pipeline::cmd_train_gan(&cfg)?;
            println!("{}", dir.display());
        }
        Command::InferDepth {
            checkpoint,
            input,
            output,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| cfg.gan_run_dir().join("generator.ckpt"));
            for p in pipeline::cmd_infer_depth(&cfg, &ckpt, &input, &output)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { arms } => {
            let _lock = OutputLock::acquire(&cfg.output_root)?;
            let arms = arms.unwrap_or_else(|| cfg.arms.clone());
            print!("{}", pipeline::cmd_evaluate(&cfg, &arms)?.to_markdown());
        }
        Command::Run => {
            let _lock = OutputLock::acquire(&cfg.output_root)?;
            print!("{}", pipeline::run_experiment(&cfg)?.to_markdown());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Report { roots, dest } => {
            let roots = if roots.is_empty() {
                vec![cfg.output_root.clone()]
            } else {
                roots
            };
            let dest = dest.unwrap_or_else(|| cfg.output_root.join("report"));
            print!("{}", pipeline::cmd_report(&roots, &dest)?.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
