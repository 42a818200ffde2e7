//! `cdp`: staged consensus-driven pseudo-labeling pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use cdp_core::pipeline::{run_ablation, write_report, PipelineConfig, Stage, Workspace};
use cdp_core::CdpError;
use clap::{Parser, Subcommand};

const DEFAULT_CONFIG: &str = include_str!("../default.toml");

#[derive(Parser, Debug)]
#[command(name = "cdp", version, about = "Consensus-driven pseudo-labeling over k-NN graphs")]
struct Cli {
    /// Pipeline config (TOML). Without it the bundled benchmark config is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root; overrides `out_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write base and committee embeddings, labels and split.
    Generate,
    /// Build k-NN graphs for every model on both sides of the split.
    Graph,
    /// Compute training and candidate pair features.
    Features,
    /// Train the mediator on the labeled side.
    Train,
    /// Score candidates and keep the confident pairs.
    Select {
        /// Probability threshold; overrides `mediator.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Propagate pseudo-labels over the consensus graph.
    Propagate,
    /// Score the clustering baseline, voting and the mediator.
    Evaluate,
    /// Run every stage in order, reusing complete ones.
    Pipeline {
        /// Stop after this stage.
        #[arg(long, value_name = "NAME")]
        stage: Option<Stage>,
    },
    /// Run the committee, input, k and heterogeneity sweeps.
    Ablation,
    /// Print the bundled default config.
    DefaultConfig,
}

fn exit_code(e: &CdpError) -> u8 {
    match e {
        CdpError::InvalidConfig { .. } => 2,
        CdpError::MissingInput(_) => 3,
        CdpError::Invariant(_) => 4,
        CdpError::StageMismatch(_) => 5,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CdpError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::from_toml(DEFAULT_CONFIG)?,
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Select {
        threshold: Some(t),
    } = cli.command
    {
        cfg.mediator.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_file(path: &std::path::Path) -> Result<(), CdpError> {
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CdpError> {
    if let Command::DefaultConfig = cli.command {
        print!("{DEFAULT_CONFIG}");
        return Ok(());
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CdpError::InvalidConfig {
                field: "workers".into(),
                reason: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CdpError::Invariant(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let ws = Workspace::new(cfg.clone(), cfg.out_dir.clone())?;
    let single = |stage: Stage| -> Result<PathBuf, CdpError> {
        let dir = ws.run(stage, false)?;
        println!("{stage}: {}", dir.display());
        Ok(dir)
    };
    match &cli.command {
        Command::Generate => {
            single(Stage::Generate)?;
        }
        Command::Graph => {
            single(Stage::Graph)?;
        }
        Command::Features => {
            single(Stage::Features)?;
        }
        Command::Train => {
            let dir = single(Stage::Train)?;
            print_file(&dir.join("first_layer.csv"))?;
        }
        Command::Select { .. } => {
            let dir = single(Stage::Select)?;
            print_file(&dir.join("pair_metrics.json"))?;
        }
        Command::Propagate => {
            single(Stage::Propagate)?;
        }
        Command::Evaluate => {
            let dir = single(Stage::Evaluate)?;
            print_file(&dir.join("report.csv"))?;
        }
        Command::Pipeline { stage } => {
            let last = stage.unwrap_or(Stage::Evaluate);
            for s in Stage::ALL.into_iter().filter(|&s| s <= last) {
                let dir = ws.run(s, true)?;
                println!("{s}: {}", dir.display());
            }
            if last == Stage::Evaluate {
                print_file(&ws.stage_dir(Stage::Evaluate).join("report.csv"))?;
            }
        }
        Command::Ablation => {
            let rows = run_ablation(&cfg)?;
            let dir = ws.ablation_dir();
            std::fs::create_dir_all(&dir)?;
            write_report(&rows, &dir)?;
            println!("ablation: {}", dir.display());
            print_file(&dir.join("report.csv"))?;
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDP_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
