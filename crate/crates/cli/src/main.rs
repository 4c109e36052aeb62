use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hctx_core::fewshot::Protocol;
use hctx_core::image::Image;
use hctx_core::pipeline::checkpoint::Checkpoint;
use hctx_core::pipeline::train::{checkpoint_path, load_cascade, Stages};
use hctx_core::pipeline::{evaluate_cmd, train, visualize_cmd, Dataset, EvalSplit, RunConfig};

/// Hierarchically cascaded transformers with spectral token pooling.
///
/// Settings are resolved in order: built-in defaults, the `--config` file,
/// `HCTX_<KEY>` environment variables (e.g. `HCTX_BETA=0.05`), then flags.
#[derive(Parser, Debug)]
#[command(name = "hctx", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Fully sequential, reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print every effective setting as documented TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train stage 1, stage 2, or both.
    Train {
        /// Run a single stage; stage 2 resumes from the stage-1 checkpoint.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
    },
    /// Few-shot evaluation on the configured split.
    Eval {
        /// Checkpoint to evaluate; defaults to the stage checkpoint in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Which stage checkpoint to pick when --checkpoint is absent.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Transformer set whose [cls] feature is used.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
        stage_select: Option<u64>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluate on base, val or novel classes.
        #[arg(long, value_parser = parse_split)]
        split: Option<EvalSplit>,
        /// Also write per-episode accuracies here.
        #[arg(long, value_name = "PATH")]
        per_episode: Option<PathBuf>,
    },
    /// Cluster maps and the [cls] attention heatmap for one image.
    Viz {
        /// Input image (binary PPM) matching the configured size.
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to `<output_dir>/viz`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata and tensor shapes.
    InspectCheckpoint { path: PathBuf },
}

fn parse_split(s: &str) -> Result<EvalSplit, String> {
    match s {
        "base" => Ok(EvalSplit::Base),
        "val" => Ok(EvalSplit::Val),
        "novel" => Ok(EvalSplit::Novel),
        _ => Err(format!("unknown split {s:?}, expected base, val or novel")),
    }
}

fn resolve(cli: &Cli) -> hctx_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_process_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(Command::Eval {
        stage_select,
        way,
        shot,
        queries,
        episodes,
        split,
        ..
    }) = &cli.command
    {
        cfg.stage_select = stage_select.map_or(cfg.stage_select, |s| s as usize);
        cfg.eval_way = way.unwrap_or(cfg.eval_way);
        cfg.eval_shot = shot.unwrap_or(cfg.eval_shot);
        cfg.eval_queries = queries.unwrap_or(cfg.eval_queries);
        cfg.eval_episodes = episodes.unwrap_or(cfg.eval_episodes);
        cfg.eval_split = split.unwrap_or(cfg.eval_split);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> hctx_core::Result<()> {
    if let Some(Command::InspectCheckpoint { path }) = &cli.command {
        print!("{}", Checkpoint::read(path)?.describe());
        return Ok(());
    }
    let cfg = resolve(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_documented_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(hctx_core::Error::InvalidArgument(
            "no command given; try `hctx --help`".into(),
        ));
    };
    match command {
        Command::Train { stage } => {
            let dataset = Dataset::load(&cfg)?;
            let stages = stage.map_or(Stages::Both, Stages::Only);
            let report = train(&cfg, &dataset, stages)?;
            for p in &report.checkpoints {
                println!("checkpoint {}", p.display());
            }
            let losses: Vec<String> = report.final_loss.iter().map(|l| format!("{l:.6}")).collect();
            println!("steps={} final_loss={}", report.steps, losses.join(","));
        }
        Command::Eval {
            checkpoint,
            stage,
            per_episode,
            ..
        } => {
            let dataset = Dataset::load(&cfg)?;
            let path = checkpoint.unwrap_or_else(|| checkpoint_path(&cfg, stage));
            let protocol = Protocol {
                way: cfg.eval_way,
                shot: cfg.eval_shot,
                queries: cfg.eval_queries,
                episodes: cfg.eval_episodes,
            };
            let report = evaluate_cmd(&cfg, &dataset, &path, protocol, cfg.stage_select, per_episode.as_deref())?;
            println!("stage_select={} {}", cfg.stage_select, report.summary_line());
        }
        Command::Viz { image, checkpoint, out } => {
            let dataset = Dataset::load(&cfg)?;
            let classes = dataset.manifest.count(EvalSplit::Base);
            let path = checkpoint.unwrap_or_else(|| checkpoint_path(&cfg, 2));
            let cascade = load_cascade(&cfg, classes, &path)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("viz"));
            for p in visualize_cmd(&cfg, &cascade, &Image::read_ppm(&image)?, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::InspectCheckpoint { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
