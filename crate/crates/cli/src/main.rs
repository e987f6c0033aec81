mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::RunConfig;

/// Learn object-room affinities from a preference knowledge graph.
#[derive(Parser, Debug)]
#[command(name = "roomgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a separable synthetic feature set with preference scores
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        rooms: Option<usize>,
        /// Images per category
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        /// `onehot` or `center`
        #[arg(long)]
        room_features: Option<String>,
    },
    /// Split images and build the knowledge graph
    BuildGraph {
        #[command(flatten)]
        common: Common,
        /// JSON-lines annotation records; defaults to `scores.json` in the data dir
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Split ratio `train:val:test`
        #[arg(long)]
        split: Option<String>,
    },
    /// Node and edge counts of a built graph
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder, checkpointing at every evaluation step
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Score a checkpoint on a split part
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Write room rankings for a split part
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        query: QueryArgs,
        /// Rank rooms per image instead of per category
        #[arg(long)]
        per_image: bool,
    },
    /// Pick the temperature with the best validation mAP
    TuneTemp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated candidates
        #[arg(long)]
        temperatures: Option<String>,
    },
    /// Self-edge embeddings of every feature row as TSV
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input directory; defaults to the output directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for every random choice (default: AFFINITY_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Comma-separated hidden widths
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Add the positive term to the loss denominator
    #[arg(long)]
    include_positive: bool,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `train`, `val` or `test`
    #[arg(long)]
    part: Option<String>,
}

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key, v.to_string()));
    }
}

fn push_path(o: &mut Overrides, key: &'static str, v: &Option<PathBuf>) {
    push(o, key, &v.as_ref().map(|p| p.display().to_string()));
}

impl Common {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "seed", &self.seed);
        push_path(o, "out", &self.out);
        push_path(o, "data", &self.data);
    }
}

impl ModelArgs {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "hidden", &self.hidden);
        push(o, "out_dim", &self.out_dim);
        push(o, "steps", &self.steps);
        push(o, "lr", &self.lr);
        push(o, "lr_decay_every", &self.lr_decay_every);
        push(o, "lr_decay_factor", &self.lr_decay_factor);
        push(o, "temperature", &self.temperature);
        push(o, "negatives", &self.negatives);
        push(o, "batch_size", &self.batch_size);
        if self.include_positive {
            o.push(("include_positive", "true".into()));
        }
        push(o, "eval_every", &self.eval_every);
    }
}

impl QueryArgs {
    fn overrides(&self, o: &mut Overrides) {
        push_path(o, "checkpoint", &self.checkpoint);
        push(o, "part", &self.part);
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenSynthetic { common, .. }
            | Command::BuildGraph { common, .. }
            | Command::Stats { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Infer { common, .. }
            | Command::TuneTemp { common, .. }
            | Command::ExportEmbeddings { common, .. } => common,
        }
    }

    fn overrides(&self) -> Overrides {
        let mut o = Vec::new();
        self.common().overrides(&mut o);
        match self {
            Command::GenSynthetic {
                categories,
                rooms,
                images,
                dim,
                separation,
                noise,
                room_features,
                ..
            } => {
                push(&mut o, "categories", categories);
                push(&mut o, "rooms", rooms);
                push(&mut o, "images", images);
                push(&mut o, "dim", dim);
                push(&mut o, "separation", separation);
                push(&mut o, "noise", noise);
                push(&mut o, "room_features", room_features);
            }
            Command::BuildGraph {
                annotations, split, ..
            } => {
                push_path(&mut o, "annotations", annotations);
                push(&mut o, "split", split);
            }
            Command::Stats { .. } => {}
            Command::Train { model, .. } => model.overrides(&mut o),
            Command::Eval { query, .. } => query.overrides(&mut o),
            Command::Infer {
                query, per_image, ..
            } => {
                query.overrides(&mut o);
                if *per_image {
                    o.push(("per_image", "true".into()));
                }
            }
            Command::TuneTemp {
                model,
                temperatures,
                ..
            } => {
                model.overrides(&mut o);
                push(&mut o, "temperatures", temperatures);
            }
            Command::ExportEmbeddings { checkpoint, .. } => {
                push_path(&mut o, "checkpoint", checkpoint)
            }
        }
        o
    }
}

fn effective_config(command: &Command) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("AFFINITY_SEED") {
        cfg.set("seed", &seed)
            .map_err(|e| CliError::Usage(format!("AFFINITY_SEED: {e}")))?;
    }
    if let Some(path) = &command.common().config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text, path).map_err(CliError::Usage)?;
    }
    for (key, value) in command.overrides() {
        cfg.set(key, &value).map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.command)?;
    match &cli.command {
        Command::GenSynthetic { .. } => commands::gen_synthetic(&cfg),
        Command::BuildGraph { .. } => commands::build_graph(&cfg),
        Command::Stats { .. } => commands::stats(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Infer { .. } => commands::infer(&cfg),
        Command::TuneTemp { .. } => commands::tune_temp(&cfg),
        Command::ExportEmbeddings { .. } => commands::export_embeddings(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::from(1),
            }
        }
    }
}
