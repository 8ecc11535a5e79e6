use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kggdg::bench::ShuffleMode;
use kggdg::evalrun::ReportFormat;
use kggdg::pipeline::{self, AugmentMethod, PipelineConfig, Providers};

#[derive(Parser)]
#[command(name = "kggdg", version, about = "Knowledge-graph guided distractor generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set walk.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Override `global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the node/edge tables and write the binary graph cache.
    Ingest,
    /// Embed every graph node name missing from the embedding cache.
    EmbedNodes,
    /// Replace distractors in one or more datasets.
    Augment {
        #[arg(long, value_enum, default_value = "kggdg")]
        method: MethodArg,
        /// Option placement; defaults to the config's `shuffle_mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Input JSONL files; defaults to `paths.datasets`.
        inputs: Vec<PathBuf>,
    },
    /// Score the answer model and write report.md, report.csv, summary.json.
    Evaluate {
        /// Dataset JSONL files (original or augmented).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the report from a previous `evaluate`.
    Report {
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        /// Directory holding summary.json; defaults to `paths.output_dir`.
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kggdg,
    Direct,
    Original,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shuffled,
    Unshuffled,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = common.seed {
        cfg.global_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Ingest => {
            let (g, status) = pipeline::ingest(&cfg)?;
            println!("{} nodes, {} edges ({status:?})", g.node_count(), g.edge_count());
        }
        Command::EmbedNodes => {
            let embedder = Providers::embedder(&cfg)?;
            let s = pipeline::embed_nodes(&cfg, embedder.as_ref())?;
            println!(
                "{} already cached, {} embedded in {} batches",
                s.already_cached, s.embedded, s.batches
            );
        }
        Command::Augment { method, mode, inputs } => {
            let method = match method {
                MethodArg::Kggdg => AugmentMethod::Kggdg,
                MethodArg::Direct => AugmentMethod::Direct,
                MethodArg::Original => AugmentMethod::Original,
            };
            let mode = match mode {
                Some(ModeArg::Shuffled) => ShuffleMode::Shuffled,
                Some(ModeArg::Unshuffled) => ShuffleMode::Unshuffled,
                None => cfg.shuffle_mode,
            };
            let inputs = if inputs.is_empty() { cfg.paths.datasets.clone() } else { inputs };
            if inputs.is_empty() {
                bail!("no input datasets given and paths.datasets is empty");
            }
            let providers = match method {
                AugmentMethod::Original => None,
                AugmentMethod::Direct => Some(Providers::chat_only(Providers::chat_backend(&cfg)?, &cfg)),
                AugmentMethod::Kggdg => Some(Providers::from_config(&cfg)?),
            };
            for input in &inputs {
                let out = pipeline::augment(&cfg, providers.as_ref(), input, method, mode)
                    .with_context(|| format!("augmenting {}", input.display()))?;
                println!("{} {:?}", out.dataset.display(), out.provenance_counts);
            }
        }
        Command::Evaluate { inputs } => {
            let chat = kggdg::llm::ChatClient::new(
                Providers::chat_backend(&cfg)?,
                cfg.providers.max_concurrency,
                cfg.providers.retry,
            );
            let summary = pipeline::evaluate(&cfg, &chat, &inputs)?;
            print!("{}", pipeline::render_summary(&summary, ReportFormat::Markdown));
            let worst = summary.worst_abstention();
            if worst > cfg.max_abstention_rate {
                log::error!(
                    "abstention rate {:.1}% exceeds the {:.1}% limit",
                    100.0 * worst,
                    100.0 * cfg.max_abstention_rate
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { format, dir } => {
            let dir = dir.unwrap_or_else(|| cfg.paths.output_dir.clone());
            let format = match format {
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Csv => ReportFormat::Csv,
            };
            print!("{}", pipeline::report(&dir, format)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
