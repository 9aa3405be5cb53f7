use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdrfuse_cli::commands::{self, InferArgs};
use hdrfuse_cli::config::RunConfig;
use hdrfuse_core::diffusion::{Direction, Position};
use hdrfuse_core::pipeline::Ablation;
use hdrfuse_core::Result;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "hdrfuse", version, about = "HDR reconstruction and generation with latent exposure brackets")]
struct Cli {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set vae_train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural HDR scenes for the train and test splits.
    GenScenes,
    /// Synthesize LDR exposure brackets from HDR images.
    Synth {
        /// Folder of .pfm files; both scene splits when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pretrain the LDR autoencoder.
    PretrainVae,
    /// Fine-tune the fusion module and HDR decoder.
    FinetuneDecoder,
    /// Train a one-level exposure shift denoiser.
    TrainDenoiser {
        #[arg(long)]
        direction: Direction,
    },
    /// Train the unconditional base denoiser.
    TrainBase,
    /// Reconstruct HDR images from LDR inputs.
    Infer {
        /// .ppm images or dataset sample folders; the test split when omitted.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// none, wo-decoder or wo-denoiser.
        #[arg(long)]
        ablate: Option<Ablation>,
        /// lowest, middle or highest.
        #[arg(long)]
        position: Option<Position>,
        #[arg(long)]
        no_blend: bool,
    },
    /// Sample HDR images from the unconditional model.
    Generate {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of reconstructions against dataset references.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        /// Dataset split holding the references; the test split when omitted.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Luminance along one image row as CSV, with an optional plot.
    Scanline {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        row: usize,
        /// Further images whose same row is overlaid on the plot.
        #[arg(long)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Value> {
    let cfg = || RunConfig::load(cli.config.as_deref(), &cli.sets, cli.seed);
    match cli.command {
        Command::GenScenes => commands::cmd_gen_scenes(&cfg()?),
        Command::Synth { input, output } => commands::cmd_synth(&cfg()?, input.as_deref(), output.as_deref()),
        Command::PretrainVae => commands::cmd_pretrain_vae(&cfg()?),
        Command::FinetuneDecoder => commands::cmd_finetune_decoder(&cfg()?),
        Command::TrainDenoiser { direction } => commands::cmd_train_denoiser(&cfg()?, direction),
        Command::TrainBase => commands::cmd_train_denoiser(&cfg()?, Direction::Unconditional),
        Command::Infer { inputs, out, ablate, position, no_blend } => {
            commands::cmd_infer(&cfg()?, &InferArgs { inputs, out, ablation: ablate, position, no_blend })
        }
        Command::Generate { count, out } => commands::cmd_generate(&cfg()?, count, out.as_deref()),
        Command::Eval { recon, reference } => {
            let summary = commands::cmd_eval(&cfg()?, &recon, reference.as_deref())?;
            eprint!("{}", commands::format_eval_table(&summary));
            Ok(summary)
        }
        Command::Scanline { image, row, compare, out, plot } => {
            commands::cmd_scanline(&image, row, &compare, out.as_deref(), plot.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}
