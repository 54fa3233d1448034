use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use tonalsig::pipeline::{Pipeline, PipelineConfig, Stage, StageOptions};

#[derive(Parser)]
#[command(name = "tonalsig", version, about = "Extract class-specific tonal signatures from noisy spectrograms")]
struct Cli {
    /// Experiment config (JSON). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for stage artifacts and the run ledger.
    #[arg(long, global = true, default_value = "runs")]
    stage_dir: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the binarization threshold for extract and sweep.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and its manifest.
    Synth,
    /// Train the spectrogram classifier.
    TrainCnn,
    /// Train one GAN per class.
    TrainWgan,
    /// Add synthetic images to the training split and retrain the classifier.
    Augment,
    /// Cluster embeddings and build per-class general masks.
    Cluster,
    /// Extract signatures from the test split or a single image.
    Extract {
        /// Single .spg image to process instead of the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for the extracted signatures.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the threshold / approach sweep against ground truth.
    Sweep,
    /// Write the markdown report and example panel.
    Report,
    /// Run every stage in order.
    Run,
    /// Write the effective config as JSON.
    InitConfig {
        /// Destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(t) = cli.threshold {
        anyhow::ensure!((0.0..=1.0).contains(&t), "--threshold must lie in [0, 1], got {t}");
        config.override_threshold(t);
    }
    Ok(config)
}

fn run_one(pipeline: &Pipeline, stage: Stage, opts: &StageOptions) -> Result<()> {
    let entry = pipeline
        .run_stage(stage, opts)
        .with_context(|| format!("stage `{stage}` failed"))?;
    println!(
        "{stage}: {} artifacts in {:.1}s",
        entry.artifacts.len(),
        entry.wall_time_s
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    if let Command::InitConfig { out } = &cli.command {
        let json = serde_json::to_string_pretty(&config)?;
        match out {
            Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
            None => println!("{json}"),
        }
        return Ok(());
    }
    std::fs::create_dir_all(&cli.stage_dir).with_context(|| format!("creating {}", cli.stage_dir.display()))?;
    let pipeline = Pipeline::new(config, &cli.stage_dir);
    let none = StageOptions::default();
    match cli.command {
        Command::Synth => run_one(&pipeline, Stage::Synth, &none),
        Command::TrainCnn => run_one(&pipeline, Stage::TrainCnn, &none),
        Command::TrainWgan => run_one(&pipeline, Stage::TrainWgan, &none),
        Command::Augment => run_one(&pipeline, Stage::Augment, &none),
        Command::Cluster => run_one(&pipeline, Stage::Cluster, &none),
        Command::Extract { input, output } => run_one(&pipeline, Stage::Extract, &StageOptions { input, output }),
        Command::Sweep => run_one(&pipeline, Stage::Sweep, &none),
        Command::Report => run_one(&pipeline, Stage::Report, &none),
        Command::Run => Stage::ALL.into_iter().try_for_each(|s| run_one(&pipeline, s, &none)),
        Command::InitConfig { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
