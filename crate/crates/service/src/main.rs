use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diag_assistant::pipeline::{self, FusionMode};
use diag_assistant::{Config, PipelineError};
use diag_core::cohort::DiagnosisLabel;

/// Multimodal diagnostic assistant: batch pipeline and HTTP service.
#[derive(Parser)]
#[command(name = "diag-assistant", version)]
struct Cli {
    /// Config file; relative paths inside it resolve against its directory.
    #[arg(long, global = true, conflicts_with = "dir")]
    config: Option<PathBuf>,
    /// Working directory, read for diag-assistant.toml when --config is not given.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic cohort and its manifest.
    GenerateData,
    /// Train the three modality models and learn the fusion weights.
    Train,
    /// Score the models and fusion strategies on the validation split.
    Evaluate {
        #[arg(long, default_value = "both")]
        fusion: FusionMode,
    },
    /// Print one patient's attribution bundle as JSON.
    Explain {
        card_id: String,
        /// Class name or code; defaults to the fused prediction.
        #[arg(long)]
        class: Option<DiagnosisLabel>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project every patient into the four embedding spaces.
    Project,
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

fn config(cli: &Cli) -> Result<Config, PipelineError> {
    Ok(match (&cli.config, &cli.dir) {
        (Some(path), _) => Config::load(path)?,
        (None, Some(dir)) => Config::discover(dir)?,
        (None, None) => Config::discover(&PathBuf::from("."))?,
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::GenerateData => {
            let ds = pipeline::generate_data(&cfg)?;
            println!("wrote {} patients to {}", ds.len(), cfg.data_dir.display());
        }
        Command::Train => {
            let report = pipeline::train(&cfg)?;
            let w = report.weights.as_array();
            println!(
                "trained on {} patients; fusion weights indicator={:.4} text={:.4} image={:.4}",
                report.n_train, w[0], w[1], w[2]
            );
        }
        Command::Evaluate { fusion } => {
            let r = pipeline::evaluate(&cfg, fusion)?;
            let u = &r.unimodal;
            println!(
                "val accuracy: indicator {:.4}, text {:.4}, image {:.4}",
                u.indicator.accuracy, u.text.accuracy, u.image.accuracy
            );
            if let Some(m) = &r.decision_level {
                println!(
                    "decision-level fusion: accuracy {:.4}, macro F1 {:.4}",
                    m.accuracy, m.macro_f1
                );
            }
            if let Some(m) = &r.feature_level {
                println!(
                    "feature-level baseline: accuracy {:.4}, macro F1 {:.4}",
                    m.accuracy, m.macro_f1
                );
            }
        }
        Command::Explain {
            card_id,
            class,
            out,
        } => {
            let bundle = pipeline::explain(&cfg, &card_id, class)?;
            match out {
                Some(path) => pipeline::write_json(&path, &bundle)?,
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&bundle).expect("bundle serializes")
                ),
            }
        }
        Command::Project => {
            let p = pipeline::project(&cfg)?;
            for (space, proj) in &p.spaces {
                println!(
                    "{space}: {} points, final KL {:.4}",
                    proj.points.len(),
                    proj.final_kl
                );
            }
        }
        Command::Serve { bind } => {
            let rt = tokio::runtime::Runtime::new().map_err(|source| PipelineError::Io {
                path: "tokio runtime".into(),
                source,
            })?;
            rt.block_on(diag_assistant::serve(&cfg, bind.as_deref()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
