use std::path::PathBuf;
use std::process::ExitCode;

use acp_core::pipeline::EvalUnit;
use acp_pipeline::stages::{self, InferInput};
use acp_pipeline::{CliError, CliResult, PipelineConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "acp", version, about = "Carotid plaque detection on panoramic radiographs")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ACP_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth {
        #[arg(long, default_value_t = 65)]
        n: usize,
        #[arg(long, default_value_t = 0.67)]
        prevalence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the configured data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split the corpus and derive the ROI pair.
    Prepare {
        /// Split seed; defaults to `split.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the detector and write the checkpoint and loss curve.
    Train {
        /// Training seed; defaults to `detector.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        exec: Exec,
    },
    /// Detect plaques on one image and write the visualization artifacts.
    Infer {
        /// PNG file outside the manifest.
        #[arg(long, conflicts_with = "image_id", required_unless_present = "image_id")]
        image: Option<PathBuf>,
        /// Image id from the manifest.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Output directory; defaults to `<work_dir>/infer/<image id>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the checkpoint on the test split.
    Eval {
        #[arg(long)]
        threshold: Option<f64>,
        /// Score each side as its own unit.
        #[arg(long)]
        per_side: bool,
        #[command(flatten)]
        exec: Exec,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Args)]
struct Exec {
    /// Run on a single thread.
    #[arg(long)]
    serial: bool,
}

fn single_thread<R: Send>(serial: bool, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    if !serial {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(pool.install(f))
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    cfg.apply_env(|k| std::env::var(k).ok());
    match cli.command {
        Command::Synth { n, prevalence, seed, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            print_json(&stages::run_synth(&cfg, n, prevalence, seed, &out)?);
        }
        Command::Prepare { seed } => {
            let (split, spec) = stages::run_prepare(&cfg, seed.unwrap_or(cfg.split.seed))?;
            print_json(&serde_json::json!({
                "train": split.train.len(),
                "val": split.val.len(),
                "test": split.test.len(),
                "roi_spec": spec,
            }));
        }
        Command::Train { seed, iterations, exec } => {
            if let Some(s) = seed {
                cfg.detector.seed = s;
            }
            if let Some(i) = iterations {
                cfg.detector.iterations = i;
            }
            cfg.validate()?;
            let outcome = single_thread(exec.serial, || {
                stages::run_train(&cfg, exec.serial, |r| eprintln!("{}", r.csv_row()))
            })??;
            print_json(&outcome.checkpoint.metadata);
        }
        Command::Infer { image, image_id, threshold, out } => {
            let input = match (image, image_id) {
                (Some(p), None) => InferInput::File(p),
                (None, Some(id)) => InferInput::ManifestId(id),
                _ => return Err(CliError::Usage("give exactly one of --image or --image-id".into())),
            };
            let threshold = threshold.unwrap_or(cfg.eval.threshold);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Usage(format!("threshold {threshold} outside [0, 1]")));
            }
            let out = out.unwrap_or_else(|| {
                let name = match &input {
                    InferInput::ManifestId(id) => id.clone(),
                    InferInput::File(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                };
                cfg.paths.work_dir.join("infer").join(name)
            });
            print_json(&stages::run_infer(&cfg, &input, threshold, &out)?.document);
        }
        Command::Eval { threshold, per_side, exec } => {
            let threshold = threshold.unwrap_or(cfg.eval.threshold);
            if !(0.0..=1.0).contains(&threshold) {
                return Err(CliError::Usage(format!("threshold {threshold} outside [0, 1]")));
            }
            let unit = if per_side { EvalUnit::Side } else { cfg.eval.unit };
            print_json(&single_thread(exec.serial, || stages::run_eval(&cfg, threshold, unit))??);
        }
        Command::Serve { bind } => {
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Server(e.to_string()))?;
            rt.block_on(acp_pipeline::service::serve(cfg))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
