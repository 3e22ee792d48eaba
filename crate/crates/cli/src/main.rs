//! `fedtext`: experiment runner for federated recurrent text classifiers.
//!
//! Log verbosity is controlled by the FEDTEXT_LOG environment variable
//! (error, warn, info, debug, trace).

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use fedtext_core::config::ExperimentConfig;
use fedtext_core::error::Error;
use fedtext_core::experiment::{
    predict_text, run_client_agent, run_experiment, run_tokenizer_ablation,
};
use fedtext_core::synth::{generate_synthetic_corpus, SynthSpec};
use fedtext_core::transport::{serve, FilesystemBackend, InMemoryBackend};

#[derive(Parser)]
#[command(name = "fedtext", version, about = "Federated training of small recurrent text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a centralized or federated experiment from a config file.
    Run {
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the same federation twice, with the common tokenizer and with
    /// per-client tokenizers, and write the paired accuracy series.
    AblateTokenizer {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic benchmark corpus and its embedding file.
    Synth {
        /// Training samples per class.
        #[arg(long)]
        per_class: usize,
        /// Test samples per class (defaults to half of --per-class).
        #[arg(long)]
        test_per_class: Option<usize>,
        /// Total distinct words in the corpus.
        #[arg(long, default_value_t = 120)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for train.csv, test.csv, embeddings.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the blob store and message board over TCP.
    Serve {
        /// host:port to listen on.
        #[arg(long)]
        addr: String,
        /// Persist blobs and the board under this directory instead of
        /// keeping them in memory.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Participate in a networked federation as one client.
    Client {
        /// host:port of a running `fedtext serve`.
        #[arg(long)]
        addr: String,
        #[arg(long)]
        client_id: usize,
        #[arg(long)]
        config: PathBuf,
    },
    /// Classify one text with a saved model blob.
    Predict {
        /// Path to a serialized parameter payload (e.g. out/final_model.bin).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        text: String,
        /// Config supplying the tokenizer and embedding setup.
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(
    path: &PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    Ok(config)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, seed, out } => {
            let config = load_config(&config, seed, out)?;
            let output = run_experiment(&config, false)?;
            println!(
                "wrote {} round records to {}",
                output.records.len(),
                output.out_dir.display()
            );
            Ok(())
        }
        Command::AblateTokenizer { config, seed, out } => {
            let config = load_config(&config, seed, out)?;
            let output = run_tokenizer_ablation(&config, false)?;
            let last_common = output.common.last().map(|r| r.global.accuracy).unwrap_or(0.0);
            let last_per_client = output
                .per_client
                .last()
                .map(|r| r.global.accuracy)
                .unwrap_or(0.0);
            println!(
                "final accuracy: common {last_common:.4} vs per-client {last_per_client:.4}; series in {}",
                output.out_dir.join("ablation.csv").display()
            );
            Ok(())
        }
        Command::Synth {
            per_class,
            test_per_class,
            vocab_size,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                per_class_train: per_class,
                per_class_test: test_per_class.unwrap_or(per_class.div_ceil(2)),
                vocab_size,
                seed,
            };
            let paths = generate_synthetic_corpus(&spec, &out)?;
            println!(
                "wrote {}, {}, {}",
                paths.train_csv.display(),
                paths.test_csv.display(),
                paths.embeddings.display()
            );
            Ok(())
        }
        Command::Serve { addr, root } => {
            let backend: Arc<dyn fedtext_core::transport::Backend> = match root {
                Some(root) => Arc::new(FilesystemBackend::new(root)?),
                None => Arc::new(InMemoryBackend::default()),
            };
            let listener = std::net::TcpListener::bind(&addr)
                .map_err(|e| Error::Protocol(format!("bind {addr}: {e}")))?;
            println!("serving blob store + message board on {addr}");
            serve(listener, backend)
        }
        Command::Client {
            addr,
            client_id,
            config,
        } => {
            let config = ExperimentConfig::load(&config)?;
            println!("client {client_id} joining federation via {addr}");
            run_client_agent(&config, client_id, Some(&addr))?;
            println!("client {client_id} completed all rounds");
            Ok(())
        }
        Command::Predict {
            model,
            text,
            config,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let (class, name, scores) = predict_text(&config, &model, &text)?;
            println!(
                "class {class} ({name}); scores [{}]",
                scores
                    .iter()
                    .map(|s| format!("{s:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FEDTEXT_LOG")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
