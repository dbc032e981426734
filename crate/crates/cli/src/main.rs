//! `tagrec`: ingest a Stack Exchange dump, build the label space and
//! tokenizer, train and evaluate the multi-encoder tag recommender.
//!
//! Exit codes: 0 on success, 2 for a missing or invalid input (bad flags,
//! unreadable or malformed artifacts, invalid settings), 1 for internal
//! failures. Errors are printed to stderr as one JSON object.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use tagrec::model::Component;
use tracing_subscriber::EnvFilter;

use crate::commands::{EvaluateInputs, PostInput};
use crate::config::{parse_component, set, ModelArgs, RunConfig, TrainArgs};

/// A failure caused by the caller's inputs rather than by the program.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(msg: String) -> Self {
        Self(msg)
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Parser)]
#[command(name = "tagrec", version, about = "Tag recommendation for Q&A posts")]
struct Cli {
    /// JSON settings file; flags override it [default: built-in settings]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight init, shuffling and sampling [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for ingestion and encoding, 0 = all cores [default: 0]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Only log errors
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse Posts.xml into corpus.jsonl and ingest_stats.json
    Ingest {
        /// Stack Exchange Posts.xml
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the tag vocabulary, drop rare tags and split train/test
    /// chronologically (vocab.json, train.jsonl, test.jsonl)
    BuildVocab {
        /// Corpus JSONL from `ingest`
        #[arg(long)]
        corpus: PathBuf,
        /// Minimum tag count [default: 50]
        #[arg(long)]
        theta: Option<u64>,
        /// Latest posts held out for testing [default: 100000]
        #[arg(long)]
        test_count: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the byte-level BPE tokenizer (tokenizer.json)
    TokenizerTrain {
        /// Corpus JSONL, normally train.jsonl
        #[arg(long)]
        corpus: PathBuf,
        /// Target vocabulary size, at least 260 [default: 8192]
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model (model.ckpt, loss.csv, train_summary.json)
    Train {
        /// Training corpus JSONL
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a model on a corpus, or score a predictions file
    /// (metrics.json, metrics.txt, instances.csv, missed_tags.json)
    Evaluate {
        /// Test corpus JSONL
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint from `train`
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        /// JSONL of {id, ground_truth, ranked_prediction}; replaces the model inputs
        #[arg(long, conflicts_with_all = ["model", "corpus"])]
        predictions: Option<PathBuf>,
        /// Cutoffs to report, comma separated [default: 1,2,3,4,5]
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the top-k tags for one post as JSON
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// JSON file with title, description and code
        #[arg(long, conflicts_with_all = ["title", "description", "code"])]
        post: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        description: Option<String>,
        #[arg(long)]
        code: Option<String>,
        /// Number of tags [default: 5]
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and evaluate the full model and one twin per excluded
    /// component (ablation.json, ablation.txt)
    Ablate {
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        test_corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Components to drop one at a time [default: title,description,code]
        #[arg(long, value_delimiter = ',', value_parser = parse_component)]
        exclude: Option<Vec<Component>>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Time single-post inference on a corpus sample (latency.json)
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Corpus to sample posts from
        #[arg(long)]
        corpus: PathBuf,
        /// Posts per repeat [default: 2000]
        #[arg(long)]
        sample_n: Option<usize>,
        /// Independent samples [default: 5]
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Wilcoxon signed-rank test and Cliff's delta on two per-instance tables
    Compare {
        /// instances.csv of the first system
        #[arg(long)]
        a: PathBuf,
        /// instances.csv of the second system
        #[arg(long)]
        b: PathBuf,
        /// Column to compare
        #[arg(long, default_value = "f1@5")]
        column: String,
        /// Also write compare.json here
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);

    match cli.command {
        Command::Ingest { input, out_dir } => {
            let cfg = cfg.finish();
            commands::run_ingest(&cfg, &input, &out_dir)
        }
        Command::BuildVocab {
            corpus,
            theta,
            test_count,
            out_dir,
        } => {
            set(&mut cfg.vocab.theta, theta);
            set(&mut cfg.vocab.test_count, test_count);
            commands::run_build_vocab(&cfg.finish(), &corpus, &out_dir)
        }
        Command::TokenizerTrain {
            corpus,
            vocab_size,
            out_dir,
        } => {
            set(&mut cfg.tokenizer.vocab_size, vocab_size);
            configure_pool(&cfg)?;
            commands::run_tokenizer_train(&cfg.finish(), &corpus, &out_dir)
        }
        Command::Train {
            corpus,
            vocab,
            tokenizer,
            model,
            train,
            out_dir,
        } => {
            model.apply(&mut cfg.model);
            train.apply(&mut cfg);
            configure_pool(&cfg)?;
            let mut cfg = cfg.finish();
            commands::run_train(&mut cfg, &corpus, &vocab, &tokenizer, &out_dir)
        }
        Command::Evaluate {
            corpus,
            model,
            vocab,
            tokenizer,
            predictions,
            ks,
            out_dir,
        } => {
            set(&mut cfg.eval.ks, ks);
            configure_pool(&cfg)?;
            let inputs = EvaluateInputs {
                corpus: corpus.as_deref(),
                model: model.as_deref(),
                vocab: vocab.as_deref(),
                tokenizer: tokenizer.as_deref(),
                predictions: predictions.as_deref(),
            };
            commands::run_evaluate(&cfg.finish(), inputs, &out_dir)
        }
        Command::Predict {
            model,
            vocab,
            tokenizer,
            post,
            title,
            description,
            code,
            k,
        } => {
            set(&mut cfg.eval.k, k);
            let post = match post {
                Some(path) => commands::read_post_file(&path)?,
                None => PostInput {
                    title: title.unwrap_or_default(),
                    description: description.unwrap_or_default(),
                    code: code.unwrap_or_default(),
                },
            };
            commands::run_predict(&cfg.finish(), &model, &vocab, &tokenizer, post)
        }
        Command::Ablate {
            train_corpus,
            test_corpus,
            vocab,
            tokenizer,
            exclude,
            model,
            train,
            out_dir,
        } => {
            model.apply(&mut cfg.model);
            train.apply(&mut cfg);
            configure_pool(&cfg)?;
            let exclude = exclude.unwrap_or_else(|| Component::ALL.to_vec());
            let mut cfg = cfg.finish();
            commands::run_ablate(
                &mut cfg,
                &train_corpus,
                &test_corpus,
                &vocab,
                &tokenizer,
                &exclude,
                &out_dir,
            )
        }
        Command::Bench {
            model,
            vocab,
            tokenizer,
            corpus,
            sample_n,
            repeats,
            out_dir,
        } => {
            set(&mut cfg.bench.sample_n, sample_n);
            set(&mut cfg.bench.repeats, repeats);
            commands::run_bench(&cfg.finish(), &model, &vocab, &tokenizer, &corpus, &out_dir)
        }
        Command::Compare { a, b, column, out_dir } => {
            commands::run_compare(&cfg.finish(), &a, &b, &column, out_dir.as_ref())
        }
    }
}

/// Sizes the global thread pool used for encoding and gradient work.
fn configure_pool(cfg: &RunConfig) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(commands::effective_workers(cfg.workers))
        .build_global()
        .map_err(|e| anyhow::anyhow!("cannot start worker pool: {e}"))
}

fn init_logging(quiet: bool) {
    let filter = if quiet {
        EnvFilter::new("error")
    } else {
        EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"))
    };
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn report(kind: &str, message: String, causes: Vec<String>, code: u8) -> ExitCode {
    let body = serde_json::json!({
        "error": { "kind": kind, "message": message, "causes": causes, "exit_code": code }
    });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => report("usage", e.render().to_string().trim().to_string(), Vec::new(), 2),
            };
        }
    };
    init_logging(cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let input = err.chain().any(|e| e.is::<InputError>());
            let causes = err.chain().skip(1).map(|e| e.to_string()).collect();
            if input {
                report("invalid_input", err.to_string(), causes, 2)
            } else {
                report("internal", err.to_string(), causes, 1)
            }
        }
    }
}
