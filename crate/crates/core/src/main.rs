use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use udparse::config::RunConfig;
use udparse::conllu::{read_conllu_file, write_conllu, Sentence};
use udparse::encoder::{read_vectors_file, ContextualVectors};
use udparse::eval::{evaluate, EvalReport, Metric};
use udparse::fsutil::write_atomic;
use udparse::gradcheck::gradcheck;
use udparse::model::{ParserModel, Structure};
use udparse::numeric::OpKind;
use udparse::scorer::{write_scores_header, write_sentence_scores};
use udparse::synthetic::{generate, SyntheticConfig};
use udparse::train::{parse_corpus, train, Corpus};

const MODEL_FILE: &str = "model.bin";

#[derive(Parser)]
#[command(name = "udparse", version, about = "Biaffine dependency parser for basic and enhanced UD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ParseMode {
    Basic,
    Enhanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Basic,
    Enhanced,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best checkpoint on the dev set.
    Train {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Configuration override such as train.base_lr=0.01; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Contextual vectors for the training file.
        #[arg(long)]
        train_vectors: Option<PathBuf>,
        #[arg(long)]
        dev_vectors: Option<PathBuf>,
        /// Output directory for the checkpoint, log and resolved config.
        #[arg(long, env = "UDPARSE_MODEL_DIR")]
        out: PathBuf,
    },
    /// Parse a CoNLL-U file with gold tokenization.
    Parse {
        /// Checkpoint file or model directory.
        #[arg(long, env = "UDPARSE_MODEL_DIR")]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "basic")]
        mode: ParseMode,
    },
    /// Score a system file against a gold file.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        system: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        mode: EvalMode,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Perturb the backward rule of one primitive.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write the raw score tensors of every sentence.
    ExportScores {
        #[arg(long, env = "UDPARSE_MODEL_DIR")]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Summarize a contextual vector file.
    Vectors {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic English-like treebank.
    Synth {
        #[arg(long, default_value_t = 100)]
        sentences: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    read_conllu_file(path).with_context(|| format!("reading {}", path.display()))
}

fn read_vectors(path: Option<&Path>) -> Result<Option<Vec<ContextualVectors>>> {
    path.map(|p| {
        read_vectors_file(p)
            .map(|(_, v)| v)
            .with_context(|| format!("reading {}", p.display()))
    })
    .transpose()
}

fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<ParserModel> {
    let file = model_path(path);
    ParserModel::load_file(&file).with_context(|| format!("loading {}", file.display()))
}

fn filter_report(report: EvalReport, mode: EvalMode) -> EvalReport {
    let keep = |m: &Metric| match mode {
        EvalMode::All => true,
        EvalMode::Basic => !matches!(m, Metric::Eulas | Metric::Elas),
        EvalMode::Enhanced => matches!(m, Metric::Eulas | Metric::Elas),
    };
    EvalReport {
        metrics: report.metrics.into_iter().filter(|(m, _)| keep(m)).collect(),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            train: train_path,
            dev,
            train_vectors,
            dev_vectors,
            out,
        } => {
            let config = RunConfig::load(config.as_deref(), &overrides)?;
            let train_set = read_sentences(&train_path)?;
            let dev_set = read_sentences(&dev)?;
            let train_vecs = read_vectors(train_vectors.as_deref())?;
            let dev_vecs = read_vectors(dev_vectors.as_deref())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            log::info!(
                "training on {} sentences, selecting on {}",
                train_set.len(),
                dev_set.len()
            );
            let model = ParserModel::new(config.model.clone(), &train_set, config.train.seed);
            let mut lines = String::new();
            let outcome = train(
                model,
                Corpus::with_vectors(&train_set, train_vecs.as_deref()),
                Corpus::with_vectors(&dev_set, dev_vecs.as_deref()),
                &config.train,
                |e| lines.push_str(&(serde_json::to_string(e).expect("serializable") + "\n")),
            )?;
            outcome.best.save_file(out.join(MODEL_FILE))?;
            write_atomic(out.join("log.jsonl"), |w| w.write_all(lines.as_bytes()))?;
            write_atomic(out.join("config.toml"), |w| w.write_all(config.to_toml().as_bytes()))?;
            log::info!(
                "best epoch {} of {} with score {:.4}",
                outcome.best_epoch,
                outcome.epochs,
                outcome.best_score
            );
            Ok(true)
        }
        Command::Parse {
            model,
            input,
            vectors,
            output,
            mode,
        } => {
            let model = load_model(&model)?;
            let expected = match mode {
                ParseMode::Basic => Structure::Tree,
                ParseMode::Enhanced => Structure::Graph,
            };
            if model.config().structure != expected {
                bail!(
                    "the checkpoint predicts {:?} structures but {:?} mode was requested",
                    model.config().structure,
                    mode
                );
            }
            let sentences = read_sentences(&input)?;
            let vecs = read_vectors(vectors.as_deref())?;
            let corpus = Corpus::with_vectors(&sentences, vecs.as_deref());
            if let Some(v) = corpus.vectors {
                if v.len() != sentences.len() {
                    bail!("{} sentences but {} vector blocks", sentences.len(), v.len());
                }
            }
            let parsed = parse_corpus(&model, corpus)?;
            write_atomic(&output, |w| write_conllu(&parsed, w))?;
            log::info!("parsed {} sentences", parsed.len());
            Ok(true)
        }
        Command::Evaluate {
            gold,
            system,
            mode,
            format,
        } => {
            let gold = read_sentences(&gold)?;
            let system = read_sentences(&system)?;
            let report = filter_report(evaluate(&gold, &system)?, mode);
            match format {
                Format::Table => println!("{}", report),
                Format::Json => print!("{}", report.to_json_lines()),
            }
            Ok(true)
        }
        Command::Gradcheck {
            config,
            overrides,
            seed,
            format,
            corrupt,
        } => {
            let mut config = RunConfig::load(config.as_deref(), &overrides)?.gradcheck;
            if let Some(s) = seed {
                config.seed = s;
            }
            let fault = corrupt
                .map(|c| c.parse::<OpKind>().map_err(|e| anyhow::anyhow!("{}", e)))
                .transpose()?;
            let report = gradcheck(&config, fault)?;
            match format {
                Format::Table => println!("{}", report),
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(report.passed())
        }
        Command::ExportScores {
            model,
            input,
            vectors,
            output,
        } => {
            let model = load_model(&model)?;
            let sentences = read_sentences(&input)?;
            let vecs = read_vectors(vectors.as_deref())?;
            let corpus = Corpus::with_vectors(&sentences, vecs.as_deref());
            let mut tensors = Vec::with_capacity(sentences.len());
            for (i, s) in sentences.iter().enumerate() {
                tensors.push(model.score(s, corpus.vectors_at(i))?);
            }
            write_atomic(&output, |w| {
                write_scores_header(w)?;
                tensors.iter().try_for_each(|t| write_sentence_scores(w, t))
            })?;
            Ok(true)
        }
        Command::Vectors { input } => {
            let (header, blocks) =
                read_vectors_file(&input).with_context(|| format!("reading {}", input.display()))?;
            println!(
                "model {} version {} layers {} dim {} sentences {}",
                header.model,
                header.version,
                header.layers,
                header.dim,
                blocks.len()
            );
            for (i, b) in blocks.iter().enumerate() {
                println!("{}\t{}", i + 1, b.num_tokens());
            }
            Ok(true)
        }
        Command::Synth {
            sentences,
            seed,
            output,
        } => {
            let corpus = generate(&SyntheticConfig {
                sentences,
                seed,
                ..Default::default()
            });
            write_atomic(&output, |w| write_conllu(&corpus, w))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{:#}", e);
            ExitCode::from(2)
        }
    }
}
