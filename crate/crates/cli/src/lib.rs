//! Command-line front end: preprocess, train, evaluate, topics, coherence,
//! grid, plus synthetic data and gradient-check helpers.

pub mod error;
pub mod manifest;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use convmf::baselines::{pmf_fit, OffsetModel, PmfConfig};
use convmf::checkpoint::{Checkpoint, ModelState};
use convmf::corpus::{
    corpus_statistics, parse_review_records, read_corpus, subsample_top_items, write_corpus,
    Corpus, CorpusConfig, SplitRatios, StopWords, REVIEW_LEN,
};
use convmf::embeddings::{load_embedding_table, EmbeddingTable};
use convmf::numerics::{gradient_check, Activation, GradCheckSpec};
use convmf::synthetic::{self, SyntheticSpec};
use convmf::topics::{
    accumulate_word_activations, export_topic_report, KeywordOptions, TopicReport,
};
use convmf::training::{
    evaluate_rmse, grid_table_json, run_grid, split_ratings, train_convmf, EvalSplit, TrainConfig,
    TrainError,
};

pub use error::CliError;
use manifest::{Provenance, RunManifest};

pub const CORPUS_FILE: &str = "corpus.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const STATS_FILE: &str = "stats.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const TOPICS_FILE: &str = "topics.json";
pub const COHERENCE_FILE: &str = "coherence.json";
pub const GRID_FILE: &str = "grid.json";
pub const EVAL_FILE: &str = "evaluation.json";

/// λ values and factor counts of the experiment grid.
pub const GRID_LAMBDAS: [f64; 6] = [0.0, 0.4, 0.8, 1.2, 1.6, 2.0];
pub const GRID_FACTORS: [usize; 4] = [6, 8, 10, 12];
pub const DEFAULT_SUBSAMPLE: usize = 2000;

#[derive(Debug, Parser)]
#[command(
    name = "convmf",
    version,
    about = "Convolutional matrix factorization with entropy-regularized topics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw reviews, split, build the vocabulary and write the tokenized corpus.
    Preprocess(PreprocessArgs),
    /// Train a model (ConvMF by default) and write its checkpoint and metrics.
    Train(TrainArgs),
    /// RMSE of a model on a split.
    Evaluate(EvaluateArgs),
    /// Extract keywords per latent factor and score their coherence.
    Topics(TopicsArgs),
    /// Rescore the coherence of an existing topic report.
    Coherence(CoherenceArgs),
    /// Train and score every (λ, factors) cell.
    Grid(GridArgs),
    /// Write a synthetic review file and matching word vectors.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Review file, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep only the N items with most reviews; 0 keeps everything.
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Minimum training-split frequency for a vocabulary token.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Offset,
    Pmf,
    Convmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Items per mini-batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Restrict the entropy softmax to windows that start inside the text.
    #[arg(long)]
    pub mask_pad: bool,
    #[arg(long, value_name = "BOOL")]
    pub freeze_embeddings: Option<bool>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    /// Reviews per item per batch.
    #[arg(long)]
    pub review_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "convmf")]
    pub model: ModelKind,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub factors: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Required for convmf; offset and pmf are fitted on the spot without one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: EvalSplit,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub glove: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Windows a word must appear in before it can be a keyword.
    #[arg(long)]
    pub keyword_min_count: Option<u64>,
    /// Rank by absolute mean activation.
    #[arg(long)]
    pub absolute: bool,
}

#[derive(Debug, Args)]
pub struct CoherenceArgs {
    /// Topic report written by `topics`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub glove: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub glove: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<usize>>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Topics(a) => cmd_topics(&a),
        Command::Coherence(a) => cmd_coherence(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

const DEFAULT_SEED: u64 = 42;

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    let data = BufReader::new(open(&dir.join(CORPUS_FILE))?);
    let vocab = BufReader::new(open(&dir.join(VOCAB_FILE))?);
    Ok(read_corpus(data, vocab)?)
}

fn hash_corpus_inputs(m: &mut RunManifest, dir: &Path) -> Result<(), CliError> {
    m.add_input("corpus", &dir.join(CORPUS_FILE))?;
    m.add_input("vocabulary", &dir.join(VOCAB_FILE))?;
    Ok(())
}

fn require_glove(glove: &Option<PathBuf>) -> Result<&Path, CliError> {
    glove
        .as_deref()
        .ok_or_else(|| CliError::input("--glove is required for convmf"))
}

fn activation(a: Option<ActivationArg>) -> Activation {
    match a {
        Some(ActivationArg::Tanh) => Activation::Tanh,
        _ => Activation::Identity,
    }
}

/// Resolves optimizer flags over the defaults and records provenance.
fn train_config(
    optim: &OptimArgs,
    lambda: Option<f64>,
    factors: Option<usize>,
    m: &mut RunManifest,
) -> TrainConfig {
    let d = TrainConfig::default();
    m.set("review_len", REVIEW_LEN, Provenance::Fixed);
    m.set("window", d.window, Provenance::Fixed);
    m.set_flag("lambda", lambda, d.lambda, Provenance::Fixed);
    m.set_flag("n_factors", factors, d.n_factors, Provenance::Fixed);
    m.set_flag("seed", optim.seed, DEFAULT_SEED, Provenance::Default);
    m.set_flag("epochs", optim.epochs, d.epochs, Provenance::Default);
    m.set_flag(
        "batch_size",
        optim.batch_size,
        d.batch_size,
        Provenance::Default,
    );
    m.set_flag(
        "step_size",
        optim.step_size,
        d.step_size,
        Provenance::Default,
    );
    m.set_flag(
        "weight_decay",
        optim.weight_decay,
        d.weight_decay,
        Provenance::Default,
    );
    m.set_flag("patience", optim.patience, d.patience, Provenance::Default);
    m.set_flag(
        "mask_pad",
        optim.mask_pad.then_some(true),
        false,
        Provenance::Default,
    );
    m.set_flag(
        "freeze_embeddings",
        optim.freeze_embeddings,
        d.freeze_embeddings,
        Provenance::Default,
    );
    m.set_flag(
        "activation",
        optim.activation.map(|a| activation(Some(a))),
        d.activation,
        Provenance::Default,
    );
    m.set_flag(
        "review_cap",
        optim.review_cap.map(Some),
        None,
        Provenance::Default,
    );
    m.set("center", d.center, Provenance::Default);
    m.set("init_scale", d.init_scale, Provenance::Default);
    TrainConfig {
        n_factors: factors.unwrap_or(d.n_factors),
        lambda: lambda.unwrap_or(d.lambda),
        seed: optim.seed.unwrap_or(DEFAULT_SEED),
        epochs: optim.epochs.unwrap_or(d.epochs),
        batch_size: optim.batch_size.unwrap_or(d.batch_size),
        step_size: optim.step_size.unwrap_or(d.step_size),
        weight_decay: optim.weight_decay.unwrap_or(d.weight_decay),
        patience: optim.patience.unwrap_or(d.patience),
        mask_pad: optim.mask_pad,
        freeze_embeddings: optim.freeze_embeddings.unwrap_or(d.freeze_embeddings),
        activation: activation(optim.activation),
        review_cap: optim.review_cap,
        ..d
    }
}

pub fn cmd_preprocess(a: &PreprocessArgs) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let mut m = RunManifest::new("preprocess", seed);
    m.add_input("reviews", &a.input)?;
    let ratios = match a.ratios.as_deref() {
        Some(&[train, validation, test]) => SplitRatios {
            train,
            validation,
            test,
        },
        Some(_) => return Err(CliError::input("--ratios takes three values")),
        None => SplitRatios::default(),
    };
    let config = CorpusConfig {
        review_len: REVIEW_LEN,
        min_count: a.min_count.unwrap_or(CorpusConfig::default().min_count),
        ratios,
        seed,
    };
    let subsample = a.subsample.unwrap_or(DEFAULT_SUBSAMPLE);
    m.set("review_len", REVIEW_LEN, Provenance::Fixed);
    m.set("stopwords", "nltk-english", Provenance::Fixed);
    m.set_flag("seed", a.seed, DEFAULT_SEED, Provenance::Default);
    m.set_flag(
        "min_count",
        a.min_count,
        config.min_count,
        Provenance::Default,
    );
    m.set_flag(
        "ratios",
        a.ratios.clone(),
        vec![ratios.train, ratios.validation, ratios.test],
        Provenance::Default,
    );
    m.set_flag(
        "subsample",
        a.subsample,
        DEFAULT_SUBSAMPLE,
        Provenance::Default,
    );
    m.outputs = [CORPUS_FILE, VOCAB_FILE, STATS_FILE]
        .map(String::from)
        .to_vec();

    let parsed = parse_review_records(BufReader::new(open(&a.input)?))?;
    for e in parsed.errors.iter().take(20) {
        eprintln!("{}:{}: skipped: {}", a.input.display(), e.line, e.message);
    }
    if parsed.errors.len() > 20 {
        eprintln!("... {} more skipped lines", parsed.errors.len() - 20);
    }
    let raw_stats = corpus_statistics(&parsed.records);
    let kept = if subsample > 0 {
        subsample_top_items(&parsed.records, subsample)
    } else {
        parsed.records.clone()
    };
    let corpus = Corpus::build(&kept, &StopWords::english(), &config)?;
    let kept_stats = corpus_statistics(&kept);

    create_out_dir(&a.out)?;
    m.write(&a.out)?;
    let mut data = BufWriter::new(File::create(a.out.join(CORPUS_FILE))?);
    write_corpus(&corpus, &mut data)?;
    data.flush()?;
    let mut vocab = BufWriter::new(File::create(a.out.join(VOCAB_FILE))?);
    corpus.vocab.write_to(&mut vocab)?;
    vocab.flush()?;
    let stats = json!({
        "raw": raw_stats,
        "kept": kept_stats,
        "skipped_lines": parsed.errors.len(),
        "vocab_size": corpus.vocab.len(),
        "vocab_sha256": corpus.vocab.hash(),
        "split": {"train": corpus.train.len(), "validation": corpus.validation.len(), "test": corpus.test.len()},
    });
    write_file(
        &a.out.join(STATS_FILE),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    println!("{}", raw_stats.to_table());
    if subsample > 0 && kept_stats != raw_stats {
        println!("\nkept (top {subsample} items)\n{}", kept_stats.to_table());
    }
    Ok(())
}

fn save_history(out: &Path, history: &convmf::training::RunHistory) -> Result<(), CliError> {
    let mut metrics = Vec::new();
    history.write_metrics_csv(&mut metrics)?;
    write_file(&out.join(METRICS_FILE), metrics)?;
    let mut timing = Vec::new();
    history.write_timing_csv(&mut timing)?;
    write_file(&out.join(TIMING_FILE), timing)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("train", a.optim.seed.unwrap_or(DEFAULT_SEED));
    m.set(
        "model",
        format!("{:?}", a.model).to_lowercase(),
        Provenance::User,
    );
    hash_corpus_inputs(&mut m, &a.input)?;
    let corpus = load_corpus(&a.input)?;
    let vocab_hash = corpus.vocab.hash();
    match a.model {
        ModelKind::Convmf => {
            let glove = require_glove(&a.glove)?;
            m.add_input("glove", glove)?;
            let config = train_config(&a.optim, a.lambda, a.factors, &mut m);
            config.validate()?;
            let table = load_embedding_table(glove, &corpus.vocab, config.seed)?;
            m.outputs = [CHECKPOINT_FILE, METRICS_FILE, TIMING_FILE]
                .map(String::from)
                .to_vec();
            create_out_dir(&a.out)?;
            m.write(&a.out)?;
            let cfg_json = serde_json::to_value(config)?;
            let checkpoint = |params| {
                Checkpoint::new(
                    ModelState::Convmf(params),
                    vocab_hash.clone(),
                    table.source(),
                    config.seed,
                    cfg_json.clone(),
                )
            };
            match train_convmf(&config, &corpus, &table) {
                Ok(outcome) => {
                    save_history(&a.out, &outcome.history)?;
                    checkpoint(outcome.params)
                        .save(&a.out.join(CHECKPOINT_FILE))
                        .map_err(CliError::from)?;
                    let best = outcome.history.best();
                    println!(
                        "best epoch {} validation rmse {}",
                        best.epoch, best.val_rmse
                    );
                    Ok(())
                }
                Err(TrainError::NonFinite {
                    epoch,
                    last_good,
                    history,
                    source,
                }) => {
                    save_history(&a.out, &history)?;
                    checkpoint(*last_good)
                        .save(&a.out.join(LAST_GOOD_FILE))
                        .map_err(CliError::from)?;
                    let detail = source.map(|s| format!(" ({s})")).unwrap_or_default();
                    Err(CliError::Numeric(format!(
                        "non-finite loss at epoch {epoch}{detail}; last good parameters in {LAST_GOOD_FILE}"
                    )))
                }
                Err(e) => Err(e.into()),
            }
        }
        ModelKind::Pmf => {
            let d = PmfConfig::default();
            let config = PmfConfig {
                n_factors: a.factors.unwrap_or(d.n_factors),
                seed: a.optim.seed.unwrap_or(DEFAULT_SEED),
                max_epochs: a.optim.epochs.unwrap_or(d.max_epochs),
                step_size: a.optim.step_size.unwrap_or(d.step_size),
                patience: a.optim.patience.unwrap_or(d.patience),
                ..d
            };
            m.set_flag("n_factors", a.factors, d.n_factors, Provenance::Fixed);
            m.set_flag("seed", a.optim.seed, DEFAULT_SEED, Provenance::Default);
            m.set_flag(
                "max_epochs",
                a.optim.epochs,
                d.max_epochs,
                Provenance::Default,
            );
            m.set_flag(
                "step_size",
                a.optim.step_size,
                d.step_size,
                Provenance::Default,
            );
            m.set_flag(
                "patience",
                a.optim.patience,
                d.patience,
                Provenance::Default,
            );
            m.set("l2", d.l2, Provenance::Default);
            m.set("init_noise", d.init_noise, Provenance::Default);
            m.set("warmup_epochs", d.warmup_epochs, Provenance::Default);
            m.set("center", d.center, Provenance::Default);
            m.outputs = [CHECKPOINT_FILE, METRICS_FILE].map(String::from).to_vec();
            create_out_dir(&a.out)?;
            m.write(&a.out)?;
            let fit = pmf_fit(
                &split_ratings(&corpus, EvalSplit::Train),
                &split_ratings(&corpus, EvalSplit::Validation),
                corpus.n_users(),
                corpus.n_items(),
                &config,
            )?;
            let mut csv = String::from("epoch,train_rmse,objective,val_rmse,best\n");
            for e in &fit.history {
                let val = e.val_rmse.map(|v| format!("{v:?}")).unwrap_or_default();
                csv += &format!(
                    "{},{:?},{:?},{val},{}\n",
                    e.epoch,
                    e.train_rmse,
                    e.objective,
                    u8::from(e.epoch == fit.best_epoch)
                );
            }
            write_file(&a.out.join(METRICS_FILE), csv)?;
            Checkpoint::new(
                ModelState::Pmf(fit.params),
                vocab_hash,
                "",
                config.seed,
                serde_json::to_value(config)?,
            )
            .save(&a.out.join(CHECKPOINT_FILE))?;
            println!("best epoch {}", fit.best_epoch);
            Ok(())
        }
        ModelKind::Offset => {
            m.outputs = vec![CHECKPOINT_FILE.to_string()];
            create_out_dir(&a.out)?;
            m.write(&a.out)?;
            let model = OffsetModel::fit(&split_ratings(&corpus, EvalSplit::Train))?;
            println!("mean rating {}", model.mean_rating);
            Checkpoint::new(
                ModelState::Offset(model),
                vocab_hash,
                "",
                0,
                serde_json::Value::Null,
            )
            .save(&a.out.join(CHECKPOINT_FILE))?;
            Ok(())
        }
    }
}

/// Rebuilds the word-vector table a checkpoint was trained with and checks
/// that it matches.
fn checkpoint_table(
    ck: &Checkpoint,
    corpus: &Corpus,
    glove: &Path,
) -> Result<EmbeddingTable, CliError> {
    let table = load_embedding_table(glove, &corpus.vocab, ck.embedding_seed)?;
    ck.verify_embeddings(table.source())?;
    Ok(table)
}

fn load_checkpoint(path: &Path, corpus: &Corpus) -> Result<Checkpoint, CliError> {
    let ck =
        Checkpoint::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    ck.verify_vocab(&corpus.vocab.hash())?;
    Ok(ck)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let mut m = RunManifest::new("evaluate", seed);
    m.set(
        "model",
        format!("{:?}", a.model).to_lowercase(),
        Provenance::User,
    );
    m.set("split", a.split, Provenance::User);
    hash_corpus_inputs(&mut m, &a.input)?;
    if let Some(ck) = &a.checkpoint {
        m.add_input("checkpoint", ck)?;
    }
    if let Some(g) = &a.glove {
        m.add_input("glove", g)?;
    }
    let corpus = load_corpus(&a.input)?;
    let (state, table) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path, &corpus)?;
            let wanted = format!("{:?}", a.model).to_lowercase();
            if ck.model.kind() != wanted {
                return Err(CliError::Consistency(format!(
                    "checkpoint holds a {} model, --model is {wanted}",
                    ck.model.kind()
                )));
            }
            let table = match a.model {
                ModelKind::Convmf => {
                    Some(checkpoint_table(&ck, &corpus, require_glove(&a.glove)?)?)
                }
                _ => None,
            };
            (ck.model, table)
        }
        None => match a.model {
            ModelKind::Offset => (
                ModelState::Offset(OffsetModel::fit(&split_ratings(&corpus, EvalSplit::Train))?),
                None,
            ),
            ModelKind::Pmf => {
                let fit = pmf_fit(
                    &split_ratings(&corpus, EvalSplit::Train),
                    &split_ratings(&corpus, EvalSplit::Validation),
                    corpus.n_users(),
                    corpus.n_items(),
                    &PmfConfig {
                        seed,
                        ..Default::default()
                    },
                )?;
                (ModelState::Pmf(fit.params), None)
            }
            ModelKind::Convmf => {
                return Err(CliError::input("--checkpoint is required for convmf"))
            }
        },
    };
    let rmse = evaluate_rmse(&state, &corpus, table.as_ref(), a.split)?;
    println!("rmse {rmse:?}");
    if let Some(out) = &a.out {
        m.outputs = vec![EVAL_FILE.to_string()];
        create_out_dir(out)?;
        m.write(out)?;
        let report = json!({"model": state.kind(), "split": a.split, "rmse": rmse, "n": convmf::training::split_reviews(&corpus, a.split).len()});
        write_file(
            &out.join(EVAL_FILE),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }
    Ok(())
}

pub fn cmd_topics(a: &TopicsArgs) -> Result<(), CliError> {
    let corpus_seed = 0;
    let mut m = RunManifest::new("topics", corpus_seed);
    hash_corpus_inputs(&mut m, &a.input)?;
    m.add_input("checkpoint", &a.checkpoint)?;
    m.add_input("glove", &a.glove)?;
    let d = KeywordOptions::default();
    let opts = KeywordOptions {
        k: a.top_k.unwrap_or(d.k),
        min_count: a.keyword_min_count.unwrap_or(d.min_count),
        absolute: a.absolute,
    };
    m.set_flag("top_k", a.top_k, d.k, Provenance::Fixed);
    m.set_flag(
        "keyword_min_count",
        a.keyword_min_count,
        d.min_count,
        Provenance::Default,
    );
    m.set_flag(
        "absolute",
        a.absolute.then_some(true),
        false,
        Provenance::Default,
    );

    let corpus = load_corpus(&a.input)?;
    let ck = load_checkpoint(&a.checkpoint, &corpus)?;
    m.seed = ck.embedding_seed;
    let table = checkpoint_table(&ck, &corpus, &a.glove)?;
    let stats = accumulate_word_activations(&ck, &corpus, &table)?;
    let config = json!({"keywords": opts, "checkpoint_config": ck.config});
    let report = export_topic_report(&stats, &corpus.vocab, &table, &opts, config);

    m.outputs = vec![TOPICS_FILE.to_string()];
    create_out_dir(&a.out)?;
    m.write(&a.out)?;
    write_file(&a.out.join(TOPICS_FILE), report.to_json() + "\n")?;
    print_report(&report);
    Ok(())
}

fn print_report(report: &TopicReport) {
    for f in &report.factors {
        let words: Vec<&str> = f.keywords.iter().map(|k| k.token.as_str()).collect();
        match f.coherence {
            Some(c) => println!(
                "factor {:>2}  coherence {c:.4}  {}",
                f.index,
                words.join(" ")
            ),
            None => println!(
                "factor {:>2}  excluded         {}",
                f.index,
                words.join(" ")
            ),
        }
    }
    match report.overall_coherence {
        Some(c) => println!("overall coherence {c:?}"),
        None => println!("overall coherence undefined"),
    }
}

/// Loads vectors for exactly the report's keywords.
fn keyword_table(
    report: &TopicReport,
    glove: &Path,
) -> Result<(convmf::corpus::Vocabulary, EmbeddingTable), CliError> {
    let mut words: Vec<String> = report
        .factors
        .iter()
        .flat_map(|f| f.keywords.iter().map(|k| k.token.clone()))
        .collect();
    words.sort();
    words.dedup();
    let vocab = convmf::corpus::Vocabulary::from_ordered(words, 1);
    let table = load_embedding_table(glove, &vocab, 0)?;
    Ok((vocab, table))
}

pub fn cmd_coherence(a: &CoherenceArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("coherence", 0);
    m.add_input("report", &a.input)?;
    m.add_input("glove", &a.glove)?;
    let text = fs::read_to_string(&a.input)
        .map_err(|e| CliError::input(format!("{}: {e}", a.input.display())))?;
    let report: TopicReport = serde_json::from_str(&text)?;
    let (vocab, table) = keyword_table(&report, &a.glove)?;
    let rescored = report.rescored(&vocab, &table);
    if let Some(out) = &a.out {
        m.outputs = vec![COHERENCE_FILE.to_string()];
        create_out_dir(out)?;
        m.write(out)?;
        write_file(&out.join(COHERENCE_FILE), rescored.to_json() + "\n")?;
    }
    print_report(&rescored);
    Ok(())
}

pub fn cmd_grid(a: &GridArgs) -> Result<(), CliError> {
    let mut m = RunManifest::new("grid", a.optim.seed.unwrap_or(DEFAULT_SEED));
    hash_corpus_inputs(&mut m, &a.input)?;
    m.add_input("glove", &a.glove)?;
    let template = train_config(&a.optim, None, None, &mut m);
    m.config.remove("lambda");
    m.config.remove("n_factors");
    let lambdas = a.lambdas.clone().unwrap_or(GRID_LAMBDAS.to_vec());
    let factors = a.factors.clone().unwrap_or(GRID_FACTORS.to_vec());
    m.set_flag(
        "lambdas",
        a.lambdas.clone(),
        GRID_LAMBDAS.to_vec(),
        Provenance::Fixed,
    );
    m.set_flag(
        "factors",
        a.factors.clone(),
        GRID_FACTORS.to_vec(),
        Provenance::Fixed,
    );
    let d = KeywordOptions::default();
    m.set_flag("top_k", a.top_k, d.k, Provenance::Fixed);
    if lambdas.is_empty() || factors.is_empty() {
        return Err(CliError::input(
            "--lambdas and --factors need at least one value",
        ));
    }
    template.validate()?;
    let corpus = load_corpus(&a.input)?;
    let table = load_embedding_table(&a.glove, &corpus.vocab, template.seed)?;
    m.outputs = vec![GRID_FILE.to_string()];
    create_out_dir(&a.out)?;
    m.write(&a.out)?;
    let opts = KeywordOptions {
        k: a.top_k.unwrap_or(d.k),
        ..d
    };
    let runs = run_grid(&template, &lambdas, &factors, &corpus, &table, &opts)?;
    write_file(&a.out.join(GRID_FILE), grid_table_json(&runs) + "\n")?;
    println!(
        "{:>7} {:>8} {:>10} {:>10}",
        "lambda", "factors", "rmse", "coherence"
    );
    for r in &runs {
        let c = &r.cell;
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:>7} {:>8} {:>10} {:>10}{}",
            c.lambda,
            c.n_factors,
            f(c.rmse),
            f(c.coherence),
            c.error
                .as_deref()
                .map(|e| format!("  error: {e}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_users: a.users.unwrap_or(d.n_users),
        n_items: a.items.unwrap_or(d.n_items),
        ..d
    };
    let mut m = RunManifest::new("synth", seed);
    m.set("spec", spec, Provenance::Default);
    m.outputs = ["reviews.jsonl", "vectors.txt", "planted_topics.json"]
        .map(String::from)
        .to_vec();
    let data = synthetic::generate(&spec, seed);
    create_out_dir(&a.out)?;
    m.write(&a.out)?;
    let mut reviews = BufWriter::new(File::create(a.out.join("reviews.jsonl"))?);
    synthetic::write_reviews_jsonl(&data.records, &mut reviews)?;
    reviews.flush()?;
    let mut vectors = BufWriter::new(File::create(a.out.join("vectors.txt"))?);
    synthetic::write_vectors(&data, &mut vectors)?;
    vectors.flush()?;
    write_file(
        &a.out.join("planted_topics.json"),
        serde_json::to_string_pretty(&data.topics)? + "\n",
    )?;
    println!(
        "{} reviews, {} word vectors",
        data.records.len(),
        data.vectors.len()
    );
    Ok(())
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let seed = a.seed.unwrap_or(DEFAULT_SEED);
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.8, 2.0] {
        let mut lam_worst = 0.0f64;
        for i in 0..a.instances {
            let spec = GradCheckSpec {
                n_factors: if i % 2 == 0 { 2 } else { 4 },
                review_len: 8,
                dim: 3,
                window: 2,
                lambda,
                ..Default::default()
            };
            lam_worst =
                lam_worst.max(gradient_check(&spec, seed.wrapping_add(i as u64)).max_error());
        }
        println!(
            "lambda {lambda}: max relative error {lam_worst:.3e} over {} instances",
            a.instances
        );
        worst = worst.max(lam_worst);
    }
    if worst >= GRADCHECK_TOLERANCE {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
