//! `cellqa`: ingest, augment, train, evaluate and query the cell-selection
//! model from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellqa::data::{
    augment_corpus, build_dataset, parse_wikisql, read_examples_jsonl, write_examples_jsonl,
    Example, Table,
};
use cellqa::encoding::{encode_example, EncodingDisplay};
use cellqa::evaluation::{
    evaluate, generate_synthetic, run_experiment_with, write_jsonl, Manifest, SynthConfig,
};
use cellqa::model::{
    check_gradients, init_params_scaled, ModelConfig, GRADCHECK_EMBEDDING_STD,
    GRADCHECK_WEIGHT_STD,
};
use cellqa::text::{build_vocab, Vocab};
use cellqa::training::{load_checkpoint, train, write_metrics_jsonl, TrainOptions};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{ConfigError, RunConfig};

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const VOCAB_FILE: &str = "vocab.txt";
const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser, Debug)]
#[command(name = "cellqa", version, about = "Answer table questions by pointing at a cell")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract single-condition examples from a WikiSQL directory.
    Ingest {
        /// Directory holding `<split>.jsonl` and `<split>.tables.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Output dataset; stats go to `<out>.stats.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Add row-shuffled copies of every example.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        copies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic key/value corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_tables: usize,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        cols: usize,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.1)]
        duplicate_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoint, vocabulary and metrics into `--out`.
    Train(TrainArgs),
    /// Word-match evaluation of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `vocab.txt` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Per-example records as JSONL; the summary goes to `<out>.summary.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Point at the answer cell of a JSON table (`{"headers": [...], "rows": [[...]]}`).
    Ask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        question: String,
    },
    /// Compare analytic gradients with central differences on a 2x2 table.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 256)]
        d_ff: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every training run of a JSON manifest and tabulate test accuracy.
    Experiment {
        /// Manifest file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Results rows as JSONL; per-run reports go to `<out>.reports.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Show how one example is encoded.
    Encode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 256)]
        max_len: usize,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    freeze_first_k: Option<usize>,
    #[arg(long)]
    no_position_embeddings: bool,
    #[arg(long)]
    no_segment_embeddings: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] cellqa::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(cellqa::Error::Config(_)) => 1,
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_dataset(path: &Path) -> CliResult<Vec<Example>> {
    Ok(read_examples_jsonl(open(path)?, &path.display().to_string())?)
}

fn write_dataset(path: &Path, examples: &[Example]) -> CliResult<()> {
    let mut w = create(path)?;
    write_examples_jsonl(&mut w, examples)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

fn read_vocab(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<Vocab> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(VOCAB_FILE),
    };
    Ok(Vocab::read(open(&path)?, &path.display().to_string())?)
}

fn ingest(data: &Path, split: &str, out: &Path) -> CliResult<()> {
    let tables = data.join(format!("{split}.tables.jsonl"));
    let queries = data.join(format!("{split}.jsonl"));
    let parsed = parse_wikisql(
        open(&tables)?,
        &tables.display().to_string(),
        open(&queries)?,
        &queries.display().to_string(),
    )?;
    let (examples, stats) = build_dataset(&parsed);
    write_dataset(out, &examples)?;
    let stats_path = with_suffix(out, ".stats.json");
    let mut w = create(&stats_path)?;
    serde_json::to_writer_pretty(&mut w, &stats).map_err(|source| CliError::Json {
        path: stats_path.clone(),
        source,
    })?;
    w.flush().map_err(io_err(&stats_path))?;
    println!("{stats}");
    Ok(())
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.max_len {
        t.max_len = v;
    }
    if let Some(v) = args.freeze_first_k {
        t.freeze_first_k = v;
    }
    if args.no_position_embeddings {
        t.use_position_embeddings = false;
    }
    if args.no_segment_embeddings {
        t.use_segment_embeddings = false;
    }
    t.validate()?;

    let dataset = read_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let vocab = build_vocab(&dataset, 1);
    let vocab_path = args.out.join(VOCAB_FILE);
    let mut w = create(&vocab_path)?;
    vocab.write(&mut w).and_then(|_| w.flush()).map_err(io_err(&vocab_path))?;

    let model_config = cfg.model.to_config(&cfg.train, vocab.len());
    model_config.validate()?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    let mut log = |m: &cellqa::training::EpochMetrics| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  train_acc {:.3}  {:.1}s",
            m.epoch, m.mean_loss, m.train_accuracy, m.wallclock_seconds
        );
    };
    let outcome = train(
        &dataset,
        &vocab,
        &model_config,
        &cfg.train,
        TrainOptions {
            checkpoint_path: Some(&checkpoint),
            checkpoint_every_epoch: false,
            on_epoch: Some(&mut log),
        },
    )?;
    let metrics_path = args.out.join(METRICS_FILE);
    let mut w = create(&metrics_path)?;
    write_metrics_jsonl(&mut w, &outcome.metrics)
        .and_then(|_| w.flush())
        .map_err(io_err(&metrics_path))?;
    println!(
        "trained on {} examples ({} skipped); checkpoint {}",
        dataset.len() - outcome.skipped,
        outcome.skipped,
        checkpoint.display()
    );
    Ok(())
}

fn run_eval(data: &Path, checkpoint: &Path, vocab: Option<&Path>, out: &Path) -> CliResult<()> {
    let vocab = read_vocab(checkpoint, vocab)?;
    let ckpt = load_checkpoint(checkpoint, Some(&vocab))?;
    let dataset = read_dataset(data)?;
    let report = evaluate(&dataset, &ckpt.params, &ckpt.model_config, &vocab)?;
    let mut w = create(out)?;
    write_jsonl(&mut w, &report.records)
        .and_then(|_| w.flush())
        .map_err(io_err(out))?;
    let summary_path = with_suffix(out, ".summary.json");
    let summary = serde_json::json!({
        "n_examples": report.n_examples,
        "n_correct": report.n_correct,
        "accuracy": report.accuracy,
        "n_skipped": report.n_skipped,
    });
    std::fs::write(&summary_path, format!("{summary}\n")).map_err(io_err(&summary_path))?;
    println!(
        "accuracy {:.4} ({}/{}), {} skipped",
        report.accuracy, report.n_correct, report.n_examples, report.n_skipped
    );
    Ok(())
}

#[derive(Deserialize)]
struct TableFile {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn ask(checkpoint: &Path, vocab: Option<&Path>, table: &Path, question: &str) -> CliResult<()> {
    let vocab = read_vocab(checkpoint, vocab)?;
    let ckpt = load_checkpoint(checkpoint, Some(&vocab))?;
    let file: TableFile = serde_json::from_reader(open(table)?).map_err(|source| CliError::Json {
        path: table.to_path_buf(),
        source,
    })?;
    let table = Table::new(table.display().to_string(), file.headers, file.rows)?;
    let example = Example::new(table, question, 0)?;
    let encoded = encode_example(&example, &vocab, ckpt.model_config.max_len).ok_or_else(|| {
        CliError::Usage(format!(
            "table and question do not fit in {} positions",
            ckpt.model_config.max_len
        ))
    })?;
    let forward = cellqa::model::forward(&encoded, &ckpt.params, &ckpt.model_config)?;
    let probs = &forward.pointer.cell_probs;
    let best = forward.pointer.argmax();
    let m = example.table.n_cols();
    let text = example.table.cell(best).unwrap_or_default();
    println!("answer: {text}");
    println!("index: {best} (row {}, column {})", best / m, best % m);
    let mut ranked: Vec<usize> = (0..probs.len()).collect();
    ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    println!("top-5:");
    for &k in ranked.iter().take(5) {
        println!(
            "  {:.4}  [{k}] {}",
            probs[k],
            example.table.cell(k).unwrap_or_default()
        );
    }
    Ok(())
}

fn gradcheck(shape: (usize, usize, usize, usize), eps: f64, seed: u64) -> CliResult<()> {
    let (d_model, n_layers, n_heads, d_ff) = shape;
    let example = generate_synthetic(&SynthConfig {
        n_tables: 1,
        rows: 2,
        cols: 2,
        duplicate_fraction: 0.0,
        seed,
        ..SynthConfig::default()
    })?
    .remove(0);
    let vocab = build_vocab(std::slice::from_ref(&example), 1);
    let encoded = encode_example(&example, &vocab, 64).expect("2x2 example fits");
    let config = ModelConfig {
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_len: encoded.len(),
        vocab_size: vocab.len(),
        use_position_embeddings: true,
        use_segment_embeddings: true,
    };
    let params = init_params_scaled::<f64>(&config, seed, GRADCHECK_WEIGHT_STD, GRADCHECK_EMBEDDING_STD)?;
    let report = check_gradients(&encoded, &params, &config, example.answer_index, 0, eps)?;
    let mut worst = 0.0f64;
    for (name, r) in &report {
        println!("{name:<32} {:.3e}", r.max_relative_error);
        worst = worst.max(r.max_relative_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {worst:.3e} exceeds 1e-4"
        )))
    }
}

fn experiment(manifest_path: &Path, out: &Path) -> CliResult<()> {
    let manifest: Manifest =
        serde_json::from_reader(open(manifest_path)?).map_err(|source| CliError::Json {
            path: manifest_path.to_path_buf(),
            source,
        })?;
    let results = run_experiment_with(&manifest, |row, _| {
        eprintln!(
            "{}: seed {} train_size {} test_acc {:.3}",
            row.name, row.seed, row.train_size, row.test_accuracy
        );
    })?;
    let mut w = create(out)?;
    write_jsonl(&mut w, &results.rows)
        .and_then(|_| w.flush())
        .map_err(io_err(out))?;
    let reports_path = with_suffix(out, ".reports.jsonl");
    let mut w = create(&reports_path)?;
    write_jsonl(&mut w, &results.reports)
        .and_then(|_| w.flush())
        .map_err(io_err(&reports_path))?;
    print!("{results}");
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Ingest { data, split, out } => ingest(&data, &split, &out),
        Command::Augment {
            data,
            out,
            copies,
            seed,
        } => {
            let dataset = read_dataset(&data)?;
            let augmented = augment_corpus(&dataset, copies, seed);
            write_dataset(&out, &augmented)?;
            println!("{} -> {} examples", dataset.len(), augmented.len());
            Ok(())
        }
        Command::Synth {
            out,
            n_tables,
            rows,
            cols,
            vocab_size,
            duplicate_fraction,
            seed,
        } => {
            let config = SynthConfig {
                n_tables,
                rows,
                cols,
                vocab_size,
                duplicate_fraction,
                seed,
                ..SynthConfig::default()
            };
            config.validate()?;
            let examples = generate_synthetic(&config)?;
            write_dataset(&out, &examples)?;
            println!("wrote {} examples to {}", examples.len(), out.display());
            Ok(())
        }
        Command::Train(args) => run_train(&args),
        Command::Eval {
            data,
            checkpoint,
            vocab,
            out,
        } => run_eval(&data, &checkpoint, vocab.as_deref(), &out),
        Command::Ask {
            checkpoint,
            vocab,
            table,
            question,
        } => ask(&checkpoint, vocab.as_deref(), &table, &question),
        Command::Gradcheck {
            d_model,
            n_layers,
            n_heads,
            d_ff,
            eps,
            seed,
        } => gradcheck((d_model, n_layers, n_heads, d_ff), eps, seed),
        Command::Experiment { config, out } => experiment(&config, &out),
        Command::Encode {
            data,
            index,
            max_len,
        } => {
            let dataset = read_dataset(&data)?;
            let example = dataset.get(index).ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: index {index} out of range ({} examples)",
                    data.display(),
                    dataset.len()
                ))
            })?;
            let vocab = build_vocab(&dataset, 1);
            match encode_example(example, &vocab, max_len) {
                Some(encoded) => print!(
                    "{}",
                    EncodingDisplay {
                        encoded: &encoded,
                        vocab: &vocab
                    }
                ),
                None => println!("example {index} does not fit in {max_len} positions"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
