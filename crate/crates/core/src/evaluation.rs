//! Word-match evaluation, the synthetic key/value corpus, and the
//! experiment runner used for augmentation and ablation sweeps.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_corpus, derive_seed, normalize_text, read_examples_jsonl, resolve_answer_cell,
    Aggregation, Comparator, Condition, Example, SourceQuery, Table,
};
use crate::encoding::encode_example;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams, PointerOutput};
use crate::numerics::Scalar;
use crate::text::{build_vocab, Vocab};
use crate::training::{train, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub predicted_index: usize,
    pub predicted_text: String,
    pub gold_text: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub n_skipped: usize,
    pub records: Vec<EvalRecord>,
}

/// How a prediction is judged against the gold cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchRule {
    /// Predicted cell text equals the gold text (after normalization).
    Word,
    /// Predicted index equals the gold index.
    Index,
}

fn example_id(i: usize, e: &Example) -> String {
    format!("{i}:{}", e.table.table_id)
}

/// Scores `(example, predicted cell)` pairs under `rule`.
pub fn score_predictions(predictions: &[(&Example, usize)], rule: MatchRule) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Config("cannot score an empty prediction set".into()));
    }
    let mut records = Vec::with_capacity(predictions.len());
    for (i, (example, predicted)) in predictions.iter().enumerate() {
        let text = example.table.cell(*predicted).ok_or(Error::IndexOutOfRange {
            what: "predicted cell",
            index: *predicted,
            len: example.table.n_cells(),
        })?;
        let correct = match rule {
            MatchRule::Word => normalize_text(text) == normalize_text(&example.answer_text),
            MatchRule::Index => *predicted == example.answer_index,
        };
        records.push(EvalRecord {
            example_id: example_id(i, example),
            predicted_index: *predicted,
            predicted_text: text.to_string(),
            gold_text: example.answer_text.clone(),
            correct,
        });
    }
    let n_correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        n_examples: records.len(),
        n_correct,
        accuracy: n_correct as f64 / records.len() as f64,
        n_skipped: 0,
        records,
    })
}

/// A prediction is correct when the predicted cell's text equals the gold
/// answer text, whichever cell holds it.
pub fn word_match_accuracy(predictions: &[(&Example, usize)]) -> Result<EvalReport> {
    score_predictions(predictions, MatchRule::Word)
}

pub fn index_match_accuracy(predictions: &[(&Example, usize)]) -> Result<EvalReport> {
    score_predictions(predictions, MatchRule::Index)
}

/// Pointer distribution for one example, or `None` if it does not fit.
pub fn predict<T: Scalar>(
    example: &Example,
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocab,
) -> Result<Option<PointerOutput<T>>> {
    let Some(encoded) = encode_example(example, vocab, config.max_len) else {
        return Ok(None);
    };
    Ok(Some(forward(&encoded, params, config)?.pointer))
}

/// Word-match evaluation of a model; examples that do not fit are skipped.
pub fn evaluate<T: Scalar>(
    examples: &[Example],
    params: &ModelParams<T>,
    config: &ModelConfig,
    vocab: &Vocab,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut ids = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for (i, e) in examples.iter().enumerate() {
        match predict(e, params, config, vocab)? {
            Some(out) => {
                predictions.push((e, out.argmax()));
                ids.push(example_id(i, e));
            }
            None => skipped += 1,
        }
    }
    let mut report = word_match_accuracy(&predictions)?;
    report.n_skipped = skipped;
    for (record, id) in report.records.iter_mut().zip(ids) {
        record.example_id = id;
    }
    Ok(report)
}

pub fn write_jsonl<W: Write, S: Serialize>(mut writer: W, rows: &[S]) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Parameters of the synthetic key/value corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tables: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of distinct cell value words, shared by all columns.
    pub vocab_size: usize,
    /// Number of distinct header names tables draw from.
    pub header_pool: usize,
    /// Fraction of tables where another cell repeats the answer text.
    pub duplicate_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tables: 100,
            rows: 4,
            cols: 3,
            vocab_size: 200,
            header_pool: 8,
            duplicate_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("synthetic tables need at least one row and column".into()));
        }
        if self.vocab_size < self.rows {
            return Err(Error::Config(format!(
                "vocab_size {} cannot give {} distinct keys",
                self.vocab_size, self.rows
            )));
        }
        if self.header_pool < self.cols {
            return Err(Error::Config(format!(
                "header_pool {} smaller than {} columns",
                self.header_pool, self.cols
            )));
        }
        if !(0.0..=1.0).contains(&self.duplicate_fraction) {
            return Err(Error::Config("duplicate_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Random key/value tables, one question each:
/// `what is <header_j> where <header_0> is <key>`. Keys in column 0 are
/// unique per table, so the condition always resolves.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Example>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let values: Vec<String> = (0..config.vocab_size).map(|i| format!("w{i}")).collect();
    let header_pool: Vec<String> = (0..config.header_pool).map(|i| format!("col{i}")).collect();
    let (r, m) = (config.rows, config.cols);

    let mut out = Vec::with_capacity(config.n_tables);
    for t in 0..config.n_tables {
        let headers: Vec<String> = header_pool.choose_multiple(&mut rng, m).cloned().collect();
        let keys: Vec<String> = values.choose_multiple(&mut rng, r).cloned().collect();
        let mut rows: Vec<Vec<String>> = keys
            .iter()
            .map(|k| {
                std::iter::once(k.clone())
                    .chain((1..m).map(|_| values.choose(&mut rng).expect("non-empty").clone()))
                    .collect()
            })
            .collect();
        let key_row = rng.random_range(0..r);
        let select = if m > 1 { rng.random_range(1..m) } else { 0 };

        if m > 1 && r * (m - 1) > 1 && rng.random_bool(config.duplicate_fraction) {
            let answer = rows[key_row][select].clone();
            let mut others: Vec<(usize, usize)> = (0..r)
                .flat_map(|i| (1..m).map(move |j| (i, j)))
                .filter(|&cell| cell != (key_row, select))
                .collect();
            others.shuffle(&mut rng);
            let (i, j) = others[0];
            rows[i][j] = answer;
        }

        let table = Table::new(format!("synth-{}-{t}", config.seed), headers, rows)?;
        let query = SourceQuery {
            select_column: select,
            aggregation: Aggregation::None,
            conditions: vec![Condition {
                column: 0,
                comparator: Comparator::Eq,
                value: keys[key_row].clone(),
            }],
        };
        let (answer_index, answer_text) =
            resolve_answer_cell(&table, &query).expect("unique keys always resolve");
        let question = format!(
            "what is {} where {} is {}",
            table.headers[select], table.headers[0], keys[key_row]
        );
        out.push(Example {
            table,
            question,
            answer_index,
            answer_text,
        });
    }
    Ok(out)
}

/// Model dimensions for a run; vocabulary size, `max_len` and the
/// embedding switches come from the data and the train config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ModelShape {
            d_model: desk.d_model,
            n_layers: desk.n_layers,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
        }
    }
}

impl ModelShape {
    pub fn to_config(&self, train: &TrainConfig, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: train.max_len,
            vocab_size,
            use_position_embeddings: train.use_position_embeddings,
            use_segment_embeddings: train.use_segment_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    Jsonl(PathBuf),
    #[serde(skip)]
    Inline(Vec<Example>),
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Example>> {
        match self {
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
            DataSource::Jsonl(path) => {
                let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                read_examples_jsonl(std::io::BufReader::new(file), &path.display().to_string())
            }
            DataSource::Inline(examples) => Ok(examples.clone()),
        }
    }
}

/// One training run: a dataset variant, a configuration and a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    /// Use only the first `base_limit` training examples.
    #[serde(default)]
    pub base_limit: Option<usize>,
    /// Row-shuffled copies added per base example.
    #[serde(default)]
    pub augment_copies: usize,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
    /// Seeds initialization, batching and augmentation; overrides `train.seed`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train_data: DataSource,
    pub test_data: DataSource,
    pub runs: Vec<RunSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub seed: u64,
    pub train_size: usize,
    pub test_accuracy: f64,
    pub final_train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub reports: Vec<EvalReport>,
}

impl fmt::Display for ExperimentResults {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        writeln!(
            f,
            "{:<width$}  {:>6}  {:>10}  {:>9}  {:>9}",
            "name", "seed", "train_size", "train_acc", "test_acc"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>6}  {:>10}  {:>8.1}%  {:>8.1}%",
                r.name,
                r.seed,
                r.train_size,
                100.0 * r.final_train_accuracy,
                100.0 * r.test_accuracy
            )?;
        }
        Ok(())
    }
}

/// Trains every run in the manifest and evaluates it on the shared test set.
pub fn run_experiment(manifest: &Manifest) -> Result<ExperimentResults> {
    run_experiment_with(manifest, |_, _| {})
}

/// [`run_experiment`] with a callback after each finished run.
pub fn run_experiment_with(
    manifest: &Manifest,
    mut on_run: impl FnMut(&ResultRow, &EvalReport),
) -> Result<ExperimentResults> {
    let base = manifest.train_data.load()?;
    let test = manifest.test_data.load()?;
    let mut results = ExperimentResults {
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for run in &manifest.runs {
        let attach = |source: Error| Error::Experiment {
            run: run.name.clone(),
            source: Box::new(source),
        };
        let limit = run.base_limit.unwrap_or(base.len()).min(base.len());
        let train_set = augment_corpus(
            &base[..limit],
            run.augment_copies,
            derive_seed(run.seed, 0, usize::MAX),
        );
        let vocab = build_vocab(&train_set, 1);
        let train_config = TrainConfig {
            seed: run.seed,
            ..run.train.clone()
        };
        let model_config = run.model.to_config(&train_config, vocab.len());
        let outcome = train(&train_set, &vocab, &model_config, &train_config, TrainOptions::default())
            .map_err(attach)?;
        let report =
            evaluate(&test, &outcome.params, &outcome.model_config, &vocab).map_err(attach)?;
        let row = ResultRow {
            name: run.name.clone(),
            seed: run.seed,
            train_size: train_set.len(),
            test_accuracy: report.accuracy,
            final_train_accuracy: outcome.metrics.last().map_or(0.0, |m| m.train_accuracy),
        };
        on_run(&row, &report);
        results.rows.push(row);
        results.reports.push(report);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dup_example() -> Example {
        let t = Table::new(
            "t",
            vec!["k".into(), "v".into()],
            vec![vec!["a".into(), "x".into()], vec!["b".into(), "x".into()], vec!["c".into(), "y".into()]],
        )
        .unwrap();
        Example::new(t, "what is v where k is a", 1).unwrap()
    }

    #[test]
    fn word_match_cases() {
        let e = dup_example();
        let r = word_match_accuracy(&[(&e, 1), (&e, 3), (&e, 5)]).unwrap();
        assert_eq!(r.n_correct, 2);
        assert_eq!(r.records.iter().map(|x| x.correct).collect::<Vec<_>>(), vec![true, true, false]);
        let r = index_match_accuracy(&[(&e, 1), (&e, 3), (&e, 5)]).unwrap();
        assert_eq!(r.n_correct, 1);
        assert!(word_match_accuracy(&[(&e, 6)]).is_err());
        assert!(word_match_accuracy(&[]).is_err());
    }

    #[test]
    fn synthetic_single_table() {
        let cfg = SynthConfig {
            n_tables: 1,
            rows: 1,
            cols: 2,
            ..Default::default()
        };
        let out = generate_synthetic(&cfg).unwrap();
        assert_eq!(out.len(), 1);
        out[0].validate().unwrap();
        assert_eq!(out[0].answer_index, 1);
        assert!(out[0].question.starts_with("what is "));
    }

    #[test]
    fn synthetic_determinism_and_oracle_agreement() {
        let cfg = SynthConfig {
            n_tables: 200,
            duplicate_fraction: 0.5,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        assert_ne!(a, generate_synthetic(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap());
        let mut dup_tables = 0;
        for e in &a {
            e.validate().unwrap();
            let words: Vec<&str> = e.question.split(' ').collect();
            let select = e.table.headers.iter().position(|h| h == words[2]).unwrap();
            let query = SourceQuery {
                select_column: select,
                aggregation: Aggregation::None,
                conditions: vec![Condition {
                    column: 0,
                    comparator: Comparator::Eq,
                    value: words[6].to_string(),
                }],
            };
            assert_eq!(
                resolve_answer_cell(&e.table, &query),
                Ok((e.answer_index, e.answer_text.clone()))
            );
            if e.table.cells().filter(|c| *c == e.answer_text).count() > 1 {
                dup_tables += 1;
            }
        }
        assert!(dup_tables >= 80, "{dup_tables}");
    }

    #[test]
    fn synthetic_config_validation() {
        assert!(generate_synthetic(&SynthConfig { rows: 0, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { vocab_size: 2, rows: 3, ..Default::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { header_pool: 2, cols: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn manifest_json_shape() {
        let json = r#"{
            "train_data": {"synthetic": {"n_tables": 10, "seed": 1}},
            "test_data": {"jsonl": "test.jsonl"},
            "runs": [{"name": "base", "seed": 3, "augment_copies": 2,
                      "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16},
                      "train": {"epochs": 2, "learning_rate": 0.001}}]
        }"#;
        let m: Manifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.runs[0].train.batch_size, 16);
        assert_eq!(m.runs[0].augment_copies, 2);
        assert!(matches!(m.test_data, DataSource::Jsonl(_)));
    }

    #[test]
    fn one_run_manifest_gives_one_row() {
        let synth = SynthConfig {
            n_tables: 8,
            rows: 2,
            cols: 2,
            vocab_size: 20,
            ..Default::default()
        };
        let manifest = Manifest {
            train_data: DataSource::Synthetic(synth.clone()),
            test_data: DataSource::Synthetic(SynthConfig { seed: 99, ..synth }),
            runs: vec![RunSpec {
                name: "tiny".into(),
                base_limit: None,
                augment_copies: 1,
                model: ModelShape { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8 },
                train: TrainConfig { epochs: 1, learning_rate: 1e-3, ..Default::default() },
                seed: 5,
            }],
        };
        let a = run_experiment(&manifest).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].train_size, 16);
        assert_eq!(a.reports[0].n_examples, 8);
        assert_eq!(a, run_experiment(&manifest).unwrap());
        assert!(a.to_string().contains("tiny"));
    }
}
