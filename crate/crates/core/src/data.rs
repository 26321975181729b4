//! WikiSQL-style ingestion, answer-cell resolution and row-shuffle augmentation.
//!
//! Only queries with exactly one WHERE condition and no aggregation survive
//! [`filter_single_condition`]; the gold answer is then recovered as a single
//! cell index by executing that condition against the table.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// NFC-normalizes and trims surrounding whitespace.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    nfc.trim().to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Builds a table, checking that it is non-empty and rectangular.
    pub fn new(
        table_id: impl Into<String>,
        headers: Vec<String>,
        rows: Vec<Vec<String>>,
    ) -> Result<Self> {
        let table = Table {
            table_id: table_id.into(),
            headers,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidTable {
            table_id: self.table_id.clone(),
            message,
        };
        if self.headers.is_empty() {
            return Err(fail("no headers".into()));
        }
        if self.rows.is_empty() {
            return Err(fail("no rows".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.headers.len() {
                return Err(fail(format!(
                    "row {i} has {} cells, expected {}",
                    row.len(),
                    self.headers.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of columns, `m`.
    pub fn n_cols(&self) -> usize {
        self.headers.len()
    }

    /// Number of rows, `r`.
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows() * self.n_cols()
    }

    /// Row-major linear index of cell `(row, col)`.
    pub fn linear_index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols() + col
    }

    /// Cell text at a linear index.
    pub fn cell(&self, index: usize) -> Option<&str> {
        let m = self.n_cols();
        self.rows
            .get(index / m)
            .and_then(|row| row.get(index % m))
            .map(String::as_str)
    }

    /// Iterates cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().flatten().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    None,
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl Aggregation {
    /// Decodes WikiSQL's `agg` index (`['', MAX, MIN, COUNT, SUM, AVG]`).
    pub fn from_wikisql(index: usize) -> Option<Self> {
        Some(match index {
            0 => Aggregation::None,
            1 => Aggregation::Max,
            2 => Aggregation::Min,
            3 => Aggregation::Count,
            4 => Aggregation::Sum,
            5 => Aggregation::Avg,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    Eq,
    Gt,
    Lt,
}

impl Comparator {
    /// Decodes WikiSQL's condition operator index (`['=', '>', '<']`).
    pub fn from_wikisql(index: usize) -> Option<Self> {
        Some(match index {
            0 => Comparator::Eq,
            1 => Comparator::Gt,
            2 => Comparator::Lt,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub column: usize,
    pub comparator: Comparator,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceQuery {
    pub select_column: usize,
    pub aggregation: Aggregation,
    pub conditions: Vec<Condition>,
}

/// One question over one table, with the gold answer cell.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ExampleRecord", into = "ExampleRecord")]
pub struct Example {
    pub table: Table,
    pub question: String,
    pub answer_index: usize,
    pub answer_text: String,
}

impl Example {
    /// Builds an example, filling `answer_text` from the table.
    pub fn new(table: Table, question: impl Into<String>, answer_index: usize) -> Result<Self> {
        let answer_text = table
            .cell(answer_index)
            .ok_or(Error::IndexOutOfRange {
                what: "answer cell",
                index: answer_index,
                len: table.n_cells(),
            })?
            .to_string();
        Ok(Example {
            table,
            question: question.into(),
            answer_index,
            answer_text,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        match self.table.cell(self.answer_index) {
            None => Err(Error::InvalidExample {
                example_id: self.table.table_id.clone(),
                message: format!(
                    "answer_index {} outside {} cells",
                    self.answer_index,
                    self.table.n_cells()
                ),
            }),
            Some(text) if text != self.answer_text => Err(Error::InvalidExample {
                example_id: self.table.table_id.clone(),
                message: format!(
                    "answer_text {:?} differs from cell text {text:?}",
                    self.answer_text
                ),
            }),
            Some(_) => Ok(()),
        }
    }
}

/// Flat JSONL representation of an [`Example`].
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ExampleRecord {
    table_id: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    question: String,
    answer_index: usize,
    answer_text: String,
}

impl TryFrom<ExampleRecord> for Example {
    type Error = Error;

    fn try_from(r: ExampleRecord) -> Result<Self> {
        let example = Example {
            table: Table {
                table_id: r.table_id,
                headers: r.headers,
                rows: r.rows,
            },
            question: r.question,
            answer_index: r.answer_index,
            answer_text: r.answer_text,
        };
        example.validate()?;
        Ok(example)
    }
}

impl From<Example> for ExampleRecord {
    fn from(e: Example) -> Self {
        ExampleRecord {
            table_id: e.table.table_id,
            headers: e.table.headers,
            rows: e.table.rows,
            question: e.question,
            answer_index: e.answer_index,
            answer_text: e.answer_text,
        }
    }
}

/// One query record joined to its table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedQuery {
    pub table: Arc<Table>,
    pub question: String,
    pub query: SourceQuery,
}

#[derive(Deserialize)]
struct RawTable {
    id: String,
    header: Vec<String>,
    rows: Vec<Vec<serde_json::Value>>,
}

#[derive(Deserialize)]
struct RawQuery {
    table_id: String,
    question: String,
    sql: RawSql,
}

#[derive(Deserialize)]
struct RawSql {
    sel: usize,
    agg: usize,
    conds: Vec<(usize, usize, serde_json::Value)>,
}

fn scalar_to_string(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        serde_json::Value::Null => Some(String::new()),
        _ => None,
    }
}

fn non_blank_lines<'a, R: BufRead + 'a>(
    reader: R,
    source_name: &'a str,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    reader
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            line.map(|l| (i + 1, l)).map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

/// Reads WikiSQL `*.tables.jsonl` and `*.jsonl` streams and joins every
/// query to its table. All text is NFC-normalized and trimmed.
pub fn parse_wikisql<T: BufRead, Q: BufRead>(
    tables: T,
    tables_name: &str,
    queries: Q,
    queries_name: &str,
) -> Result<Vec<ParsedQuery>> {
    let parse_err = |source_name: &str, line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };

    let mut by_id: HashMap<String, Arc<Table>> = HashMap::new();
    for item in non_blank_lines(tables, tables_name) {
        let (line, text) = item?;
        let raw: RawTable = serde_json::from_str(&text)
            .map_err(|e| parse_err(tables_name, line, e.to_string()))?;
        let mut rows = Vec::with_capacity(raw.rows.len());
        for row in &raw.rows {
            let cells = row
                .iter()
                .map(|v| scalar_to_string(v).map(|s| normalize_text(&s)))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_err(tables_name, line, "non-scalar cell value".into()))?;
            rows.push(cells);
        }
        let headers = raw.header.iter().map(|h| normalize_text(h)).collect();
        let table = Table::new(raw.id.clone(), headers, rows)
            .map_err(|e| parse_err(tables_name, line, e.to_string()))?;
        if by_id.insert(raw.id.clone(), Arc::new(table)).is_some() {
            return Err(parse_err(
                tables_name,
                line,
                format!("duplicate table id {:?}", raw.id),
            ));
        }
    }

    let mut out = Vec::new();
    for item in non_blank_lines(queries, queries_name) {
        let (line, text) = item?;
        let raw: RawQuery = serde_json::from_str(&text)
            .map_err(|e| parse_err(queries_name, line, e.to_string()))?;
        let table = by_id
            .get(&raw.table_id)
            .cloned()
            .ok_or_else(|| Error::DanglingTable {
                source_name: queries_name.to_string(),
                line,
                id: raw.table_id.clone(),
            })?;
        let m = table.n_cols();
        if raw.sql.sel >= m {
            return Err(parse_err(
                queries_name,
                line,
                format!("select column {} outside {m} columns", raw.sql.sel),
            ));
        }
        let aggregation = Aggregation::from_wikisql(raw.sql.agg).ok_or_else(|| {
            parse_err(queries_name, line, format!("unknown aggregation {}", raw.sql.agg))
        })?;
        let mut conditions = Vec::with_capacity(raw.sql.conds.len());
        for (column, op, value) in &raw.sql.conds {
            if *column >= m {
                return Err(parse_err(
                    queries_name,
                    line,
                    format!("condition column {column} outside {m} columns"),
                ));
            }
            let comparator = Comparator::from_wikisql(*op).ok_or_else(|| {
                parse_err(queries_name, line, format!("unknown comparator {op}"))
            })?;
            let value = scalar_to_string(value).ok_or_else(|| {
                parse_err(queries_name, line, "non-scalar condition value".into())
            })?;
            conditions.push(Condition {
                column: *column,
                comparator,
                value: normalize_text(&value),
            });
        }
        out.push(ParsedQuery {
            table,
            question: normalize_text(&raw.question),
            query: SourceQuery {
                select_column: raw.sql.sel,
                aggregation,
                conditions,
            },
        });
    }
    Ok(out)
}

/// Keeps queries whose answer is a single literal cell: exactly one
/// condition and no aggregation.
pub fn filter_single_condition(query: &SourceQuery) -> bool {
    query.conditions.len() == 1 && query.aggregation == Aggregation::None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    NoMatch,
    MultipleMatches,
    NonNumeric,
    NotSingleCondition,
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Executes the single condition of `query` and returns the selected cell.
///
/// EQ compares normalized strings exactly. GT/LT compare as numbers; if the
/// condition value or any cell in the condition column fails to parse, the
/// ordering is undefined and the query is rejected.
pub fn resolve_answer_cell(
    table: &Table,
    query: &SourceQuery,
) -> std::result::Result<(usize, String), RejectReason> {
    if !filter_single_condition(query) {
        return Err(RejectReason::NotSingleCondition);
    }
    let cond = &query.conditions[0];
    let column_values = table.rows.iter().map(|row| row[cond.column].as_str());

    let matched: Vec<usize> = match cond.comparator {
        Comparator::Eq => column_values
            .enumerate()
            .filter(|(_, cell)| *cell == cond.value)
            .map(|(i, _)| i)
            .collect(),
        Comparator::Gt | Comparator::Lt => {
            let target = parse_number(&cond.value).ok_or(RejectReason::NonNumeric)?;
            let mut matched = Vec::new();
            for (i, cell) in column_values.enumerate() {
                let v = parse_number(cell).ok_or(RejectReason::NonNumeric)?;
                let hit = match cond.comparator {
                    Comparator::Gt => v > target,
                    _ => v < target,
                };
                if hit {
                    matched.push(i);
                }
            }
            matched
        }
    };

    match matched.as_slice() {
        [] => Err(RejectReason::NoMatch),
        [row] => {
            let index = table.linear_index(*row, query.select_column);
            Ok((index, table.rows[*row][query.select_column].clone()))
        }
        _ => Err(RejectReason::MultipleMatches),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total: usize,
    pub rejected_filter: usize,
    pub rejected_resolve: usize,
    pub accepted: usize,
    /// Breakdown of `rejected_resolve`.
    pub resolve_reasons: BTreeMap<String, usize>,
}

impl fmt::Display for IngestStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total             {}", self.total)?;
        writeln!(f, "rejected_filter   {}", self.rejected_filter)?;
        writeln!(f, "rejected_resolve  {}", self.rejected_resolve)?;
        for (reason, n) in &self.resolve_reasons {
            writeln!(f, "  {reason:<16}{n}")?;
        }
        write!(f, "accepted          {}", self.accepted)
    }
}

/// Filters and resolves parsed queries into examples, preserving order.
pub fn build_dataset(parsed: &[ParsedQuery]) -> (Vec<Example>, IngestStats) {
    let mut stats = IngestStats {
        total: parsed.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for p in parsed {
        if !filter_single_condition(&p.query) {
            stats.rejected_filter += 1;
            continue;
        }
        match resolve_answer_cell(&p.table, &p.query) {
            Ok((answer_index, answer_text)) => {
                stats.accepted += 1;
                examples.push(Example {
                    table: (*p.table).clone(),
                    question: p.question.clone(),
                    answer_index,
                    answer_text,
                });
            }
            Err(reason) => {
                stats.rejected_resolve += 1;
                *stats
                    .resolve_reasons
                    .entry(format!("{reason:?}"))
                    .or_default() += 1;
            }
        }
    }
    (examples, stats)
}

/// Reorders rows so that new row `i` is old row `permutation[i]`, remapping
/// the answer index. Columns are never permuted.
pub fn permute_rows(example: &Example, permutation: &[usize]) -> Result<Example> {
    let r = example.table.n_rows();
    let mut seen = vec![false; r];
    if permutation.len() != r
        || !permutation
            .iter()
            .all(|&p| p < r && !std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidExample {
            example_id: example.table.table_id.clone(),
            message: format!("{permutation:?} is not a permutation of {r} rows"),
        });
    }
    let m = example.table.n_cols();
    let (answer_row, answer_col) = (example.answer_index / m, example.answer_index % m);
    let new_row = permutation
        .iter()
        .position(|&p| p == answer_row)
        .expect("permutation covers every row");
    let rows = permutation
        .iter()
        .map(|&p| example.table.rows[p].clone())
        .collect();
    Ok(Example {
        table: Table {
            table_id: example.table.table_id.clone(),
            headers: example.table.headers.clone(),
            rows,
        },
        question: example.question.clone(),
        answer_index: new_row * m + answer_col,
        answer_text: example.answer_text.clone(),
    })
}

/// The row permutation [`shuffle_rows_augment`] applies for a given seed.
pub fn row_permutation(n_rows: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Shuffles the rows of `example` with a permutation drawn from `seed`.
pub fn shuffle_rows_augment(example: &Example, seed: u64) -> Example {
    let perm = row_permutation(example.table.n_rows(), seed);
    permute_rows(example, &perm).expect("row_permutation yields a valid permutation")
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub(crate) fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for copy `copy` of example `index` under corpus seed `seed`.
pub fn derive_seed(seed: u64, index: usize, copy: usize) -> u64 {
    mix_seed(mix_seed(mix_seed(seed) ^ index as u64) ^ copy as u64)
}

/// Returns each example followed by `copies` row-shuffled variants.
/// Variants equal to the original are kept.
pub fn augment_corpus(examples: &[Example], copies: usize, seed: u64) -> Vec<Example> {
    let mut out = Vec::with_capacity(examples.len() * (copies + 1));
    for (i, example) in examples.iter().enumerate() {
        out.push(example.clone());
        for c in 0..copies {
            out.push(shuffle_rows_augment(example, derive_seed(seed, i, c)));
        }
    }
    out
}

pub fn read_examples_jsonl<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for item in non_blank_lines(reader, source_name) {
        let (line, text) = item?;
        let example: Example = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message: e.to_string(),
        })?;
        out.push(example);
    }
    Ok(out)
}

pub fn write_examples_jsonl<W: Write>(mut writer: W, examples: &[Example]) -> std::io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut writer, example)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_table() -> Table {
        Table::new(
            "t",
            vec!["k".into(), "v".into()],
            vec![vec!["x".into(), "y".into()]],
        )
        .unwrap()
    }

    fn eq_query(select: usize, column: usize, value: &str) -> SourceQuery {
        SourceQuery {
            select_column: select,
            aggregation: Aggregation::None,
            conditions: vec![Condition {
                column,
                comparator: Comparator::Eq,
                value: value.into(),
            }],
        }
    }

    #[test]
    fn table_rejects_ragged_rows() {
        let err = Table::new(
            "t",
            vec!["a".into(), "b".into()],
            vec![vec!["1".into()]],
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 0"));
        assert!(Table::new("t", vec![], vec![vec![]]).is_err());
        assert!(Table::new("t", vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn linear_index_is_row_major() {
        let t = Table::new(
            "t",
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec!["0".into(), "1".into(), "2".into()],
                vec!["3".into(), "4".into(), "5".into()],
            ],
        )
        .unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let k = t.linear_index(i, j);
                assert_eq!(t.cell(k).unwrap(), t.rows[i][j]);
            }
        }
        assert_eq!(t.cell(6), None);
    }

    #[test]
    fn parse_minimal_input() {
        let tables = r#"{"id": "t1", "header": ["a"], "rows": [["x"]]}"#;
        let queries = r#"{"table_id": "t1", "question": "q?", "sql": {"sel": 0, "agg": 0, "conds": [[0, 0, "x"]]}}"#;
        let parsed = parse_wikisql(tables.as_bytes(), "tables", queries.as_bytes(), "queries").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].table.n_cols(), 1);
        assert_eq!(parsed[0].table.n_rows(), 1);
        assert_eq!(parsed[0].question, "q?");
    }

    #[test]
    fn parse_dangling_reference_names_id() {
        let tables = r#"{"id": "t1", "header": ["a"], "rows": [["x"]]}"#;
        let queries = r#"{"table_id": "t9", "question": "q", "sql": {"sel": 0, "agg": 0, "conds": []}}"#;
        let err = parse_wikisql(tables.as_bytes(), "tables", queries.as_bytes(), "queries").unwrap_err();
        assert!(matches!(err, Error::DanglingTable { ref id, line: 1, .. } if id == "t9"));
    }

    #[test]
    fn parse_malformed_line_names_line_number() {
        let tables = "{\"id\": \"t1\", \"header\": [\"a\"], \"rows\": [[\"x\"]]}\n\n{not json";
        let err = parse_wikisql(tables.as_bytes(), "tables", "".as_bytes(), "queries").unwrap_err();
        match err {
            Error::Parse { line, source_name, .. } => {
                assert_eq!(line, 3);
                assert_eq!(source_name, "tables");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_stringifies_numbers_and_normalizes() {
        let tables = r#"{"id": "t", "header": [" Year ", "Pts"], "rows": [[1998, 21.5], ["Café", 3]]}"#;
        let queries = r#"{"table_id": "t", "question": " how many? ", "sql": {"sel": 1, "agg": 0, "conds": [[0, 1, 1990]]}}"#;
        let parsed = parse_wikisql(tables.as_bytes(), "t", queries.as_bytes(), "q").unwrap();
        let t = &parsed[0].table;
        assert_eq!(t.headers, vec!["Year", "Pts"]);
        assert_eq!(t.rows[0], vec!["1998", "21.5"]);
        assert_eq!(t.rows[1][0], "Caf\u{e9}");
        assert_eq!(parsed[0].question, "how many?");
        assert_eq!(parsed[0].query.conditions[0].comparator, Comparator::Gt);
        assert_eq!(parsed[0].query.conditions[0].value, "1990");
    }

    #[test]
    fn parse_rejects_out_of_range_columns() {
        let tables = r#"{"id": "t", "header": ["a"], "rows": [["x"]]}"#;
        let queries = r#"{"table_id": "t", "question": "q", "sql": {"sel": 3, "agg": 0, "conds": []}}"#;
        assert!(parse_wikisql(tables.as_bytes(), "t", queries.as_bytes(), "q").is_err());
    }

    #[test]
    fn filter_rules() {
        let mut q = eq_query(0, 0, "x");
        assert!(filter_single_condition(&q));
        q.aggregation = Aggregation::Count;
        assert!(!filter_single_condition(&q));
        q.aggregation = Aggregation::None;
        q.conditions.clear();
        assert!(!filter_single_condition(&q));
        q.conditions = vec![eq_query(0, 0, "a").conditions[0].clone(); 2];
        assert!(!filter_single_condition(&q));
    }

    #[test]
    fn resolve_single_row() {
        let t = kv_table();
        assert_eq!(resolve_answer_cell(&t, &eq_query(1, 0, "x")), Ok((1, "y".into())));
        assert_eq!(
            resolve_answer_cell(&t, &eq_query(1, 0, "z")),
            Err(RejectReason::NoMatch)
        );
    }

    #[test]
    fn resolve_rejects_ambiguous_and_non_numeric() {
        let t = Table::new(
            "t",
            vec!["k".into(), "v".into()],
            vec![
                vec!["x".into(), "1".into()],
                vec!["x".into(), "2".into()],
                vec!["y".into(), "n/a".into()],
            ],
        )
        .unwrap();
        assert_eq!(
            resolve_answer_cell(&t, &eq_query(1, 0, "x")),
            Err(RejectReason::MultipleMatches)
        );
        let mut q = eq_query(0, 1, "1");
        q.conditions[0].comparator = Comparator::Gt;
        assert_eq!(resolve_answer_cell(&t, &q), Err(RejectReason::NonNumeric));
        let t2 = Table::new(
            "t",
            vec!["k".into(), "v".into()],
            vec![vec!["x".into(), "1".into()], vec!["y".into(), "2.5".into()]],
        )
        .unwrap();
        assert_eq!(resolve_answer_cell(&t2, &q), Ok((2, "y".into())));
        q.conditions[0].comparator = Comparator::Lt;
        q.conditions[0].value = "abc".into();
        assert_eq!(resolve_answer_cell(&t2, &q), Err(RejectReason::NonNumeric));
    }

    #[test]
    fn build_dataset_counts_partition() {
        let (examples, stats) = build_dataset(&[]);
        assert!(examples.is_empty());
        assert_eq!(stats, IngestStats::default());

        let table = Arc::new(kv_table());
        let mk = |query| ParsedQuery {
            table: table.clone(),
            question: "what is v".into(),
            query,
        };
        let mut agg = eq_query(1, 0, "x");
        agg.aggregation = Aggregation::Count;
        let parsed = vec![mk(eq_query(1, 0, "x")), mk(agg), mk(eq_query(1, 0, "nope"))];
        let (examples, stats) = build_dataset(&parsed);
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].answer_text, "y");
        assert_eq!(stats.total, 3);
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.rejected_filter, 1);
        assert_eq!(stats.rejected_resolve, 1);
        assert_eq!(stats.resolve_reasons["NoMatch"], 1);
    }

    fn two_row_example() -> Example {
        let t = Table::new(
            "t",
            vec!["k".into(), "v".into()],
            vec![vec!["a".into(), "1".into()], vec!["b".into(), "2".into()]],
        )
        .unwrap();
        Example::new(t, "what is v where k is a", 1).unwrap()
    }

    #[test]
    fn identity_permutation_is_identity() {
        let e = two_row_example();
        assert_eq!(permute_rows(&e, &[0, 1]).unwrap(), e);
    }

    #[test]
    fn swap_shifts_answer_by_m() {
        let e = two_row_example();
        let s = permute_rows(&e, &[1, 0]).unwrap();
        assert_eq!(s.answer_index, e.answer_index + 2);
        assert_eq!(s.answer_text, e.answer_text);
        s.validate().unwrap();
        assert!(permute_rows(&e, &[0, 0]).is_err());
        assert!(permute_rows(&e, &[0]).is_err());
    }

    #[test]
    fn augment_counts_and_determinism() {
        let e = two_row_example();
        assert_eq!(augment_corpus(std::slice::from_ref(&e), 0, 7), vec![e.clone()]);
        let corpus = vec![e.clone(); 10];
        let out = augment_corpus(&corpus, 2, 7);
        assert_eq!(out.len(), 30);
        out.iter().for_each(|x| x.validate().unwrap());
        assert_eq!(out, augment_corpus(&corpus, 2, 7));
    }

    #[test]
    fn jsonl_rejects_inconsistent_answer_text() {
        let line = r#"{"table_id":"t","headers":["a"],"rows":[["x"]],"question":"q","answer_index":0,"answer_text":"y"}"#;
        let err = read_examples_jsonl(line.as_bytes(), "d.jsonl").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn jsonl_key_layout() {
        let e = two_row_example();
        let mut buf = Vec::new();
        write_examples_jsonl(&mut buf, std::slice::from_ref(&e)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "{\"table_id\":\"t\",\"headers\":[\"k\",\"v\"],\"rows\":[[\"a\",\"1\"],[\"b\",\"2\"]],\
             \"question\":\"what is v where k is a\",\"answer_index\":1,\"answer_text\":\"1\"}\n"
        );
        assert_eq!(read_examples_jsonl(text.as_bytes(), "x").unwrap(), vec![e]);
    }
}
