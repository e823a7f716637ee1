use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Example, Role};
use crate::error::{Error, Result};

/// Column layout of a labeled CSV corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: usize,
    /// Columns joined with a space into the first segment.
    pub text_columns: Vec<usize>,
    /// Columns joined into an optional second segment (sentence pairs).
    #[serde(default)]
    pub pair_columns: Vec<usize>,
    pub n_classes: usize,
    /// Value of the first class in the file; labels are shifted to start at 0.
    #[serde(default)]
    pub label_base: i64,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(label_column: usize, text_columns: Vec<usize>, n_classes: usize) -> Self {
        CsvSchema {
            label_column,
            text_columns,
            pair_columns: Vec::new(),
            n_classes,
            label_base: 0,
            delimiter: ',',
            has_header: false,
        }
    }
}

/// Reads one example per row. The file must be UTF-8 with RFC 4180 quoting;
/// stray or unterminated quotes are reported with their line number.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DatasetSplit> {
    if schema.text_columns.is_empty() {
        return Err(Error::Config("schema names no text columns".into()));
    }
    if !schema.delimiter.is_ascii() || schema.delimiter == '"' {
        return Err(Error::Config(format!(
            "unsupported delimiter {:?}",
            schema.delimiter
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let delim = schema.delimiter as u8;
    check_quoting(&bytes, delim).map_err(|(line, message)| parse_err(path, line, message))?;

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let needed = schema
        .text_columns
        .iter()
        .chain(&schema.pair_columns)
        .chain(std::iter::once(&schema.label_column))
        .max()
        .copied()
        .unwrap_or(0);

    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() <= needed {
            return Err(parse_err(
                path,
                line,
                format!("row has {} columns, schema needs {}", record.len(), needed + 1),
            ));
        }
        let raw = record[schema.label_column].trim();
        let value: i64 = raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("label {raw:?} is not an integer")))?;
        let label = value - schema.label_base;
        if label < 0 || label >= schema.n_classes as i64 {
            return Err(parse_err(
                path,
                line,
                format!(
                    "label {value} outside the {} declared classes (base {})",
                    schema.n_classes, schema.label_base
                ),
            ));
        }
        let join = |cols: &[usize]| {
            cols.iter()
                .map(|&c| record[c].trim())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut segments = vec![join(&schema.text_columns)];
        if !schema.pair_columns.is_empty() {
            segments.push(join(&schema.pair_columns));
        }
        examples.push(Example {
            segments,
            label: label as usize,
        });
    }
    DatasetSplit::new(examples, Role::Train, schema.n_classes)
}

fn parse_err(path: &Path, line: u64, message: String) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    }
}

/// Strict RFC 4180 quote check: quotes may only open a field, must be
/// doubled inside quoted fields, and must be closed before end of input.
fn check_quoting(bytes: &[u8], delim: u8) -> std::result::Result<(), (u64, String)> {
    #[derive(PartialEq)]
    enum State {
        FieldStart,
        Unquoted,
        Quoted,
        QuoteInQuoted,
    }
    let mut state = State::FieldStart;
    let mut line = 1u64;
    let mut opened_at = 1u64;
    for &b in bytes {
        state = match (state, b) {
            (State::Quoted, b'"') => State::QuoteInQuoted,
            (State::Quoted, b'\n') => {
                line += 1;
                State::Quoted
            }
            (State::Quoted, _) => State::Quoted,
            (State::QuoteInQuoted, b'"') => State::Quoted,
            (State::QuoteInQuoted | State::FieldStart | State::Unquoted, b'\n') => {
                line += 1;
                State::FieldStart
            }
            (State::QuoteInQuoted | State::FieldStart | State::Unquoted, b) if b == delim => {
                State::FieldStart
            }
            (State::QuoteInQuoted, b'\r') => State::QuoteInQuoted,
            (State::QuoteInQuoted, c) => {
                return Err((
                    line,
                    format!("unexpected {:?} after closing quote", c as char),
                ))
            }
            (State::FieldStart, b'"') => {
                opened_at = line;
                State::Quoted
            }
            (State::Unquoted, b'"') => {
                return Err((line, "quote inside an unquoted field".into()));
            }
            (State::FieldStart | State::Unquoted, _) => State::Unquoted,
        };
    }
    if state == State::Quoted {
        return Err((opened_at, "unterminated quoted field".into()));
    }
    Ok(())
}
