//! Tokenization, datasets, batching and seeded sampling.

mod csv_input;
mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub use csv_input::{load_csv, CsvSchema};
pub use synthetic::{make_synthetic, SyntheticData, SyntheticSpec};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary of at most `max_size` entries (reserved ids
    /// included) from tokens seen at least `min_freq` times. More frequent
    /// tokens get lower ids; ties are broken lexicographically.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Vocab> {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room beyond the reserved tokens"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of an already-normalized token, `UNK` when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// One labeled input of one or two text segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub segments: Vec<String>,
    pub label: usize,
}

impl Example {
    pub fn single(text: impl Into<String>, label: usize) -> Self {
        Example {
            segments: vec![text.into()],
            label,
        }
    }

    pub fn pair(a: impl Into<String>, b: impl Into<String>, label: usize) -> Self {
        Example {
            segments: vec![a.into(), b.into()],
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub examples: Vec<Example>,
    pub role: Role,
    pub n_classes: usize,
}

impl DatasetSplit {
    pub fn new(examples: Vec<Example>, role: Role, n_classes: usize) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.label >= n_classes) {
            return Err(Error::Input(format!(
                "label {} outside [0, {n_classes})",
                e.label
            )));
        }
        if let Some(e) = examples
            .iter()
            .find(|e| e.segments.is_empty() || e.segments.len() > 2)
        {
            return Err(Error::Input(format!(
                "examples need one or two segments, got {}",
                e.segments.len()
            )));
        }
        Ok(DatasetSplit {
            examples,
            role,
            n_classes,
        })
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples
            .iter()
            .flat_map(|e| e.segments.iter().map(String::as_str))
    }

    /// `label<TAB>segment[<TAB>segment]`, one example per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let _ = write!(out, "{}", e.label);
            for s in &e.segments {
                let clean: String = s
                    .chars()
                    .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
                    .collect();
                let _ = write!(out, "\t{clean}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, role: Role, n_classes: usize) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let label = fields
                .next()
                .and_then(|l| l.parse::<usize>().ok())
                .ok_or_else(|| Error::Input(format!("line {}: bad label", i + 1)))?;
            let segments: Vec<String> = fields.map(str::to_string).collect();
            if segments.is_empty() || segments.len() > 2 {
                return Err(Error::Input(format!(
                    "line {}: expected one or two text fields",
                    i + 1
                )));
            }
            examples.push(Example { segments, label });
        }
        DatasetSplit::new(examples, role, n_classes)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path, role: Role, n_classes: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, role, n_classes)
    }
}

/// A tokenized, padded example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl Encoded {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lays out `[CLS] seg1 [SEP]` or `[CLS] seg1 [SEP] seg2 [SEP]`, keeps the
/// head when the content does not fit in `max_len`, and pads with `PAD`.
pub fn tokenize_truncate(example: &Example, vocab: &Vocab, max_len: usize) -> Result<Encoded> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for content"
        )));
    }
    let budget = max_len - 2;
    let mut content = Vec::with_capacity(budget);
    'outer: for (s, seg) in example.segments.iter().enumerate() {
        if s > 0 {
            if content.len() == budget {
                break;
            }
            content.push(SEP);
        }
        for tok in tokenize(seg) {
            if content.len() == budget {
                break 'outer;
            }
            content.push(vocab.id(&tok));
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(content);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(Encoded {
        ids,
        mask,
        label: example.label,
    })
}

pub fn encode_split(split: &DatasetSplit, vocab: &Vocab, max_len: usize) -> Result<Vec<Encoded>> {
    split
        .examples
        .iter()
        .map(|e| tokenize_truncate(e, vocab, max_len))
        .collect()
}

/// Row-major token ids and attention mask for `batch_size` sequences of
/// `seq_len` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub labels: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Stacks encoded rows, dropping trailing columns that are padding in
    /// every row.
    pub fn from_encoded(rows: &[&Encoded]) -> Result<Batch> {
        let width = rows.first().map_or(0, |r| r.ids.len());
        if rows.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if rows.iter().any(|r| r.ids.len() != width || r.mask.len() != width) {
            return Err(Error::Input("batch rows differ in length".into()));
        }
        let seq_len = rows.iter().map(|r| r.real_len()).max().unwrap_or(1).max(1);
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut mask = Vec::with_capacity(rows.len() * seq_len);
        for r in rows {
            ids.extend_from_slice(&r.ids[..seq_len]);
            mask.extend_from_slice(&r.mask[..seq_len]);
        }
        Ok(Batch {
            ids,
            mask,
            labels: rows.iter().map(|r| r.label).collect(),
            batch_size: rows.len(),
            seq_len,
        })
    }

    /// Contiguous batches of `size` rows in the given order; the last one may
    /// be shorter.
    pub fn chunks(encoded: &[Encoded], order: &[usize], size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        order
            .chunks(size)
            .map(|idx| {
                let rows: Vec<&Encoded> = idx.iter().map(|&i| &encoded[i]).collect();
                Batch::from_encoded(&rows)
            })
            .collect()
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffle_with_seed(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, 0x5348_5546));
    order
}

/// Exactly `n_per_class` examples of every class, drawn without replacement.
/// Selected examples keep their original relative order.
pub fn stratified_subsample(
    split: &DatasetSplit,
    n_per_class: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut rng = seeded(seed, 0x5354_5241);
    let mut keep = Vec::new();
    for class in 0..split.n_classes {
        let mut members: Vec<usize> = split
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < n_per_class {
            return Err(Error::Input(format!(
                "class {class} has {} examples, {n_per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        keep.extend_from_slice(&members[..n_per_class]);
    }
    keep.sort_unstable();
    Ok(DatasetSplit {
        examples: keep.into_iter().map(|i| split.examples[i].clone()).collect(),
        role: split.role,
        n_classes: split.n_classes,
    })
}
