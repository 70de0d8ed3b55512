//! Synthetic task generation, TSV ingestion, vocabularies and batching.
//!
//! A dataset line is `label<TAB>text_a[<TAB>text_b]` with whitespace-separated
//! tokens. Pair tasks are joined as `text_a [SEP] text_b`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FsdError, Result};
use crate::model::{Batch, PAD_ID, SEP_ID, UNK_ID};
use crate::rng::{stream, Stream};

/// Number of ids reserved ahead of real tokens (pad, unk, sep).
pub const RESERVED_IDS: usize = 3;

/// Built-in synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Is the strict majority of tokens odd-indexed (`w1`, `w3`, ...)?
    Parity,
    /// Does the marker bigram appear contiguously?
    Marker,
    /// Do both sentences carry the same marker token?
    Pair,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parity" => Ok(TaskKind::Parity),
            "marker" => Ok(TaskKind::Marker),
            "pair" => Ok(TaskKind::Pair),
            _ => Err(FsdError::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::Marker => "marker",
            TaskKind::Pair => "pair",
        }
    }

    pub fn is_pair(self) -> bool {
        self == TaskKind::Pair
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Training lines; dev and test each get a quarter of this.
    pub size: usize,
    /// Model vocabulary including the reserved ids.
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub label: usize,
    pub text_a: String,
    pub text_b: Option<String>,
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Marker tokens used by the marker and pair tasks.
const MARKERS: usize = 4;

/// Longest side of a pair example.
const PAIR_SIDE_MAX: usize = 3;

fn gen_parity<R: Rng>(rng: &mut R, label: usize, words: usize, seq_len: usize) -> RawExample {
    let len = rng.gen_range((seq_len / 2).max(1)..=seq_len);
    // strict majority of tokens share the label's index parity
    let major = rng.gen_range(len / 2 + 1..=len);
    let mut toks: Vec<usize> = (0..len)
        .map(|i| {
            let want = if i < major { label } else { 1 - label };
            let mut t = rng.gen_range(0..words);
            if t % 2 != want {
                t = if t + 1 < words { t + 1 } else { t - 1 };
            }
            t
        })
        .collect();
    toks.shuffle(rng);
    RawExample {
        label,
        text_a: toks.into_iter().map(word).collect::<Vec<_>>().join(" "),
        text_b: None,
    }
}

fn filler<R: Rng>(rng: &mut R, words: usize) -> usize {
    rng.gen_range(MARKERS..words)
}

fn gen_marker<R: Rng>(rng: &mut R, label: usize, words: usize, seq_len: usize) -> RawExample {
    let len = rng.gen_range((seq_len / 2).max(3)..=seq_len);
    let mut toks: Vec<usize> = (0..len).map(|_| filler(rng, words)).collect();
    let at = rng.gen_range(0..len - 1);
    if label == 1 {
        toks[at] = 0;
        toks[at + 1] = 1;
    } else {
        // one or both marker halves, never adjacent in order
        match rng.gen_range(0..3) {
            0 => toks[at] = 0,
            1 => toks[at + 1] = 1,
            _ => {
                toks[at] = 1;
                toks[at + 1] = 0;
            }
        }
    }
    RawExample {
        label,
        text_a: toks.into_iter().map(word).collect::<Vec<_>>().join(" "),
        text_b: None,
    }
}

fn gen_pair<R: Rng>(rng: &mut R, label: usize, words: usize, seq_len: usize) -> RawExample {
    let half = ((seq_len - 1) / 2).max(2);
    let side = |rng: &mut R, marker: usize| {
        let len = rng.gen_range(1..=half.min(PAIR_SIDE_MAX));
        let mut toks: Vec<usize> = (0..len).map(|_| filler(rng, words)).collect();
        let at = rng.gen_range(0..len);
        toks[at] = marker;
        toks.into_iter().map(word).collect::<Vec<_>>().join(" ")
    };
    let ma = rng.gen_range(0..MARKERS);
    let mb = if label == 1 {
        ma
    } else {
        (ma + rng.gen_range(1..MARKERS)) % MARKERS
    };
    RawExample {
        label,
        text_a: side(rng, ma),
        text_b: Some(side(rng, mb)),
    }
}

/// Generates `n` examples with exactly balanced labels (odd `n` leaves one extra 0).
pub fn generate(spec: &TaskSpec, n: usize, split: u64) -> Result<Vec<RawExample>> {
    let words = spec.vocab.checked_sub(RESERVED_IDS).unwrap_or(0);
    if words < MARKERS + 2 || spec.seq_len < 4 || n == 0 {
        return Err(FsdError::Config(format!(
            "task needs vocab >= {}, seq_len >= 4 and size >= 1",
            MARKERS + 2 + RESERVED_IDS
        )));
    }
    let mut rng = stream(spec.seed.wrapping_add(split.wrapping_mul(0x9E37_79B9_7F4A_7C15)), Stream::Data);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|y| match spec.task {
            TaskKind::Parity => gen_parity(&mut rng, y, words, spec.seq_len),
            TaskKind::Marker => gen_marker(&mut rng, y, words, spec.seq_len),
            TaskKind::Pair => gen_pair(&mut rng, y, words, spec.seq_len),
        })
        .collect())
}

pub fn write_tsv(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        match &e.text_b {
            Some(b) => writeln!(out, "{}\t{}\t{}", e.label, e.text_a, b)?,
            None => writeln!(out, "{}\t{}", e.label, e.text_a)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Paths of the three splits inside a task directory.
pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    ["train.tsv", "dev.tsv", "test.tsv"].map(|f| dir.join(f))
}

/// Writes `train.tsv`, `dev.tsv` and `test.tsv` under `dir`.
pub fn gen_data(spec: &TaskSpec, dir: &Path) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let paths = split_paths(dir);
    let sizes = [spec.size, (spec.size / 4).max(1), (spec.size / 4).max(1)];
    for (split, (path, n)) in paths.iter().zip(sizes).enumerate() {
        write_tsv(path, &generate(spec, n, split as u64)?)?;
    }
    Ok(paths)
}

pub fn parse_tsv(text: &str, path: &str) -> Result<Vec<RawExample>> {
    let err = |line: usize, detail: String| FsdError::Parse {
        path: path.into(),
        line,
        detail,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(err(n, format!("expected 2 or 3 tab-separated fields, got {}", cols.len())));
        }
        let label = cols[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| err(n, format!("label {:?} is not a class id", cols[0])))?;
        if cols[1].split_whitespace().next().is_none() {
            return Err(err(n, "empty text".into()));
        }
        out.push(RawExample {
            label,
            text_a: cols[1].to_string(),
            text_b: cols.get(2).map(|s| s.to_string()),
        });
    }
    if out.is_empty() {
        return Err(err(0, "no examples".into()));
    }
    Ok(out)
}

pub fn read_tsv(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, &path.display().to_string())
}

/// Token-to-id map; ids 0..3 are pad, unk and sep, the rest follow sorted token order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build(examples: &[RawExample]) -> Vocab {
        let mut tokens: Vec<&str> = examples
            .iter()
            .flat_map(|e| {
                e.text_a
                    .split_whitespace()
                    .chain(e.text_b.iter().flat_map(|b| b.split_whitespace()))
            })
            .collect();
        tokens.sort_unstable();
        tokens.dedup();
        let index = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), i + RESERVED_IDS))
            .collect();
        Vocab { index }
    }

    /// Vocabulary size including reserved ids.
    pub fn len(&self) -> usize {
        self.index.len() + RESERVED_IDS
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Ids padded or truncated to `seq_len`.
    pub fn encode(&self, e: &RawExample, seq_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = e.text_a.split_whitespace().map(|t| self.id(t)).collect();
        if let Some(b) = &e.text_b {
            ids.push(SEP_ID);
            ids.extend(b.split_whitespace().map(|t| self.id(t)));
        }
        ids.resize(seq_len, PAD_ID);
        ids
    }
}

/// Encoded examples of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn encode(raw: &[RawExample], vocab: &Vocab, seq_len: usize, n_classes: usize) -> Result<Dataset> {
        if let Some((i, e)) = raw.iter().enumerate().find(|(_, e)| e.label >= n_classes) {
            return Err(FsdError::Parse {
                path: "<dataset>".into(),
                line: i + 1,
                detail: format!("label {} outside 0..{n_classes}", e.label),
            });
        }
        Ok(Dataset {
            ids: raw.iter().map(|e| vocab.encode(e, seq_len)).collect(),
            labels: raw.iter().map(|e| e.label).collect(),
            seq_len,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let rows: Vec<Vec<usize>> = indices.iter().map(|&i| self.ids[i].clone()).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::from_rows(&rows, &labels, self.seq_len)
    }

    /// Consecutive chunks of `order`; a trailing chunk smaller than two is dropped
    /// because CKA needs at least two rows.
    pub fn chunks(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Batches in index order.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let order: Vec<usize> = (0..self.len()).collect();
        Dataset::chunks(&order, batch_size).iter().map(|c| self.batch(c)).collect()
    }

    /// Share of each class.
    pub fn label_balance(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.len().max(1) as f64).collect()
    }
}

/// The three splits of a task directory, encoded with the training vocabulary.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Loads one TSV file with a given vocabulary.
pub fn load_tsv(path: &Path, vocab: &Vocab, seq_len: usize, n_classes: usize) -> Result<Dataset> {
    let raw = read_tsv(path)?;
    Dataset::encode(&raw, vocab, seq_len, n_classes).map_err(|e| match e {
        FsdError::Parse { line, detail, .. } => FsdError::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        },
        other => other,
    })
}

pub fn load_task(dir: &Path, seq_len: usize, n_classes: usize) -> Result<TaskData> {
    let [train_p, dev_p, test_p] = split_paths(dir);
    let raw = read_tsv(&train_p)?;
    let vocab = Vocab::build(&raw);
    let train = Dataset::encode(&raw, &vocab, seq_len, n_classes)?;
    Ok(TaskData {
        train,
        dev: load_tsv(&dev_p, &vocab, seq_len, n_classes)?,
        test: load_tsv(&test_p, &vocab, seq_len, n_classes)?,
        vocab,
    })
}
