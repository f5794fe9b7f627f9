//! Cross-modal transcript divergence: insert/delete edit distance between
//! two token sequences, normalized by their total length, and corpus-level
//! summaries of the resulting scores.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    #[default]
    Chars,
    Words,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chars" | "char" | "characters" => Ok(Granularity::Chars),
            "words" | "word" => Ok(Granularity::Words),
            other => Err(Error::InvalidInput(format!("unknown granularity {other:?}"))),
        }
    }
}

/// A tokenized transcript.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transcript {
    tokens: Vec<String>,
}

impl Transcript {
    pub fn new(text: &str, granularity: Granularity) -> Self {
        let tokens = match granularity {
            Granularity::Chars => text.chars().map(String::from).collect(),
            Granularity::Words => text.split_whitespace().map(String::from).collect(),
        };
        Self { tokens }
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { tokens: tokens.into_iter().map(Into::into).collect() }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Insert/delete-only edit distance: `len(a) + len(b) - 2·LCS(a, b)`.
pub fn edit_delta_tokens<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    a.len() + b.len() - 2 * lcs_len(a, b)
}

pub fn edit_delta(a: &Transcript, b: &Transcript) -> usize {
    edit_delta_tokens(&a.tokens, &b.tokens)
}

/// Edit delta over the summed length; 0 for identical sequences, 1 when
/// they share no token. Two empty sequences score 0.
pub fn normalized_divergence_tokens<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 0.0;
    }
    edit_delta_tokens(a, b) as f64 / total as f64
}

pub fn normalized_divergence(a: &Transcript, b: &Transcript) -> f64 {
    normalized_divergence_tokens(&a.tokens, &b.tokens)
}

pub const HISTOGRAM_BINS: usize = 101;

/// Distribution report over divergence scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Bin `i` counts scores whose value rounds to `i / 100`.
    pub histogram: Vec<usize>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn corpus_summary(scores: &[f64]) -> Result<CorpusSummary> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("corpus summary needs at least one score".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidInput(format!("score {bad} outside [0, 1]")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for &s in scores {
        histogram[((s * 100.0).round() as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    Ok(CorpusSummary {
        count: scores.len(),
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
        histogram,
    })
}

/// One line of a transcript-pair file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptPair {
    pub line: usize,
    pub a: String,
    pub b: String,
}

/// Parses tab-separated transcript pairs. Blank lines are skipped.
pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<TranscriptPair>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => {
                out.push(TranscriptPair { line: idx + 1, a: a.to_string(), b: b.to_string() })
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    detail: "expected exactly two tab-separated fields".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<TranscriptPair>> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    parse_pairs(&text, path)
}
