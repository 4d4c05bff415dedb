//! Generation-quality metrics over a shared tokenizer: BLEU with brevity
//! penalty and ROUGE-L from the longest common subsequence.
//!
//! ROUGE-L reads `m` as the reference length and `n` as the candidate
//! length. BLEU is 0 for an empty candidate, and without smoothing any zero
//! n-gram precision makes the score 0.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FoodClass;

#[derive(Debug, Error)]
pub enum TextMetricError {
    #[error("at least one reference is required")]
    NoReferences,
    #[error("reference is empty")]
    EmptyReference,
    #[error("n-gram order must be >= 1")]
    ZeroOrder,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

/// Lowercased tokens from [`tokenize`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for TokenSequence {
    fn from(text: &str) -> Self {
        tokenize(text)
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase, split on whitespace, and emit every punctuation or symbol
/// character as its own token.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_lowercase().collect());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    TokenSequence(tokens)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and the total number of candidate n-grams.
pub fn modified_ngram_precision(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    n: usize,
) -> Result<(u64, u64), TextMetricError> {
    if n == 0 {
        return Err(TextMetricError::ZeroOrder);
    }
    let cand = ngram_counts(&candidate.0, n);
    let total = cand.values().sum();
    let mut max_ref: HashMap<&[String], u64> = HashMap::new();
    for r in references {
        for (gram, count) in ngram_counts(&r.0, n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(count);
        }
    }
    let clipped = cand
        .iter()
        .map(|(gram, count)| (*count).min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    Ok((clipped, total))
}

/// 1 when the candidate is at least as long as the reference, else
/// `exp(1 − r/c)`. A zero-length candidate yields 0.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Length of the reference closest to `candidate_len`, shorter on ties.
pub fn closest_reference_len(candidate_len: usize, references: &[TokenSequence]) -> usize {
    references
        .iter()
        .map(TokenSequence::len)
        .min_by_key(|&r| (r.abs_diff(candidate_len), r))
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds 1 to numerator and denominator of every n-gram precision.
    AddOne,
}

fn combine(matches: &[u64], totals: &[u64], bp: f64, smoothing: Smoothing) -> f64 {
    if bp == 0.0 {
        return 0.0;
    }
    let max_n = matches.len() as f64;
    let mut log_sum = 0.0;
    for (&m, &t) in matches.iter().zip(totals) {
        let (m, t) = match smoothing {
            Smoothing::None => (m as f64, t as f64),
            Smoothing::AddOne => (m as f64 + 1.0, t as f64 + 1.0),
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln() / max_n;
    }
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Sentence-level BLEU with uniform weights `1/max_n`.
pub fn bleu(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, TextMetricError> {
    corpus_bleu(&[(candidate.clone(), references.to_vec())], max_n, smoothing)
}

/// Corpus-level BLEU: clipped counts, candidate lengths and closest
/// reference lengths are summed over all segments before combining.
pub fn corpus_bleu(
    segments: &[(TokenSequence, Vec<TokenSequence>)],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, TextMetricError> {
    if max_n == 0 {
        return Err(TextMetricError::ZeroOrder);
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (candidate, references) in segments {
        if references.is_empty() {
            return Err(TextMetricError::NoReferences);
        }
        for n in 1..=max_n {
            let (m, t) = modified_ngram_precision(candidate, references, n)?;
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        c_len += candidate.len();
        r_len += closest_reference_len(candidate.len(), references);
    }
    if segments.is_empty() {
        return Err(TextMetricError::NoReferences);
    }
    Ok(combine(&matches, &totals, brevity_penalty(c_len, r_len), smoothing))
}

pub fn lcs_length(x: &TokenSequence, y: &TokenSequence) -> usize {
    let (a, b) = (&x.0, &y.0);
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
}

pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence, beta: f64) -> Result<RougeL, TextMetricError> {
    if reference.is_empty() {
        return Err(TextMetricError::EmptyReference);
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let recall = lcs / reference.len() as f64;
    let precision = if candidate.is_empty() {
        0.0
    } else {
        lcs / candidate.len() as f64
    };
    let b2 = beta * beta;
    let f = if recall + precision == 0.0 {
        0.0
    } else {
        (1.0 + b2) * recall * precision / (recall + b2 * precision)
    };
    Ok(RougeL { recall, precision, f })
}

/// Best ROUGE-L (by F) against any of several references.
pub fn rouge_l_multi(
    candidate: &TokenSequence,
    references: &[TokenSequence],
    beta: f64,
) -> Result<RougeL, TextMetricError> {
    let mut best: Option<RougeL> = None;
    for r in references {
        let score = rouge_l(candidate, r, beta)?;
        if best.is_none_or(|b| score.f > b.f) {
            best = Some(score);
        }
    }
    best.ok_or(TextMetricError::NoReferences)
}

#[derive(Debug, Deserialize)]
struct ReferenceLine {
    class_id: FoodClass,
    reference_text: String,
}

/// Reference texts keyed by class; several lines per class are allowed.
pub type ReferenceCorpus = BTreeMap<FoodClass, Vec<String>>;

pub fn load_references(path: &Path) -> Result<ReferenceCorpus, TextMetricError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| TextMetricError::Io {
        path: display.clone(),
        source,
    })?;
    let mut corpus = ReferenceCorpus::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TextMetricError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ReferenceLine = serde_json::from_str(&line).map_err(|e| TextMetricError::Schema {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        corpus.entry(parsed.class_id).or_default().push(parsed.reference_text);
    }
    Ok(corpus)
}
