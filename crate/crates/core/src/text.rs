//! Tokenization, tweet normalization, labeled datasets and padded batches.

use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, PAD_ID};

const URL_PREFIXES: [&str; 3] = ["http://", "https://", "www."];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Lowercases and shortens every run of more than two identical letters to
/// exactly two.
fn squeeze_and_lowercase(token: &str) -> String {
    let lower = token.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    let mut prev = None;
    let mut run = 0;
    for ch in lower.chars() {
        if Some(ch) == prev {
            run += 1;
        } else {
            prev = Some(ch);
            run = 1;
        }
        if run <= 2 || !ch.is_alphabetic() {
            out.push(ch);
        }
    }
    out
}

/// Tweet normalization: URLs become `url`, `@`-mentions become `username`,
/// letter runs longer than two collapse to two, and everything is lowercased.
///
/// Run collapsing compares lowercased letters. A token is a URL if it starts
/// with a URL prefix either as written (lowercased) or after collapsing, so
/// `htttp://` counts too and the function stays idempotent.
/// Tokens are re-joined with single spaces.
pub fn normalize_tweet(text: &str) -> String {
    text.split_whitespace()
        .map(|tok| {
            let lower = tok.to_lowercase();
            let norm = squeeze_and_lowercase(tok);
            if URL_PREFIXES
                .iter()
                .any(|p| lower.starts_with(p) || norm.starts_with(p))
            {
                "url".to_string()
            } else if norm.starts_with('@') {
                "username".to_string()
            } else {
                norm
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.examples
            .iter()
            .flat_map(|e| e.tokens.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TsvOptions {
    pub tweet_normalize: bool,
    /// When set, labels must be below this count.
    pub num_classes: Option<usize>,
}

/// Reads `label<TAB>text` lines. Blank lines are skipped.
pub fn load_tsv<R: BufRead>(reader: R, split: Split, opts: TsvOptions) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected label<TAB>text".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("invalid label '{label}'"),
        })?;
        if let Some(k) = opts.num_classes {
            if label >= k {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label {label} >= declared class count {k}"),
                });
            }
        }
        let tokens = if opts.tweet_normalize {
            tokenize(&normalize_tweet(text))
        } else {
            tokenize(text)
        };
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "sentence has no tokens".into(),
            });
        }
        examples.push(Example { label, tokens });
    }
    if examples.is_empty() {
        return Err(Error::Empty("dataset has no examples".into()));
    }
    let num_classes = match opts.num_classes {
        Some(k) => k,
        None => examples.iter().map(|e| e.label).max().unwrap_or(0) + 1,
    };
    Ok(Dataset {
        examples,
        num_classes,
        split,
    })
}

/// Reads an unlabeled corpus: one sentence per line, blank lines skipped.
pub fn load_corpus<R: BufRead>(reader: R, tweet_normalize: bool) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let tokens = if tweet_normalize {
            tokenize(&normalize_tweet(&line))
        } else {
            tokenize(&line)
        };
        if !tokens.is_empty() {
            out.push(tokens);
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("corpus has no sentences".into()));
    }
    Ok(out)
}

/// A padded mini-batch. Padding is storage only: consumers read each row up
/// to its true length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.width..(i + 1) * self.width]
    }

    /// Row `i` cut at its true length.
    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.row(i)[..self.lengths[i]]
    }
}

/// Shuffles `dataset` with `rng` and groups it into batches of `batch_size`
/// (the last one may be shorter), each padded with [`PAD_ID`] to its own
/// longest sentence.
pub fn build_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    vocab: &Vocabulary,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let width = chunk
                .iter()
                .map(|&i| dataset.examples[i].tokens.len())
                .max()
                .unwrap_or(0);
            let mut token_ids = vec![PAD_ID; width * chunk.len()];
            let mut lengths = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for (row, &i) in chunk.iter().enumerate() {
                let ex = &dataset.examples[i];
                for (col, tok) in ex.tokens.iter().enumerate() {
                    token_ids[row * width + col] = vocab.id(tok);
                }
                lengths.push(ex.tokens.len());
                labels.push(ex.label);
            }
            Batch {
                token_ids,
                width,
                lengths,
                labels,
            }
        })
        .collect();
    Ok(batches)
}
