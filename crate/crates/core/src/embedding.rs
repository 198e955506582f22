//! Pretrained embedding versions, coverage statistics and the multichannel
//! input table.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mutual::{CompletedVersions, Provenance};
use crate::tensor::{Parameter, ParameterSet, RealArray};
use crate::vocab::{Vocabulary, PAD_ID};

pub const DEFAULT_INIT_RANGE: f64 = 0.1;

/// One pretrained embedding set (a channel): word → `dim`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVersion {
    pub name: String,
    dim: usize,
    rows: IndexMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingVersion {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            rows: IndexMap::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.rows.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.rows
            .get(word)
            .map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    /// Adds a new word. Returns `Ok(false)` without modifying anything if the
    /// word is already present.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "'{word}' has {} components, version '{}' has dim {}",
                vector.len(),
                self.name,
                self.dim
            )));
        }
        if self.rows.contains_key(word) {
            return Ok(false);
        }
        self.rows.insert(word.to_string(), self.rows.len());
        self.data.extend_from_slice(vector);
        Ok(true)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows
            .iter()
            .map(|(w, &r)| (w.as_str(), &self.data[r * self.dim..(r + 1) * self.dim]))
    }
}

/// A parsed embedding file plus the lines skipped as duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedEmbeddings {
    pub version: EmbeddingVersion,
    /// `(line number, word)` of every duplicate that was ignored.
    pub duplicates: Vec<(usize, String)>,
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_whitespace();
    let count = it.next()?.parse().ok()?;
    let dim = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((count, dim))
}

/// Reads the text embedding format: one `word v1 … vd` line per word,
/// optionally preceded by a `count dim` header. When the first line consists
/// of exactly two non-negative integers it is taken as the header.
pub fn load_embeddings<R: BufRead>(reader: R, name: &str) -> Result<LoadedEmbeddings> {
    let mut version: Option<EmbeddingVersion> = None;
    let mut duplicates = Vec::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            first = false;
            continue;
        }
        if first {
            first = false;
            if let Some((_, dim)) = parse_header(&line) {
                if dim == 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "header declares dimension 0".into(),
                    });
                }
                version = Some(EmbeddingVersion::new(name, dim));
                continue;
            }
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-blank line has a field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: line_no,
                        message: format!("invalid real '{f}'"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("'{word}' has no vector"),
            });
        }
        let v = version.get_or_insert_with(|| EmbeddingVersion::new(name, values.len()));
        if values.len() != v.dim {
            return Err(Error::DimensionMismatch {
                line: line_no,
                expected: v.dim,
                found: values.len(),
            });
        }
        if !v.insert(word, &values)? {
            duplicates.push((line_no, word.to_string()));
        }
    }
    let version = version.ok_or_else(|| Error::Empty(format!("embedding file '{name}'")))?;
    if version.is_empty() {
        return Err(Error::Empty(format!("embedding file '{name}'")));
    }
    Ok(LoadedEmbeddings {
        version,
        duplicates,
    })
}

/// Writes `version` with a `count dim` header. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_embeddings<W: Write>(version: &EmbeddingVersion, mut out: W) -> Result<()> {
    writeln!(out, "{} {}", version.len(), version.dim)?;
    for (word, vector) in version.iter() {
        write!(out, "{word}")?;
        for x in vector {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Coverage of a corpus vocabulary by a set of embedding versions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageStats {
    pub version_names: Vec<String>,
    /// Corpus words missing from each version, in input order.
    pub per_version_unknown: Vec<usize>,
    pub vocab_size: usize,
    pub full_hit: usize,
    pub partial_hit: usize,
    pub no_hit: usize,
}

impl CoverageStats {
    /// Rows in display order: one per version, then vocabulary size, full,
    /// partial and no hit.
    pub fn rows(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = self
            .version_names
            .iter()
            .cloned()
            .zip(self.per_version_unknown.iter().copied())
            .collect();
        rows.push(("vocab".into(), self.vocab_size));
        rows.push(("full".into(), self.full_hit));
        rows.push(("partial".into(), self.partial_hit));
        rows.push(("no-hit".into(), self.no_hit));
        rows
    }
}

impl std::fmt::Display for CoverageStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (label, n) in self.rows() {
            writeln!(f, "{label}\t{n}")?;
        }
        Ok(())
    }
}

pub fn coverage_stats<'a, I>(versions: &[EmbeddingVersion], corpus_vocab: I) -> Result<CoverageStats>
where
    I: IntoIterator<Item = &'a str>,
{
    if versions.is_empty() {
        return Err(Error::InvalidArgument("coverage needs at least one version".into()));
    }
    let mut seen = HashSet::new();
    let mut stats = CoverageStats {
        version_names: versions.iter().map(|v| v.name.clone()).collect(),
        per_version_unknown: vec![0; versions.len()],
        vocab_size: 0,
        full_hit: 0,
        partial_hit: 0,
        no_hit: 0,
    };
    for word in corpus_vocab {
        if !seen.insert(word) {
            continue;
        }
        stats.vocab_size += 1;
        let mut known = 0;
        for (i, v) in versions.iter().enumerate() {
            if v.contains(word) {
                known += 1;
            } else {
                stats.per_version_unknown[i] += 1;
            }
        }
        match known {
            0 => stats.no_hit += 1,
            k if k == versions.len() => stats.full_hit += 1,
            _ => stats.partial_hit += 1,
        }
    }
    if stats.vocab_size == 0 {
        return Err(Error::Empty("corpus vocabulary".into()));
    }
    Ok(stats)
}

/// Where a row of the input table came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presence {
    Pretrained,
    Imputed,
    Random,
    Padding,
}

/// `c` trainable lookup tables (one per embedding version) over a shared
/// vocabulary. Row [`PAD_ID`] is zero in every channel and never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelTable {
    pub vocab: Vocabulary,
    pub channels: Vec<Parameter>,
    pub presence: Vec<Vec<Presence>>,
}

impl MultichannelTable {
    /// A table with every non-padding row drawn uniformly from `[-range, range]`.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        channels: usize,
        dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "a table needs at least one channel and dim >= 1".into(),
            ));
        }
        let n = vocab.len();
        let mut tables = Vec::with_capacity(channels);
        let mut presence = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut value = RealArray::zeros(&[n, dim]);
            let mut pres = vec![Presence::Random; n];
            pres[PAD_ID] = Presence::Padding;
            for row in 0..n {
                if row == PAD_ID {
                    continue;
                }
                for x in value.row_mut(row) {
                    *x = rng.random_range(-range..=range);
                }
            }
            tables.push(Parameter::new(value));
            presence.push(pres);
        }
        Ok(Self {
            vocab,
            channels: tables,
            presence,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dim(&self) -> usize {
        self.channels[0].shape()[1]
    }

    pub fn row(&self, channel: usize, id: usize) -> &[f64] {
        self.channels[channel].value.row(id)
    }

    /// Zeroes the padding row's gradient in every channel.
    pub fn mask_padding_grad(&mut self) {
        for ch in &mut self.channels {
            ch.grad.row_mut(PAD_ID).fill(0.0);
        }
    }

    pub fn count(&self, channel: usize, kind: Presence) -> usize {
        self.presence[channel].iter().filter(|&&p| p == kind).count()
    }
}

impl ParameterSet for MultichannelTable {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for (i, p) in self.channels.iter().enumerate() {
            f(&format!("embed.{i}"), p);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, p) in self.channels.iter_mut().enumerate() {
            f(&format!("embed.{i}"), p);
        }
    }
}

/// Builds the input table over `vocab`, one channel per version.
///
/// For channel `i` and word `w`: the version-`i` vector if known, else the
/// imputed vector from `imputed` if it has one, else uniform noise in
/// `[-range, range]`. The padding row is zero.
pub fn init_multichannel<R: Rng + ?Sized>(
    vocab: Vocabulary,
    versions: &[EmbeddingVersion],
    imputed: Option<&CompletedVersions>,
    range: f64,
    rng: &mut R,
) -> Result<MultichannelTable> {
    let first = versions
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one embedding version".into()))?;
    let dim = first.dim();
    if let Some(v) = versions.iter().find(|v| v.dim() != dim) {
        return Err(Error::Shape(format!(
            "version '{}' has dim {}, '{}' has dim {dim}",
            v.name,
            v.dim(),
            first.name
        )));
    }
    if let Some(done) = imputed {
        if done.versions.len() != versions.len() {
            return Err(Error::Shape(format!(
                "{} completed versions for {} channels",
                done.versions.len(),
                versions.len()
            )));
        }
        if let Some(v) = done.versions.iter().find(|v| v.dim() != dim) {
            return Err(Error::Shape(format!(
                "completed version '{}' has dim {}, expected {dim}",
                v.name,
                v.dim()
            )));
        }
    }
    let mut table = MultichannelTable::random(vocab, versions.len(), dim, range, rng)?;
    for (c, version) in versions.iter().enumerate() {
        let vocab = &table.vocab;
        let param = &mut table.channels[c];
        let presence = &mut table.presence[c];
        for (id, word) in vocab.words().iter().enumerate() {
            if Vocabulary::is_reserved(id) {
                continue;
            }
            if let Some(v) = version.get(word) {
                param.value.row_mut(id).copy_from_slice(v);
                presence[id] = Presence::Pretrained;
            } else if let Some(done) = imputed {
                if done.provenance(c, word) == Some(Provenance::Imputed) {
                    let v = done.versions[c].get(word).expect("imputed word is present");
                    param.value.row_mut(id).copy_from_slice(v);
                    presence[id] = Presence::Imputed;
                }
            }
        }
    }
    Ok(table)
}
