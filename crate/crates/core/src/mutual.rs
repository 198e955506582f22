//! Mutual learning between embedding versions.
//!
//! A linear map `M` (d×d) is fit from every version to every other version by
//! ridge least squares over the words the two share. A word missing from a
//! version is then imputed as the element-wise mean of its projections from
//! all versions that do know it.

use std::collections::HashSet;

use indexmap::IndexSet;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::embedding::EmbeddingVersion;
use crate::error::{Error, Result};
use crate::tensor::RealArray;

/// Eigenvalue ratio below which the normal matrix counts as singular.
const SINGULAR_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub source: String,
    pub target: String,
    /// Row-major d×d map taking source vectors to target vectors.
    pub matrix: RealArray,
    /// Mean squared error per coordinate over the training intersection.
    pub train_residual: f64,
    pub shared_words: usize,
}

impl ProjectionMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let m = self.matrix.as_slice();
        (0..d)
            .map(|r| m[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// How the ridge penalty is chosen for each pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Absolute(f64),
    /// Penalty = factor × number of shared words.
    PerWord(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::PerWord(1e-3)
    }
}

impl Ridge {
    fn resolve(self, shared: usize) -> f64 {
        match self {
            Ridge::Absolute(r) => r,
            Ridge::PerWord(f) => f * shared as f64,
        }
    }
}

/// Fits `M` minimizing `Σ ‖M·src(w) − tgt(w)‖² + ridge·‖M‖²_F` over the words
/// both versions contain.
pub fn train_projection(
    src: &EmbeddingVersion,
    tgt: &EmbeddingVersion,
    ridge: f64,
) -> Result<ProjectionMatrix> {
    if src.dim() != tgt.dim() {
        return Err(Error::Shape(format!(
            "'{}' has dim {}, '{}' has dim {}",
            src.name,
            src.dim(),
            tgt.name,
            tgt.dim()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let d = src.dim();
    let shared: Vec<(&[f64], &[f64])> = src
        .iter()
        .filter_map(|(w, x)| tgt.get(w).map(|y| (x, y)))
        .collect();
    if shared.is_empty() {
        return Err(Error::EmptyIntersection {
            source_name: src.name.clone(),
            target: tgt.name.clone(),
        });
    }
    let n = shared.len();
    let x = DMatrix::from_fn(n, d, |r, c| shared[r].0[c]);
    let y = DMatrix::from_fn(n, d, |r, c| shared[r].1[c]);
    let mut gram = x.transpose() * &x;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let singular = || Error::SingularSystem {
        source_name: src.name.clone(),
        target: tgt.name.clone(),
        words: n,
        dim: d,
    };
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().copied().fold(0.0_f64, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= SINGULAR_RTOL * max {
        return Err(singular());
    }
    let chol = gram.cholesky().ok_or_else(singular)?;
    // gram · Mᵀ = Xᵀ Y
    let m_t = chol.solve(&(x.transpose() * &y));
    let m = m_t.transpose();
    let resid = &x * &m_t - &y;
    let train_residual = resid.iter().map(|e| e * e).sum::<f64>() / (n * d) as f64;
    let data: Vec<f64> = (0..d * d).map(|i| m[(i / d, i % d)]).collect();
    Ok(ProjectionMatrix {
        source: src.name.clone(),
        target: tgt.name.clone(),
        matrix: RealArray::new(vec![d, d], data)?,
        train_residual,
        shared_words: n,
    })
}

/// Directed projections for every ordered pair of versions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    count: usize,
    /// Indexed by `source * count + target`; the diagonal is empty.
    maps: Vec<Option<ProjectionMatrix>>,
}

impl ProjectionSet {
    pub fn get(&self, source: usize, target: usize) -> Option<&ProjectionMatrix> {
        self.maps.get(source * self.count + target)?.as_ref()
    }

    pub fn len(&self) -> usize {
        self.maps.iter().flatten().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ProjectionMatrix> {
        self.maps.iter().flatten()
    }
}

/// Trains `c(c−1)` directed projections, one per ordered pair `(i, j)`, `i ≠ j`.
pub fn train_all_projections(versions: &[EmbeddingVersion], ridge: Ridge) -> Result<ProjectionSet> {
    let c = versions.len();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "mutual learning needs at least two versions".into(),
        ));
    }
    let mut maps = Vec::with_capacity(c * c);
    for (i, src) in versions.iter().enumerate() {
        for (j, tgt) in versions.iter().enumerate() {
            if i == j {
                maps.push(None);
                continue;
            }
            let shared = src.words().filter(|w| tgt.contains(w)).count();
            maps.push(Some(train_projection(src, tgt, ridge.resolve(shared))?));
        }
    }
    Ok(ProjectionSet { count: c, maps })
}

/// Imputes `word` in version `target` as the mean of `M_{k,target}·w_k` over
/// every other version `k` that knows the word.
pub fn impute(
    word: &str,
    target: usize,
    versions: &[EmbeddingVersion],
    projections: &ProjectionSet,
) -> Result<Vec<f64>> {
    let tgt = versions
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("no version with index {target}")))?;
    if tgt.contains(word) {
        return Err(Error::InvalidArgument(format!(
            "'{word}' is already known in '{}'",
            tgt.name
        )));
    }
    let mut sum = vec![0.0; tgt.dim()];
    let mut sources = 0;
    for (k, src) in versions.iter().enumerate() {
        let Some(x) = src.get(word) else { continue };
        let proj = projections.get(k, target).ok_or_else(|| {
            Error::InvalidArgument(format!("no projection '{}' -> '{}'", src.name, tgt.name))
        })?;
        for (s, v) in sum.iter_mut().zip(proj.apply(x)) {
            *s += v;
        }
        sources += 1;
    }
    if sources == 0 {
        return Err(Error::UnknownWord(word.to_string()));
    }
    let n = sources as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    Imputed,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Pretrained => "pretrained",
            Provenance::Imputed => "imputed",
        }
    }
}

/// Versions extended to the union vocabulary of the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedVersions {
    pub versions: Vec<EmbeddingVersion>,
    /// Union vocabulary in first-seen order across the inputs.
    pub union: IndexSet<String>,
    imputed: Vec<HashSet<String>>,
}

impl CompletedVersions {
    pub fn provenance(&self, version: usize, word: &str) -> Option<Provenance> {
        if !self.versions.get(version)?.contains(word) {
            None
        } else if self.imputed[version].contains(word) {
            Some(Provenance::Imputed)
        } else {
            Some(Provenance::Pretrained)
        }
    }

    pub fn imputed_count(&self, version: usize) -> usize {
        self.imputed[version].len()
    }
}

pub fn complete_all(versions: &[EmbeddingVersion], ridge: Ridge) -> Result<CompletedVersions> {
    let projections = train_all_projections(versions, ridge)?;
    let union: IndexSet<String> = versions
        .iter()
        .flat_map(|v| v.words().map(str::to_string))
        .collect();
    let mut completed = versions.to_vec();
    let mut imputed = vec![HashSet::new(); versions.len()];
    for (t, out) in completed.iter_mut().enumerate() {
        for word in &union {
            if versions[t].contains(word) {
                continue;
            }
            let v = impute(word, t, versions, &projections)?;
            out.insert(word, &v)?;
            imputed[t].insert(word.clone());
        }
    }
    Ok(CompletedVersions {
        versions: completed,
        union,
        imputed,
    })
}
