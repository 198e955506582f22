//! Small synthetic corpora and models for tests, benchmarks and smoke runs.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::MultichannelTable;
use crate::error::Result;
use crate::network::{Mvcnn, NetworkConfig};
use crate::text::{Dataset, Example, Split};
use crate::vocab::Vocabulary;

/// A two-class task over `vocab_size` words `w0..`: each class owns a block of
/// `cue_words` indicator words and every sentence mixes filler words with at
/// least one cue of its own class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CueTask {
    pub vocab_size: usize,
    pub cue_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Upper bound on cue words per sentence (at least one is always placed).
    pub max_cues: usize,
}

impl Default for CueTask {
    fn default() -> Self {
        Self {
            vocab_size: 100,
            cue_words: 10,
            min_len: 4,
            max_len: 10,
            max_cues: 2,
        }
    }
}

impl CueTask {
    pub fn word(i: usize) -> String {
        format!("w{i}")
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words((0..self.vocab_size).map(Self::word))
    }

    /// Tokens of one sentence of class `label` (0 or 1).
    pub fn sentence<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Vec<String> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let filler_start = 2 * self.cue_words;
        let cues = rng.random_range(1..=self.max_cues.max(1)).min(len);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| Self::word(rng.random_range(filler_start..self.vocab_size)))
            .collect();
        for _ in 0..cues {
            let pos = rng.random_range(0..len);
            let cue = label * self.cue_words + rng.random_range(0..self.cue_words);
            tokens[pos] = Self::word(cue);
        }
        tokens
    }

    /// `n` labeled sentences with alternating labels.
    pub fn dataset(&self, n: usize, seed: u64, split: Split) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| Example {
                label: i % 2,
                tokens: self.sentence(i % 2, &mut rng),
            })
            .collect();
        Dataset {
            examples,
            num_classes: 2,
            split,
        }
    }

    /// `n` unlabeled sentences from the same distribution.
    pub fn corpus(&self, n: usize, seed: u64) -> Vec<Vec<String>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let label = *[0usize, 1].choose(&mut rng).expect("non-empty");
                self.sentence(label, &mut rng)
            })
            .collect()
    }
}

/// A randomly initialized model over `vocab_words` words `w0..`.
pub fn random_model(cfg: NetworkConfig, vocab_words: usize, init_range: f64, seed: u64) -> Result<Mvcnn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::from_words((0..vocab_words).map(CueTask::word));
    let table = MultichannelTable::random(vocab, cfg.channels, cfg.dim, init_range, &mut rng)?;
    Mvcnn::new(cfg, table, &mut rng)
}

/// Token ids `2..` cycling through the corpus rows, for shape-only fixtures.
pub fn token_ids(len: usize, vocab_words: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| 2 + rng.random_range(0..vocab_words)).collect()
}
