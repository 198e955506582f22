//! Finite-difference checks of the two full objectives (supervised and
//! pretraining) on small random models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
use crate::network::{Mvcnn, NetworkConfig};
use crate::ops::Mode;
use crate::pretrain::{build_noise_distribution, position_loss_and_backward, PretrainTables};
use crate::synthetic::{random_model, token_ids};
use crate::tensor::{Parameter, ParameterSet};

const VOCAB_WORDS: usize = 6;
/// Embedding and table init range: wide enough to avoid near-ties in k-max
/// pooling, narrow enough to keep tanh out of saturation.
const INIT_RANGE: f64 = 0.5;

/// One configuration of the fidelity grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridPoint {
    pub layers: usize,
    pub filter_sizes: Vec<usize>,
    pub channels: usize,
    pub sentence_len: usize,
}

impl GridPoint {
    /// A small network for this point: d = 4, two kernels per size, three
    /// classes, hidden size equal to d so the pretraining path applies.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            channels: self.channels,
            dim: 4,
            layers: self.layers,
            filter_sizes: self.filter_sizes.clone(),
            kernels_per_size: 2,
            k_top: 4,
            hidden_dim: 4,
            num_classes: 3,
            dropout_keep_prob: 0.8,
        }
    }

    fn seed(&self) -> u64 {
        let mask: usize = self
            .filter_sizes
            .iter()
            .map(|l| 1 << ((l - 3) / 2))
            .sum();
        (self.layers * 10_000 + mask * 100 + self.channels * 10 + self.sentence_len) as u64
    }
}

/// Every combination of L ∈ {1,2,3}, non-empty filter-size subset of
/// {3,5,7,9}, c ∈ {1,2,5} and s ∈ {1,3,12}.
pub fn full_grid() -> Vec<GridPoint> {
    let mut out = Vec::new();
    for layers in 1..=3 {
        for mask in 1u32..16 {
            let filter_sizes: Vec<usize> = [3, 5, 7, 9]
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &l)| l)
                .collect();
            for channels in [1, 2, 5] {
                for sentence_len in [1, 3, 12] {
                    out.push(GridPoint {
                        layers,
                        filter_sizes: filter_sizes.clone(),
                        channels,
                        sentence_len,
                    });
                }
            }
        }
    }
    out
}

fn options(seed: u64, max_coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        max_coords_per_param: Some(max_coords),
        seed,
        ..Default::default()
    }
}

/// Cross-entropy with training-mode dropout (fixed mask) plus L2 on every
/// weight tensor including the embeddings.
pub fn check_supervised(point: &GridPoint, max_coords: usize) -> Result<GradCheckReport> {
    let seed = point.seed();
    let mut model = random_model(point.network_config(), VOCAB_WORDS, INIT_RANGE, seed)?;
    let tokens = token_ids(point.sentence_len, VOCAB_WORDS, seed + 1);
    finite_difference_check(
        &mut model,
        |m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ce = m.loss_and_backward(&tokens, 1, Mode::Train, 1.0, &mut rng)?;
            Ok(ce + m.regularize(5e-3, true)?)
        },
        &options(seed, max_coords),
    )
}

struct PretrainModel {
    model: Mvcnn,
    tables: PretrainTables,
}

impl ParameterSet for PretrainModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.model.visit_params(f);
        self.tables.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.model.visit_params_mut(f);
        self.tables.visit_params_mut(f);
    }
}

/// NCE loss for the middle position of a sentence, with fixed noise words,
/// checked over the network, the input table and both pretraining tables.
pub fn check_pretraining(point: &GridPoint, max_coords: usize) -> Result<GradCheckReport> {
    let seed = point.seed();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let model = random_model(point.network_config(), VOCAB_WORDS, INIT_RANGE, seed)?;
    let vocab_len = model.table.vocab.len();
    let tables = PretrainTables::random(vocab_len, model.config.dim, INIT_RANGE, &mut rng);
    let tokens = token_ids(point.sentence_len, VOCAB_WORDS, seed + 1);
    let corpus = vec![tokens.clone(), (2..vocab_len).collect()];
    let dist = build_noise_distribution(&corpus, vocab_len, 0.75)?;
    let noise = token_ids(3, VOCAB_WORDS, seed + 3);
    let position = point.sentence_len / 2;
    let mut joint = PretrainModel { model, tables };
    finite_difference_check(
        &mut joint,
        |j| {
            position_loss_and_backward(&mut j.model, &mut j.tables, &dist, &tokens, position, &noise, 3)
        },
        &options(seed, max_coords),
    )
}

