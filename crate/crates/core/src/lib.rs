//! Multichannel variable-size convolutional networks for sentence
//! classification, with every gradient derived by hand.
//!
//! The crate covers the whole training stack: loading pretrained embedding
//! versions and measuring their coverage, filling vocabulary gaps by
//! mutual learning between versions, the network itself, unsupervised
//! pretraining with noise-contrastive estimation, and supervised training.

pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod fidelity;
pub mod gradcheck;
pub mod mutual;
pub mod network;
pub mod ops;
pub mod optim;
pub mod pretrain;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vocab;

pub use embedding::{
    coverage_stats, init_multichannel, load_embeddings, write_embeddings, CoverageStats,
    EmbeddingVersion, MultichannelTable, Presence,
};
pub use error::{Error, Result};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use mutual::{
    complete_all, impute, train_all_projections, train_projection, CompletedVersions,
    ProjectionMatrix, ProjectionSet, Provenance, Ridge,
};
pub use network::{
    conv_layer_forward, dynamic_k, kmax_pool, wide_conv, FeatureMapStack, FilterBank,
    ForwardTrace, Mvcnn, NetworkConfig,
};
pub use ops::Mode;
pub use optim::{adagrad_step, Adagrad};
pub use pretrain::{
    average_prediction, build_noise_distribution, nce_loss, run_pretraining, NoiseDistribution,
    PretrainConfig, PretrainReport, PretrainTables,
};
pub use tensor::{Parameter, ParameterSet, RealArray};
pub use text::{build_batches, load_tsv, normalize_tweet, tokenize, Batch, Dataset, Split};
pub use train::{evaluate, train_supervised, Datasets, TrainConfig, TrainReport};
pub use vocab::Vocabulary;
