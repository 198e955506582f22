//! Flat key=value run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mvcnn_core::{NetworkConfig, PretrainConfig, TrainConfig};

/// `(key, default, help)`. An empty default means unset. Flags are the keys
/// with `_` replaced by `-`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "", "RNG seed (required for train and pretrain)"),
    ("embeddings", "", "comma-separated embedding files, one channel each"),
    ("train", "", "training set (label<TAB>text)"),
    ("dev", "", "dev set for model selection (defaults to the training set)"),
    ("test", "", "test set scored with the best model"),
    ("corpus", "", "unlabeled corpus for pretraining, one sentence per line"),
    ("dataset", "", "dataset for stats and eval"),
    ("checkpoint", "", "checkpoint to write (train, pretrain) or read (eval)"),
    ("init_checkpoint", "", "checkpoint to start training from"),
    ("output_dir", "", "directory for mutual-learn output"),
    ("report", "", "file to write the training report to"),
    ("channels", "auto", "input channels (auto: number of embedding files, else 1)"),
    ("dim", "auto", "embedding dimension (auto: from the embedding files, else 50)"),
    ("layers", "2", "convolution layers"),
    ("filter_sizes", "3,5,7,9", "filter widths, strictly increasing"),
    ("kernels", "5", "kernels per filter size"),
    ("k_top", "4", "k of the top k-max pooling layer"),
    ("hidden_dim", "auto", "hidden layer size (auto: dim)"),
    ("num_classes", "auto", "output classes (auto: largest training label + 1)"),
    ("dropout_keep", "0.8", "dropout keep probability"),
    ("init_range", "0.1", "uniform init range for words without a vector"),
    ("lr", "0.01", "AdaGrad learning rate"),
    ("l2", "0.005", "L2 weight"),
    ("l2_embeddings", "false", "apply L2 to the embedding tables too"),
    ("batch_size", "50", "sentences per batch"),
    ("max_epochs", "50", "maximum training epochs"),
    ("patience", "10", "epochs without dev improvement before stopping"),
    ("target_train_acc", "none", "stop once training accuracy reaches this value"),
    ("adagrad_eps", "1e-6", "AdaGrad denominator epsilon"),
    ("pretrain_epochs", "5", "pretraining epochs"),
    ("pretrain_lr", "0.01", "pretraining learning rate"),
    ("pretrain_l2", "0", "L2 weight during pretraining"),
    ("context_width", "3", "context words on each side during pretraining"),
    ("noise_samples", "10", "noise words per prediction"),
    ("noise_alpha", "0.75", "noise distribution exponent"),
    ("ridge", "0.001", "ridge per shared word for mutual learning"),
    ("tweet_normalize", "false", "normalize usernames, URLs and elongations"),
    ("gradcheck_len", "5", "sentence length for gradcheck"),
    ("gradcheck_coords", "16", "coordinates checked per tensor in gradcheck"),
];

pub const BOOL_KEYS: &[&str] = &["l2_embeddings", "tweet_normalize"];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Raw merged values: defaults, then the config file, then flags.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        let values = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        Self { values }
    }

    /// Parses `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path, problems: &mut Vec<String>) {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                problems.push(format!("cannot read config {}: {e}", path.display()));
                return;
            }
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                problems.push(format!("{}:{}: expected key=value", path.display(), i + 1));
                continue;
            };
            let key = k.trim().replace('-', "_");
            if default_of(&key).is_none() {
                problems.push(format!("{}:{}: unknown key '{}'", path.display(), i + 1, k.trim()));
                continue;
            }
            self.values.insert(key, v.trim().to_string());
        }
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(&format!("{k}={}\n", self.get(k)));
        }
        out
    }
}

/// Which subcommand is being validated; decides the required keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stats,
    MutualLearn,
    Pretrain,
    Train,
    Eval,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Stats => "stats",
            Command::MutualLearn => "mutual-learn",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub const ALL: [Command; 6] = [
        Command::Stats,
        Command::MutualLearn,
        Command::Pretrain,
        Command::Train,
        Command::Eval,
        Command::Gradcheck,
    ];
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub embeddings: Vec<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub channels: Option<usize>,
    pub dim: Option<usize>,
    pub layers: usize,
    pub filter_sizes: Vec<usize>,
    pub kernels: usize,
    pub k_top: usize,
    pub hidden_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub dropout_keep: f64,
    pub init_range: f64,
    pub lr: f64,
    pub l2: f64,
    pub l2_embeddings: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub target_train_acc: Option<f64>,
    pub adagrad_eps: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_l2: f64,
    pub context_width: usize,
    pub noise_samples: usize,
    pub noise_alpha: f64,
    pub ridge: f64,
    pub tweet_normalize: bool,
    pub gradcheck_len: usize,
    pub gradcheck_coords: usize,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    problems: Vec<String>,
}

impl Reader<'_> {
    /// On failure records the problem and falls back to the default, so
    /// later checks still run.
    fn parse<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Option<T> {
        let v = self.raw.get(key);
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.problems.push(format!("{key}: expected {what}, got '{v}'"));
                default_of(key).and_then(|d| d.parse().ok())
            }
        }
    }

    fn usize(&mut self, key: &str) -> usize {
        self.parse(key, "a non-negative integer").unwrap_or(0)
    }

    fn f64(&mut self, key: &str) -> f64 {
        let v: f64 = self.parse(key, "a number").unwrap_or(0.0);
        if !v.is_finite() {
            self.problems.push(format!("{key}: must be finite"));
            return 0.0;
        }
        v
    }

    fn bool(&mut self, key: &str) -> bool {
        match self.raw.get(key) {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            v => {
                self.problems.push(format!("{key}: expected true or false, got '{v}'"));
                false
            }
        }
    }

    fn auto_usize(&mut self, key: &str) -> Option<usize> {
        if self.raw.get(key) == "auto" {
            None
        } else {
            Some(self.usize(key))
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

impl RunConfig {
    /// Parses every key, collecting all problems rather than stopping at the
    /// first. Unparseable values are replaced by their defaults.
    pub fn from_raw(raw: &RawConfig) -> (Self, Vec<String>) {
        let mut r = Reader {
            raw,
            problems: Vec::new(),
        };
        let seed = if raw.get("seed").is_empty() {
            None
        } else {
            r.parse("seed", "a non-negative integer")
        };
        let embeddings = raw
            .get("embeddings")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect();
        let mut filter_sizes = Vec::new();
        for part in raw.get("filter_sizes").split(',') {
            match part.trim().parse() {
                Ok(x) => filter_sizes.push(x),
                Err(_) => r.problems.push(format!(
                    "filter_sizes: expected comma-separated integers, got '{}'",
                    raw.get("filter_sizes")
                )),
            }
        }
        let target_train_acc = match raw.get("target_train_acc") {
            "none" | "" => None,
            _ => r.parse("target_train_acc", "a number or none"),
        };
        let cfg = RunConfig {
            seed,
            embeddings,
            train: r.path("train"),
            dev: r.path("dev"),
            test: r.path("test"),
            corpus: r.path("corpus"),
            dataset: r.path("dataset"),
            checkpoint: r.path("checkpoint"),
            init_checkpoint: r.path("init_checkpoint"),
            output_dir: r.path("output_dir"),
            report: r.path("report"),
            channels: r.auto_usize("channels"),
            dim: r.auto_usize("dim"),
            layers: r.usize("layers"),
            filter_sizes,
            kernels: r.usize("kernels"),
            k_top: r.usize("k_top"),
            hidden_dim: r.auto_usize("hidden_dim"),
            num_classes: r.auto_usize("num_classes"),
            dropout_keep: r.f64("dropout_keep"),
            init_range: r.f64("init_range"),
            lr: r.f64("lr"),
            l2: r.f64("l2"),
            l2_embeddings: r.bool("l2_embeddings"),
            batch_size: r.usize("batch_size"),
            max_epochs: r.usize("max_epochs"),
            patience: r.usize("patience"),
            target_train_acc,
            adagrad_eps: r.f64("adagrad_eps"),
            pretrain_epochs: r.usize("pretrain_epochs"),
            pretrain_lr: r.f64("pretrain_lr"),
            pretrain_l2: r.f64("pretrain_l2"),
            context_width: r.usize("context_width"),
            noise_samples: r.usize("noise_samples"),
            noise_alpha: r.f64("noise_alpha"),
            ridge: r.f64("ridge"),
            tweet_normalize: r.bool("tweet_normalize"),
            gradcheck_len: r.usize("gradcheck_len"),
            gradcheck_coords: r.usize("gradcheck_coords"),
        };
        (cfg, r.problems)
    }

    /// The network shape with every `auto` resolved against the embedding
    /// dimension (if files were given) and the number of classes.
    pub fn network(&self, embedding_dim: Option<usize>, num_classes: usize) -> NetworkConfig {
        let dim = self.dim.or(embedding_dim).unwrap_or(50);
        let channels = self
            .channels
            .unwrap_or(if self.embeddings.is_empty() { 1 } else { self.embeddings.len() });
        NetworkConfig {
            channels,
            dim,
            layers: self.layers,
            filter_sizes: self.filter_sizes.clone(),
            kernels_per_size: self.kernels,
            k_top: self.k_top,
            hidden_dim: self.hidden_dim.unwrap_or(dim),
            num_classes,
            dropout_keep_prob: self.dropout_keep,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            adagrad_eps: self.adagrad_eps,
            dropout_keep_prob: self.dropout_keep,
            l2_lambda: self.l2,
            l2_embeddings: self.l2_embeddings,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            target_train_accuracy: self.target_train_acc,
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            half_width: self.context_width,
            noise_samples: self.noise_samples,
            noise_alpha: self.noise_alpha,
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            init_range: self.init_range,
            l2_lambda: self.pretrain_l2,
            seed: self.seed.unwrap_or(0),
        }
    }

    fn input_paths(&self) -> Vec<(&'static str, &Path)> {
        let mut out: Vec<(&'static str, &Path)> =
            self.embeddings.iter().map(|p| ("embeddings", p.as_path())).collect();
        for (key, p) in [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
            ("corpus", &self.corpus),
            ("dataset", &self.dataset),
            ("init_checkpoint", &self.init_checkpoint),
        ] {
            if let Some(p) = p {
                out.push((key, p.as_path()));
            }
        }
        out
    }

    /// Every problem with this configuration for `cmd`.
    pub fn problems(&self, cmd: Command) -> Vec<String> {
        let mut p = Vec::new();
        let mut require = |ok: bool, key: &str| {
            if !ok {
                p.push(format!("{} requires --{}", cmd.name(), flag_name(key)));
            }
        };
        match cmd {
            Command::Stats => {
                require(!self.embeddings.is_empty(), "embeddings");
                require(
                    self.dataset.is_some()
                        || self.train.is_some()
                        || self.dev.is_some()
                        || self.test.is_some()
                        || self.corpus.is_some(),
                    "dataset",
                );
            }
            Command::MutualLearn => {
                require(self.embeddings.len() >= 2, "embeddings");
                require(self.output_dir.is_some(), "output_dir");
            }
            Command::Pretrain => {
                require(self.seed.is_some(), "seed");
                require(self.corpus.is_some(), "corpus");
                require(self.checkpoint.is_some(), "checkpoint");
            }
            Command::Train => {
                require(self.seed.is_some(), "seed");
                require(self.train.is_some(), "train");
                require(self.checkpoint.is_some(), "checkpoint");
            }
            Command::Eval => {
                require(self.checkpoint.is_some(), "checkpoint");
                require(self.dataset.is_some() || self.test.is_some(), "dataset");
            }
            Command::Gradcheck => {}
        }
        if cmd == Command::MutualLearn && self.embeddings.len() == 1 {
            p.push("mutual-learn needs at least two embedding files".into());
        }
        for (key, path) in self.input_paths() {
            if !path.exists() {
                p.push(format!("{key}: {} does not exist", path.display()));
            }
        }
        if cmd == Command::Eval {
            if let Some(c) = &self.checkpoint {
                if !c.exists() {
                    p.push(format!("checkpoint: {} does not exist", c.display()));
                }
            }
        }
        if matches!(cmd, Command::Pretrain | Command::Train | Command::Gradcheck) {
            let net = self.network(self.dim, self.num_classes.unwrap_or(2));
            p.extend(net.problems());
        }
        if cmd == Command::Gradcheck {
            if self.filter_sizes.iter().any(|&l| l < 3 || l % 2 == 0) {
                p.push("gradcheck uses odd filter sizes >= 3".into());
            }
            if self.gradcheck_len == 0 || self.gradcheck_coords == 0 {
                p.push("gradcheck_len and gradcheck_coords must be >= 1".into());
            }
        }
        if cmd == Command::Train {
            p.extend(self.train_config().problems());
        }
        if cmd == Command::Pretrain {
            if self.context_width == 0 || self.noise_samples == 0 || self.pretrain_epochs == 0 {
                p.push("context_width, noise_samples and pretrain_epochs must be >= 1".into());
            }
            if let (Some(h), Some(d)) = (self.hidden_dim, self.dim) {
                if h != d {
                    p.push(format!("pretraining needs hidden_dim == dim, got {h} and {d}"));
                }
            }
        }
        if cmd == Command::MutualLearn && !(self.ridge >= 0.0) {
            p.push(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if let Some(c) = self.channels {
            if !self.embeddings.is_empty() && c != self.embeddings.len() {
                p.push(format!(
                    "channels = {c} but {} embedding files were given",
                    self.embeddings.len()
                ));
            }
        }
        if let Some(k) = self.num_classes {
            if k < 2 {
                p.push("num_classes must be >= 2".into());
            }
        }
        p.dedup();
        p
    }
}
