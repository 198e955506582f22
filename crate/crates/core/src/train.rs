//! Supervised training: mini-batch cross-entropy plus L2, AdaGrad, model
//! selection on the dev set and evaluation.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Mvcnn;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::optim::{Adagrad, DEFAULT_ADAGRAD_EPS};
use crate::tensor::{ParameterSet, RealArray};
use crate::text::{build_batches, Dataset};

/// Loss above which training is considered to have diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adagrad_eps: f64,
    pub dropout_keep_prob: f64,
    pub l2_lambda: f64,
    /// Apply the L2 penalty to the embedding tables too.
    pub l2_embeddings: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Stop as soon as training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            adagrad_eps: DEFAULT_ADAGRAD_EPS,
            dropout_keep_prob: 0.8,
            l2_lambda: 5e-3,
            l2_embeddings: false,
            batch_size: 50,
            max_epochs: 50,
            patience: 10,
            target_train_accuracy: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            out.push(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.adagrad_eps.is_finite() && self.adagrad_eps >= 0.0) {
            out.push(format!("adagrad_eps must be >= 0, got {}", self.adagrad_eps));
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            out.push(format!(
                "dropout_keep_prob must be in (0, 1], got {}",
                self.dropout_keep_prob
            ));
        }
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            out.push(format!("l2_lambda must be >= 0, got {}", self.l2_lambda));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            out.push("patience must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy over the training set, dropout off, after the epoch.
    pub train_loss: f64,
    /// Mean per-batch objective (cross-entropy + L2) seen during the epoch.
    pub batch_objective: f64,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_clock: Duration,
}

impl TrainReport {
    /// First epoch whose training accuracy reached `target`.
    pub fn epochs_to_train_accuracy(&self, target: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.train_accuracy >= target)
            .map(|e| e.epoch)
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epoch\ttrain_loss\tbatch_objective\ttrain_acc\tdev_acc")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
                e.epoch, e.train_loss, e.batch_objective, e.train_accuracy, e.dev_accuracy
            )?;
        }
        writeln!(f, "best_epoch\t{}", self.best_epoch)?;
        writeln!(f, "best_dev_acc\t{:.4}", self.best_dev_accuracy)?;
        if let Some(t) = self.test_accuracy {
            writeln!(f, "test_acc\t{t:.4}")?;
        }
        write!(f, "wall_clock_s\t{:.3}", self.wall_clock.as_secs_f64())
    }
}

pub struct Datasets<'a> {
    pub train: &'a Dataset,
    pub dev: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

fn check_classes(model: &Mvcnn, data: &Dataset, name: &str) -> Result<()> {
    let k = model.config.num_classes;
    if data.num_classes > k {
        return Err(Error::InvalidArgument(format!(
            "{name} set has {} classes, model has {k}",
            data.num_classes
        )));
    }
    if let Some(e) = data.examples.iter().find(|e| e.label >= k) {
        return Err(Error::InvalidArgument(format!(
            "{name} set has label {} but model has {k} classes",
            e.label
        )));
    }
    Ok(())
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and accuracy with dropout disabled.
pub fn loss_and_accuracy(model: &Mvcnn, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty dataset".into()));
    }
    check_classes(model, data, "evaluation")?;
    let vocab = &model.table.vocab;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in &data.examples {
        let ids: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();
        let trace = model.forward_hidden(&ids)?;
        let logits = model.output.forward(&trace.hidden);
        let ce = softmax_cross_entropy(&RealArray::vector(logits), ex.label)?;
        loss += ce.loss;
        if argmax(ce.probs.as_slice()) == ex.label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fraction of examples whose most probable class (lowest index on ties)
/// equals the label. Dropout is disabled.
pub fn evaluate(model: &Mvcnn, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty dataset".into()));
    }
    check_classes(model, data, "evaluation")?;
    let vocab = &model.table.vocab;
    let mut correct = 0usize;
    for ex in &data.examples {
        let ids: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();
        if argmax(&model.predict(&ids)?) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` in place and leaves it at the parameters of the epoch with
/// the best dev accuracy (earliest on ties). AdaGrad state starts from zero.
///
/// Each batch contributes one AdaGrad step on the mean cross-entropy of its
/// sentences, each run at its true length, plus the L2 penalty.
pub fn train_supervised(model: &mut Mvcnn, data: Datasets<'_>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Empty("train and dev sets must be non-empty".into()));
    }
    check_classes(model, data.train, "train")?;
    check_classes(model, data.dev, "dev")?;
    if let Some(test) = data.test {
        if test.is_empty() {
            return Err(Error::Empty("test set is empty".into()));
        }
        check_classes(model, test, "test")?;
    }
    let start = Instant::now();
    model.config.dropout_keep_prob = cfg.dropout_keep_prob;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opt = Adagrad {
        lr: cfg.lr,
        eps: cfg.adagrad_eps,
    };
    // Fresh optimizer state: accumulators left by pretraining would shrink
    // every supervised step.
    model.visit_params_mut(&mut |_, p| {
        p.grad.fill(0.0);
        p.accum.fill(0.0);
    });

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Mvcnn)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let batches = build_batches(data.train, &model.table.vocab, cfg.batch_size, &mut rng)?;
        let mut objective = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut ce = 0.0;
            for i in 0..batch.len() {
                ce += model.loss_and_backward(batch.sentence(i), batch.labels[i], Mode::Train, scale, &mut rng)?;
            }
            let loss = ce * scale + model.regularize(cfg.l2_lambda, cfg.l2_embeddings)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi + 1,
                    loss,
                });
            }
            opt.step(model)?;
            objective += loss;
        }
        let (train_loss, train_accuracy) = loss_and_accuracy(model, data.train)?;
        let dev_accuracy = evaluate(model, data.dev)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            batch_objective: objective / batches.len() as f64,
            train_accuracy,
            dev_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| dev_accuracy > *acc) {
            best = Some((epoch, dev_accuracy, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let reached = cfg.target_train_accuracy.is_some_and(|t| train_accuracy >= t);
        if reached || since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_dev_accuracy, best_model) = best.expect("at least one epoch");
    *model = best_model;
    model.zero_grads();
    let test_accuracy = data.test.map(|t| evaluate(model, t)).transpose()?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_dev_accuracy,
        test_accuracy,
        wall_clock: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::synthetic::{random_model, CueTask};
    use crate::text::{Example, Split};

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            channels: 1,
            dim: 4,
            layers: 1,
            filter_sizes: vec![3],
            kernels_per_size: 2,
            k_top: 3,
            hidden_dim: 4,
            num_classes: 2,
            dropout_keep_prob: 0.8,
        }
    }

    fn dataset(labels: &[usize]) -> Dataset {
        Dataset {
            examples: labels
                .iter()
                .map(|&label| Example {
                    label,
                    tokens: vec!["w3".into(), "w4".into()],
                })
                .collect(),
            num_classes: 2,
            split: Split::Test,
        }
    }

    #[test]
    fn uniform_predictions_pick_lowest_class() {
        let mut m = random_model(small_cfg(), 10, 0.1, 1).unwrap();
        m.output.weight.value.fill(0.0);
        m.output.bias.value.fill(0.0);
        assert_eq!(evaluate(&m, &dataset(&[0, 0, 0])).unwrap(), 1.0);
        assert_eq!(evaluate(&m, &dataset(&[1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_errors() {
        let m = random_model(small_cfg(), 10, 0.1, 1).unwrap();
        assert!(evaluate(&m, &dataset(&[])).is_err());
        let mut d = dataset(&[0]);
        d.examples[0].label = 5;
        assert!(evaluate(&m, &d).is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_bitwise_constant() {
        let task = CueTask::default();
        let train = task.dataset(20, 3, Split::Train);
        let mut m = random_model(small_cfg(), task.vocab_size, 0.1, 2).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 7,
            max_epochs: 3,
            ..Default::default()
        };
        let r = train_supervised(&mut m, Datasets { train: &train, dev: &train, test: None }, &cfg).unwrap();
        let losses: Vec<u64> = r.epochs.iter().map(|e| e.train_loss.to_bits()).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
        let mut a = Vec::new();
        before.visit_params(&mut |_, p| a.extend_from_slice(p.value.as_slice()));
        let mut b = Vec::new();
        m.visit_params(&mut |_, p| b.extend_from_slice(p.value.as_slice()));
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let task = CueTask::default();
        let train = task.dataset(10, 3, Split::Train);
        let mut m = random_model(small_cfg(), task.vocab_size, 0.1, 2).unwrap();
        m.output.bias.value.as_mut_slice()[0] = 1e7;
        let cfg = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let err = train_supervised(&mut m, Datasets { train: &train, dev: &train, test: None }, &cfg)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, batch: 1, .. }), "{err}");
    }

    #[test]
    fn report_renders_lines() {
        let r = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                batch_objective: 0.6,
                train_accuracy: 1.0,
                dev_accuracy: 0.75,
            }],
            best_epoch: 1,
            best_dev_accuracy: 0.75,
            test_accuracy: Some(0.5),
            wall_clock: Duration::from_millis(1500),
        };
        let text = r.to_string();
        assert!(text.starts_with("epoch\ttrain_loss"));
        assert!(text.contains("\n1\t0.500000\t0.600000\t1.0000\t0.7500\n"));
        assert!(text.ends_with("wall_clock_s\t1.500"));
    }
}
