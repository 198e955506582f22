//! Unsupervised pretraining: the sentence representation is averaged with the
//! vectors of up to `2t` surrounding words and the result must pick out the
//! middle word against noise words (noise-contrastive estimation).
//!
//! Context vectors and output vectors live in their own tables, separate from
//! the multichannel input. They are dropped when pretraining ends; only the
//! network and its input table carry over.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Mvcnn;
use crate::optim::Adagrad;
use crate::tensor::{Parameter, ParameterSet, RealArray};

/// Noise redraws allowed when a sample equals the target word.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Context half-width `t`.
    pub half_width: usize,
    pub noise_samples: usize,
    pub noise_alpha: f64,
    pub epochs: usize,
    pub lr: f64,
    pub init_range: f64,
    /// L2 weight on the network's weight tensors (biases and embeddings excluded).
    pub l2_lambda: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            half_width: 3,
            noise_samples: 10,
            noise_alpha: 0.75,
            epochs: 5,
            lr: 0.01,
            init_range: 0.1,
            l2_lambda: 0.0,
            seed: 0,
        }
    }
}

/// Sampling distribution over vocabulary rows, `P(w) ∝ count(w)^alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl NoiseDistribution {
    pub fn from_counts(counts: &[usize], alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
        }
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { (c as f64).powf(alpha) })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Empty("noise distribution over an empty corpus".into()));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { probs, cumulative })
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs.get(id).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        // Skip zero-probability rows that share a cumulative value.
        let mut i = i.min(self.probs.len() - 1);
        while self.probs[i] == 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}

/// Counts token ids over `corpus` and builds the noise distribution.
pub fn build_noise_distribution(
    corpus: &[Vec<usize>],
    vocab_len: usize,
    alpha: f64,
) -> Result<NoiseDistribution> {
    let mut counts = vec![0usize; vocab_len];
    for &id in corpus.iter().flatten() {
        let slot = counts.get_mut(id).ok_or_else(|| {
            Error::InvalidArgument(format!("token id {id} outside vocabulary of {vocab_len}"))
        })?;
        *slot += 1;
    }
    NoiseDistribution::from_counts(&counts, alpha)
}

/// Element-wise mean of the sentence representation and the context vectors.
/// The backward rule hands each input `upstream / (1 + contexts)`.
pub fn average_prediction(sentence_rep: &[f64], contexts: &[&[f64]]) -> Result<Vec<f64>> {
    let d = sentence_rep.len();
    if let Some(c) = contexts.iter().find(|c| c.len() != d) {
        return Err(Error::Shape(format!(
            "context vector has {} components, sentence representation {d}",
            c.len()
        )));
    }
    let n = (contexts.len() + 1) as f64;
    Ok((0..d)
        .map(|i| (sentence_rep[i] + contexts.iter().map(|c| c[i]).sum::<f64>()) / n)
        .collect())
}

/// Context (input to the average) and output (NCE) word tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTables {
    pub context: Parameter,
    pub output: Parameter,
    pub output_bias: Parameter,
}

impl PretrainTables {
    pub fn random<R: Rng + ?Sized>(vocab_len: usize, dim: usize, range: f64, rng: &mut R) -> Self {
        let mut draw = |rows: usize| {
            let mut a = RealArray::zeros(&[rows, dim]);
            for x in a.as_mut_slice() {
                *x = rng.random_range(-range..=range);
            }
            Parameter::new(a)
        };
        let context = draw(vocab_len);
        let output = draw(vocab_len);
        Self {
            context,
            output,
            output_bias: Parameter::zeros(&[vocab_len]),
        }
    }
}

impl PretrainTables {
    /// Sets each output bias to `ln P_n(w)`, so initial scores match the
    /// noise model. With zero biases almost every word starts far above its
    /// noise level and the shared downward push saturates the sentence
    /// representation into a constant.
    pub fn init_bias_from(&mut self, dist: &NoiseDistribution) {
        for (b, &p) in self.output_bias.value.as_mut_slice().iter_mut().zip(dist.probs()) {
            if p > 0.0 {
                *b = p.ln();
            }
        }
    }
}

impl ParameterSet for PretrainTables {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("context", &self.context);
        f("nce.output", &self.output);
        f("nce.bias", &self.output_bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("context", &mut self.context);
        f("nce.output", &mut self.output);
        f("nce.bias", &mut self.output_bias);
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// NCE loss for one prediction.
///
/// With `s(w) = out(w)·pred + bias(w)` and `Δ(w) = s(w) − ln(k·P_n(w))`:
/// `loss = −ln σ(Δ(target)) − Σ_j ln σ(−Δ(noise_j))`. Gradients for the
/// output vectors and biases are accumulated into `tables`; the gradient with
/// respect to `pred` is returned.
pub fn nce_loss(
    pred: &[f64],
    target: usize,
    noise: &[usize],
    tables: &mut PretrainTables,
    dist: &NoiseDistribution,
) -> Result<(f64, Vec<f64>)> {
    let vocab = tables.output.shape()[0];
    let d = tables.output.shape()[1];
    if pred.len() != d {
        return Err(Error::Shape(format!(
            "prediction has {} components, output table {d}",
            pred.len()
        )));
    }
    if noise.is_empty() {
        return Err(Error::InvalidArgument("need at least one noise sample".into()));
    }
    let k = noise.len() as f64;
    let mut d_pred = vec![0.0; d];
    let mut loss = 0.0;
    let words = std::iter::once((target, true)).chain(noise.iter().map(|&w| (w, false)));
    for (w, is_target) in words {
        let p = dist.prob(w);
        if w >= vocab || p <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "word id {w} is outside the noise distribution's support"
            )));
        }
        let row = tables.output.value.row(w);
        let score = row.iter().zip(pred).map(|(a, b)| a * b).sum::<f64>()
            + tables.output_bias.value.as_slice()[w];
        let delta = score - (k * p).ln();
        // d loss / d delta
        let g = if is_target {
            loss += softplus(-delta);
            sigmoid(delta) - 1.0
        } else {
            loss += softplus(delta);
            sigmoid(delta)
        };
        for (dp, &o) in d_pred.iter_mut().zip(row) {
            *dp += g * o;
        }
        for (go, &x) in tables.output.grad.row_mut(w).iter_mut().zip(pred) {
            *go += g * x;
        }
        tables.output_bias.grad.as_mut_slice()[w] += g;
    }
    Ok((loss, d_pred))
}

/// Positions `i−t..i` and `i+1..=i+t` clipped to the sentence.
pub fn context_positions(len: usize, i: usize, half_width: usize) -> impl Iterator<Item = usize> {
    let lo = i.saturating_sub(half_width);
    let hi = (i + half_width).min(len - 1);
    (lo..=hi).filter(move |&j| j != i)
}

fn draw_noise<R: Rng + ?Sized>(
    dist: &NoiseDistribution,
    target: usize,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    (0..k)
        .map(|_| {
            let mut w = dist.sample(rng);
            for _ in 0..MAX_REDRAWS {
                if w != target {
                    break;
                }
                w = dist.sample(rng);
            }
            w
        })
        .collect()
}

/// Loss of one (sentence, middle position) example; accumulates gradients
/// into `model` and `tables`.
pub fn position_loss_and_backward(
    model: &mut Mvcnn,
    tables: &mut PretrainTables,
    dist: &NoiseDistribution,
    tokens: &[usize],
    position: usize,
    noise: &[usize],
    half_width: usize,
) -> Result<f64> {
    let trace = model.forward_hidden(tokens)?;
    let ctx_ids: Vec<usize> = context_positions(tokens.len(), position, half_width)
        .map(|j| tokens[j])
        .collect();
    let ctx: Vec<&[f64]> = ctx_ids.iter().map(|&id| tables.context.value.row(id)).collect();
    let pred = average_prediction(&trace.hidden, &ctx)?;
    let (loss, d_pred) = nce_loss(&pred, tokens[position], noise, tables, dist)?;
    let share = 1.0 / (ctx_ids.len() + 1) as f64;
    let d_share: Vec<f64> = d_pred.iter().map(|g| g * share).collect();
    for &id in &ctx_ids {
        for (g, d) in tables.context.grad.row_mut(id).iter_mut().zip(&d_share) {
            *g += d;
        }
    }
    model.backward_hidden(&trace, &d_share)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean NCE loss over all updates in each epoch.
    pub epoch_losses: Vec<f64>,
    pub updates: usize,
}

/// Pretrains every network parameter below the output layer, including the
/// multichannel input table, on `corpus` (token ids, one sentence per entry).
///
/// One AdaGrad update per (sentence, position); positions are visited in
/// order and sentences are shuffled each epoch with the configured seed.
pub fn run_pretraining(
    model: &mut Mvcnn,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus".into()));
    }
    if let Some(i) = corpus.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("corpus sentence {i} has no tokens")));
    }
    if cfg.half_width == 0 || cfg.noise_samples == 0 {
        return Err(Error::InvalidArgument(
            "half_width and noise_samples must be >= 1".into(),
        ));
    }
    let d = model.config.dim;
    if model.config.hidden_dim != d {
        return Err(Error::Shape(format!(
            "pretraining averages the sentence representation with word vectors, \
             so hidden_dim ({}) must equal dim ({d})",
            model.config.hidden_dim
        )));
    }
    let vocab_len = model.table.vocab.len();
    let dist = build_noise_distribution(corpus, vocab_len, cfg.noise_alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tables = PretrainTables::random(vocab_len, d, cfg.init_range, &mut rng);
    tables.init_bias_from(&dist);
    let opt = Adagrad::new(cfg.lr);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = PretrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        updates: 0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for &si in &order {
            let tokens = &corpus[si];
            for pos in 0..tokens.len() {
                let noise = draw_noise(&dist, tokens[pos], cfg.noise_samples, &mut rng);
                let loss = position_loss_and_backward(
                    model,
                    &mut tables,
                    &dist,
                    tokens,
                    pos,
                    &noise,
                    cfg.half_width,
                )?;
                let loss = loss + model.regularize(cfg.l2_lambda, false)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("pretraining loss at update {}", report.updates)));
                }
                opt.step(model)?;
                opt.step(&mut tables)?;
                total += loss;
                steps += 1;
                report.updates += 1;
            }
        }
        report.epoch_losses.push(total / steps as f64);
    }
    Ok(report)
}

/// Trailing moving average over `window` entries (shorter at the start).
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &trace[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_distribution_examples() {
        let d = NoiseDistribution::from_counts(&[3, 1], 1.0).unwrap();
        assert_eq!(d.probs(), &[0.75, 0.25]);
        let d = NoiseDistribution::from_counts(&[3, 1, 7], 0.0).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let d = NoiseDistribution::from_counts(&[16, 1], 0.75).unwrap();
        assert!((d.prob(0) - 8.0 / 9.0).abs() < 1e-12);
        assert!((d.prob(1) - 1.0 / 9.0).abs() < 1e-12);
        assert!(NoiseDistribution::from_counts(&[0, 0], 0.75).is_err());
        assert!(build_noise_distribution(&[], 4, 0.75).is_err());
    }

    #[test]
    fn sampling_skips_zero_rows() {
        let d = NoiseDistribution::from_counts(&[0, 0, 5, 0, 5, 0], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 6];
        for _ in 0..10_000 {
            hits[d.sample(&mut rng)] += 1;
        }
        assert_eq!(hits[0] + hits[1] + hits[3] + hits[5], 0);
        assert!((hits[2] as f64 / 10_000.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn average_examples() {
        let v = [0.3, -0.7];
        let got = average_prediction(&v, &[&v, &v]).unwrap();
        assert!(got.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-15));
        let got = average_prediction(&[1.0, 0.0], &[&[0.0, 1.0], &[2.0, 2.0]]).unwrap();
        assert_eq!(got, [1.0, 1.0]);
        assert!(average_prediction(&[1.0], &[&[1.0, 2.0]]).is_err());
    }

    fn tables_with(vocab: usize, d: usize) -> PretrainTables {
        PretrainTables::random(vocab, d, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn nce_at_zero_margin_is_k_plus_one_ln2() {
        // uniform P_n over 4 words; with one noise word k·P = 1/4
        let dist = NoiseDistribution::from_counts(&[1, 1, 1, 1], 1.0).unwrap();
        let mut t = tables_with(4, 2);
        let b = (0.25f64).ln();
        t.output_bias.value.as_mut_slice().fill(b);
        let (loss, _) = nce_loss(&[0.0, 0.0], 1, &[2], &mut t, &dist).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);

        let mut t = tables_with(4, 2);
        t.output_bias.value.as_mut_slice().fill((3.0 * 0.25f64).ln());
        let (loss, _) = nce_loss(&[0.0, 0.0], 0, &[1, 2, 3], &mut t, &dist).unwrap();
        assert!((loss - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_hand_value_and_saturation() {
        let dist = NoiseDistribution::from_counts(&[1, 1], 1.0).unwrap();
        let base = (0.5f64).ln();
        let mut t = tables_with(2, 1);
        t.output_bias.value.as_mut_slice().copy_from_slice(&[base + 1.0, base - 1.0]);
        let (loss, _) = nce_loss(&[0.0], 0, &[1], &mut t, &dist).unwrap();
        let expected = 2.0 * (1.0 + (-1f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.6265).abs() < 5e-5);

        let mut t = tables_with(2, 1);
        t.output_bias.value.as_mut_slice().copy_from_slice(&[800.0, -800.0]);
        let (loss, _) = nce_loss(&[0.0], 0, &[1], &mut t, &dist).unwrap();
        assert!(loss >= 0.0 && loss < 1e-300);
    }

    #[test]
    fn nce_rejects_unknown_words() {
        let dist = NoiseDistribution::from_counts(&[1, 0, 1], 1.0).unwrap();
        let mut t = tables_with(3, 2);
        assert!(nce_loss(&[0.0, 0.0], 1, &[2], &mut t, &dist).is_err());
        assert!(nce_loss(&[0.0, 0.0], 0, &[5], &mut t, &dist).is_err());
    }

    #[test]
    fn context_windows_truncate_at_edges() {
        assert_eq!(context_positions(10, 0, 3).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(context_positions(10, 5, 2).collect::<Vec<_>>(), [3, 4, 6, 7]);
        assert_eq!(context_positions(1, 0, 3).count(), 0);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[4.0, 2.0, 0.0], 2), [4.0, 3.0, 1.0]);
    }
}
