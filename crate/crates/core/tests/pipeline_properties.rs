use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvcnn_core::gradcheck::relative_error;
use mvcnn_core::synthetic::{random_model, token_ids, CueTask};
use mvcnn_core::text::Example;
use mvcnn_core::{
    average_prediction, build_batches, build_noise_distribution, evaluate, nce_loss,
    normalize_tweet, run_pretraining, train_supervised, Adagrad, Dataset, Datasets, Mode,
    NetworkConfig, ParameterSet, PretrainConfig, PretrainTables, Split, TrainConfig,
};

proptest! {
    #[test]
    fn nce_loss_is_non_negative(seed in any::<u64>(), k in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = 10;
        let corpus = vec![(2..vocab).collect::<Vec<_>>()];
        let dist = build_noise_distribution(&corpus, vocab, 0.75).unwrap();
        let mut tables = PretrainTables::random(vocab, d, 3.0, &mut rng);
        tables.init_bias_from(&dist);
        let pred: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let noise: Vec<usize> = (0..k).map(|_| rng.random_range(2..vocab)).collect();
        let target = rng.random_range(2..vocab);
        let (loss, _) = nce_loss(&pred, target, &noise, &mut tables, &dist).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn averaging_has_the_exact_linear_gradient(seed in any::<u64>(), d in 1usize..6, n in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs: Vec<Vec<f64>> = (0..=n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let avg = |inputs: &[Vec<f64>]| -> Vec<f64> {
            let refs: Vec<&[f64]> = inputs[1..].iter().map(Vec::as_slice).collect();
            average_prediction(&inputs[0], &refs).unwrap()
        };
        // The op is linear, so a wide step only adds rounding.
        let h = 0.25;
        for input in 0..=n {
            for c in 0..d {
                let original = inputs[input][c];
                inputs[input][c] = original + h;
                let plus = avg(&inputs);
                inputs[input][c] = original - h;
                let minus = avg(&inputs);
                inputs[input][c] = original;
                for out in 0..d {
                    let numeric = (plus[out] - minus[out]) / (2.0 * h);
                    if out == c {
                        prop_assert!(relative_error(1.0 / (n + 1) as f64, numeric) < 1e-10);
                    } else {
                        prop_assert_eq!(numeric, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_tweet_is_idempotent(s in ".{0,40}") {
        let once = normalize_tweet(&s);
        prop_assert_eq!(normalize_tweet(&once), once);
    }

    #[test]
    fn normalize_tweet_is_idempotent_on_tweet_like_text(
        parts in prop::collection::vec(
            prop_oneof![
                Just("@"), Just("@Bob"), Just("http://"), Just("HTTPS://a.b"), Just("www."),
                Just("hhhttp://z"), Just("oOo"), Just("ooooo"), Just("A"), Just(" "), Just("\t"),
                Just("!!"), Just("É"), Just("ÉÉé"), Just("ǅ"), Just("İİ"),
            ],
            0..15,
        ),
    ) {
        let s: String = parts.concat();
        let once = normalize_tweet(&s);
        prop_assert_eq!(normalize_tweet(&once), once);
    }

    #[test]
    fn batches_round_trip(seed in any::<u64>(), n in 1usize..40, batch_size in 1usize..12) {
        let task = CueTask::default();
        let data = task.dataset(n, seed, Split::Train);
        let vocab = task.vocabulary();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = build_batches(&data, &vocab, batch_size, &mut rng).unwrap();
        let mut got: Vec<(usize, Vec<usize>)> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| (b.labels[i], b.sentence(i).to_vec())))
            .collect();
        let mut want: Vec<(usize, Vec<usize>)> = data
            .examples
            .iter()
            .map(|e| (e.label, e.tokens.iter().map(|w| vocab.id(w)).collect()))
            .collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
        for b in &batches {
            prop_assert!(b.len() <= batch_size);
            for i in 0..b.len() {
                prop_assert!(b.row(i)[b.lengths[i]..].iter().all(|&t| t == 0));
            }
        }
    }
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        dim: 4,
        layers: 2,
        filter_sizes: vec![3, 5],
        kernels_per_size: 2,
        hidden_dim: 5,
        k_top: 3,
        num_classes: 3,
        dropout_keep_prob: 1.0,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn one_small_step_lowers_the_loss(seed in any::<u64>(), len in 1usize..12) {
        let mut model = random_model(tiny_config(), 8, 0.3, seed).unwrap();
        let tokens = token_ids(len, 8, seed ^ 1);
        let label = (seed % 3) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.zero_grads();
        let before = model.loss_and_backward(&tokens, label, Mode::Train, 1.0, &mut rng).unwrap();
        Adagrad::new(1e-5).step(&mut model).unwrap();
        let probs = model.predict(&tokens).unwrap();
        let after = -probs[label].ln();
        prop_assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn evaluate_is_a_pure_read(seed in any::<u64>()) {
        let model = random_model(tiny_config(), 8, 0.3, seed).unwrap();
        let examples = (0..10)
            .map(|i| Example {
                label: i % 3,
                tokens: (0..1 + i).map(|j| format!("w{}", (i + j) % 8)).collect(),
            })
            .collect();
        let data = Dataset { examples, num_classes: 3, split: Split::Test };
        let snapshot = model.clone();
        let a = evaluate(&model, &data).unwrap();
        let b = evaluate(&model, &data).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(&model, &snapshot);
    }
}

#[test]
fn pretrained_model_trains_without_its_tables() {
    let task = CueTask::default();
    let cfg = NetworkConfig {
        dim: 6,
        layers: 1,
        filter_sizes: vec![3],
        kernels_per_size: 2,
        hidden_dim: 6,
        num_classes: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = mvcnn_core::MultichannelTable::random(task.vocabulary(), 1, 6, 0.1, &mut rng).unwrap();
    let mut model = mvcnn_core::Mvcnn::new(cfg, table, &mut rng).unwrap();
    let corpus: Vec<Vec<usize>> = task
        .corpus(30, 4)
        .iter()
        .map(|s| s.iter().map(|w| model.table.vocab.id(w)).collect())
        .collect();
    let pre = PretrainConfig { epochs: 2, ..Default::default() };
    run_pretraining(&mut model, &corpus, &pre).unwrap();

    let mut names = Vec::new();
    model.visit_params(&mut |n, _| names.push(n.to_string()));
    assert!(names.iter().all(|n| !n.starts_with("nce") && n != "context"));

    let data = task.dataset(20, 5, Split::Train);
    let train = TrainConfig { max_epochs: 2, ..Default::default() };
    let report = train_supervised(&mut model, Datasets { train: &data, dev: &data, test: None }, &train).unwrap();
    assert_eq!(report.epochs.len(), 2);
}
