use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use mvcnn_core::checkpoint::{checkpoint_bytes, read_checkpoint};
use mvcnn_core::fidelity::{check_pretraining, check_supervised, GridPoint};
use mvcnn_core::text::{load_corpus, TsvOptions};
use mvcnn_core::{
    complete_all, coverage_stats, evaluate, init_multichannel, load_embeddings, load_tsv,
    run_pretraining, train_supervised, write_embeddings, Dataset, Datasets, EmbeddingVersion,
    MultichannelTable, Mvcnn, Ridge, Split, Vocabulary,
};

use crate::config::RunConfig;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn version_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_versions(cfg: &RunConfig) -> Result<Vec<EmbeddingVersion>> {
    cfg.embeddings
        .iter()
        .map(|path| {
            let loaded = load_embeddings(open(path)?, &version_name(path))
                .with_context(|| format!("reading {}", path.display()))?;
            if !loaded.duplicates.is_empty() {
                eprintln!(
                    "warning: {}: {} duplicate words ignored (first at line {})",
                    path.display(),
                    loaded.duplicates.len(),
                    loaded.duplicates[0].0
                );
            }
            Ok(loaded.version)
        })
        .collect()
}

fn load_dataset(path: &Path, split: Split, cfg: &RunConfig, num_classes: Option<usize>) -> Result<Dataset> {
    let opts = TsvOptions {
        tweet_normalize: cfg.tweet_normalize,
        num_classes,
    };
    load_tsv(open(path)?, split, opts).with_context(|| format!("reading {}", path.display()))
}

fn load_sentences(path: &Path, cfg: &RunConfig) -> Result<Vec<Vec<String>>> {
    load_corpus(open(path)?, cfg.tweet_normalize).with_context(|| format!("reading {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the checkpoint and returns its SHA-256.
fn save_checkpoint(model: &Mvcnn, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(model)?;
    fs::write(path, &bytes).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn load_checkpoint(path: &Path) -> Result<Mvcnn> {
    read_checkpoint(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// The input table for a fresh model: embedding vectors where available
/// (completed by mutual learning when there are several files), random
/// vectors elsewhere.
fn fresh_model(cfg: &RunConfig, vocab: Vocabulary, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Mvcnn> {
    let versions = load_versions(cfg)?;
    let net = cfg.network(versions.first().map(EmbeddingVersion::dim), num_classes);
    let table = if versions.is_empty() {
        MultichannelTable::random(vocab, net.channels, net.dim, cfg.init_range, rng)?
    } else {
        if net.dim != versions[0].dim() {
            bail!("dim = {} but the embedding files have dim {}", net.dim, versions[0].dim());
        }
        let completed = if versions.len() > 1 {
            Some(complete_all(&versions, Ridge::PerWord(cfg.ridge))?)
        } else {
            None
        };
        init_multichannel(vocab, &versions, completed.as_ref(), cfg.init_range, rng)?
    };
    Ok(Mvcnn::new(net, table, rng)?)
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let versions = load_versions(cfg)?;
    let mut words: Vec<String> = Vec::new();
    for (path, split) in [
        (&cfg.dataset, Split::Test),
        (&cfg.train, Split::Train),
        (&cfg.dev, Split::Dev),
        (&cfg.test, Split::Test),
    ] {
        if let Some(path) = path {
            words.extend(load_dataset(path, split, cfg, None)?.words().map(str::to_string));
        }
    }
    if let Some(path) = &cfg.corpus {
        words.extend(load_sentences(path, cfg)?.into_iter().flatten());
    }
    let stats = coverage_stats(&versions, words.iter().map(String::as_str))?;
    print!("{stats}");
    Ok(())
}

pub fn mutual_learn(cfg: &RunConfig) -> Result<()> {
    let versions = load_versions(cfg)?;
    let out_dir = cfg.output_dir.as_deref().expect("validated");
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let done = complete_all(&versions, Ridge::PerWord(cfg.ridge))?;
    for (i, version) in done.versions.iter().enumerate() {
        let emb_path = out_dir.join(format!("{}.completed.txt", version.name));
        let mut out = BufWriter::new(
            File::create(&emb_path).with_context(|| format!("cannot create {}", emb_path.display()))?,
        );
        write_embeddings(version, &mut out)?;
        out.flush()?;

        let prov_path = out_dir.join(format!("{}.provenance.tsv", version.name));
        let mut prov = BufWriter::new(
            File::create(&prov_path).with_context(|| format!("cannot create {}", prov_path.display()))?,
        );
        for word in &done.union {
            let p = done.provenance(i, word).expect("completed versions cover the union");
            writeln!(prov, "{word}\t{}", p.as_str())?;
        }
        prov.flush()?;
        println!(
            "{}\t{} words\t{} imputed\t{}",
            version.name,
            version.len(),
            done.imputed_count(i),
            emb_path.display()
        );
    }
    Ok(())
}

/// Training, dev and test sets; dev falls back to the training set.
fn labeled_sets(cfg: &RunConfig) -> Result<(Option<Dataset>, Option<Dataset>, Option<Dataset>)> {
    let train = match &cfg.train {
        Some(p) => Some(load_dataset(p, Split::Train, cfg, cfg.num_classes)?),
        None => None,
    };
    let classes = cfg.num_classes.or(train.as_ref().map(|t| t.num_classes));
    let dev = match &cfg.dev {
        Some(p) => Some(load_dataset(p, Split::Dev, cfg, classes)?),
        None => None,
    };
    let test = match &cfg.test {
        Some(p) => Some(load_dataset(p, Split::Test, cfg, classes)?),
        None => None,
    };
    Ok((train, dev, test))
}

fn num_classes(cfg: &RunConfig, train: Option<&Dataset>) -> usize {
    cfg.num_classes
        .or(train.map(|t| t.num_classes))
        .unwrap_or(2)
        .max(2)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed.expect("validated");
    let sentences = load_sentences(cfg.corpus.as_deref().expect("validated"), cfg)?;
    let (train, dev, test) = labeled_sets(cfg)?;
    let mut words: Vec<&str> = sentences.iter().flatten().map(String::as_str).collect();
    for d in [&train, &dev, &test].into_iter().flatten() {
        words.extend(d.words());
    }
    let vocab = Vocabulary::from_words(words);
    let corpus: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().map(|w| vocab.id(w)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = fresh_model(cfg, vocab, num_classes(cfg, train.as_ref()), &mut rng)?;
    let report = run_pretraining(&mut model, &corpus, &cfg.pretrain_config())?;
    println!("epoch\tnce_loss");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("{}\t{loss:.6}", i + 1);
    }
    let path = cfg.checkpoint.as_deref().expect("validated");
    let hash = save_checkpoint(&model, path)?;
    println!("checkpoint\t{}", path.display());
    println!("sha256\t{hash}");
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let seed = cfg.seed.expect("validated");
    let (train, dev, test) = labeled_sets(cfg)?;
    let train = train.expect("validated");
    let classes = num_classes(cfg, Some(&train));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match &cfg.init_checkpoint {
        Some(path) => {
            let mut model = load_checkpoint(path)?;
            if model.config.num_classes != classes {
                model.reset_output(classes, &mut rng);
            }
            model
        }
        None => {
            let mut words: Vec<&str> = train.words().collect();
            for d in [&dev, &test].into_iter().flatten() {
                words.extend(d.words());
            }
            fresh_model(cfg, Vocabulary::from_words(words), classes, &mut rng)?
        }
    };
    if dev.is_none() {
        eprintln!("note: no dev set given, selecting on the training set");
    }
    let data = Datasets {
        train: &train,
        dev: dev.as_ref().unwrap_or(&train),
        test: test.as_ref(),
    };
    let report = train_supervised(&mut model, data, &cfg.train_config())?;
    print!("{report}");
    if let Some(path) = &cfg.report {
        fs::write(path, report.to_string()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let path = cfg.checkpoint.as_deref().expect("validated");
    let hash = save_checkpoint(&model, path)?;
    println!("checkpoint\t{}", path.display());
    println!("sha256\t{hash}");
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let model = load_checkpoint(cfg.checkpoint.as_deref().expect("validated"))?;
    let path = cfg.dataset.as_ref().or(cfg.test.as_ref()).expect("validated");
    let data = load_dataset(path, Split::Test, cfg, Some(model.config.num_classes))?;
    let acc = evaluate(&model, &data)?;
    println!("accuracy\t{acc}");
    Ok(())
}

/// Returns the largest relative error over both objectives.
pub fn gradcheck(cfg: &RunConfig) -> Result<f64> {
    let point = GridPoint {
        layers: cfg.layers,
        filter_sizes: cfg.filter_sizes.clone(),
        channels: cfg.channels.unwrap_or(1),
        sentence_len: cfg.gradcheck_len,
    };
    let mut worst: f64 = 0.0;
    for (name, report) in [
        ("supervised", check_supervised(&point, cfg.gradcheck_coords)?),
        ("pretraining", check_pretraining(&point, cfg.gradcheck_coords)?),
    ] {
        println!(
            "{name}\tmax_rel_error\t{:.3e}\tchecked\t{}\tskipped\t{}",
            report.max_rel_error, report.coords_checked, report.coords_skipped
        );
        if let Some(w) = &report.worst {
            println!("{name}\tworst\t{}[{}]", w.param, w.index);
        }
        worst = worst.max(report.max_rel_error);
    }
    println!("max_rel_error\t{worst:.3e}");
    Ok(worst)
}
