use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvcnn_core::checkpoint::write_checkpoint;
use mvcnn_core::synthetic::random_model;
use mvcnn_core::NetworkConfig;

fn mvcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvcnn"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_versions(dir: &Path) -> String {
    fs::write(dir.join("v1.txt"), "a 1 0\nb 0 1\n").unwrap();
    fs::write(dir.join("v2.txt"), "b 2 0\nc 0 2\n").unwrap();
    format!("{},{}", p(&dir.join("v1.txt")), p(&dir.join("v2.txt")))
}

#[test]
fn stats_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let emb = write_versions(dir.path());
    let data = dir.path().join("d.tsv");
    fs::write(&data, "0\ta b\n1\tc d a\n").unwrap();
    let out = mvcnn(&["stats", "--embeddings", &emb, "--dataset", p(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "v1\t2\nv2\t2\nvocab\t4\nfull\t1\npartial\t2\nno-hit\t1\n");
}

#[test]
fn stats_with_full_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let emb = write_versions(dir.path());
    let data = dir.path().join("d.tsv");
    fs::write(&data, "0\tb\n").unwrap();
    let out = mvcnn(&["stats", "--embeddings", &emb, "--dataset", p(&data)]);
    assert!(stdout(&out).contains("partial\t0\nno-hit\t0\n"));
}

#[test]
fn missing_file_names_the_path() {
    let out = mvcnn(&["stats", "--embeddings", "/no/such/emb.txt", "--dataset", "/no/such/data.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("/no/such/emb.txt"), "{err}");
    assert!(err.contains("/no/such/data.tsv"), "{err}");
}

#[test]
fn validation_lists_every_problem() {
    let out = mvcnn(&["train", "--lr", "fast", "--dropout-keep", "1.5", "--kernels", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for needle in ["lr", "dropout_keep_prob", "kernels_per_size", "--seed", "--train", "--checkpoint"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
}

#[test]
fn effective_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "k_top = 6\n").unwrap();
    let out = mvcnn(&["gradcheck", "--config", p(&cfg), "--layers", "1", "--gradcheck-coords", "2"]);
    let err = stderr(&out);
    assert!(err.contains("k_top=6\n"));
    assert!(err.contains("layers=1\n"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = mvcnn(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn eval_on_four_example_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig {
        dim: 4,
        layers: 1,
        filter_sizes: vec![3],
        kernels_per_size: 2,
        hidden_dim: 4,
        ..Default::default()
    };
    // Zero output weights and a positive class-0 bias: every sentence is
    // predicted as class 0.
    let mut model = random_model(cfg, 5, 0.1, 1).unwrap();
    model.output.weight.value.as_mut_slice().fill(0.0);
    model.output.bias.value.as_mut_slice().copy_from_slice(&[1.0, 0.0]);
    let ckpt = dir.path().join("m.ckpt");
    write_checkpoint(&model, fs::File::create(&ckpt).unwrap()).unwrap();
    let data = dir.path().join("four.tsv");
    fs::write(&data, "0\tw0 w1\n0\tw2\n0\tw3 w4 w1\n1\tw1 w2\n").unwrap();
    let out = mvcnn(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "accuracy\t0.75\n");
}

#[test]
fn gradcheck_on_default_config() {
    let out = mvcnn(&["gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("max_rel_error")).unwrap();
    let err: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn mutual_learn_writes_completed_files() {
    let dir = tempfile::tempdir().unwrap();
    let emb = write_versions(dir.path());
    let out_dir = dir.path().join("out");
    let out = mvcnn(&["mutual-learn", "--embeddings", &emb, "--output-dir", p(&out_dir), "--ridge", "0.01"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v1 = fs::read_to_string(out_dir.join("v1.completed.txt")).unwrap();
    assert_eq!(v1.lines().filter(|l| l.split(' ').count() == 3).count(), 3);
    let prov = fs::read_to_string(out_dir.join("v2.provenance.tsv")).unwrap();
    assert_eq!(prov, "a\timputed\nb\tpretrained\nc\tpretrained\n");
}

fn training_fixture(dir: &Path) {
    let mut tsv = String::new();
    for i in 0..12 {
        let label = i % 2;
        let cue = if label == 0 { "good" } else { "bad" };
        tsv.push_str(&format!("{label}\tthe film was {cue} really\n"));
    }
    fs::write(dir.join("train.tsv"), &tsv).unwrap();
    fs::write(dir.join("corpus.txt"), "the film was good\nthe plot was bad really\nwas it good\n").unwrap();
}

const SMALL_NET: [&str; 10] = [
    "--dim", "6", "--layers", "1", "--filter-sizes", "3", "--kernels", "2", "--seed", "3",
];

#[test]
fn train_writes_checkpoint_report_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    training_fixture(dir.path());
    let ckpt = dir.path().join("best.ckpt");
    let report = dir.path().join("report.tsv");
    let train = dir.path().join("train.tsv");
    let mut args = vec![
        "train",
        "--train",
        p(&train),
        "--checkpoint",
        p(&ckpt),
        "--report",
        p(&report),
        "--max-epochs",
        "4",
    ];
    args.extend(SMALL_NET);
    let out = mvcnn(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("sha256\t"));
    let report = fs::read_to_string(&report).unwrap();
    assert!(report.starts_with("epoch\ttrain_loss"));
    assert!(report.contains("best_epoch\t"));
    assert!(ckpt.exists());
}

#[test]
fn pretrain_then_fine_tune() {
    let dir = tempfile::tempdir().unwrap();
    training_fixture(dir.path());
    let pre = dir.path().join("pre.ckpt");
    let train = dir.path().join("train.tsv");
    let corpus = dir.path().join("corpus.txt");
    let mut args = vec![
        "pretrain",
        "--corpus",
        p(&corpus),
        "--train",
        p(&train),
        "--checkpoint",
        p(&pre),
        "--pretrain-epochs",
        "2",
    ];
    args.extend(SMALL_NET);
    let out = mvcnn(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("epoch\tnce_loss\n1\t"));

    let tuned = dir.path().join("tuned.ckpt");
    let out = mvcnn(&[
        "train",
        "--train",
        p(&train),
        "--init-checkpoint",
        p(&pre),
        "--checkpoint",
        p(&tuned),
        "--max-epochs",
        "2",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = mvcnn(&["eval", "--checkpoint", p(&tuned), "--dataset", p(&train)]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn train_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    training_fixture(dir.path());
    let train = dir.path().join("train.tsv");
    let run = |seed: &str, name: &str| {
        let ckpt = dir.path().join(name);
        let out = mvcnn(&[
            "train",
            "--train",
            p(&train),
            "--checkpoint",
            p(&ckpt),
            "--max-epochs",
            "3",
            "--dim",
            "6",
            "--layers",
            "1",
            "--filter-sizes",
            "3",
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let hash = stdout(&out).lines().find(|l| l.starts_with("sha256")).unwrap().to_string();
        (fs::read(ckpt).unwrap(), hash)
    };
    let (a, ha) = run("1", "a.ckpt");
    let (b, hb) = run("1", "b.ckpt");
    let (c, _) = run("2", "c.ckpt");
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a, c);
}

#[test]
fn train_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    training_fixture(dir.path());
    let out = mvcnn(&[
        "train",
        "--train",
        p(&dir.path().join("train.tsv")),
        "--checkpoint",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"));
}
