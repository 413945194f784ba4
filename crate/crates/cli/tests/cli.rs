use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
corpus.n_train = 4
corpus.n_dev = 2
corpus.n_test = 3
model.enc_dim = 16
model.pred_embed = 8
model.pred_dim = 16
model.joiner_dim = 16
model.enc_heads = 2
model.joiner_heads = 2
train.epochs = 1
train.batch_size = 2
extlm.embed = 8
extlm.hidden = 8
extlm.dim = 8
extlm.epochs = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aio-asr"));
    c.env_remove("AIO_SEED").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
}

impl Setup {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, config).unwrap();
        let corpus = dir.path().join("corpus");
        ok(&["gen", "--config", s(&cfg), "--out", s(&corpus)]);
        Self { config: cfg, corpus, dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn trained(&self) -> PathBuf {
        let ck = self.path("model.ckpt");
        ok(&["train", "--config", s(&self.config), "--corpus", s(&self.corpus), "--out-ckpt", s(&ck)]);
        ck
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_deterministic_and_complete() {
    let a = Setup::new(SMALL);
    let again = a.path("again");
    ok(&["gen", "--config", s(&a.config), "--out", s(&again)]);
    for split in ["train", "dev", "test"] {
        assert!(a.corpus.join(split).join("refs.tsv").exists());
        assert_eq!(read_dir_sorted(&a.corpus.join(split)), read_dir_sorted(&again.join(split)));
    }
    let reseeded = a.path("reseeded");
    let o = bin().args(["gen", "--config", s(&a.config), "--out", s(&reseeded)]).env("AIO_SEED", "7").output().unwrap();
    assert!(o.status.success());
    assert_ne!(read_dir_sorted(&a.corpus.join("train")), read_dir_sorted(&reseeded.join("train")));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [("corpus.min_tokens = 8\ncorpus.max_tokens = 3\n", "min_tokens"), ("corpus.shape = 1\n", "corpus.shape")] {
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, text).unwrap();
        let o = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains(field));
    }
}

#[test]
fn train_smoke_writes_checkpoint_and_log() {
    let a = Setup::new(SMALL);
    let ck = a.trained();
    assert!(ck.exists());
    let csv = fs::read_to_string(a.path("model.ckpt.loss.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 12);
    assert_eq!(header[0], "epoch");
    assert_eq!(header[11], "total");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').count() == 12));
}

#[test]
fn resumed_training_is_reproducible() {
    let a = Setup::new(SMALL);
    let first = a.trained();
    let two = a.path("two.cfg");
    fs::write(&two, SMALL.replace("train.epochs = 1", "train.epochs = 2")).unwrap();
    let mut outs = Vec::new();
    for name in ["r1.ckpt", "r2.ckpt"] {
        let ck = a.path(name);
        ok(&["train", "--config", s(&two), "--corpus", s(&a.corpus), "--out-ckpt", s(&ck), "--init-ckpt", s(&first)]);
        let csv = fs::read_to_string(a.path(&format!("{name}.loss.csv"))).unwrap();
        assert!(csv.lines().skip(1).all(|l| l.starts_with("2,")), "resumed epochs continue the count");
        outs.push((fs::read(&ck).unwrap(), csv));
    }
    assert_eq!(outs[0], outs[1]);
    assert_ne!(outs[0].0, fs::read(&first).unwrap());
}

#[test]
fn joint_with_unit_hat_weight_matches_hat_files() {
    let a = Setup::new(SMALL);
    let ck = a.trained();
    let test = a.corpus.join("test");
    let hat = a.path("hat");
    let joint = a.path("joint");
    ok(&["decode", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&test), "--mode", "hat", "--out", s(&hat)]);
    ok(&[
        "decode", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&test), "--mode", "joint", "--mu-hat", "1",
        "--rho-extlm", "0", "--rho-ilm", "0", "--out", s(&joint),
    ]);
    assert_eq!(read_dir_sorted(&hat), read_dir_sorted(&joint));
    let report = fs::read_to_string(hat.join("ter.txt")).unwrap();
    assert!(report.contains("utterances\t3"));
    assert_eq!(fs::read_to_string(hat.join("hyp.tsv")).unwrap().lines().count(), 3);
}

#[test]
fn every_mode_decodes() {
    let a = Setup::new(SMALL);
    let ck = a.trained();
    let test = a.corpus.join("test");
    for (mode, streaming) in [("ctc", false), ("ctc", true), ("aed", false), ("aed-stream", false), ("hat", true), ("joint", true)] {
        let out = a.path(&format!("{mode}-{streaming}"));
        let mut args = vec!["decode", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&test), "--mode", mode];
        args.extend(["--beam", "3", "--out", s(&out)]);
        if mode == "joint" {
            args.extend(["--mu-hat", "0.6", "--rho-ilm", "0.2"]);
        }
        if streaming {
            args.push("--streaming");
        }
        ok(&args);
        assert!(out.join("nbest.tsv").exists());
    }
    let o = run(&["decode", "--ckpt", s(&ck), "--corpus-split", s(&test), "--mode", "aed", "--streaming", "--out", s(&a.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn external_lm_weight_without_checkpoint_is_rejected() {
    let a = Setup::new(SMALL);
    let ck = a.trained();
    let o = run(&[
        "decode", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&a.corpus.join("test")), "--mode", "joint",
        "--rho-extlm", "0.3", "--out", s(&a.path("d")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("extlm"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let a = Setup::new(SMALL);
    let o = run(&["decode", "--ckpt", s(&a.path("none.ckpt")), "--corpus-split", s(&a.corpus.join("test")), "--out", s(&a.path("d"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn dump_attention_shapes() {
    let a = Setup::new(SMALL);
    let ck = a.trained();
    let test = a.corpus.join("test");
    let refs = fs::read_to_string(test.join("refs.tsv")).unwrap();
    let id = refs.lines().next().unwrap().split('\t').next().unwrap().to_string();
    for streaming in [false, true] {
        let out = a.path(&format!("dump-{streaming}"));
        let mut args = vec!["dump-attention", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&test), "--utt-id", &id];
        args.extend(["--out", s(&out)]);
        if streaming {
            args.push("--streaming");
        }
        ok(&args);
        let nb = fs::read_to_string(out.join("non_blank.csv")).unwrap();
        let sig = fs::read_to_string(out.join("sigmoid_attention.csv")).unwrap();
        let aed = fs::read_to_string(out.join("aed_attention.csv")).unwrap();
        let frames = nb.lines().count() - 1;
        assert!(frames > 0);
        assert_eq!(sig.lines().count() - 1, frames);
        for line in sig.lines().skip(1) {
            let mean: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!(mean > 0.0 && mean < 1.0);
        }
        for line in aed.lines().skip(1) {
            let w: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
            assert_eq!(w.len(), frames);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let o = run(&["dump-attention", "--ckpt", s(&ck), "--corpus-split", s(&test), "--utt-id", "nope", "--out", s(&a.path("n"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn external_lm_trains_and_fuses() {
    let a = Setup::new(&SMALL.replace("corpus.n_train = 4", "corpus.n_train = 120").replace("corpus.n_dev = 2", "corpus.n_dev = 30")
        .replace("extlm.epochs = 2", "extlm.epochs = 6"));
    let lm = a.path("lm.ckpt");
    ok(&["train-extlm", "--config", s(&a.config), "--corpus", s(&a.corpus), "--out-ckpt", s(&lm)]);
    let ppl: Vec<f64> = fs::read_to_string(a.path("lm.ckpt.ppl.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ppl.len(), 6);
    assert!(ppl[5] < ppl[0], "{ppl:?}");

    let ck = a.trained();
    ok(&[
        "decode", "--config", s(&a.config), "--ckpt", s(&ck), "--corpus-split", s(&a.corpus.join("test")), "--mode", "joint",
        "--rho-extlm", "0.3", "--rho-ilm", "0.1", "--extlm-ckpt", s(&lm), "--beam", "2", "--out", s(&a.path("fused")),
    ]);
}
