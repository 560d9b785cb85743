//! The binary driven end to end on synthetic files.

use std::path::Path;
use std::process::{Command, Output};

use sparsedense::data::write_corpus;
use sparsedense::finetune::write_tasks;
use sparsedense::synth::{answer_task, corpus_lexicon, regular_corpus};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsedense"))
        .args(args)
        .env("SPARSEDENSE_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn flops_and_dry_run() {
    let o = run(&["flops", "--paper-table"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().filter(|l| l.contains('%')).count() >= 9, "{}", stdout(&o));

    let o = run(&[
        "flops", "--layers", "1", "--d-model", "2", "--heads", "1", "--d-ff", "8", "--vocab", "4", "--context", "2",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("per token: 150"), "{}", stdout(&o));
    assert!(stdout(&o).contains("1.00x"), "{}", stdout(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = run(&["pretrain", "--preset", "xl", "--sparsity", "0.75", "--dry-run", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("302M"), "{}", stdout(&o));
    assert!(!out.exists());
}

#[test]
fn usage_and_contract_exit_codes() {
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&run(&["tokenizer", "--corpus", p(&missing), "--out", p(&dir.path().join("v"))])), 1);

    let corpus = dir.path().join("c.jsonl");
    write_corpus(&corpus, &regular_corpus(20, 0).unwrap()).unwrap();
    // a vocabulary smaller than the byte alphabet plus specials
    let o = run(&["tokenizer", "--corpus", p(&corpus), "--vocab-size", "100", "--out", p(&dir.path().join("v"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tokenizer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    write_corpus(&corpus, &regular_corpus(60, 3).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    for out in [&a, &b] {
        let o = run(&["tokenizer", "--corpus", p(&corpus), "--vocab-size", "400", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn pretrain_densify_finetune_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus.jsonl");
    write_corpus(&corpus, &regular_corpus(150, 2).unwrap()).unwrap();
    let pre = |out: &Path| {
        run(&[
            "pretrain", "--preset", "toy", "--sparsity", "0.5", "--steps", "30", "--vocab-size", "512",
            "--corpus", p(&corpus), "--seed", "5", "--log-every", "10", "--out", p(out),
        ])
    };
    let (r1, r2) = (d.join("r1"), d.join("r2"));
    for r in [&r1, &r2] {
        let o = pre(r);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["config.json", "vocab.txt", "loss.csv", "final.ckpt"] {
        assert!(r1.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(r1.join("loss.csv")).unwrap();
    assert_eq!(curve, std::fs::read_to_string(r2.join("loss.csv")).unwrap());
    assert_eq!(curve.lines().count(), 31);

    let vocab = r1.join("vocab.txt");
    let words = corpus_lexicon(2);
    write_tasks(d.join("train.jsonl"), &answer_task(64, &words, 1).unwrap()).unwrap();
    write_tasks(d.join("val.jsonl"), &answer_task(16, &words, 2).unwrap()).unwrap();
    let stage = format!("qa={}:{}", p(&d.join("train.jsonl")), p(&d.join("val.jsonl")));
    let ft = |ck: &Path, out: &Path| {
        run(&[
            "finetune", "--checkpoint", p(ck), "--vocab", p(&vocab), "--stage", &stage, "--labels", "yes,no,maybe",
            "--prompt-len", "2", "--epochs", "1", "--lr", "1e-3", "--out", p(out),
        ])
    };
    // masks must be retired first
    assert_eq!(code(&ft(&r1.join("final.ckpt"), &d.join("ft0"))), 2);

    let dense = d.join("dense.ckpt");
    let o = run(&["densify", "--checkpoint", p(&r1.join("final.ckpt")), "--out", p(&dense)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ft(&dense, &d.join("ft"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("ft/finetune.csv")).unwrap();
    assert!(csv.starts_with("stage,epoch,train_loss,val_loss,val_metric"));

    let model = d.join("ft/model.ckpt");
    let ev = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&model), "--vocab", p(&vocab), "--data"];
        let val = d.join("val.jsonl");
        let val = p(&val).to_string();
        args.push(&val);
        args.extend_from_slice(extra);
        run(&args)
    };
    let out = d.join("ev");
    let o = ev(&["--labels", "yes,no,maybe", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("accuracy"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 17);
    assert_eq!(code(&ev(&["--labels", "yes,no,maybe", "--min-metric", "1.01"])), 3);
    assert_eq!(code(&ev(&["--labels", "yes,yes"])), 2);
}
