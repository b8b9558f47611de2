use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medvill::checkpoint::Checkpoint;
use medvill::config::RunConfig;
use medvill::corpus::load_dataset;
use medvill::pretrain::initial_params;
use tempfile::TempDir;

const TINY: &str = "\
model.hidden = 16
model.layers = 1
model.heads = 2
model.ff = 32
vis.channels = 8
model.dropout = 0
train.batch = 8
train.epochs = 2
seed = 4
";

fn medvill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvill")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = medvill(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self::with_test_split("12")
    }

    fn with_test_split(n_test: &str) -> Self {
        let w = Self { dir: tempfile::tempdir().unwrap() };
        ok(&["gen-data", "--out", s(&w.data()), "--n-train", "40", "--n-valid", "4", "--n-test", n_test, "--seed", "2"]);
        fs::write(w.path("tiny.cfg"), TINY).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self, extra: &str) -> PathBuf {
        let p = self.path("run.cfg");
        fs::write(&p, format!("{TINY}{extra}")).unwrap();
        p
    }

    fn pretrained(&self) -> PathBuf {
        let out = self.path("pre.ckpt");
        if !out.exists() {
            ok(&["pretrain", "--config", s(&self.path("tiny.cfg")), "--data", s(&self.data()), "--out", s(&out)]);
        }
        out
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        ok(&["gen-data", "--out", s(p), "--n-train", "10", "--n-valid", "2", "--n-test", "2", "--seed", "7"]);
    }
    let ta = tree(&a);
    assert_eq!(ta.len(), 14 + 3);
    assert_eq!(ta, tree(&b));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(medvill(&["gen-data"]).status.code(), Some(1));
    assert_eq!(medvill(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(medvill(&["--help"]).status.code(), Some(0));
}

#[test]
fn pretrain_with_zero_learning_rate_keeps_initialization() {
    let w = Workspace::new();
    let out = w.path("zero.ckpt");
    ok(&["pretrain", "--config", s(&w.config("optim.lr = 0\n")), "--data", s(&w.data()), "--out", s(&out)]);
    let c = Checkpoint::load(&out).unwrap();
    let vocab = load_dataset(&w.data()).unwrap().vocab.len();
    assert_eq!(c.params, initial_params(&c.config, vocab));
    // 40 studies in batches of 8 for 2 epochs
    let csv = fs::read_to_string(w.path("zero.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(w.path("zero.ckpt.epoch1").exists() && w.path("zero.ckpt.epoch2").exists());
}

#[test]
fn bad_config_values_exit_with_config_code() {
    let w = Workspace::new();
    for extra in ["pretrain.scheme = sideways\n", "model.heads = 3\n", "no equals sign\n"] {
        let out = medvill(&["pretrain", "--config", s(&w.config(extra)), "--data", s(&w.data()), "--out", s(&w.path("x"))]);
        assert_eq!(out.status.code(), Some(2), "{extra}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn finetune_logs_mask_and_rejects_mismatched_shapes() {
    let w = Workspace::new();
    let pre = w.pretrained();
    let log = ok(&["finetune", "--task", "gen", "--ckpt", s(&pre), "--data", s(&w.data()), "--out", s(&w.path("gen.ckpt"))]);
    assert!(log.starts_with("task=gen mask=S2S"), "{log}");
    let log = ok(&["finetune", "--task", "cls", "--ckpt", s(&pre), "--data", s(&w.data()), "--out", s(&w.path("cls.ckpt"))]);
    assert!(log.starts_with("task=cls mask=BI"), "{log}");
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);

    let wide = w.config("model.hidden = 24\nmodel.ff = 48\n");
    let out = medvill(&[
        "finetune", "--task", "cls", "--ckpt", s(&pre), "--config", s(&wide), "--data", s(&w.data()), "--out",
        s(&w.path("bad.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('\''), "error should name a tensor: {err}");
    assert!(!w.path("bad.ckpt").exists());
}

#[test]
fn finetuned_classifier_beats_initialization() {
    let w = Workspace::new();
    let cfg = w.config("train.epochs = 6\noptim.lr = 3e-3\n");
    let init = w.path("init.ckpt");
    let c = RunConfig::parse(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let vocab = load_dataset(&w.data()).unwrap().vocab.len();
    Checkpoint::new(c.clone(), initial_params(&c, vocab)).save(&init).unwrap();
    let tuned = w.path("tuned.ckpt");
    ok(&["finetune", "--task", "cls", "--ckpt", s(&init), "--config", s(&cfg), "--data", s(&w.data()), "--out", s(&tuned)]);
    let auroc = |ckpt: &Path| -> f64 {
        let report = w.path("r.jsonl");
        ok(&["eval", "--task", "cls", "--ckpt", s(ckpt), "--data", s(&w.data()), "--out", s(&report)]);
        let text = fs::read_to_string(&report).unwrap();
        let line = text.lines().find(|l| l.contains("\"auroc\"")).unwrap();
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        v["value"].as_f64().unwrap()
    };
    let (before, after) = (auroc(&init), auroc(&tuned));
    assert!(after > before, "{after} vs {before}");
}

#[test]
fn eval_against_itself_and_both_retrieval_directions() {
    let small = Workspace::new();
    let pre = small.pretrained();
    let (data, out) = (small.data(), small.path("r"));
    let args = ["eval", "--task", "retrieval", "--ckpt", s(&pre), "--data", s(&data), "--out", s(&out)];
    assert_eq!(medvill(&args).status.code(), Some(3), "100-candidate pool needs 100 test studies");

    let w = Workspace::with_test_split("100");
    let pre = w.pretrained();
    let out = w.path("ret.jsonl");
    let stdout = ok(&[
        "eval", "--task", "retrieval", "--ckpt", s(&pre), "--data", s(&w.data()), "--out", s(&out), "--compare",
        s(&pre),
    ]);
    for dir in ["r2i", "i2r"] {
        for m in ["mrr", "hit@5", "recall@5", "precision@5"] {
            assert!(stdout.contains(&format!("{dir}.{m} ")), "{dir}.{m} missing:\n{stdout}");
        }
    }
    let records: Vec<serde_json::Value> =
        fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8);
    for r in &records {
        match r["p_value"].as_f64() {
            Some(p) => assert!((p - 1.0).abs() < 1e-9, "{r}"),
            None => assert!(r.get("note").is_some(), "{r}"),
        }
    }
    let csv = fs::read_to_string(w.path("ret.jsonl.resamples.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn generate_is_deterministic_with_known_stop_reasons() {
    let w = Workspace::new();
    let pre = w.pretrained();
    let run = |name: &str| {
        let out = w.path(name);
        ok(&["generate", "--ckpt", s(&pre), "--data", s(&w.data()), "--max-len", "6", "--out", s(&out)]);
        fs::read_to_string(out).unwrap()
    };
    let a = run("a.tsv");
    assert_eq!(a, run("b.tsv"));
    let rows = medvill::harness::read_generations(&a).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(a.lines().next(), Some("id\tstop_reason\treport"));
    for (_, _, report) in &rows {
        assert!(report.split_whitespace().count() <= 6);
    }
    let bad = medvill(&["generate", "--ckpt", s(&pre), "--data", s(&w.data()), "--split", "dev", "--out", s(&w.path("c"))]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn export_attention_rows_are_distributions() {
    let w = Workspace::new();
    let pre = w.pretrained();
    let image = w.data().join("images/s00000.pgm");
    let prefix = w.path("attn");
    let report = "there is edema .";
    ok(&[
        "export-attn", "--ckpt", s(&pre), "--image", s(&image), "--report", report, "--data", s(&w.data()), "--mask",
        "s2s", "--out", s(&prefix),
    ]);
    let csv = fs::read_to_string(w.path("attn.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    // 16 visual features, 4 words and their SEP, CLS, two separators
    let size = 16 + 5 + 3;
    assert_eq!(rows.len(), size);
    let language = 16 + 2;
    for (q, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), size);
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        for (c, &v) in row.iter().enumerate() {
            let blocked = if q < language { c >= language } else { c > q };
            if blocked {
                assert!(v <= 1e-12, "({q},{c}) = {v}");
            }
        }
    }
    assert!(medvill::image::ImageGrid::read_pgm(&w.path("attn.pgm")).is_ok());
    let out = medvill(&[
        "export-attn", "--ckpt", s(&pre), "--image", s(&image), "--report", report, "--data", s(&w.data()), "--layer",
        "5", "--out", s(&prefix),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
