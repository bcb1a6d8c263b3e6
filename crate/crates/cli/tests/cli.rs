use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn mpner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpner"))
        .args(args)
        .output()
        .expect("spawn mpner")
}

fn mpner_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mpner"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn mpner");
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn datagen(out: &Path, count: usize, seed: u64) -> Output {
    mpner(&[
        "datagen",
        "--catalog",
        s(&data("catalog.tsv")),
        "--templates",
        s(&data("templates.txt")),
        "--quantities",
        s(&data("quantities.txt")),
        "--count",
        &count.to_string(),
        "--min-items",
        "1",
        "--max-items",
        "10",
        "--holdout-fraction",
        "0.2",
        "--seed",
        &seed.to_string(),
        "--out-dir",
        s(out),
    ])
}

const TINY: &str = "epochs=12\nseed=3\nprovider=hash:16:1\nd_model=16\nn_heads=2\nff_units=32\nn_layers=1\nsparse_proj_dim=32\nbatch_start=16\nbatch_end=32\nlr=0.01\ndropout=0\n";

struct Trained {
    dir: TempDir,
}

impl Trained {
    fn model(&self) -> PathBuf {
        self.dir.path().join("model")
    }
    fn train_file(&self) -> PathBuf {
        self.dir.path().join("data/train.jsonl")
    }
    fn test_file(&self) -> PathBuf {
        self.dir.path().join("data/test.jsonl")
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let out = datagen(&dir.path().join("data"), 120, 11);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let cfg = dir.path().join("tiny.cfg");
        fs::write(&cfg, TINY).unwrap();
        let t = Trained { dir };
        let out = mpner(&[
            "train",
            "--config",
            s(&cfg),
            "--train",
            s(&t.train_file()),
            "--dev",
            s(&t.test_file()),
            "--out",
            s(&t.model()),
        ]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        assert!(text(&out.stdout).contains("dev_f1\t"));
        t
    })
}

#[test]
fn datagen_is_deterministic_and_reports_split() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(datagen(&a, 600, 7).status.success());
    assert!(datagen(&b, 600, 7).status.success());
    for f in ["train.jsonl", "test.jsonl", "stats.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read_to_string(a.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        600
    );
    assert_eq!(
        fs::read_to_string(a.join("test.jsonl"))
            .unwrap()
            .lines()
            .count(),
        120
    );
    let stats = fs::read_to_string(a.join("stats.txt")).unwrap();
    assert!(stats.contains("product_overlap\t0\n"), "{stats}");
    assert!(stats.contains("surface_overlap\t0\n"), "{stats}");
    for k in 1..=10 {
        let line = stats
            .lines()
            .find(|l| l.starts_with(&format!("train_entities_{k}\t")))
            .unwrap();
        let n: usize = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(n > 0, "no train record with {k} entities");
    }
}

#[test]
fn datagen_rejects_bad_flags() {
    let dir = TempDir::new().unwrap();
    let out = mpner(&[
        "datagen",
        "--catalog",
        s(&dir.path().join("missing.tsv")),
        "--templates",
        s(&data("templates.txt")),
        "--quantities",
        s(&data("quantities.txt")),
        "--count",
        "5",
        "--out-dir",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("missing.tsv"));
    assert!(!dir.path().join("train.jsonl").exists());
}

#[test]
fn train_config_errors_exit_before_training() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    let out_dir = dir.path().join("model");
    let run = |body: &str| {
        fs::write(&cfg, body).unwrap();
        mpner(&[
            "train",
            "--config",
            s(&cfg),
            "--train",
            "/nonexistent.jsonl",
            "--out",
            s(&out_dir),
        ])
    };
    let out = run("epochs=3\nprovider=none\n");
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("seed"), "{}", text(&out.stderr));

    let out = run("epochs=3\nseed=1\nprovider=none\nn_layers=7\n");
    assert!(!out.status.success());
    let err = text(&out.stderr);
    assert!(err.contains("between 1 and 6"), "{err}");

    let out = run("epochs=3\nseed=1\nprovider=none\nlayers=2\n");
    assert!(text(&out.stderr).contains("layers"));
    assert!(!out_dir.exists());
}

#[test]
fn eval_on_training_file_matches_training_log() {
    let t = trained();
    let log = fs::read_to_string(t.model().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12 + 1);
    let logged = log
        .lines()
        .last()
        .unwrap()
        .strip_prefix("train_f1\t")
        .unwrap()
        .to_owned();

    let report = t.dir.path().join("report.txt");
    let out = mpner(&[
        "eval",
        "--model",
        s(&t.model()),
        "--data",
        s(&t.train_file()),
        "--report",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().next().unwrap(), format!("f1\t{logged}"));
    let report = fs::read_to_string(report).unwrap();
    for h in [
        "Sparse Features",
        "Dense Features",
        "Training F1",
        "Test F1",
    ] {
        assert!(report.contains(h), "{report}");
    }
}

#[test]
fn eval_errors() {
    let t = trained();
    let empty = t.dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = mpner(&["eval", "--model", s(&t.model()), "--data", s(&empty)]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no records"));

    let out = mpner(&[
        "eval",
        "--model",
        s(&t.dir.path().join("data")),
        "--data",
        s(&t.test_file()),
    ]);
    assert!(!out.status.success());
}

#[test]
fn predict_line_protocol() {
    let t = trained();
    let input = "add seven apples one gallon of milk\n\n¿qué? ☃ 🍎🍎 \u{0}\nmilk\n";
    let out = mpner_stdin(&["predict", "--model", s(&t.model()), "--timing"], input);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let lines: Vec<String> = text(&out.stdout).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "");
    let timings = text(&out.stderr);
    assert_eq!(timings.lines().count(), 4);
    assert!(timings.lines().all(|l| l.ends_with(" ms")));

    let out = mpner(&[
        "predict",
        "--model",
        s(&t.model()),
        "--spans",
        "--text",
        "milk please",
    ]);
    assert!(out.status.success());
    let line = text(&out.stdout);
    for cell in line
        .trim_end_matches('\n')
        .split('\t')
        .filter(|c| !c.is_empty())
    {
        let parts: Vec<&str> = cell.split(':').collect();
        assert_eq!(parts.len(), 3, "{cell}");
        assert!(parts[0].parse::<usize>().unwrap() < parts[1].parse::<usize>().unwrap());
        assert_eq!(parts[2], "product");
    }
}

#[test]
fn ablation_writes_rows_in_declared_order() {
    let t = trained();
    let cfg = t.dir.path().join("ablation.cfg");
    fs::write(&cfg, TINY.replace("epochs=12", "epochs=1")).unwrap();
    let table = t.dir.path().join("table.md");
    let out = mpner(&[
        "ablation",
        "--config",
        s(&cfg),
        "--grid",
        "lexical=on,off;dense=hash:16:1,none",
        "--train",
        s(&t.train_file()),
        "--test",
        s(&t.test_file()),
        "--out",
        s(&table),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = fs::read_to_string(table).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(rows[0].contains("lexical") && !rows[0].contains("Not Present"));
    assert!(rows[1].contains("lexical") && rows[1].contains("Not Present"));
    assert!(!rows[2].contains("lexical") && !rows[2].contains("Not Present"));
    assert!(!rows[3].contains("lexical") && rows[3].contains("Not Present"));
}
