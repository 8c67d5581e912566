use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[encoder]
stage_dims = [4, 8, 16, 32]
heads_per_stage = [1, 1, 2, 2]
meta_hidden = [16, 16]
image_size = 16
patch_size = 2

[fusion]
feature_dim = 16
mlp_hidden = 16
heads = 2

[head]
dim = 16
heads = 2

[train]
batch_size = 8
epochs = 2

[optim]
lr = 1e-3

[data]
samples = 40

[data.generator.sizes]
train = 24
val = 8
test = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trimodal"));
    c.env_remove("TRIMODAL_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let last = err.lines().last().expect("error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not json ({e}): {err}"))
}

#[test]
fn usage_errors_leave_no_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for args in [
        vec!["fly"],
        vec!["train", "--out", s(&out), "--bogus"],
        vec![],
    ] {
        let o = run(&args);
        assert!(!o.status.success(), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn config_errors_exit_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "fusion.nope=1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["exit"], 2);
    assert!(e["message"].as_str().unwrap().contains("fusion.nope"));
    assert!(!out.exists());

    let o = run(&[
        "gradcheck",
        "--config",
        s(&cfg),
        "--block",
        "nope",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "train",
        "--config",
        s(&dir.path().join("missing.toml")),
        "--out",
        s(&out),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn gen_data_round_trips_its_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "data.csv", "images.bin", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let echoed = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 9"));
    let o = run(&[
        "gen-data",
        "--config",
        s(&a.join("config.toml")),
        "--out",
        s(&b),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "data.csv", "images.bin", "manifest.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    assert_eq!(csv.matches(",train,").count(), 24);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (data, run_a, run_b, ev) = (
        dir.path().join("data"),
        dir.path().join("t1"),
        dir.path().join("t2"),
        dir.path().join("ev"),
    );
    let o = run(&["train", "--config", s(&cfg), "--out", s(&run_a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 2/2"));
    let history = fs::read_to_string(run_a.join("history.csv")).unwrap();
    assert!(history
        .starts_with("config,seed,DIAG,PN,BWV,VS,PIG,STR,DaG,RS,AVG,meanF1,epoch,lr,train_loss"));
    assert_eq!(history.lines().count(), 3);

    // Training from the generated directory uses the same splits as synthetic training.
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run_b),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run_a.join("checkpoint.json")).unwrap(),
        fs::read(run_b.join("checkpoint.json")).unwrap()
    );

    let o = run(&[
        "eval",
        "--checkpoint",
        s(&run_a.join("checkpoint.json")),
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    let acc: Vec<f64> = m["accuracy"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(acc.len(), 8);
    let mean = acc.iter().sum::<f64>() / 8.0;
    assert!((m["avg"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(m["samples"], 8);
    assert_eq!(
        fs::read_to_string(ev.join("predictions.jsonl"))
            .unwrap()
            .lines()
            .count(),
        8
    );
    let table = fs::read_to_string(ev.join("table.txt")).unwrap();
    assert!(table.lines().next().unwrap().ends_with("AVG"));
    assert_eq!(
        fs::read(ev.join("config.toml")).unwrap(),
        fs::read(run_a.join("config.toml")).unwrap()
    );
}

#[test]
fn failures_map_to_exit_codes_and_markers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("bad_data");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&dir.path().join("none.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["kind"], "data");
    assert!(out.join(".failed").exists());
    assert!(out.join("config.toml").exists());

    let out = dir.path().join("diverge");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "optim.lr=1e200",
        "--set",
        "train.schedule=\"constant\"",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert_eq!(error_json(&o)["kind"], "numeric");
    let marker = fs::read_to_string(out.join(".failed")).unwrap();
    assert_eq!(marker.lines().count(), 1);

    // A successful rerun into the same directory clears the marker.
    let o = run(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success());
    assert!(!out.join(".failed").exists());
}

#[test]
fn gradcheck_reports_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("gc");
    let o = run(&["gradcheck", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for b in [
        "window_attention",
        "patch_merge",
        "ca_der_to_cli",
        "ca_meta_to_cli",
        "tmct_block",
        "trimodal_meta_fusion",
        "label_head_mha",
        "twl",
        "bce",
        "full_model",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(b) && l.contains(" ok ")),
            "{b}: {text}"
        );
    }
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 10);
}

#[test]
fn ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("root");
    let o = bin()
        .env("TRIMODAL_OUT", &root)
        .args([
            "ablate",
            "--config",
            s(&cfg),
            "--set",
            "train.epochs=1",
            "--seeds",
            "0,1",
            "--jobs",
            "2",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = root.join("ablate");
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("config,seed,DIAG"));
    assert!(lines[1].starts_with("Swin+BCE (Baseline),0,"));
    assert!(lines[10].starts_with("TMCT+MHA+TWL,1,"));
    assert_eq!(fs::read_dir(out.join("history")).unwrap().count(), 10);

    let rep = dir.path().join("rep");
    let o = run(&["report", s(&out), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(rep.join("report.txt")).unwrap();
    assert!(text.contains("TMCT+MHA+TWL") && text.contains('±'));
    let plots: Vec<_> = fs::read_dir(rep.join("plots")).unwrap().collect();
    assert_eq!(plots.len(), 10);

    let o = run(&[
        "report",
        s(&dir.path().join("nothing")),
        "--out",
        s(&dir.path().join("r2")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn arm_files_and_bad_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let arms = dir.path().join("arms.toml");
    fs::write(
        &arms,
        "[[arm]]\nname = \"base\"\n\n[[arm]]\nname = \"broken\"\noverrides = [\"head.nope=1\"]\n",
    )
    .unwrap();
    let out = dir.path().join("ab");
    let o = run(&[
        "ablate",
        "--config",
        s(&cfg),
        "--arms",
        s(&arms),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("broken"));
    assert!(!out.exists());
}
