use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn qavat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qavat")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

const SMOKE: &str = r#"
schema_version = 1

[model]
name = "synthetic"

[data]
dataset = "synthetic"
synthetic_train = 256
synthetic_test = 128

[train]
pipeline = "qavat"
epochs = 2
warmup_epochs = 1
batch_size = 32
calib_batches = 2
val_chips = 4
val_size = 64
[train.variability]
model = "layer_fixed"
sigma_w = 0.3

[eval]
n_chips = 20
batch_size = 64
[eval.variability]
model = "layer_fixed"
sigma_w = 0.3
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synthetic_train_and_eval_are_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let t0 = Instant::now();
    let ra = qavat(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    assert!(t0.elapsed().as_secs() < 60);
    let rb = qavat(&["train", "--config", s(&cfg), "--out", s(&b), "--threads", "1"]);
    assert!(rb.status.success());
    assert_eq!(stdout(&ra), stdout(&rb));
    assert_eq!(std::fs::read(a.join("checkpoint.qvc")).unwrap(), std::fs::read(b.join("checkpoint.qvc")).unwrap());
    assert_eq!(std::fs::read(a.join("train_log.jsonl")).unwrap(), std::fs::read(b.join("train_log.jsonl")).unwrap());
    assert!(a.join("meta.json").exists());

    let ck = a.join("checkpoint.qvc");
    let ea = qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&a)]);
    assert!(ea.status.success(), "{}", String::from_utf8_lossy(&ea.stderr));
    let eb = qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&b)]);
    assert_eq!(stdout(&ea), stdout(&eb));
    let report = std::fs::read_to_string(a.join("eval_report.json")).unwrap();
    assert_eq!(report, std::fs::read_to_string(b.join("eval_report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["fingerprint"].as_str().unwrap(), stdout(&ea));
    assert_eq!(v["per_chip"].as_array().unwrap().len(), 20);
    let csv = std::fs::read_to_string(a.join("per_chip.csv")).unwrap();
    assert!(csv.starts_with(&format!("# fingerprint={}", stdout(&ea))));
    assert_eq!(csv.lines().count(), 22);

    let seeded = qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&b), "--seed", "9"]);
    assert_ne!(stdout(&seeded), stdout(&ea));
}

#[test]
fn zero_variation_single_chip_reports_clean_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMOKE
        .replace("n_chips = 20", "n_chips = 1")
        .replace("[eval.variability]\nmodel = \"layer_fixed\"\nsigma_w = 0.3", "");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("o");
    assert!(qavat(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let e = qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&out.join("checkpoint.qvc")), "--out", s(&out)]);
    assert!(e.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(v["per_chip"][0].as_f64().unwrap(), v["mean"].as_f64().unwrap());
    assert_eq!(v["std"].as_f64().unwrap(), 0.0);
}

#[test]
fn quick_flag_uses_two_hundred_chips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SMOKE.replace("epochs = 2", "epochs = 0").replace("warmup_epochs = 1", "warmup_epochs = 0"),
    );
    let out = dir.path().join("o");
    assert!(qavat(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let e = qavat(&[
        "eval",
        "--quick",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&out.join("checkpoint.qvc")),
        "--out",
        s(&out),
    ]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(v["per_chip"].as_array().unwrap().len(), 200);
    assert_eq!(v["config"]["n_chips"].as_u64().unwrap(), 200);
}

#[test]
fn sweep_emits_five_rows_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let base = SMOKE.replace("epochs = 2", "epochs = 1");
    let cfg = write_config(dir.path(), &base);
    let out = dir.path().join("o");
    assert!(qavat(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let sweep = format!(
        "{}\n[sweep]\nscenario = 1\n[[sweep.arms]]\nname = \"qavat\"\ncheckpoints = [\"o/checkpoint.qvc\"]\n",
        base.replace("n_chips = 20", "n_chips = 3")
    );
    let cfg = write_config(dir.path(), &sweep);
    let r = qavat(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("sweep").join("scenario1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let cells = out.join("sweep").join("cells");
    assert_eq!(std::fs::read_dir(&cells).unwrap().count(), 5);
    let again = qavat(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(stdout(&again), stdout(&r));

    let mixed = format!(
        "{}\n[sweep]\nscenario = 2\nsigmas = [0.5]\nwrong_st = true\ncheckpoint = \"o/checkpoint.qvc\"\n",
        base.replace("n_chips = 20", "n_chips = 3")
    );
    let cfg = write_config(dir.path(), &mixed);
    let r = qavat(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let header = stdout(&r).lines().next().unwrap().to_string();
    assert!(header.contains("qavat_wrong_st_mean"), "{header}");
}

#[test]
fn config_problems_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing_data = SMOKE.replace("dataset = \"synthetic\"", "dataset = \"mnist\"\ndir = \"nowhere\"");
    let cases = [
        missing_data,
        SMOKE.replace("[model]", "surprise = true\n[model]"),
        SMOKE.replace("schema_version = 1", "schema_version = 7"),
        SMOKE.replace("name = \"synthetic\"", "name = \"resnet\""),
    ];
    for text in &cases {
        let cfg = write_config(dir.path(), text);
        let r = qavat(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
        assert_eq!(r.status.code(), Some(2), "{text}\n{}", String::from_utf8_lossy(&r.stderr));
    }
    let r = qavat(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(r.status.code(), Some(2));
    let cfg = write_config(dir.path(), SMOKE);
    let r =
        qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("none.qvc")), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMOKE);
    let bad = dir.path().join("bad.qvc");
    std::fs::write(&bad, b"QAVATCKP garbage that is long enough to hold a digest.....").unwrap();
    let r = qavat(&["eval", "--config", s(&cfg), "--checkpoint", s(&bad), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bias_demo_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let r = qavat(&["bias-demo", "--n", "20000", "--out", s(dir.path())]);
    assert!(r.status.success());
    let out = stdout(&r);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(
        lines[1].starts_with("naive,")
            && lines[2].starts_with("reparameterized,")
            && lines[3].starts_with("analytic,2.5,")
    );
    assert!(dir.path().join("bias_demo.csv").exists());

    let zero = qavat(&["bias-demo", "--sigma", "0", "--n", "100"]);
    for line in stdout(&zero).lines().skip(1) {
        assert!(line.ends_with(",0"), "{line}");
    }
}

#[test]
fn overhead_reports_area_ratio() {
    let r = qavat(&["overhead", "--ltm-columns", "16"]);
    assert!(r.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&r)).unwrap();
    assert_eq!(v["area_ratio"].as_f64().unwrap(), 16.0 / 512.0);
}
