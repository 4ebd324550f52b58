use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 1
[task]
modulus = 11
hops = 1
[model]
layers = 2
d_model = 16
latent_steps = 2
[train]
epochs = 3
batch_size = 16
per_length = 40
test_per_length = 10
eval_every = 1
";

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-cot"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cli(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn trained(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(dir, &["train", "--config", "tiny.toml", "--out", "run"]);
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    for f in ["config.json", "metrics.jsonl", "ckpt_final.bin", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    ok(d, &["gen", "--config", "tiny.toml", "--out", "data"]);
    let train = fs::read_to_string(d.join("data/train_student.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 80);

    ok(d, &["eval", "--run", "run", "--out", "ev"]);
    let csv = fs::read_to_string(d.join("ev/accuracy.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("regime,11"));
    assert!(csv.lines().nth(1).unwrap().starts_with("codi,"));

    ok(d, &["analyze", "--run", "run", "--examples", "60", "--probe-epochs", "2", "--save-activations", "--out", "an"]);
    for f in ["lens_s2.csv", "lens_s2.svg", "attention_l1_h1.csv", "probes_s1.csv", "patching_x1.csv", "activations/activations.bin"] {
        assert!(d.join("an").join(f).exists(), "{f}");
    }
    let m = manifest(&d.join("an"));
    assert_eq!(m["command"].as_str().unwrap().split_whitespace().next(), Some("analyze"));
    assert!(m["artifacts"].as_array().unwrap().len() > 10);
    assert!(m["color_scale"].is_object());

    ok(d, &["theory", "--m", "5,6", "--T", "3", "--trials", "200", "--out", "th"]);
    let csv = fs::read_to_string(d.join("th/theory.csv")).unwrap();
    assert_eq!(csv, "m,totient,u,q,E_L_T3\n5,4,1,0,3\n6,2,0.4,0.6,0.624\n");

    ok(d, &["theory", "--m", "10,11", "--T", "3", "--trials", "10", "--accuracy", "ev/accuracy.csv", "--out", "th2"]);
    let acc = fs::read_to_string(d.join("ev/accuracy.csv")).unwrap();
    let cell = acc.lines().nth(1).unwrap().split(',').nth(1).unwrap().to_string();
    let csv = fs::read_to_string(d.join("th2/theory.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].ends_with(",acc_codi"));
    assert!(rows[1].starts_with("10,") && rows[1].ends_with(','));
    assert!(rows[2].starts_with("11,") && rows[2].ends_with(&format!(",{cell}")));

    ok(d, &["report", "--dir", "."]);
    let md = fs::read_to_string(d.join("report.md")).unwrap();
    for name in ["## an", "## data", "## ev", "## th", "## run"] {
        assert!(md.contains(name), "{name}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    let files = ["lens_s2.csv", "probes_s2.csv", "patching_x2.csv", "attention_l2_h1.csv"];
    let mut seen = Vec::new();
    for out in ["a", "b"] {
        ok(d, &["analyze", "--run", "run", "--examples", "60", "--probe-epochs", "2", "--out", out]);
        seen.push(files.map(|f| fs::read(d.join(out).join(f)).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);

    ok(d, &["train", "--config", "tiny.toml", "--out", "run2"]);
    assert_eq!(fs::read(d.join("run/ckpt_final.bin")).unwrap(), fs::read(d.join("run2/ckpt_final.bin")).unwrap());

    for out in ["t1", "t2"] {
        ok(d, &["theory", "--m", "6,8", "--T", "4", "--trials", "500", "--seed", "3", "--out", out]);
    }
    assert_eq!(fs::read(d.join("t1/simulation.csv")).unwrap(), fs::read(d.join("t2/simulation.csv")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    ok(d, &["gen", "--config", "tiny.toml", "--m", "13", "--regime", "non-cot", "--out", "data"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("data/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["task"]["modulus"], 13);
    assert_eq!(cfg["regime"], "non-cot");
    assert!(d.join("data/train_non-cot.jsonl").exists());
    assert!(!d.join("data/train_student.jsonl").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(tmp.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&cli(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&cli(tmp.path(), &["train", "--regime", "sideways"])), 2);
}

#[test]
fn malformed_configs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[task]\nmodulus = 11\ncolour = 3\n").unwrap();
    let out = cli(d, &["gen", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert_eq!(code(&cli(d, &["train", "--no-teacher", "--out", "x"])), 3);
    assert_eq!(code(&cli(d, &["gen", "--m", "90", "--out", "x"])), 3);

    fs::write(d.join("acc.csv"), "regime,41\ncodi,high\n").unwrap();
    assert_eq!(code(&cli(d, &["theory", "--m", "41", "--trials", "5", "--accuracy", "acc.csv", "--out", "x"])), 3);
}

#[test]
fn missing_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&cli(d, &["eval", "--run", "nowhere"])), 4);
    assert_eq!(code(&cli(d, &["analyze", "--run", "nowhere"])), 4);
    assert_eq!(code(&cli(d, &["gen", "--config", "absent.toml"])), 4);
    assert_eq!(code(&cli(d, &["theory", "--m", "41", "--trials", "5", "--accuracy", "absent.csv"])), 4);
}

#[test]
fn damaged_checkpoints_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d);
    let ckpt = d.join("run/ckpt_final.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ckpt, &bytes).unwrap();
    assert_eq!(code(&cli(d, &["eval", "--run", "run", "--out", "ev"])), 5);
}
