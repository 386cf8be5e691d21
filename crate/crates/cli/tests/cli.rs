use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wheatvit::backbone::{ModelConfig, Preset};
use wheatvit::checkpoint::Checkpoint;
use wheatvit::ssl::{HeadConfig, SslModel};

const CONFIG: &str = r#"
schema_version = 1
seed = 3

[data]
count = 30

[pretrain]
steps = 3
batch = 4

[pretrain.ssl.head]
hidden = 16
bottleneck = 8
prototypes = 16

[pretrain.ssl.aug]
num_local = 1

[distill]
steps = 4
batch = 4
eval_every = 2
holdout = 4

[finetune.train]
steps = 15
batch = 4
"#;

fn wheatvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wheatvit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wheatvit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, CONFIG).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn eval_on_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    fs::write(&pred, "# id s0 s1 s2 label\na 0.9 0.05 0.05 0\nb 0.1 0.8 0.1 1\nc 0.0 0.2 0.8 2\nd 0.7 0.2 0.1 0\n").unwrap();
    let report = dir.path().join("r").join("report.json");
    ok(&["eval", "--task", "classification", "--pred", s(&pred), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["metrics"]["ba"], 1.0);
    assert_eq!(v["metrics"]["map"], 1.0);
}

#[test]
fn zero_step_pretrain_is_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("pre");
    ok(&["pretrain", "--config", &cfg, "--steps", "0", "--seed", "11", "--out", s(&out)]);
    let c = Checkpoint::load(&out.join("pretrain.fmw")).unwrap();
    let head = HeadConfig {
        hidden: 16,
        bottleneck: 8,
        prototypes: 16,
        ..Default::default()
    };
    let init = SslModel::new(ModelConfig::preset(Preset::Tiny), head, 11).unwrap();
    assert_eq!(c.ssl_model("student").unwrap().checksum(), init.checksum());
    assert_eq!(c.ssl_model("teacher").unwrap().checksum(), init.checksum());
    assert_eq!(c.state["step"], 0);
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["pretrain", "--config", &cfg, "--out", s(&a)]);
    ok(&["pretrain", "--config", &cfg, "--out", s(&b)]);
    for f in ["pretrain.fmw", "log.jsonl", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // the log only grows
    ok(&["pretrain", "--config", &cfg, "--out", s(&a)]);
    let lines = fs::read_to_string(a.join("log.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 2 * fs::read_to_string(b.join("log.jsonl")).unwrap().lines().count());
}

#[test]
fn reduced_data_finetune_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("ft");
    let stdout = ok(&["finetune", "--config", &cfg, "--fraction", "0.5", "--resamples", "5", "--out", s(&out)]);
    for k in 0..5 {
        let r = out.join(format!("resample-{k}"));
        assert!(r.join("report.json").exists() && r.join("head.fmw").exists());
    }
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(stdout.contains(&summary));
    let row = summary.lines().nth(1).unwrap();
    // "     50%  90.3 (± 0.33)"
    let (pct, rest) = row.trim().split_once("%  ").unwrap();
    assert_eq!(pct, "50");
    let (mean, std) = rest.strip_suffix(')').unwrap().split_once(" (± ").unwrap();
    assert_eq!(mean.split_once('.').unwrap().1.len(), 1);
    assert_eq!(std.split_once('.').unwrap().1.len(), 2);
    let logged = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(logged.lines().filter(|l| l.contains("\"metric\"")).count(), 5);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "schema_version = 1\n[pretrain]\nbatchsize = 4\n").unwrap();
    let out = wheatvit(&["pretrain", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batchsize") && err.contains("bad.toml:3"), "{err}");

    fs::write(&p, "[finetune]\nfraction = 0.0\n").unwrap();
    let out = wheatvit(&["finetune", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.fraction"));
}

#[test]
fn distill_pca_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let pre = dir.path().join("pre");
    ok(&["pretrain", "--config", &cfg, "--out", s(&pre)]);
    let teacher = pre.join("pretrain.fmw");
    let before = Checkpoint::load(&teacher).unwrap().ssl_model("teacher").unwrap().checksum();

    let dis = dir.path().join("dis");
    ok(&["distill", "--config", &cfg, "--teacher", s(&teacher), "--out", s(&dis)]);
    let c = Checkpoint::load(&dis.join("distill.fmw")).unwrap();
    assert_eq!(c.state["teacher_checksum"], before.as_str());
    assert_eq!(c.backbone().unwrap().config.embed_dim, 16);
    let evals = fs::read_to_string(dis.join("log.jsonl")).unwrap().lines().filter(|l| l.contains("\"kl\"")).count();
    assert_eq!(evals, 3);

    let data = dir.path().join("data");
    ok(&["gen-data", "--config", &cfg, "--out", s(&data)]);
    let img = data.join("train/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let pca = dir.path().join("pca");
    ok(&["pca", "--checkpoint", s(&dis.join("distill.fmw")), "--image", s(&img), "--out", s(&pca)]);
    let map = image::open(pca.join(img.file_name().unwrap())).unwrap();
    assert_eq!((map.width(), map.height()), (64, 64));

    let mut bytes = fs::read(&teacher).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x10;
    let bad = dir.path().join("bad.fmw");
    fs::write(&bad, bytes).unwrap();
    let out = wheatvit(&["distill", "--config", &cfg, "--teacher", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
