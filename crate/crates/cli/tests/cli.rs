//! End-to-end runs of the `protosearch` binary on a tiny synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use protosearch::search::{read_embeddings, read_labels};
use protosearch::train::{Checkpoint, EpochMetrics};

const TINY: &str = r#"version = 1
seed = 3
[dataset]
height = 48
width = 80
source_scenes = 12
target_scenes = 12
source_identities = 4
target_identities = 4
[model]
channels = 8
embed_dim = 16
domain_hidden = 8
[labeling]
n_random = 6
[train]
pretrain_epochs = 1
adapt_epochs = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protosearch"));
    c.env_remove("PROTO_SEARCH_OUT").env_remove("RUST_LOG");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn ok(args: &[&str], config: &Path, out: &Path) -> Output {
    let o = run(args, config, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// gen-data then train into `out`.
fn trained(dir: &Path, config_text: &str) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "run.toml", config_text);
    let out = dir.join("run");
    ok(&["gen-data"], &cfg, &out);
    ok(&["train"], &cfg, &out);
    (cfg, out)
}

fn metrics(out: &Path) -> Vec<EpochMetrics> {
    fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    ok(&["gen-data"], &cfg, &dir.path().join("a"));
    ok(&["gen-data"], &cfg, &dir.path().join("b"));
    for split in ["source", "target"] {
        let a = fs::read(dir.path().join("a/data").join(split).join("index.jsonl")).unwrap();
        let b = fs::read(dir.path().join("b/data").join(split).join("index.jsonl")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{split} index differs between runs");
    }
    let other = run(&["gen-data", "--seed", "4"], &cfg, &dir.path().join("c"));
    assert!(other.status.success());
    let a = fs::read(dir.path().join("a/data/target/index.jsonl")).unwrap();
    let c = fs::read(dir.path().join("c/data/target/index.jsonl")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn malformed_config_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "version = 1\n[optim]\nlearning_rat = 0.1\n");
    let o = run(&["gen-data"], &bad, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let range = write_config(dir.path(), "range.toml", "version = 1\n[memory]\ntau = 0.0\n");
    let o = run(&["train"], &range, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("memory.tau"));
}

#[test]
fn unknown_subcommand_exits_one() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn training_logs_one_record_per_epoch_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path(), TINY);
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for (k, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], k + 1);
        for key in ["l_ins", "l_c_t", "l_c_s", "l_t_e", "l_s_e", "total"] {
            assert!(r[key].as_f64().is_some_and(f64::is_finite), "record {k} lacks {key}");
        }
    }
    assert_eq!(fs::read_to_string(out.join("pretrain.jsonl")).unwrap().lines().count(), 1);

    let longer = write_config(dir.path(), "longer.toml", &TINY.replace("adapt_epochs = 2", "adapt_epochs = 4"));
    ok(&["train"], &longer, &out);
    let epochs: Vec<usize> = metrics(&out).iter().map(|m| m.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
    let ck = Checkpoint::load(&out.join("checkpoint.json")).unwrap();
    assert_eq!((ck.pretrain_epochs_done, ck.adapt_epochs_done), (1, 4));

    // Nothing left to do: a rerun leaves the log as it was.
    ok(&["train"], &longer, &out);
    assert_eq!(metrics(&out).len(), 4);
    // The original budget is below what is done already; training must not rewind.
    ok(&["train"], &cfg, &out);
    assert_eq!(metrics(&out).len(), 4);
}

#[test]
fn killed_training_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("adapt_epochs = 2", "adapt_epochs = 400");
    let cfg = write_config(dir.path(), "long.toml", &text);
    let out = dir.path().join("run");
    ok(&["gen-data"], &cfg, &out);
    let mut child = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let ck_path = out.join("checkpoint.json");
    let start = Instant::now();
    while metrics_len(&out) < 2 {
        assert!(start.elapsed() < Duration::from_secs(120), "no adaptation epochs logged");
        assert!(child.try_wait().unwrap().is_none(), "training finished before it could be interrupted");
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert!(ck.adapt_epochs_done >= 1 && ck.adapt_epochs_done < 400);
}

fn metrics_len(out: &Path) -> usize {
    fs::read_to_string(out.join("metrics.jsonl")).map_or(0, |s| s.lines().count())
}

#[test]
fn labeling_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path(), TINY);
    ok(&["label"], &cfg, &out);
    let first = fs::read(out.join("labels.tsv")).unwrap();
    let first_emb = fs::read(out.join("embeddings.bin")).unwrap();
    ok(&["label"], &cfg, &out);
    assert_eq!(fs::read(out.join("labels.tsv")).unwrap(), first);
    assert_eq!(fs::read(out.join("embeddings.bin")).unwrap(), first_emb);

    let labels = read_labels(&out.join("labels.tsv")).unwrap();
    let features = read_embeddings(&out.join("embeddings.bin")).unwrap();
    assert!(!labels.is_empty());
    assert_eq!(features.len(), labels.len());
    for ((id, _), f) in labels.iter().zip(&features) {
        assert_eq!(id, &format!("{}_{}", f.image_id, f.box_id));
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("label_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["instances"], labels.len());
    let per_instance = summary["source_prototypes"].as_u64().unwrap() + summary["random_prototypes"].as_u64().unwrap();
    assert_eq!(summary["distance_evaluations"].as_u64().unwrap(), labels.len() as u64 * per_instance);
}

#[test]
fn empty_target_split_warns_and_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("target_scenes = 12", "target_scenes = 0").replace("adapt_epochs = 2", "adapt_epochs = 0");
    let (cfg, out) = trained(dir.path(), &text);
    let o = ok(&["label"], &cfg, &out);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
    assert!(read_labels(&out.join("labels.tsv")).unwrap().is_empty());
}

#[test]
fn eval_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path(), TINY);
    let o = ok(&["eval"], &cfg, &out);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mAP") && stdout.contains("baseline"));
    let text = fs::read_to_string(out.join("eval_report.json")).unwrap();
    let report: protosearch::eval::EvalReport = serde_json::from_str(&text).unwrap();
    assert!((0.0..=1.0).contains(&report.map) && (0.0..=1.0).contains(&report.top1));
    assert!(report.queries_evaluated > 0);
    assert_eq!(serde_json::to_string_pretty(&report).unwrap(), text);
}

#[test]
fn missing_checkpoint_or_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let out = dir.path().join("nothing");
    for cmd in ["label", "eval"] {
        let o = run(&[cmd], &cfg, &out);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
    }
    let o = run(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset not found"));
}

#[test]
fn bench_counts_on_small_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let out = dir.path().join("b");
    ok(&["bench", "--sizes", "1,2,50"], &cfg, &out);
    let table = fs::read_to_string(out.join("bench.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("n\t"));
    assert!(lines[1].starts_with("# N=1 skipped"));
    let cols = |l: &str| l.split('\t').map(str::to_owned).collect::<Vec<_>>();
    let two = cols(lines[2]);
    assert_eq!((two[0].as_str(), two[4].as_str()), ("2", "1"));
    let fifty = cols(lines[3]);
    assert_eq!(fifty[1], "70");
    assert_eq!(fifty[2], (50 * 70).to_string());
    assert_eq!(fifty[4], (50 * 49 / 2).to_string());
}
