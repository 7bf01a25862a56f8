use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
d = 16
heads = 2
ffn = 32
adapter_hidden = 16
max_seq_len = 20
batch_size = 16
epochs = 2
patience = 5
lr = 0.003
prototypes = 4
eval_ks = 1,10
synth_users = 30
synth_items = 20
synth_dim = 8
";

fn mmrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .args(args)
        .current_dir(dir)
        .env_remove("MMREC_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status.code());
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes the config and a synthetic domain under `dir/data`.
fn setup(dir: &Path) {
    fs::write(dir.join("run.cfg"), format!("{SMALL}data_dir = data\n")).unwrap();
    ok(&mmrec(dir, &["-c", "run.cfg", "--out-dir", "data", "gen-synth"]));
}

#[test]
fn unknown_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmrec(dir.path(), &["--set", "embedding_size=8", "pretrain"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("embedding_size"), "{err}");

    fs::write(dir.path().join("bad.cfg"), "d = 16\nwarmup = 3\n").unwrap();
    let out = mmrec(dir.path(), &["-c", "bad.cfg", "pretrain"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warmup") && err.contains("bad.cfg:2"), "{err}");
}

#[test]
fn pretrain_then_finetune_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for f in ["catalog.tsv", "text.mmf", "visual.mmf", "interactions.tsv"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", "pre", "pretrain"]));
    assert!(d.join("pre/pretrain.ckpt").exists());
    let log = fs::read_to_string(d.join("pre/pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,"));

    for mode in ["inductive", "transductive"] {
        let out_dir = format!("ft_{mode}");
        let stdout = ok(&mmrec(
            d,
            &["-c", "run.cfg", "--out-dir", &out_dir, "-s", "checkpoint=pre/pretrain.ckpt", "finetune", "--mode", mode],
        ));
        assert!(stdout.contains("test R@10="), "{stdout}");
        let results = fs::read_to_string(d.join(&out_dir).join("results.csv")).unwrap();
        assert!(results.contains("R@10"), "{results}");
        assert!(d.join(&out_dir).join("finetune.ckpt").exists());
    }

    let stdout = ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", "ev", "-s", "checkpoint=ft_transductive/finetune.ckpt", "eval"]));
    assert!(stdout.contains("test R@1="), "{stdout}");
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for out in ["a", "b"] {
        ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", out, "-s", "threads=3", "pretrain"]));
        let ck = format!("checkpoint={out}/pretrain.ckpt");
        ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", out, "-s", &ck, "-s", "threads=2", "finetune"]));
    }
    for f in ["pretrain.ckpt", "finetune.ckpt", "results.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn untrained_model_ranks_near_random() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.cfg"),
        format!("{SMALL}data_dir = data\nsynth_users = 300\nsynth_items = 100\neval_ks = 10\n"),
    )
    .unwrap();
    ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", "data", "gen-synth"]));
    let stdout = ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", "ev", "eval"]));
    let r10: f64 = stdout
        .split("R@10=")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    // 300 users, p = 0.1: 4 standard deviations is about 0.07.
    assert!((r10 - 0.1).abs() < 0.07, "{r10}");
}

#[test]
fn cluster_debug_lists_every_token() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&mmrec(d, &["-c", "run.cfg", "--out-dir", "dbg", "cluster-debug"]));
    let text = fs::read_to_string(d.join("dbg/clusters.tsv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("item_id\tmodality\tprototype"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    let images = fs::read_to_string(d.join("data/catalog.tsv")).unwrap().lines().filter(|l| l.ends_with("\t1")).count();
    assert_eq!(rows.len(), 20 + images);
    assert!(rows.iter().all(|r| r.len() == 3 && r[2].parse::<usize>().unwrap() < 4));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .args(["-s", "synth_users=10", "-s", "synth_items=8", "gen-synth"])
        .current_dir(d)
        .env("MMREC_OUT_DIR", d.join("from_env"))
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("from_env/catalog.tsv").exists());
}
