use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tbigan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbigan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.txt");
    fs::write(
        &path,
        "# tiny synthetic run\n\
         synthetic.per_class = 20\n\
         train.batch_size = 16\n\
         train.warmup_epochs = 1\n\
         train.epochs = 2\n\
         train.eval_triplets = 100\n",
    )
    .unwrap();
    path.display().to_string()
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.display().to_string();
    let mut args = vec!["train", "--config", cfg, "--dataset", "synthetic", "--m", "16", "--n-per-class", "5", "--deterministic", "--out", &out];
    args.extend_from_slice(extra);
    tbigan(&args)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_embed_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&train(&cfg, &run, &["--model", "triplet-bigan"]));
    for f in ["config.txt", "metrics.jsonl", "checkpoints/latest.ckpt", "checkpoints/epoch_0002.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(!run.join(".lock").exists());
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("model.m = 16") && resolved.contains("train.lambda = 1.0"));

    let run_s = run.display().to_string();
    ok(&tbigan(&["eval", "--checkpoint", &run_s]));
    let first = fs::read_to_string(run.join("report.json")).unwrap();
    assert!(first.contains("\"accuracy\"") && first.contains("\"map\""));
    assert!(fs::read_to_string(run.join("report.txt")).unwrap().contains("mAP"));
    ok(&tbigan(&["eval", "--checkpoint", &run_s]));
    assert_eq!(fs::read_to_string(run.join("report.json")).unwrap(), first);

    let other = tmp.path().join("uniform");
    ok(&tbigan(&["eval", "--checkpoint", &run_s, "--knn-weight", "uniform", "--out", &other.display().to_string()]));
    assert!(fs::read_to_string(other.join("report.json")).unwrap().contains("\"knn_weight\": \"uniform\""));
    assert!(first.contains("\"knn_weight\": \"inverse\""));

    ok(&tbigan(&["embed", "--checkpoint", &run_s]));
    let emb = fs::read_to_string(run.join("embeddings.tsv")).unwrap();
    assert!(emb.starts_with("m=16\tcount=15\n"));
    assert_eq!(emb.lines().count(), 16);

    ok(&tbigan(&["retrieve-grid", "--checkpoint", &run_s]));
    let png = fs::read(run.join("retrieval_grid.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let report = tbigan(&["report", &run_s]);
    ok(&report);
    assert!(String::from_utf8_lossy(&report.stdout).contains("triplet-bigan"));
}

#[test]
fn same_seed_reproduces_the_metrics_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&train(&cfg, &a, &["--seed", "4"]));
    ok(&train(&cfg, &b, &["--seed", "4"]));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("config.txt")).unwrap().len(), fs::read(b.join("config.txt")).unwrap().len());
}

#[test]
fn resume_continues_and_rejects_architecture_changes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&train(&cfg, &run, &[]));
    let ckpt = run.join("checkpoints/latest.ckpt").display().to_string();
    let more = tbigan(&["train", "--resume", &ckpt, "--epochs", "3"]);
    ok(&more);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 3);
    let changed = tbigan(&["train", "--resume", &ckpt, "--m", "32"]);
    assert_eq!(changed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&changed.stderr).contains("model.m"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("x");

    let conflict = train(&cfg, &out, &["--model", "bigan", "--lambda", "0.5"]);
    assert_eq!(conflict.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&conflict.stderr).contains("lambda"));

    assert_eq!(tbigan(&["train", "--epochs", "zero"]).status.code(), Some(2));
    assert_eq!(train(&cfg, &out, &["--batch-size", "0"]).status.code(), Some(2));

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let root = empty.display().to_string();
    let missing_data = tbigan(&["train", "--dataset", "cifar10", "--data-root", &root, "--out", &out.display().to_string()]);
    assert_eq!(missing_data.status.code(), Some(3));

    let missing = tmp.path().join("nope.ckpt").display().to_string();
    let no_ckpt = tbigan(&["eval", "--checkpoint", &missing]);
    assert_eq!(no_ckpt.status.code(), Some(2));

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"TBGNCKPT but not really").unwrap();
    let corrupt = tbigan(&["eval", "--checkpoint", &junk.display().to_string()]);
    assert_eq!(corrupt.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("corrupt"));
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "1").unwrap();
    let o = train(&cfg, &run, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in use"));
}

#[test]
fn sweep_aggregates_and_skips_finished_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("sweep").display().to_string();
    let args = ["sweep", "--config", &cfg, "--deterministic", "--models", "bigan,triplet-bigan", "--ms", "8,16", "--ns", "5", "--out", &out];
    let first = tbigan(&args);
    ok(&first);
    let table = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(table.contains("m=8") && table.contains("m=16"));
    assert!(table.contains("bigan") && table.contains("triplet-bigan"));
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 4);
    let again = tbigan(&args);
    ok(&again);
    assert_eq!(String::from_utf8_lossy(&again.stdout), table);
}
