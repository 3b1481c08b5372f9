use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn csgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const TRAIN: &str = "\
network.topology = plain
network.widths = 8, 8
optimizer.mode = csgd-direct
optimizer.lr = 0.05
optimizer.centripetal = 3
cluster.counts = 1/2
data.samples = 80
run.epochs = 40
run.batch_size = 16
";

#[test]
fn train_trim_verify_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), TRAIN);
    let o = csgd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let model = out.join("model.csgd");
    let clusters = out.join("clusters.txt");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,iteration,loss,train_acc,eval_acc,chi,phi,tau"));
    assert_eq!(metrics.lines().count(), 41);

    let trimmed = dir.path().join("trimmed.csgd");
    let o = csgd(&[
        "trim",
        "--model",
        model.to_str().unwrap(),
        "--clusters",
        clusters.to_str().unwrap(),
        "--out",
        trimmed.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"widths_after\": [4, 4]"));

    let o = csgd(&[
        "verify",
        "--original",
        model.to_str().unwrap(),
        "--trimmed",
        trimmed.to_str().unwrap(),
        "--samples",
        "50",
        "--tol",
        "1e-4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"passed\": true"));

    let o = csgd(&["metrics", "--model", model.to_str().unwrap(), "--clusters", clusters.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let chi: f64 = String::from_utf8_lossy(&o.stdout)
        .trim()
        .strip_prefix("chi ")
        .unwrap()
        .parse()
        .unwrap();
    assert!(chi < 1e-10, "chi {chi}");

    let pruned = dir.path().join("pruned.csgd");
    let o = csgd(&[
        "prune-magnitude",
        "--model",
        model.to_str().unwrap(),
        "--counts",
        "5/8",
        "--out",
        pruned.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = csgd(&[
        "verify",
        "--original",
        model.to_str().unwrap(),
        "--trimmed",
        pruned.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.starts_with("error: verification failed"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn untrained_model_refuses_verified_trim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TRAIN.replace("run.epochs = 40", "run.epochs = 0"));
    let out = dir.path().join("run");
    assert!(csgd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let model = out.join("model.csgd");
    let o = csgd(&[
        "trim",
        "--model",
        model.to_str().unwrap(),
        "--clusters",
        out.join("clusters.txt").to_str().unwrap(),
        "--out",
        dir.path().join("t.csgd").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not identical"), "{}", stderr(&o));
}

#[test]
fn cluster_counts_beyond_width_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TRAIN.replace("run.epochs = 40", "run.epochs = 0"));
    let out = dir.path().join("run");
    assert!(csgd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let model = out.join("model.csgd");
    let manifest = dir.path().join("c.txt");
    let o = csgd(&[
        "cluster",
        "--model",
        model.to_str().unwrap(),
        "--counts",
        "0:9",
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));

    let o = csgd(&[
        "cluster",
        "--model",
        model.to_str().unwrap(),
        "--method",
        "kmeans",
        "--counts",
        "0:3,1:5",
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(text.lines().next().unwrap().matches('[').count(), 3);
}

#[test]
fn corrupt_model_and_bad_config_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TRAIN.replace("run.epochs = 40", "run.epochs = 0"));
    let out = dir.path().join("run");
    assert!(csgd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let model = out.join("model.csgd");
    let mut bytes = fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    let o = csgd(&["verify", "--original", model.to_str().unwrap(), "--trimmed", model.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let bad = write_config(dir.path(), "optimizer.centripetal = -2\n");
    let o = csgd(&["train", "--config", &bad]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("optimizer.centripetal"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_small_net() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "network.topology = plain\nnetwork.widths = 3, 4\ndata.size = 6\ndata.samples = 8\nrun.precision = f64\n",
    );
    let o = csgd(&["gradcheck", "--config", &cfg, "--per-tensor", "0", "--batch", "2"]);
    assert!(o.status.success(), "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}
