use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sslus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslus"))
        .args(args)
        .env_remove("SSLUS_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(root: &Path, count: usize) -> PathBuf {
    let out = root.join("data");
    let o = sslus(&[
        "make-synthetic",
        "--output",
        s(&out),
        "--count",
        &count.to_string(),
        "--size",
        "40",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("manifest.csv")
}

fn write(root: &Path, name: &str, body: &str) -> PathBuf {
    let p = root.join(name);
    fs::write(&p, body).unwrap();
    p
}

const PRETEXT: &str =
    r#"{"epochs": 1, "batch_size": 4, "negatives_per_anchor": 3, "image_size": 48}"#;
const FINETUNE: &str =
    r#"{"epochs": 2, "warmup": 1, "patience": 1, "batch_size": 4, "image_size": 32}"#;

#[test]
fn make_synthetic_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 10);
    let ds = sslus::manifest::Dataset::open(&m).unwrap();
    assert_eq!(ds.manifest.split_counts(), (7, 1, 2));
    assert_eq!(
        fs::read_dir(dir.path().join("data/images"))
            .unwrap()
            .count(),
        10
    );
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 10);
    let out = dir.path().join("o");
    assert_eq!(code(&sslus(&["pretext-train"])), 2);
    assert_eq!(code(&sslus(&["no-such-command"])), 2);
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&m),
        "--config",
        "/nonexistent/cfg.json",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let bad = write(
        dir.path(),
        "bad.json",
        r#"{"epochs": 1, "learning_rate": 3}"#,
    );
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&m),
        "--config",
        s(&bad),
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&m),
        "--method",
        "rcl_percep",
        "--lambda",
        "1.5",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&m),
        "--method",
        "simclr",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    // nothing was started, so nothing was written
    assert!(!out.exists());
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&dir.path().join("none.csv")),
        "--output",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    let o = sslus(&[
        "augment-preview",
        "--image",
        s(&dir.path().join("none.png")),
        "--random",
        "1",
        "--output",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pretext_finetune_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let m = synthetic(root, 20);
    let pcfg = write(root, "p.json", PRETEXT);
    let fcfg = write(root, "f.json", FINETUNE);

    let pre = root.join("pre");
    let o = sslus(&[
        "pretext-train",
        "--manifest",
        s(&m),
        "--config",
        s(&pcfg),
        "--profile",
        "desk",
        "--method",
        "rcl_percep",
        "--lambda",
        "0.1",
        "--output",
        s(&pre),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = pre.join("pretext.ckpt");
    assert!(ckpt.is_file());
    let loss = fs::read_to_string(pre.join("loss.csv")).unwrap();
    assert!(loss.lines().count() > 1);
    let snap = sslus::checkpoint::load_pretext(&ckpt).unwrap();
    assert_eq!(snap.config.lambda, Some(0.1));
    assert_eq!(snap.config.epochs, 1);

    // refuses to clobber, then accepts --overwrite
    let again = [
        "pretext-train",
        "--manifest",
        s(&m),
        "--config",
        s(&pcfg),
        "--output",
        s(&pre),
    ];
    assert_eq!(code(&sslus(&again)), 2);
    let mut with = again.to_vec();
    with.push("--overwrite");
    assert_eq!(code(&sslus(&with)), 0);

    let ft = root.join("ft");
    let o = sslus(&[
        "finetune",
        "--manifest",
        s(&m),
        "--config",
        s(&fcfg),
        "--init",
        s(&ckpt),
        "--fraction",
        "0.2",
        "--output",
        s(&ft),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // 14 train images at 20%
    assert!(stderr(&o).contains("training on 2 of 14"), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(ft.join("finetune.json")).unwrap()).unwrap();
    assert_eq!(summary["train_count"], 2);
    assert!(fs::read_to_string(ft.join("val_curve.csv"))
        .unwrap()
        .starts_with("epoch,lr,train_loss,val_dsc"));

    let scratch = root.join("scratch");
    let o = sslus(&[
        "finetune",
        "--manifest",
        s(&m),
        "--config",
        s(&fcfg),
        "--output",
        s(&scratch),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("supervised baseline"));

    let ev = root.join("ev");
    let o = sslus(&[
        "evaluate",
        "--manifest",
        s(&m),
        "--model",
        s(&ft.join("model.ckpt")),
        "--overlays",
        "--output",
        s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("id,dsc,jc,hd,ppv,rec"));
    // 4 test images, then mean and sd
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
    assert_eq!(fs::read_dir(ev.join("overlays")).unwrap().count(), 4);
    assert!(ev.join("metrics.json").is_file());
}

#[test]
fn augment_preview_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 4);
    let img = m.parent().unwrap().join("images/synth_0000.png");
    assert!(img.is_file());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = sslus(&[
            "augment-preview",
            "--image",
            s(&img),
            "--filter",
            "inner=20,outer=30,x=2",
            "--random",
            "2",
            "--output",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
    };
    let a = run("a");
    let b = run("b");
    let names = |v: &[PathBuf]| {
        v.iter()
            .map(|p| p.file_name().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    assert_eq!(names(&a), names(&b));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
    let count = |prefix: &str| {
        a.iter()
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
            .count()
    };
    // one original plus three filter pairs
    assert_eq!(count("original"), 1);
    assert_eq!(count("filtered_"), 3);
    assert_eq!(count("spectrum_"), 3);
    assert_eq!(count("crosspatch_"), 3);

    let o = sslus(&[
        "augment-preview",
        "--image",
        s(&img),
        "--filter",
        "inner=5",
        "--output",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_lambda_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let m = synthetic(root, 12);
    let cfg = write(
        root,
        "a.json",
        &format!(r#"{{"pretext": {PRETEXT}, "finetune": {FINETUNE}}}"#),
    );
    let o = sslus(&[
        "ablate-lambda",
        "--manifest",
        s(&m),
        "--config",
        s(&cfg),
        "--method",
        "rcl_percep",
        "--lambdas",
        "0.1,2",
        "--output",
        s(&root.join("bad")),
    ]);
    assert_eq!(code(&o), 2);

    let out = root.join("ab");
    let o = sslus(&[
        "ablate-lambda",
        "--manifest",
        s(&m),
        "--config",
        s(&cfg),
        "--method",
        "rcl_percep",
        "--finetune-epochs",
        "1",
        "--output",
        s(&root.join("short")),
    ]);
    // warmup 1 needs at least 2 epochs
    assert_eq!(code(&o), 2);
    let o = sslus(&[
        "ablate-lambda",
        "--manifest",
        s(&m),
        "--config",
        s(&cfg),
        "--method",
        "rcl_percep",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,lambda,dsc");
    assert_eq!(lines.len(), 5);
    for (line, l) in lines[1..].iter().zip(["0.1", "0.25", "0.5", "0.75"]) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[0], f[1]), ("rcl_percep", l));
        let d: f64 = f[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn output_dir_defaults_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sslus"))
        .args(["make-synthetic", "--count", "3", "--size", "32"])
        .env("SSLUS_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("make-synthetic/manifest.csv").is_file());
}
