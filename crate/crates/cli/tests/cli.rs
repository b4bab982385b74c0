use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmcc::data::{binarize_mask, load_netpbm};
use mmcc::metrics::{basic_metrics, confusion_counts, SetMetrics};
use mmcc::training::{load_checkpoint, save_checkpoint, RunSetup, RunSummary};
use tempfile::TempDir;

fn mmcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmcc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mmcc(args);
    assert!(
        out.status.success(),
        "mmcc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir` with its bytes, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Twelve tiny synthetic samples and a one-epoch checkpoint trained on them.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(&[
            "synth",
            "--preset",
            "tiny",
            "--count",
            "12",
            "--seed",
            "3",
            "--out",
            s(&f.path("ds")),
        ]);
        ok(&[
            "train",
            "--preset",
            "tiny",
            "--data",
            s(&f.path("ds")),
            "--epochs",
            "1",
            "--seed",
            "3",
            "--out",
            s(&f.path("run")),
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ckpt(&self) -> PathBuf {
        self.path("run/model.ckpt")
    }
}

#[test]
fn segment_confusion_counts_match_metrics_and_overlay() {
    let f = Fixture::new();
    let image = f.path("ds/images/synth_00004.ppm");
    let mask = f.path("ds/masks/synth_00004.pgm");
    let out = f.path("seg");
    ok(&[
        "segment",
        "--checkpoint",
        s(&f.ckpt()),
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--out",
        s(&out),
    ]);

    let pred = load_netpbm(out.join("mask.pgm")).unwrap();
    let truth = binarize_mask(&load_netpbm(&mask).unwrap());
    assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0), "mask is binary");

    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0.5, t > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let c = confusion_counts(&pred, &truth, 0.5).unwrap();
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
    let m = basic_metrics(&c);
    if tp + fp + fn_ > 0 {
        let dice = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        assert!((m.dice - dice).abs() < 1e-12);
    }

    // Recover each pixel's blend color from the overlay: 2·out − image.
    let img = load_netpbm(&image).unwrap();
    let ov = load_netpbm(out.join("overlay.ppm")).unwrap();
    let hw = pred.numel();
    let mut counts = [0u64; 4];
    for i in 0..hw {
        let rgb: Vec<f32> = (0..3).map(|ch| ov.data()[ch * hw + i]).collect();
        let base: Vec<f32> = (0..3).map(|ch| img.data()[ch * hw + i]).collect();
        if rgb.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1.5 / 255.0) {
            counts[0] += 1;
            continue;
        }
        let color: Vec<bool> = rgb.iter().zip(&base).map(|(o, b)| 2.0 * o - b > 0.5).collect();
        match color.as_slice() {
            [false, true, false] => counts[1] += 1,
            [true, true, false] => counts[2] += 1,
            [true, false, false] => counts[3] += 1,
            other => panic!("pixel {i}: unexpected blend {other:?}"),
        }
    }
    // Background pixels whose image already matches a blend are impossible to
    // tell apart, so compare only the colored classes.
    assert_eq!(counts[1], fn_, "green = missed ground truth");
    assert_eq!(counts[2], tp, "yellow = correct prediction");
    assert_eq!(counts[3], fp, "red = wrong prediction");
}

#[test]
fn segment_probability_and_mask_agree_on_threshold() {
    let f = Fixture::new();
    let out = f.path("seg");
    ok(&[
        "segment",
        "--checkpoint",
        s(&f.ckpt()),
        "--image",
        s(&f.path("ds/images/synth_00001.ppm")),
        "--threshold",
        "0.4",
        "--out",
        s(&out),
    ]);
    let prob = load_netpbm(out.join("probability.pgm")).unwrap();
    let mask = load_netpbm(out.join("mask.pgm")).unwrap();
    for (&p, &m) in prob.data().iter().zip(mask.data()) {
        // The probability PGM is quantized to 1/255.
        if (p - 0.4).abs() > 1.0 / 255.0 {
            assert_eq!(m == 1.0, p > 0.4);
        }
    }
}

fn metrics(dice: f64, hausdorff: f64) -> SetMetrics {
    SetMetrics {
        accuracy: 0.99,
        precision: 0.9,
        recall: 0.8,
        dice,
        iou: dice - 0.05,
        hausdorff,
        auc: Some(0.97),
        images: 61,
    }
}

fn write_summaries(dir: &Path, label: &str, dice: &[f64]) {
    for (i, &d) in dice.iter().enumerate() {
        let run = dir.join(label).join(format!("run_{i:02}"));
        fs::create_dir_all(&run).unwrap();
        let summary = RunSummary {
            label: label.into(),
            setup: RunSetup {
                row: label.into(),
                run: i,
                seed: i as u64,
                ..RunSetup::default()
            },
            metrics: metrics(d, 10.0 + i as f64),
        };
        fs::write(run.join("summary.json"), serde_json::to_vec_pretty(&summary).unwrap()).unwrap();
    }
}

#[test]
fn report_over_ten_runs_uses_mean_sd_ci_cells() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let dice: Vec<f64> = (0..10).map(|i| 0.90 + 0.01 * i as f64).collect();
    write_summaries(&runs, "clinicdb", &dice);
    write_summaries(&runs, "kvasir", &[0.9234]);
    let out = dir.path().join("report");
    let stdout = ok(&["report", "--runs", s(&runs), "--out", s(&out)]).stdout;

    // Sample SD of 90..99 is sqrt(82.5 / 9); t(0.975, 9) = 2.262157.
    let sd = (82.5f64 / 9.0).sqrt();
    let half = 2.262157 * sd / 10f64.sqrt();
    let cell = format!("94.50 ± {sd:.2}, ({:.2}, {:.2})", 94.5 - half, 94.5 + half);
    assert_eq!(cell, "94.50 ± 3.03, (92.33, 96.67)");

    let csv = fs::read_to_string(out.join("table.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    let dice_col = header.iter().position(|h| h == "Dice (%)").unwrap();
    let hdd_col = header.iter().position(|h| h == "HDD (px)").unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "clinicdb");
    assert_eq!(rows[0][dice_col], cell);
    assert!(rows[0][hdd_col].starts_with("14.50 ± 3.03, "));
    assert_eq!(rows[1][0], "kvasir");
    assert_eq!(rows[1][dice_col], "92.34");

    let md = fs::read_to_string(out.join("table.md")).unwrap();
    assert!(md.contains(&cell));
    assert_eq!(String::from_utf8(stdout).unwrap(), md);
}

#[test]
fn report_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    write_summaries(&runs, "a", &[0.81, 0.8337, 0.79]);
    write_summaries(&runs, "b", &[0.7]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["report", "--runs", s(&runs), "--out", s(&a)]);
    ok(&["report", "--runs", s(&runs), "--out", s(&b)]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(tree(&a).len(), 2);
}

#[test]
fn report_without_runs_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&mmcc(&["report", "--runs", s(dir.path()), "--out", s(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = s(&out);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 2, "learning_rate": 0.1}}"#).unwrap();
    let not_json = dir.path().join("not.json");
    fs::write(&not_json, "epochs = 2").unwrap();

    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--preset", "tiny", "--bogus", "--out", o],
        vec!["frobnicate", "--out", o],
        vec!["train", "--preset", "tiny", "--config", s(&bad), "--out", o],
        vec!["train", "--preset", "tiny", "--config", s(&not_json), "--out", o],
        vec!["train", "--preset", "tiny", "--loss", "hinge", "--out", o],
        vec!["train", "--preset", "tiny", "--variant", "network9", "--out", o],
        vec!["train", "--preset", "tiny", "--epochs", "0", "--out", o],
        vec!["experiment", "--preset", "tiny", "--protocol", "kfold7", "--out", o],
    ];
    for args in cases {
        let r = mmcc(&args);
        assert_eq!(code(&r), 1, "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        let stderr = String::from_utf8(r.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{args:?}: one-line message, got {stderr}");
        assert!(!out.exists(), "{args:?} left outputs behind");
    }
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(code(&mmcc(&["--help"])), 0);
    assert_eq!(code(&mmcc(&["--version"])), 0);
    let help = String::from_utf8(mmcc(&["--help"]).stdout).unwrap();
    for cmd in [
        "synth",
        "split",
        "train",
        "eval",
        "segment",
        "gradcam",
        "experiment",
        "report",
    ] {
        assert!(help.contains(cmd), "help lists {cmd}");
    }
}

#[test]
fn data_errors_exit_2() {
    let f = Fixture::new();
    let out = f.path("out");
    let missing = f.path("missing");
    let r = mmcc(&[
        "eval",
        "--preset",
        "tiny",
        "--data",
        s(&missing),
        "--checkpoint",
        s(&f.ckpt()),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);

    let junk = f.path("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let r = mmcc(&[
        "segment",
        "--checkpoint",
        s(&junk),
        "--image",
        s(&f.path("ds/images/synth_00000.ppm")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 2);
    assert!(!out.exists());
}

#[test]
fn nan_weights_abort_training_with_exit_3() {
    let f = Fixture::new();
    let mut trainer = load_checkpoint(f.ckpt(), None).unwrap();
    trainer.model.params_mut()[0].value.data_mut()[0] = f32::NAN;
    let poisoned = f.path("nan.ckpt");
    save_checkpoint(&trainer, &poisoned).unwrap();

    let r = mmcc(&[
        "train",
        "--data",
        s(&f.path("ds")),
        "--resume",
        s(&poisoned),
        "--epochs",
        "2",
        "--out",
        s(&f.path("out")),
    ]);
    let stderr = String::from_utf8(r.stderr.clone()).unwrap();
    assert_eq!(code(&r), 3, "{stderr}");
    assert!(stderr.contains("numeric"), "{stderr}");
    assert!(!f.path("out/model.ckpt").exists());
}

#[test]
fn resume_continues_bit_identically() {
    let f = Fixture::new();
    let args = |epochs: &'static str, out: &Path| -> Vec<String> {
        [
            "train",
            "--preset",
            "tiny",
            "--data",
            s(&f.path("ds")),
            "--epochs",
            epochs,
            "--seed",
            "3",
            "--out",
            s(out),
        ]
        .into_iter()
        .map(String::from)
        .collect()
    };
    let straight = f.path("straight");
    let a = args("3", &straight);
    ok(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let resumed = f.path("resumed");
    ok(&[
        "train",
        "--data",
        s(&f.path("ds")),
        "--split",
        s(&f.path("run/split.txt")),
        "--seed",
        "3",
        "--resume",
        s(&f.ckpt()),
        "--epochs",
        "3",
        "--out",
        s(&resumed),
    ]);
    for file in [
        "model.ckpt",
        "log.csv",
        "metrics.json",
        "per_image.csv",
        "split.txt",
        "config.json",
    ] {
        let same = fs::read(straight.join(file)).unwrap() == fs::read(resumed.join(file)).unwrap();
        assert!(same, "{file} differs");
    }
}

#[test]
fn commands_are_idempotent_and_stay_in_their_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = root.join("ds");
    ok(&[
        "synth",
        "--preset",
        "tiny",
        "--count",
        "10",
        "--difficulty",
        "hard",
        "--out",
        s(&ds),
    ]);
    let before = tree(root);

    let train = |out: &Path| {
        ok(&[
            "train",
            "--preset",
            "tiny",
            "--data",
            s(&ds),
            "--epochs",
            "2",
            "--seed",
            "11",
            "--out",
            s(out),
        ]);
    };
    let (a, b) = (root.join("a"), root.join("b"));
    train(&a);
    train(&b);
    let ta = tree(&a);
    assert_eq!(ta, tree(&b));
    for name in [
        "config.json",
        "log.csv",
        "manifest.txt",
        "metrics.json",
        "model.ckpt",
        "per_image.csv",
        "split.txt",
    ] {
        assert!(ta.contains_key(Path::new(name)), "{name}");
    }
    let log = String::from_utf8(ta[Path::new("log.csv")].clone()).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("epoch,train_loss,val_loss,train_dice,val_dice")
    );
    assert_eq!(log.lines().count(), 3);

    let after = tree(root);
    for (path, bytes) in &after {
        if !(path.starts_with("a") || path.starts_with("b")) {
            assert_eq!(
                before.get(path),
                Some(bytes),
                "{} changed outside the output",
                path.display()
            );
        }
    }
    assert_eq!(before.len() + 2 * ta.len(), after.len());

    let (x, y) = (root.join("x"), root.join("y"));
    ok(&[
        "synth",
        "--preset",
        "tiny",
        "--count",
        "10",
        "--difficulty",
        "hard",
        "--out",
        s(&x),
    ]);
    ok(&[
        "synth",
        "--preset",
        "tiny",
        "--count",
        "10",
        "--difficulty",
        "hard",
        "--out",
        s(&y),
    ]);
    assert_eq!(tree(&x), tree(&y));
    assert_eq!(tree(&x).len(), 21);
}

#[test]
fn overrides_are_echoed_into_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"data": {"synth": {"count": 4}}, "train": {"batch_size": 2}}"#).unwrap();
    let out = dir.path().join("ds");
    ok(&[
        "synth",
        "--preset",
        "tiny",
        "--config",
        s(&cfg),
        "--seed",
        "42",
        "--lr",
        "0.002",
        "--loss",
        "dice",
        "--optimizer",
        "sgd",
        "--variant",
        "network2",
        "--out",
        s(&out),
    ]);
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["data"]["synth"]["count"], 4);
    assert_eq!(echoed["train"]["batch_size"], 2);
    assert_eq!(echoed["train"]["optimizer"]["lr"], 0.002);
    assert_eq!(echoed["train"]["optimizer"]["kind"], "sgd");
    assert_eq!(echoed["train"]["loss"]["kind"], "dice");
    for seed in [
        &echoed["model"]["init_seed"],
        &echoed["train"]["seed"],
        &echoed["data"]["split"]["seed"],
        &echoed["data"]["synth"]["seed"],
        &echoed["experiment"]["seed"],
    ] {
        assert_eq!(seed, 42);
    }
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 4);

    // The echoed configuration is itself a valid input and resolves to itself.
    let again = dir.path().join("again");
    ok(&[
        "synth",
        "--preset",
        "tiny",
        "--config",
        s(&out.join("config.json")),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(out.join("config.json")).unwrap(),
        fs::read(again.join("config.json")).unwrap()
    );
}

#[test]
fn split_eval_and_gradcam_round_trip() {
    let f = Fixture::new();
    let sp = f.path("sp");
    let stdout = ok(&[
        "split",
        "--preset",
        "tiny",
        "--data",
        s(&f.path("ds")),
        "--kind",
        "kfold",
        "--folds",
        "3",
        "--out",
        s(&sp),
    ])
    .stdout;
    assert!(String::from_utf8(stdout).unwrap().starts_with("12 ids"));
    let text = fs::read_to_string(sp.join("split.txt")).unwrap();
    for k in 0..3 {
        assert_eq!(text.lines().filter(|l| l.ends_with(&format!("fold-{k}"))).count(), 4);
    }

    let ev = f.path("ev");
    ok(&[
        "eval",
        "--preset",
        "tiny",
        "--data",
        s(&f.path("ds")),
        "--checkpoint",
        s(&f.ckpt()),
        "--split",
        s(&sp.join("split.txt")),
        "--role",
        "fold-1",
        "--out",
        s(&ev),
    ]);
    let per_image = fs::read_to_string(ev.join("per_image.csv")).unwrap();
    assert_eq!(per_image.lines().count(), 5);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    let mean_dice = report["mean"]["dice"].as_f64().unwrap();
    let mut reader = csv::Reader::from_reader(per_image.as_bytes());
    let col = reader.headers().unwrap().iter().position(|h| h == "dice").unwrap();
    let dice: Vec<f64> = reader.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert!((dice.iter().sum::<f64>() / 4.0 - mean_dice).abs() < 1e-12);

    let gc = f.path("gc");
    ok(&[
        "gradcam",
        "--checkpoint",
        s(&f.ckpt()),
        "--image",
        s(&f.path("ds/images/synth_00002.ppm")),
        "--layer",
        "stage_b",
        "--out",
        s(&gc),
    ]);
    let heat = load_netpbm(gc.join("gradcam_stage_b.pgm")).unwrap();
    let image = load_netpbm(f.path("ds/images/synth_00002.ppm")).unwrap();
    assert_eq!(heat.shape()[1..], image.shape()[1..]);
    assert!(heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn experiment_tables_are_reproduced_by_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"data": {"synth": {"count": 10}}, "train": {"epochs": 1, "batch_size": 4},
            "experiment": {"runs": 3}}"#,
    )
    .unwrap();
    let out = dir.path().join("exp");
    ok(&[
        "experiment",
        "--preset",
        "tiny",
        "--config",
        s(&cfg),
        "--protocol",
        "multirun10",
        "--out",
        s(&out),
    ]);
    let summaries = fs::read_dir(out.join("runs")).unwrap().count();
    assert_eq!(summaries, 1);
    let rep = dir.path().join("rep");
    ok(&["report", "--runs", s(&out.join("runs")), "--out", s(&rep)]);
    assert_eq!(
        fs::read(out.join("table.md")).unwrap(),
        fs::read(rep.join("table.md")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("table.csv")).unwrap(),
        fs::read(rep.join("table.csv")).unwrap()
    );
    let md = fs::read_to_string(rep.join("table.md")).unwrap();
    assert!(md.contains(" ± "), "{md}");
}
