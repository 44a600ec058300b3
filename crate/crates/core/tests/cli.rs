//! The `dcsnet` binary end to end on tiny synthetic runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dcsnet::cli::{merge_results, report_order, ExplainIndex, MetricsFile};
use dcsnet::data::ppm::{read_ppm, write_ppm, RgbImage};
use dcsnet::metrics::{metrics, read_result_rows, write_result_rows, Averaging, ConfusionMatrix, ResultRow, RESULT_COLUMNS};

const TINY: &[&str] = &["--synth", "--per-class", "24", "--width", "8", "--depth", "1", "--epochs", "2"];

fn dcsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcsnet"))
        .args(args)
        .env_remove("DCSNET_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One tiny teacher shared by the tests that only read it.
fn teacher() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let mut args = vec!["train-teacher", "--out", s(&dir)];
        args.extend_from_slice(TINY);
        let o = dcsnet(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    })
}

#[test]
fn help_lists_every_command() {
    let o = dcsnet(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["train-teacher", "distill", "sweep", "eval", "explain", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_teacher_outputs_and_determinism() {
    let dir = teacher();
    let history = fs::read_to_string(dir.join("teacher_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2);
    assert!(dir.join("teacher.ckpt").is_file());
    let again = tempfile::tempdir().unwrap();
    let mut args = vec!["train-teacher", "--out", s(again.path())];
    args.extend_from_slice(TINY);
    assert_eq!(code(&dcsnet(&args)), 0);
    for f in ["teacher_metrics.json", "teacher.ckpt", "teacher_history.csv"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_has_no_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = dcsnet(&["distill", "--synth", "--alpha", "2", "--epochs", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    for needle in ["distill.alpha", "train.epochs", "teacher.checkpoint"] {
        assert!(err.contains(needle), "{needle} not reported: {err}");
    }
    assert!(!out.exists());
    let o = dcsnet(&["train-teacher", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "no data source");
    let o = dcsnet(&["sweep", "--synth", "--teacher", "t.ckpt", "--coarse", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 2, "zero budget");
    assert!(!out.exists());
}

#[test]
fn exit_codes_for_data_and_format_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = dcsnet(&["distill", "--synth", "--teacher", s(&tmp.path().join("missing.ckpt")), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"DKDC\x01\x00\x00\x00garbage").unwrap();
    let o = dcsnet(&["eval", "--synth", "--checkpoint", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let ck = teacher().join("teacher.ckpt");
    let o = dcsnet(&["eval", "--data", s(&tmp.path().join("nope")), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let csv = tmp.path().join("r.csv");
    fs::write(&csv, format!("{}\nx|y,1,0.3,10,0.9,0.9,0.9\n", RESULT_COLUMNS.join(","))).unwrap();
    let o = dcsnet(&["report", s(&csv), "--out", s(&out)]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn class_count_mismatch_is_a_contract_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = teacher().join("teacher.ckpt");
    let o = dcsnet(&["eval", "--synth", "--classes", "4", "--per-class", "24", "--checkpoint", s(&ck), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn distill_row_and_eval_consistency() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = teacher().join("teacher.ckpt");
    let o = dcsnet(&["distill", "--synth", "--per-class", "24", "--teacher", s(&ck), "--epochs", "1", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row = fs::read_to_string(tmp.path().join("student_result.csv")).unwrap();
    let lines: Vec<&str> = row.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], RESULT_COLUMNS.join(","));
    assert_eq!(lines[1].split(',').count(), 8);
    let parsed = read_result_rows(&row).unwrap();
    assert_eq!((parsed[0].alpha, parsed[0].temperature), (0.3, 10.0));
    assert_eq!(parsed[0].model, "DCSNet-mini|residual");

    let ev = tmp.path().join("eval");
    let student = tmp.path().join("student.ckpt");
    let o = dcsnet(&["eval", "--synth", "--per-class", "24", "--checkpoint", s(&student), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cm = ConfusionMatrix::from_csv(&fs::read_to_string(ev.join("eval_confusion.csv")).unwrap()).unwrap();
    // 24 per class split 16/4/4.
    for row in &cm.counts {
        assert_eq!(row.iter().sum::<u64>(), 4);
    }
    let file: MetricsFile = serde_json::from_str(&fs::read_to_string(ev.join("eval_metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics(&cm, Averaging::Macro).unwrap(), file.report);
    assert_eq!(file.report.false_negatives.len(), 3);
    assert_eq!(file.split, "test");
}

#[test]
fn explain_writes_one_overlay_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = teacher().join("teacher.ckpt");
    let o = dcsnet(&["explain", "--synth", "--per-class", "24", "--checkpoint", s(&ck), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index: ExplainIndex = serde_json::from_str(&fs::read_to_string(tmp.path().join("explain_index.json")).unwrap()).unwrap();
    assert_eq!(index.entries.len(), 12);
    assert_eq!(fs::read_dir(tmp.path().join("overlays")).unwrap().count(), 12);
    for e in &index.entries {
        let img = read_ppm(tmp.path().join(&e.heatmap)).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
        assert!(e.region_mass.is_some() && e.localization_hit.is_some());
    }
    let o = dcsnet(&["explain", "--synth", "--checkpoint", s(&ck), "--layer", "dense1", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn explain_unlabelled_folder_keeps_image_size() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    for (i, (w, h)) in [(40, 30), (32, 32)].into_iter().enumerate() {
        let px = (0..w * h * 3).map(|v| (v * 7 % 256) as u8).collect();
        write_ppm(imgs.join(format!("{i}.ppm")), &RgbImage::new(w, h, px).unwrap()).unwrap();
    }
    let ck = teacher().join("teacher.ckpt");
    let out = tmp.path().join("out");
    let o = dcsnet(&["explain", "--images", s(&imgs), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = read_ppm(out.join("overlays/0000.ppm")).unwrap();
    assert_eq!((first.width, first.height), (40, 30));
}

#[test]
fn image_folder_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    for (c, name) in ["bright", "dark"].iter().enumerate() {
        let d = data.join(name);
        fs::create_dir_all(&d).unwrap();
        for i in 0..10 {
            let v = if c == 0 { 200 + i as u8 } else { 20 + i as u8 };
            write_ppm(d.join(format!("{i}.ppm")), &RgbImage::new(20, 20, vec![v; 20 * 20 * 3]).unwrap()).unwrap();
        }
    }
    let out = tmp.path().join("out");
    let o = dcsnet(&[
        "train-teacher", "--data", s(&data), "--image-size", "16", "--width", "4", "--depth", "1", "--epochs", "1", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let file: MetricsFile = serde_json::from_str(&fs::read_to_string(out.join("teacher_metrics.json")).unwrap()).unwrap();
    assert_eq!(file.class_names, vec!["bright", "dark"]);
    assert_eq!(file.report.total, 2, "80/10/10 of 10 per class");
}

#[test]
fn config_file_and_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"data.synth": true, "data.per_class": 24, "teacher": {"width": 4, "depth": 1}, "train.epochs": 3}"#).unwrap();
    let root = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_dcsnet"))
        .args(["train-teacher", "--config", s(&cfg), "--epochs", "1"])
        .env("DCSNET_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(root.join("teacher_history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "flag overrides the file");
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("train-teacher_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["teacher"]["width"], 4);
}

fn row(model: &str, alpha: f64, t: f64, acc: f64, f1: f64) -> ResultRow {
    ResultRow {
        model: model.into(),
        parameters: 10,
        alpha,
        temperature: t,
        accuracy: acc,
        precision: f1,
        recall: f1,
        f1,
    }
}

#[test]
fn report_merges_sorts_and_picks_best() {
    let tmp = tempfile::tempdir().unwrap();
    let a = vec![row("s|a", 0.3, 10.0, 0.9, 0.8), row("s|a", 0.1, 50.0, 0.95, 0.9), row("s|a", 0.2, 5.0, 0.9, 0.85)];
    let b = vec![row("s|b", 0.4, 40.0, 0.95, 0.94), row("s|b", 0.5, 3.0, 0.7, 0.7)];
    let (pa, pb) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    fs::write(&pa, write_result_rows(&a).unwrap()).unwrap();
    fs::write(&pb, write_result_rows(&b).unwrap()).unwrap();
    let out = tmp.path().join("out");
    let o = dcsnet(&["report", s(&pa), s(&pb), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let merged = read_result_rows(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(merged.len(), a.len() + b.len());
    for w in merged.windows(2) {
        assert!(w[0].accuracy > w[1].accuracy || (w[0].accuracy == w[1].accuracy && w[0].f1 >= w[1].f1));
    }
    // Independent scan for the best row.
    let all: Vec<&ResultRow> = a.iter().chain(&b).collect();
    let mut best = all[0];
    for r in &all {
        if report_order(r, best).is_lt() {
            best = r;
        }
    }
    assert_eq!(&merged[0], best);
    assert_eq!((best.model.as_str(), best.alpha, best.temperature), ("s|b", 0.4, 40.0));
    let summary = fs::read_to_string(out.join("report_summary.txt")).unwrap();
    assert!(summary.contains("teacher b") && summary.contains("alpha 0.4") && summary.contains("T 40"), "{summary}");
    let direct = merge_results(&[("a".into(), fs::read_to_string(&pa).unwrap())]).unwrap();
    assert_eq!(direct.rows.len(), 3);
}
