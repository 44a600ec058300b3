//! The command pipeline driven from code: train a teacher, distil, evaluate, report.

use dcsnet::cli::{cmd_distill, cmd_eval, cmd_report, cmd_train_teacher, RunConfig};
use serde_json::json;

fn main() -> dcsnet::Result<()> {
    let out = std::env::temp_dir().join("dcsnet-pipeline");
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.synth", json!(true)),
        ("data.per_class", json!(30)),
        ("teacher.width", json!(8)),
        ("teacher.depth", json!(1)),
        ("train.epochs", json!(2)),
    ] {
        cfg.set(k, &v).map_err(|e| dcsnet::Error::Config(format!("{k}: {e}")))?;
    }
    cfg.output = out.join("teacher");
    cmd_train_teacher(&cfg)?;

    cfg.teacher.checkpoint = Some(out.join("teacher/teacher.ckpt"));
    cfg.output = out.join("student");
    let (_, row) = cmd_distill(&cfg)?;
    println!("student row: {row:?}");

    cfg.eval.checkpoint = Some(out.join("student/student.ckpt"));
    cfg.output = out.join("eval");
    let (cm, _) = cmd_eval(&cfg)?;
    print!("{}", cm.to_csv());

    cfg.inputs = vec![out.join("student/student_result.csv")];
    cfg.output = out.join("report");
    print!("{}", cmd_report(&cfg)?.summary);
    Ok(())
}
