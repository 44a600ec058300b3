//! Distil a trained teacher into DCSNet-mini and compare with a label-only student.

use dcsnet::data::{synth_split, SynthSpec};
use dcsnet::distill::DistillConfig;
use dcsnet::metrics::Averaging;
use dcsnet::models::{build_dcsnet, build_teacher, TeacherArchetype, TeacherConfig};
use dcsnet::train::{distill_student, evaluate_metrics, train_teacher, TrainConfig};

fn main() -> dcsnet::Result<()> {
    let (data, _) = synth_split(&SynthSpec { per_class: 60, ..SynthSpec::default() })?;
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let teacher = build_teacher(TeacherArchetype::Residual, TeacherConfig { width: 16, depth: 2 }, [3, 32, 32], 3, 0)?;
    let (teacher, _) = train_teacher(teacher, &data, &cfg)?;

    for alpha in [0.3, 1.0] {
        let dcfg = DistillConfig { alpha, ..DistillConfig::default() };
        let student = build_dcsnet([3, 32, 32], 3, cfg.seed)?;
        let (student, history) = distill_student(&teacher, student, &data, &dcfg, &cfg)?;
        let (_, report) = evaluate_metrics(&student, &data.test, &data.class_names, Averaging::Macro)?;
        println!(
            "alpha {alpha} T {}: best epoch {}, test accuracy {:.3}",
            dcfg.temperature, history.best_epoch, report.accuracy
        );
    }
    Ok(())
}
