//! Train a small residual teacher on synthetic data and round-trip its checkpoint.

use dcsnet::data::{synth_split, SynthSpec};
use dcsnet::models::{build_teacher, load_checkpoint, save_checkpoint, CheckpointMeta, TeacherArchetype, TeacherConfig};
use dcsnet::train::{evaluate_metrics, train_teacher, TrainConfig};
use dcsnet::metrics::Averaging;

fn main() -> dcsnet::Result<()> {
    let (data, _) = synth_split(&SynthSpec { per_class: 60, ..SynthSpec::default() })?;
    let model = build_teacher(TeacherArchetype::Residual, TeacherConfig { width: 16, depth: 2 }, [3, 32, 32], 3, 0)?;
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let (model, history) = train_teacher(model, &data, &cfg)?;
    print!("{}", history.to_csv());
    let (cm, report) = evaluate_metrics(&model, &data.test, &data.class_names, Averaging::Macro)?;
    print!("{}", cm.to_csv());
    println!("test accuracy {:.3}, macro F1 {:.3}", report.accuracy, report.f1);

    let path = std::env::temp_dir().join("dcsnet-teacher.ckpt");
    let meta = CheckpointMeta { epoch: history.best_epoch, seed: cfg.seed, metrics: [("test_accuracy".into(), report.accuracy)].into() };
    save_checkpoint(&model, &meta, &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back.model.params(), model.params());
    println!("checkpoint {} reloaded, best epoch {}", path.display(), back.meta.epoch);
    Ok(())
}
