//! Seeded random search over alpha and temperature, coarse then fine.

use dcsnet::cli::{run_sweep, SweepConfig};
use dcsnet::data::{synth_split, SynthSpec};
use dcsnet::distill::DistillConfig;
use dcsnet::metrics::Averaging;
use dcsnet::models::{build_teacher, TeacherArchetype, TeacherConfig};
use dcsnet::train::{train_teacher, TrainConfig};

fn main() -> dcsnet::Result<()> {
    let (data, _) = synth_split(&SynthSpec { per_class: 30, ..SynthSpec::default() })?;
    let teacher = build_teacher(TeacherArchetype::Residual, TeacherConfig { width: 8, depth: 1 }, [3, 32, 32], 3, 0)?;
    let (teacher, _) = train_teacher(teacher, &data, &TrainConfig { epochs: 3, ..TrainConfig::default() })?;
    let plan = SweepConfig { coarse: 3, fine: 2, alphas: vec![0.1, 0.5], radius: 10 };
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let result = run_sweep(&teacher, &data, &plan, &DistillConfig::default(), &train, Averaging::Macro)?;
    for t in &result.trials {
        println!("{:>2} {:<6} alpha {:.1} T {:>3} accuracy {:.3}", t.index, t.phase, t.alpha, t.temperature, t.row.accuracy);
    }
    let best = &result.trials[result.best];
    println!("best: alpha {} T {}", best.alpha, best.temperature);
    Ok(())
}
