//! Layer shapes and parameter counts of DCSNet and the teacher archetypes.

use dcsnet::models::{build_dcsnet, build_teacher, TeacherArchetype, TeacherConfig};

fn main() -> dcsnet::Result<()> {
    let net = build_dcsnet::<f32>([3, 224, 224], 3, 0)?;
    println!("{}: {} parameters", net.name(), net.param_count());
    for (name, shape) in net.layer_shapes() {
        println!("  {name:<12} {shape:?}");
    }
    let mini = build_dcsnet::<f32>([3, 32, 32], 3, 0)?;
    println!("{}: {} parameters", mini.name(), mini.param_count());
    for arch in [TeacherArchetype::Residual, TeacherArchetype::SiluNet] {
        let t = build_teacher::<f32>(arch, TeacherConfig::default_for(arch), [3, 32, 32], 3, 0)?;
        println!("teacher {}: {} parameters, capture {}", arch.id(), t.param_count(), t.default_capture());
    }
    Ok(())
}
