//! Grad-CAM heatmaps for a small trained teacher, written as PPM overlays.

use dcsnet::data::{synth_split, SynthSpec};
use dcsnet::explain::{grad_cam, render_overlay, upsample};
use dcsnet::models::{build_teacher, TeacherArchetype, TeacherConfig};
use dcsnet::train::{train_teacher, TrainConfig};

fn main() -> dcsnet::Result<()> {
    let spec = SynthSpec::default();
    let (data, quadrants) = synth_split(&spec)?;
    let model = build_teacher(TeacherArchetype::Residual, TeacherConfig { width: 16, depth: 1 }, [3, 32, 32], 3, 0)?;
    let (model, _) = train_teacher(model, &data, &TrainConfig::default())?;

    let dir = std::env::temp_dir().join("dcsnet-gradcam");
    std::fs::create_dir_all(&dir)?;
    let picks = (0..3).flat_map(|c| data.test.iter().filter(move |s| s.label == c).take(2));
    for (i, s) in picks.enumerate() {
        let cam = grad_cam(&model, &s.image, s.label, None)?;
        let full = upsample(&cam, 32, 32)?;
        let mass = full.mass_fraction(quadrants[s.label].bounds(32, 32));
        let path = dir.join(format!("{i:04}.ppm"));
        render_overlay(&full, &s.image, &path)?;
        println!("class {} peak {:?}, mass in signal quadrant {mass:.2} -> {}", s.label, full.argmax(), path.display());
    }
    Ok(())
}
