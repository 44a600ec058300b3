//! Generate the synthetic quadrant dataset and write a few samples as PPM.

use dcsnet::data::ppm::{write_ppm, RgbImage};
use dcsnet::data::{synth_split, SynthSpec};

fn main() -> dcsnet::Result<()> {
    let spec = SynthSpec { per_class: 30, ..SynthSpec::default() };
    let (split, quadrants) = synth_split(&spec)?;
    println!(
        "classes {:?}: train {}, val {}, test {}",
        split.class_names,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    println!("signal quadrants: {quadrants:?}");
    let dir = std::env::temp_dir().join("dcsnet-synth");
    std::fs::create_dir_all(&dir)?;
    for class in 0..split.num_classes() {
        let s = split.train.iter().find(|s| s.label == class).expect("every class is present");
        let path = dir.join(format!("{}.ppm", s.source_id.replace('/', "_")));
        write_ppm(&path, &RgbImage::from_tensor(&s.image)?)?;
        println!("{} (class {}) -> {}", s.source_id, s.label, path.display());
    }
    Ok(())
}
