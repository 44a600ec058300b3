//! Datasets: folder loading, augmentation, splitting, batching and a
//! synthetic generator.

mod augment;
pub mod ppm;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use augment::{augment, hflip, rotate, vflip, AugmentPolicy};
pub use synth::{synth_generate, Quadrant, SynthDataset, SynthSpec};

/// One labelled image, channels-first with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

/// Train/validation/test partition of a labelled dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]` of the first sample.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .next()
            .map(|s| {
                let d = s.image.shape();
                [d[0], d[1], d[2]]
            })
    }
}

/// Train/validation/test fractions for image folders.
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];
/// 200/50/50 of every 300 synthetic images per class.
pub const SYNTH_SPLIT: [f64; 3] = [4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];

/// Generate a synthetic dataset and split it with [`SYNTH_SPLIT`], seeded by
/// the generator seed.
pub fn synth_split(spec: &SynthSpec) -> Result<(DatasetSplit, Vec<Quadrant>)> {
    let d = synth_generate(spec)?;
    let s = split(&d.samples, SYNTH_SPLIT, spec.seed, &d.class_names)?;
    Ok((s, d.quadrants))
}

/// Stratified shuffle split. Samples sharing a source id always land in the
/// same partition. Per class, `round(n * ratio)` groups go to validation
/// and test and the remainder to training.
pub fn split(samples: &[Sample], ratios: [f64; 3], seed: u64, class_names: &[String]) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let k = class_names.len();
    if let Some(s) = samples.iter().find(|s| s.label >= k) {
        return Err(Error::contract(format!("sample {} has label {} >= {k}", s.source_id, s.label)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        class_names: class_names.to_vec(),
    };
    for class in 0..k {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: HashMap<&str, Vec<&Sample>> = HashMap::new();
        for s in samples.iter().filter(|s| s.label == class) {
            let entry = groups.entry(s.source_id.as_str()).or_default();
            if entry.is_empty() {
                order.push(s.source_id.as_str());
            }
            entry.push(s);
        }
        order.shuffle(&mut rng);
        let n = order.len();
        let n_val = (n as f64 * ratios[1]).round() as usize;
        let n_test = (n as f64 * ratios[2]).round() as usize;
        let counts = [n.saturating_sub(n_val + n_test), n_val, n_test];
        if n_val + n_test > n || counts.iter().zip(ratios).any(|(&c, r)| r > 0.0 && c == 0) {
            return Err(Error::contract(format!(
                "class {:?} has {n} samples, too few for split ratios {ratios:?}",
                class_names[class]
            )));
        }
        for (i, id) in order.iter().enumerate() {
            let dst = if i < counts[0] {
                &mut out.train
            } else if i < counts[0] + counts[1] {
                &mut out.val
            } else {
                &mut out.test
            };
            dst.extend(groups[id].iter().map(|&s| s.clone()));
        }
    }
    Ok(out)
}

/// Iterator over `(NCHW batch, labels)`; see [`batches`].
pub struct Batches<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(AugmentPolicy, ChaCha8Rng)>,
}

impl<'a> Iterator for Batches<'a> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut images = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &self.samples[i];
            match &mut self.augment {
                Some((policy, rng)) => images.push(augment(s, policy, rng).image),
                None => images.push(s.image.clone()),
            }
            labels.push(s.label);
        }
        let batch = Tensor::stack(&images).expect("samples share one image shape");
        Some((batch, labels))
    }
}

/// Batches in a seeded shuffled order (or dataset order when `shuffle` is
/// false). The final partial batch is kept. When a policy is given every
/// image is augmented with a generator derived from the same seed.
pub fn batches<'a>(
    samples: &'a [Sample],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    augment: Option<&AugmentPolicy>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        samples,
        order,
        pos: 0,
        batch_size,
        augment: augment.map(|p| (*p, ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a06e))),
    })
}

/// Bilinear resampling of one `h x w` plane with half-pixel centres.
/// Constant planes stay exactly constant.
pub fn resize_bilinear<S: Element>(src: &[S], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<S> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        let fy = S::of(fy);
        for &(x0, x1, fx) in &xs {
            let fx = S::of(fx);
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

/// Resize every channel of a `[C, H, W]` image.
pub fn resize_image(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        data.extend(resize_bilinear(&image.data()[ch * plane..(ch + 1) * plane], h, w, out_h, out_w));
    }
    Tensor::new(vec![c, out_h, out_w], data).expect("resize shape")
}

/// Images decoded from a class-per-directory tree.
#[derive(Debug, Clone)]
pub struct LoadedImages {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

/// Decode a PPM/PNM (or PNG with the `png` feature) file into `[3, H, W]`
/// values in `[0, 1]`; `None` for other extensions.
pub fn read_image(path: &Path) -> Result<Option<Tensor<f32>>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" | "pnm" => Ok(Some(ppm::read_ppm(path)?.to_tensor())),
        #[cfg(feature = "png")]
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            Ok(Some(ppm::RgbImage::new(w as usize, h as usize, img.into_raw())?.to_tensor()))
        }
        _ => Ok(None),
    }
}

/// Load `root/<class>/<image>` with labels assigned by sorted class name.
/// Files that fail to decode are skipped with a warning; a class directory
/// without any usable image is an error.
pub fn load_image_dir(root: impl AsRef<Path>, resize: Option<(usize, usize)>) -> Result<LoadedImages> {
    let root = root.as_ref();
    let entries = fs::read_dir(root).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
    let mut class_dirs: Vec<_> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", root.display())));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    for (label, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = samples.len();
        for path in files {
            match read_image(&path) {
                Ok(Some(mut img)) => {
                    if let Some((h, w)) = resize {
                        img = resize_image(&img, h, w);
                    }
                    let file = path.file_name().unwrap_or_default().to_string_lossy();
                    samples.push(Sample {
                        image: img,
                        label,
                        source_id: format!("{name}/{file}"),
                    });
                }
                Ok(None) => log::debug!("skipping non-image file {}", path.display()),
                Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {} contains no readable images", dir.display())));
        }
        class_names.push(name);
    }
    if let Some(first) = samples.first() {
        let shape = first.image.shape().to_vec();
        if let Some(bad) = samples.iter().find(|s| s.image.shape() != shape.as_slice()) {
            return Err(Error::Data(format!(
                "image {} has shape {:?}, expected {shape:?}; pass a resize target",
                bad.source_id,
                bad.image.shape()
            )));
        }
    }
    Ok(LoadedImages { samples, class_names })
}
