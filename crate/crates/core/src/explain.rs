//! Grad-CAM heatmaps and overlay rendering.

use std::path::Path;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use crate::data::ppm::{quantize, write_ppm, RgbImage};
use crate::data::resize_bilinear;
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::tensor::{Element, Mode, Tape, Tensor};

/// Blend weight of the colour map over the greyscale image.
pub const OVERLAY_BETA: f64 = 0.5;

/// Non-negative relevance grid, max-normalised to 1 unless identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub layer: String,
    pub target_class: usize,
    /// Spatial size of the image the map explains.
    pub input_height: usize,
    pub input_width: usize,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// `(y, x)` of the largest value, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// Fraction of the total mass inside the half-open box
    /// `(y0, y1, x0, x1)`; 0 for a zero map.
    pub fn mass_fraction(&self, (y0, y1, x0, x1): (usize, usize, usize, usize)) -> f64 {
        let total: f64 = self.values.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                inside += self.at(y, x);
            }
        }
        inside / total
    }
}

/// Grad-CAM for one `[C, H, W]` image at the named capture layer (the
/// model's default when `None`). Channel weights are the spatial mean of
/// the target logit's gradient; the map is the ReLU of the weighted
/// activation sum, divided by its maximum. Runs in inference mode.
pub fn grad_cam<S: Element>(model: &ModelGraph<S>, image: &Tensor<S>, target_class: usize, layer: Option<&str>) -> Result<Heatmap> {
    let layer = layer.unwrap_or(model.default_capture()).to_string();
    if !model.capture_points().contains(&layer.as_str()) {
        return Err(Error::contract(format!(
            "layer {layer:?} is not a spatial capture point of {}; choose one of {:?}",
            model.name(),
            model.capture_points()
        )));
    }
    let k = model.num_classes();
    if target_class >= k {
        return Err(Error::contract(format!("target class {target_class} >= {k}")));
    }
    if image.rank() != 3 {
        return Err(Error::dim(format!("expected a [C, H, W] image, got {:?}", image.shape())));
    }
    let (h_in, w_in) = (image.shape()[1], image.shape()[2]);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone().reshape(&shape)?);
    let pass = model.forward(&mut tape, x, Mode::Infer, &mut StepRng::new(0, 0))?;
    let act_var = pass.capture(&layer).expect("capture point recorded");
    let mut one_hot = Tensor::zeros(&[1, k]);
    one_hot.data_mut()[target_class] = S::one();
    let score = tape.weighted_sum(pass.logits, one_hot)?;
    let act = tape.value(act_var).clone();
    let grads = tape.backward(score)?;
    let grad = grads.get(act_var);

    let (c, h, w) = (act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grad.data()[ch * plane..(ch + 1) * plane];
        let weight = g.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        if weight == 0.0 {
            continue;
        }
        let a = &act.data()[ch * plane..(ch + 1) * plane];
        for (o, v) in cam.iter_mut().zip(a) {
            *o += weight * v.as_f64();
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in cam.iter_mut() {
            *v /= max;
        }
    }
    Ok(Heatmap {
        height: h,
        width: w,
        values: cam,
        layer,
        target_class,
        input_height: h_in,
        input_width: w_in,
    })
}

/// Bilinear enlargement to `out_h x out_w`.
pub fn upsample(hm: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if out_h < hm.height || out_w < hm.width {
        return Err(Error::contract(format!(
            "cannot upsample a {}x{} map to {out_h}x{out_w}",
            hm.height, hm.width
        )));
    }
    let values = resize_bilinear(&hm.values, hm.height, hm.width, out_h, out_w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    Ok(Heatmap {
        height: out_h,
        width: out_w,
        values,
        ..hm.clone()
    })
}

/// Linear blue (0) to red (1) ramp.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Luma of an RGB (or replicated single-channel) `[C, H, W]` image.
fn grayscale(image: &Tensor<f32>, p: usize) -> f64 {
    let plane = image.shape()[1] * image.shape()[2];
    let px = |c: usize| image.data()[(c % image.shape()[0]) * plane + p] as f64;
    0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2)
}

/// `(1 - beta) * grey + beta * colormap(heat)` per pixel. The heatmap must
/// already match the image size.
pub fn overlay(hm: &Heatmap, image: &Tensor<f32>) -> Result<RgbImage> {
    if image.rank() != 3 || (image.shape()[1], image.shape()[2]) != (hm.height, hm.width) {
        return Err(Error::dim(format!(
            "heatmap is {}x{} but image is {:?}; upsample first",
            hm.height,
            hm.width,
            image.shape()
        )));
    }
    let mut pixels = Vec::with_capacity(hm.values.len() * 3);
    for (p, &v) in hm.values.iter().enumerate() {
        let g = grayscale(image, p);
        for c in colormap(v) {
            pixels.push(quantize((1.0 - OVERLAY_BETA) * g + OVERLAY_BETA * c));
        }
    }
    RgbImage::new(hm.width, hm.height, pixels)
}

pub fn render_overlay(hm: &Heatmap, image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_ppm(path, &overlay(hm, image)?)
}

/// One line of the explanation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub input: String,
    pub heatmap: String,
    pub predicted_class: usize,
    pub target_class: usize,
    pub true_class: Option<usize>,
    /// Heatmap mass inside the known signal region, when there is one.
    pub region_mass: Option<f64>,
    pub localization_hit: Option<bool>,
}
