use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random rotation and flips applied to training images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub max_rotation_deg: f64,
    pub rotation_prob: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentPolicy {
    /// Rotations up to 25 degrees either way, flips with probability 0.5.
    fn default() -> Self {
        Self {
            max_rotation_deg: 25.0,
            rotation_prob: 1.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            max_rotation_deg: 0.0,
            rotation_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.rotation_prob, self.hflip_prob, self.vflip_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities must lie in [0, 1]: {self:?}")));
        }
        if !(self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("max rotation must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rotate about the image centre by `degrees` (counter-clockwise) with
/// nearest-neighbour sampling; samples falling outside take the nearest
/// edge pixel.
pub fn rotate(image: &Tensor<f32>, degrees: f64) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut src_index = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // Inverse mapping from output to source coordinates.
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let sx = (sx.round().max(0.0) as usize).min(w - 1);
            let sy = (sy.round().max(0.0) as usize).min(h - 1);
            src_index.push(sy * w + sx);
        }
    }
    let plane = h * w;
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, p) = (i / plane, i % plane);
        image.data()[ch * plane + src_index[p]]
    })
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[2];
    Tensor::from_fn(image.shape(), |i| {
        let x = i % w;
        image.data()[i - x + (w - 1 - x)]
    })
}

pub fn vflip(image: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    Tensor::from_fn(image.shape(), |i| {
        let (base, p) = (i - i % plane, i % plane);
        let (y, x) = (p / w, p % w);
        image.data()[base + (h - 1 - y) * w + x]
    })
}

/// Apply the policy: an optional rotation, then independent horizontal and
/// vertical flips. Exactly four draws are taken from `rng` per call.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, policy: &AugmentPolicy, rng: &mut R) -> Sample {
    let rotate_draw: f64 = rng.gen();
    let angle_draw: f64 = rng.gen();
    let h_draw: f64 = rng.gen();
    let v_draw: f64 = rng.gen();
    let mut image = sample.image.clone();
    if rotate_draw < policy.rotation_prob && policy.max_rotation_deg > 0.0 {
        let angle = (2.0 * angle_draw - 1.0) * policy.max_rotation_deg;
        image = rotate(&image, angle);
    }
    if h_draw < policy.hflip_prob {
        image = hflip(&image);
    }
    if v_draw < policy.vflip_prob {
        image = vflip(&image);
    }
    Sample {
        image,
        label: sample.label,
        source_id: sample.source_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor<f32> {
        Tensor::from_fn(&[3, 5, 4], |i| ((i * 13) % 29) as f32 / 29.0)
    }

    fn sample() -> Sample {
        Sample {
            image: img(),
            label: 1,
            source_id: "s".into(),
        }
    }

    #[test]
    fn zero_policy_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            assert_eq!(augment(&sample(), &AugmentPolicy::none(), &mut rng).image, img());
        }
    }

    #[test]
    fn flips_are_involutions() {
        assert_eq!(hflip(&hflip(&img())), img());
        assert_eq!(vflip(&vflip(&img())), img());
        assert_ne!(hflip(&img()), img());
        let f = hflip(&img());
        assert_eq!(f.data()[0], img().data()[3]);
    }

    #[test]
    fn zero_rotation_is_identity() {
        assert_eq!(rotate(&img(), 0.0), img());
    }

    #[test]
    fn quarter_turn_square() {
        let sq = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let r = rotate(&sq, 90.0);
        // Four quarter turns come back.
        let mut back = r.clone();
        for _ in 0..3 {
            back = rotate(&back, 90.0);
        }
        assert_eq!(back, sq);
        assert_eq!(r.data()[4], 4.0);
    }

    #[test]
    fn preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let s = augment(&sample(), &AugmentPolicy::default(), &mut rng);
            assert_eq!(s.image.shape(), &[3, 5, 4]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
