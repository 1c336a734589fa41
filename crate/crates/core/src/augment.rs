//! Random crop, rotation and zoom by inverse-mapped bilinear resampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BilinearTap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Output side length.
    pub target: usize,
    pub rotation_deg: f64,
    /// Zoom is drawn from `1 ± zoom`.
    pub zoom: f64,
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub offset_x: usize,
    pub offset_y: usize,
    pub angle_deg: f64,
    pub zoom: f64,
}

impl Transform {
    pub fn centered(source: usize, target: usize) -> Self {
        let off = (source - target) / 2;
        Self {
            offset_x: off,
            offset_y: off,
            angle_deg: 0.0,
            zoom: 1.0,
        }
    }
}

fn square_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, c] if h == w => Ok((*h, *c)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "augmentation expects a square H×W×C image".into(),
        }),
    }
}

pub fn draw(rng: &mut ChaCha8Rng, source: usize, cfg: &AugmentConfig) -> Result<Transform> {
    if cfg.target > source {
        return Err(Error::invalid(format!(
            "crop {} larger than source {}",
            cfg.target, source
        )));
    }
    let margin = source - cfg.target;
    Ok(Transform {
        offset_x: rng.gen_range(0..=margin),
        offset_y: rng.gen_range(0..=margin),
        angle_deg: if cfg.rotation_deg > 0.0 {
            rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg)
        } else {
            0.0
        },
        zoom: if cfg.zoom > 0.0 {
            rng.gen_range(1.0 - cfg.zoom..=1.0 + cfg.zoom)
        } else {
            1.0
        },
    })
}

/// Applies `t`, producing a `target × target` crop. Each output pixel is mapped
/// back through the inverse rotation and zoom about the crop center.
pub fn apply(image: &Tensor, t: &Transform, target: usize) -> Result<Tensor> {
    let (size, channels) = square_dims(image)?;
    if target == 0 || t.offset_x + target > size || t.offset_y + target > size {
        return Err(Error::invalid(format!(
            "crop of {target} at ({}, {}) exceeds source {size}",
            t.offset_x, t.offset_y
        )));
    }
    if !(t.zoom > 0.0) {
        return Err(Error::invalid("zoom must be positive"));
    }
    let (s, c) = t.angle_deg.to_radians().sin_cos();
    let center = (target as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(target * target * channels);
    for y in 0..target {
        for x in 0..target {
            let (dx, dy) = (x as f64 - center, y as f64 - center);
            let u = (c * dx + s * dy) / t.zoom + center + t.offset_x as f64;
            let v = (-s * dx + c * dy) / t.zoom + center + t.offset_y as f64;
            let tap = BilinearTap::at(u, v, size, size);
            for ch in 0..channels {
                out.push(tap.sample(image.data(), channels, ch));
            }
        }
    }
    Tensor::new(vec![target, target, channels], out)
}

pub fn augment(image: &Tensor, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<Tensor> {
    let (size, _) = square_dims(image)?;
    let t = draw(rng, size, cfg)?;
    apply(image, &t, cfg.target)
}

/// Central `target × target` window, unchanged when the sizes already agree.
pub fn center_crop(image: &Tensor, target: usize) -> Result<Tensor> {
    let (size, _) = square_dims(image)?;
    if size == target {
        return Ok(image.clone());
    }
    if target > size {
        return Err(Error::invalid(format!("crop {target} larger than source {size}")));
    }
    apply(image, &Transform::centered(size, target), target)
}
