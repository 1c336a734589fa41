//! Grad-CAM heatmaps and PGM output.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{BilinearTap, Tape};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Class activation map for `class`, `H × W` with values in `[0, 1]`.
pub fn gradcam(model: &Model, image: &Tensor, class: usize) -> Result<Tensor> {
    let classes = model.config().num_classes;
    if class >= classes {
        return Err(Error::invalid(format!("class {class} out of range for {classes} classes")));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let x = tape.constant(image.clone());
    let feat = model.backbone(&mut tape, &bound, x)?;
    let feat = tape.value(feat).clone();

    // Second tape with the feature map as the only differentiated leaf.
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let fv = tape.param(feat.clone());
    let out = model.head(&mut tape, &bound, fv)?;
    let mut onehot = vec![0.0; classes];
    onehot[class] = 1.0;
    let pick = tape.constant(Tensor::new(vec![classes, 1], onehot)?);
    let target = tape.matmul(out.logits, pick)?;
    let grads = tape.backward(target)?;

    let cam = cam_from_gradients(&feat, &grads.get(fv))?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let up = resize_map(&cam, h, w)?;
    normalize_max(up)
}

/// `relu(Σ_c w_c feat_c)` with `w_c` the spatial mean of `grad_c`, max-normalized.
pub fn cam_from_gradients(feat: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match feat.shape() {
        [h, w, c] => (*h, *w, *c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "Grad-CAM expects an H×W×C feature map".into(),
            })
        }
    };
    if grad.shape() != feat.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradcam",
            lhs: feat.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let mut weights = vec![0.0; c];
    for px in grad.data().chunks_exact(c) {
        for (wc, g) in weights.iter_mut().zip(px) {
            *wc += g;
        }
    }
    weights.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let cam: Vec<f64> = feat
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(&weights).map(|(f, w)| f * w).sum::<f64>().max(0.0))
        .collect();
    normalize_max(Tensor::new(vec![h, w], cam)?)
}

/// Divides by the maximum; an all-zero map is returned unchanged.
pub fn normalize_max(t: Tensor) -> Result<Tensor> {
    let max = t.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        t.map(|v| (v / max).clamp(0.0, 1.0))
    } else {
        Ok(t)
    }
}

/// Bilinear resize of an `h × w` map with half-pixel alignment.
pub fn resize_map(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "resize expects an H×W map".into(),
            })
        }
    };
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let v = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let u = (x as f64 + 0.5) * sx - 0.5;
            out.push(BilinearTap::at(u, v, h, w).sample(map.data(), 1, 0));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Mean heatmap value inside each cell of a `grid × grid` partition, row-major.
pub fn cell_means(heatmap: &Tensor, grid: usize) -> Result<Vec<f64>> {
    let (h, w) = match heatmap.shape() {
        [h, w] if *h >= grid && *w >= grid && grid > 0 => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "heatmap smaller than the cell grid".into(),
            })
        }
    };
    let mut sums = vec![(0.0, 0usize); grid * grid];
    for y in 0..h {
        for x in 0..w {
            let cell = (y * grid / h) * grid + x * grid / w;
            sums[cell].0 += heatmap.data()[y * w + x];
            sums[cell].1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(s, n)| s / n as f64).collect())
}

/// Binary PGM (P5, maxval 255) bytes for a map with values in `[0, 1]`.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "PGM expects an H×W map".into(),
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = pgm_bytes(map)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
