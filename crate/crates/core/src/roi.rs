//! Fixed-size bilinear pooling of a feature map over a continuous box.

use crate::autodiff::{BilinearTap, Tape, Var};
use crate::error::{Error, Result};
use crate::regions::Box;

/// Sample positions for a `pooled×pooled` grid over `b` on an `h×w` map.
///
/// Bin `(i, j)` samples the single point
/// `(x0 + (j + ½)·width/P, y0 + (i + ½)·height/P)`; pixel centers sit at
/// integer + ½, and neighborhoods are clamped at the map border.
pub fn roi_taps(b: &Box, pooled: usize, h: usize, w: usize) -> Result<Vec<BilinearTap>> {
    if pooled == 0 {
        return Err(Error::invalid("pooled size must be at least 1"));
    }
    if !(b.x1 > b.x0 && b.y1 > b.y0) {
        return Err(Error::invalid(format!("degenerate box {b:?}")));
    }
    if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > w as f64 || b.y1 > h as f64 {
        return Err(Error::invalid(format!("box {b:?} outside {h}x{w} feature map")));
    }
    let p = pooled as f64;
    let (bw, bh) = (b.width() / p, b.height() / p);
    let mut taps = Vec::with_capacity(pooled * pooled);
    for i in 0..pooled {
        let sy = b.y0 + (i as f64 + 0.5) * bh;
        for j in 0..pooled {
            let sx = b.x0 + (j as f64 + 0.5) * bw;
            taps.push(BilinearTap::at(sx - 0.5, sy - 0.5, h, w));
        }
    }
    Ok(taps)
}

/// Pools `feat[H×W×C]` over `b` into a `P×P×C` map. Differentiable in `feat`;
/// the box is a constant.
pub fn roi_pool(tape: &mut Tape, feat: Var, b: &Box, pooled: usize) -> Result<Var> {
    let (h, w) = match tape.shape(feat) {
        [h, w, _] => (*h, *w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "roi_pool expects an H x W x C map".into(),
            })
        }
    };
    let taps = roi_taps(b, pooled, h, w)?;
    tape.resample(feat, taps, pooled, pooled)
}
