use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Bilinear resize of an `[H, W, C]` image with the align-corners convention:
/// corner samples of the input land exactly on corner samples of the output.
pub fn bilinear_resize(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(Error::shape(format!(
            "bilinear_resize expects [H, W, C], got {:?}",
            image.dims()
        )));
    }
    let (h, w, c) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    if h == 0 || w == 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "bilinear_resize from {h}x{w} to {height}x{width}: zero extent"
        )));
    }
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let ys = sample_positions(h, height);
    let xs = sample_positions(w, width);
    let src = image.data();
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    let mut out = Vec::with_capacity(height * width * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = at(y0, x0, ch) + fx * (at(y0, x1, ch) - at(y0, x0, ch));
                let bottom = at(y1, x0, ch) + fx * (at(y1, x1, ch) - at(y1, x0, ch));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    Ok(Tensor::from_parts(vec![height, width, c], out))
}

/// For each output index: the two bracketing source indices and the blend weight.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
