//! Activation-map overlays.

use ndarray::{Array2, Array3, ArrayView2};

use scnet::preprocess::resize_bilinear;

/// Rescales a map so its minimum becomes 0 and its maximum 1. A constant
/// map becomes all zeros.
pub fn normalize_map(m: ArrayView2<f32>) -> Array2<f32> {
    let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return Array2::zeros(m.raw_dim());
    }
    m.mapv(|v| (v - lo) / span)
}

/// Blue-cyan-yellow-red ramp for `t` in `[0, 1]`.
pub fn heat(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// The image on the left, the image blended with the upsampled heat map on
/// the right.
pub fn composite(image: &Array3<f32>, cam: ArrayView2<f32>, alpha: f32) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let norm = normalize_map(cam);
    let (ch, cw) = norm.dim();
    let as_img = Array3::from_shape_fn((ch, cw, 3), |(y, x, _)| norm[[y, x]]);
    let up = resize_bilinear(&as_img, h, w);
    let mut out = Array3::zeros((h, 2 * w, 3));
    for y in 0..h {
        for x in 0..w {
            let c = heat(up[[y, x, 0]]);
            for k in 0..3 {
                out[[y, x, k]] = image[[y, x, k]];
                out[[y, w + x, k]] = (1.0 - alpha) * image[[y, x, k]] + alpha * c[k];
            }
        }
    }
    out
}
