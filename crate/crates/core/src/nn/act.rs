use ndarray::{Array4, Zip};

use super::Real;

pub fn relu<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of `relu` given its output `y`.
pub fn relu_backward<T: Real>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Softmax over axis 1 of an NCHW tensor (per pixel, across channels).
pub fn softmax_channels<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, k, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((n, k, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(x[[ni, c, i, j]]);
                }
                let mut z = T::zero();
                for c in 0..k {
                    let e = (x[[ni, c, i, j]] - mx).exp();
                    out[[ni, c, i, j]] = e;
                    z += e;
                }
                for c in 0..k {
                    out[[ni, c, i, j]] /= z;
                }
            }
        }
    }
    out
}

/// Gradient through `softmax_channels` given its output `m`.
pub fn softmax_channels_backward<T: Real>(m: &Array4<T>, dm: &Array4<T>) -> Array4<T> {
    let (n, k, h, w) = m.dim();
    let mut dx = Array4::<T>::zeros((n, k, h, w));
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut dot = T::zero();
                for c in 0..k {
                    dot += m[[ni, c, i, j]] * dm[[ni, c, i, j]];
                }
                for c in 0..k {
                    dx[[ni, c, i, j]] = m[[ni, c, i, j]] * (dm[[ni, c, i, j]] - dot);
                }
            }
        }
    }
    dx
}
