use ndarray::{Array2, Array4};

use super::Real;

/// Max pooling with implicit negative-infinity padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat input offset chosen for every output element.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    pub fn forward<T: Real>(&self, x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<T>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let p = self.padding as isize;
        {
            let ys = y.as_slice_mut().expect("fresh");
            let mut o = 0;
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - p;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                // strict comparison keeps the first maximum
                                if xs[idx] > best || best_idx == usize::MAX {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        ys[o] = best;
                        argmax.push(best_idx);
                        o += 1;
                    }
                }
            }
        }
        (
            y,
            MaxPoolCache {
                input_dim: (n, c, h, w),
                argmax,
            },
        )
    }

    pub fn backward<T: Real>(&self, cache: &MaxPoolCache, dy: &Array4<T>) -> Array4<T> {
        let mut dx = Array4::<T>::zeros(cache.input_dim);
        let dxs = dx.as_slice_mut().expect("fresh");
        let dy = dy.as_standard_layout();
        for (&idx, &g) in cache.argmax.iter().zip(dy.iter()) {
            dxs[idx] += g;
        }
        dx
    }
}

/// Spatial mean of every channel; `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let scale = T::one() / T::from_usize(h * w).unwrap();
    let mut out = Array2::<T>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut s = T::zero();
            for i in 0..h {
                for j in 0..w {
                    s += x[[ni, ci, i, j]];
                }
            }
            out[[ni, ci]] = s * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(d: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = d.dim();
    let scale = T::one() / T::from_usize(h * w).unwrap();
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| d[[ni, ci]] * scale)
}
