use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Param, ParamRole, Real};
use crate::error::{Error, Result};

/// 2-D convolution with square kernels, lowered to one GEMM per call via
/// im2col over the whole batch.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    /// `[out]`
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        Self {
            weight: Param::zeros(
                &[out_channels, in_channels, kernel, kernel],
                ParamRole::Weight,
            ),
            bias: bias.then(|| Param::zeros(&[out_channels], ParamRole::NoDecay)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// He initialization, `N(0, 2 / fan_in)`.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (2.0 / self.fan_in() as f64).sqrt();
        self.init_normal(std, rng);
    }

    pub fn init_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for v in self.weight.value.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::lit(z * std);
        }
        if let Some(b) = &mut self.bias {
            b.value.fill(T::zero());
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |x: usize| (x + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn geometry(&self, x: &Array4<T>) -> Result<Geometry> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        let (ho, wo) = self.output_size(h, w);
        Ok(Geometry { n, c, h, w, ho, wo })
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.fan_in()))
            .expect("contiguous conv weight")
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let g = self.geometry(x)?;
        let x = x.as_standard_layout();
        let col = self.im2col(x.as_slice().expect("standard layout"), &g);
        let out = self.weight_matrix().dot(&col);
        let spatial = g.ho * g.wo;
        let mut y = Array4::<T>::zeros((g.n, self.out_channels, g.ho, g.wo));
        {
            let ys = y.as_slice_mut().expect("fresh array");
            let os = out.as_slice().expect("fresh gemm output");
            let np = g.n * spatial;
            for co in 0..self.out_channels {
                let b = self
                    .bias
                    .as_ref()
                    .map_or(T::zero(), |b| b.value[[co]]);
                for ni in 0..g.n {
                    let src = &os[co * np + ni * spatial..co * np + (ni + 1) * spatial];
                    let dst = &mut ys[(ni * self.out_channels + co) * spatial
                        ..(ni * self.out_channels + co + 1) * spatial];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>) -> Result<Array4<T>> {
        let g = self.geometry(x)?;
        if dy.dim() != (g.n, self.out_channels, g.ho, g.wo) {
            return Err(Error::shape(format!(
                "conv output gradient {:?} does not match forward output",
                dy.dim()
            )));
        }
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let spatial = g.ho * g.wo;
        let np = g.n * spatial;

        // [out, n * ho * wo]
        let mut dy2 = Array2::<T>::zeros((self.out_channels, np));
        {
            let d = dy2.as_slice_mut().expect("fresh array");
            let s = dy.as_slice().expect("standard layout");
            for ni in 0..g.n {
                for co in 0..self.out_channels {
                    let src = &s[(ni * self.out_channels + co) * spatial..][..spatial];
                    d[co * np + ni * spatial..][..spatial].copy_from_slice(src);
                }
            }
        }

        if let Some(b) = &mut self.bias {
            let sums = dy2.sum_axis(Axis(1));
            for (gb, s) in b.grad.iter_mut().zip(sums.iter()) {
                *gb += *s;
            }
        }

        let col = self.im2col(x.as_slice().expect("standard layout"), &g);
        let dw = dy2.dot(&col.t());
        for (gw, d) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *gw += *d;
        }

        let dcol = self.weight_matrix().t().dot(&dy2);
        let mut dx = Array4::<T>::zeros((g.n, g.c, g.h, g.w));
        self.col2im(
            dcol.as_standard_layout().as_slice().expect("standard layout"),
            dx.as_slice_mut().expect("fresh array"),
            &g,
        );
        Ok(dx)
    }

    fn im2col(&self, x: &[T], g: &Geometry) -> Array2<T> {
        let k = self.kernel;
        let np = g.n * g.ho * g.wo;
        let mut col = vec![T::zero(); g.c * k * k * np];
        self.for_each_tap(g, |col_idx, x_idx| col[col_idx] = x[x_idx]);
        Array2::from_shape_vec((g.c * k * k, np), col).expect("im2col shape")
    }

    fn col2im(&self, col: &[T], dx: &mut [T], g: &Geometry) {
        self.for_each_tap(g, |col_idx, x_idx| dx[x_idx] += col[col_idx]);
    }

    /// Visits every (column entry, input pixel) pair of the im2col lowering
    /// that lies inside the unpadded input.
    fn for_each_tap(&self, g: &Geometry, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let spatial = g.ho * g.wo;
        let np = g.n * spatial;
        for ci in 0..g.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * np;
                    for ni in 0..g.n {
                        let xbase = (ni * g.c + ci) * g.h * g.w;
                        let cbase = row + ni * spatial;
                        for oy in 0..g.ho {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * g.w;
                            let crow = cbase + oy * g.wo;
                            for ox in 0..g.wo {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < g.w as isize {
                                    f(crow + ox, xrow + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    /// Direct seven-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Array4::zeros((n, conv.out_channels, ho, wo));
        for ni in 0..n {
            for co in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[[co]]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[[co, ci, ky, kx]]
                                            * x[[ni, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn seeded(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut state = seed;
        Array4::from_shape_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = rand::rng();
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, p, true);
            conv.init_kaiming(&mut rng);
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
            }
            let x = seeded((2, 3, 9, 6), 7);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand::rng();
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true);
        conv.init_kaiming(&mut rng);
        let x = seeded((2, 2, 5, 4), 3);
        let y = conv.forward(&x).unwrap();
        let r = seeded(y.dim(), 11);
        let dx = conv.backward(&x, &r).unwrap();
        let objective = |c: &Conv2d<f64>, x: &Array4<f64>| (c.forward(x).unwrap() * &r).sum();
        let eps = 1e-6;
        for idx in [[0, 1, 2, 3], [1, 0, 4, 0], [1, 1, 0, 1]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx[idx]).abs() < 1e-7, "dx {fd} vs {}", dx[idx]);
        }
        for flat in [0usize, 7, 20, 53] {
            let analytic = conv.weight.grad.as_slice().unwrap()[flat];
            let mut cp = conv.clone();
            cp.weight.value.as_slice_mut().unwrap()[flat] += eps;
            let mut cm = conv.clone();
            cm.weight.value.as_slice_mut().unwrap()[flat] -= eps;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-7, "dw {fd} vs {analytic}");
        }
        let db = conv.bias.as_ref().unwrap().grad[[1]];
        let expected: f64 = r.index_axis(Axis(1), 1).sum();
        assert!((db - expected).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, false);
        let x = Array4::<f32>::zeros((1, 2, 4, 4));
        assert!(matches!(conv.forward(&x), Err(Error::Shape(_))));
    }
}
