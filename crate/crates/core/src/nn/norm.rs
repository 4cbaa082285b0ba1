use ndarray::Array4;

use super::{Mode, Param, ParamRole, Real};
use crate::error::{Error, Result};

/// Per-channel batch normalization over `(N, H, W)`. With `H = W = 1` it is
/// the usual 1-D batch norm over pooled vectors.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// Saved state of one batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    mode: Mode,
    xhat: Array4<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], T::one(), ParamRole::NoDecay),
            beta: Param::zeros(&[channels], ParamRole::NoDecay),
            running_mean: Param::zeros(&[channels], ParamRole::Buffer),
            running_var: Param::filled(&[channels], T::one(), ParamRole::Buffer),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, BnCache<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let spatial = h * w;
        let count = n * spatial;
        if count == 0 {
            return Err(Error::shape("batch norm over an empty batch"));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let eps = T::lit(self.eps);

        let mut batch_mean = vec![T::zero(); c];
        let mut batch_var = vec![T::zero(); c];
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let m = T::from_usize(count).expect("count");
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        for &v in &xs[(ni * c + ci) * spatial..][..spatial] {
                            s += v;
                        }
                    }
                    let mu = s / m;
                    let mut sq = T::zero();
                    for ni in 0..n {
                        for &v in &xs[(ni * c + ci) * spatial..][..spatial] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    batch_mean[ci] = mu;
                    batch_var[ci] = sq / m;
                }
                (batch_mean.clone(), batch_var.clone())
            }
            Mode::Eval => (
                self.running_mean.value.iter().copied().collect(),
                self.running_var.value.iter().copied().collect(),
            ),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh");
            let ys = y.as_slice_mut().expect("fresh");
            for ni in 0..n {
                for ci in 0..c {
                    let g = self.gamma.value[[ci]];
                    let b = self.beta.value[[ci]];
                    let base = (ni * c + ci) * spatial;
                    for i in base..base + spatial {
                        let v = (xs[i] - mean[ci]) * inv_std[ci];
                        xh[i] = v;
                        ys[i] = g * v + b;
                    }
                }
            }
        }
        Ok((
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates. Eval-mode caches are ignored.
    pub fn absorb_stats(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let (n, _, h, w) = cache.xhat.dim();
        let count = n * h * w;
        let unbias = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        for ci in 0..self.channels {
            let rm = &mut self.running_mean.value[[ci]];
            *rm = keep * *rm + m * cache.batch_mean[ci];
            let rv = &mut self.running_var.value[[ci]];
            *rv = keep * *rv + m * cache.batch_var[ci] * unbias;
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Array4<T>) -> Result<Array4<T>> {
        if dy.dim() != cache.xhat.dim() {
            return Err(Error::shape("batch norm gradient shape mismatch"));
        }
        let (n, c, h, w) = dy.dim();
        let spatial = h * w;
        let m = T::from_usize(n * spatial).unwrap();
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh");
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for i in base..base + spatial {
                    sum_dy += dys[i];
                    sum_dy_xhat += dys[i] * xh[i];
                }
            }
            self.gamma.grad[[ci]] += sum_dy_xhat;
            self.beta.grad[[ci]] += sum_dy;
            let g = self.gamma.value[[ci]];
            let k = g * cache.inv_std[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for i in base..base + spatial {
                    dxs[i] = match cache.mode {
                        Mode::Train => k * (dys[i] - sum_dy / m - xh[i] * sum_dy_xhat / m),
                        Mode::Eval => k * dys[i],
                    };
                }
            }
        }
        Ok(dx)
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
        out.push((format!("{prefix}.running_mean"), &self.running_mean));
        out.push((format!("{prefix}.running_var"), &self.running_var));
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean));
        out.push((format!("{prefix}.running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Array4<f64> {
        Array4::from_shape_fn((3, 2, 2, 3), |(n, c, h, w)| {
            ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 * 0.3 - 1.0 + c as f64
        })
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let bn = BatchNorm::<f64>::new(2);
        let (y, _) = bn.forward(&sample(), Mode::Train).unwrap();
        for c in 0..2 {
            let ch = y.index_axis(ndarray::Axis(1), c);
            let mean = ch.mean().unwrap();
            let var = ch.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = sample();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        bn.absorb_stats(&cache);
        let ch0 = x.index_axis(ndarray::Axis(1), 0);
        let mean = ch0.mean().unwrap();
        assert!((bn.running_mean.value[[0]] - 0.1 * mean).abs() < 1e-12);
        let (_, eval_cache) = bn.forward(&x, Mode::Eval).unwrap();
        let before = bn.running_mean.value.clone();
        bn.absorb_stats(&eval_cache);
        assert_eq!(before, bn.running_mean.value);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.value[[0]] = 1.5;
        bn.gamma.value[[1]] = -0.7;
        bn.beta.value[[1]] = 0.2;
        let x = sample();
        let r = Array4::from_shape_fn(x.dim(), |(n, c, h, w)| ((n + 2 * c + 3 * h + 5 * w) % 7) as f64 - 3.0);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, cache) = bn.forward(&x, mode).unwrap();
            let dx = bn.clone().backward(&cache, &r).unwrap();
            let f = |x: &Array4<f64>| (bn.forward(x, mode).unwrap().0 * &r).sum();
            let eps = 1e-6;
            for idx in [[0, 0, 0, 0], [1, 1, 1, 2], [2, 0, 1, 1]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
                assert!((fd - dx[idx]).abs() < 1e-6, "{mode:?}: {fd} vs {}", dx[idx]);
            }
        }
    }
}
