use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::datamodel::NUM_PARTS;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, softmax_channels, softmax_channels_backward, BatchNorm, BnCache,
    Conv2d, Mode, Param, Real,
};

/// Part attention: per-pixel softmax over `NUM_PARTS` of a 1x1 conv.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub conv: Conv2d<T>,
}

impl<T: Real> Attention<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            conv: Conv2d::new(channels, NUM_PARTS, 1, 1, 0, true),
        }
    }

    /// `[N, C, h, w]` to `[N, K, h, w]`.
    pub fn forward(&self, f: &Array4<T>) -> Result<Array4<T>> {
        Ok(softmax_channels(&self.conv.forward(f)?))
    }

    pub fn backward(&mut self, f: &Array4<T>, m: &Array4<T>, dm: &Array4<T>) -> Result<Array4<T>> {
        let dz = softmax_channels_backward(m, dm);
        self.conv.backward(f, &dz)
    }
}

/// `F_h = M_head * F_r`, broadcast over channels.
pub fn head_enhance<T: Real>(f: &Array4<T>, m: &Array4<T>) -> Result<Array4<T>> {
    let (n, _, h, w) = f.dim();
    if m.dim().0 != n || m.dim().2 != h || m.dim().3 != w {
        return Err(Error::shape(format!("attention {:?} does not match features {:?}", m.dim(), f.dim())));
    }
    let head = m.index_axis(Axis(1), 0).insert_axis(Axis(1));
    Ok(f * &head)
}

/// Gradients of `head_enhance` with respect to `F_r` and the head channel of `M`.
pub fn head_enhance_backward<T: Real>(f: &Array4<T>, m: &Array4<T>, dfh: &Array4<T>) -> (Array4<T>, Array4<T>) {
    let head = m.index_axis(Axis(1), 0).insert_axis(Axis(1));
    let df = dfh * &head;
    let mut dm = Array4::zeros(m.raw_dim());
    let dhead = (f * dfh).sum_axis(Axis(1));
    dm.index_axis_mut(Axis(1), 0).assign(&dhead);
    (df, dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Batch norm on the map, 1x1 conv, spatial mean.
    Bgap,
    /// Spatial mean, batch norm on the vector, linear layer.
    BnNeck,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bgap" => Ok(Self::Bgap),
            "bnneck" => Ok(Self::BnNeck),
            _ => Err(Error::config(format!("unknown classifier {s:?} (expected bgap or bnneck)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub kind: ClassifierKind,
    pub bn: BatchNorm<T>,
    pub conv: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct ClassifierOutput<T> {
    /// `[N, I]`
    pub logits: Array2<T>,
    /// `[N, I, h, w]`; BGAP only.
    pub cam: Option<Array4<T>>,
}

#[derive(Debug, Clone)]
pub struct ClassifierTape<T> {
    bn: BnCache<T>,
    normed: Array4<T>,
    spatial: (usize, usize),
}

impl<T: Real> Classifier<T> {
    pub fn new(kind: ClassifierKind, channels: usize, classes: usize) -> Self {
        Self {
            kind,
            bn: BatchNorm::new(channels),
            conv: Conv2d::new(channels, classes, 1, 1, 0, kind == ClassifierKind::Bgap),
        }
    }

    pub fn forward(&self, f: &Array4<T>, mode: Mode) -> Result<(ClassifierOutput<T>, ClassifierTape<T>)> {
        let (n, _, h, w) = f.dim();
        match self.kind {
            ClassifierKind::Bgap => {
                let (normed, bn) = self.bn.forward(f, mode)?;
                let cam = self.conv.forward(&normed)?;
                let logits = global_avg_pool(&cam);
                Ok((
                    ClassifierOutput { logits, cam: Some(cam) },
                    ClassifierTape { bn, normed, spatial: (h, w) },
                ))
            }
            ClassifierKind::BnNeck => {
                let pooled = global_avg_pool(f);
                let c = pooled.ncols();
                let v = pooled.into_shape_with_order((n, c, 1, 1)).expect("contiguous");
                let (normed, bn) = self.bn.forward(&v, mode)?;
                let z = self.conv.forward(&normed)?;
                let classes = z.dim().1;
                let logits = z.into_shape_with_order((n, classes)).expect("contiguous");
                Ok((
                    ClassifierOutput { logits, cam: None },
                    ClassifierTape { bn, normed, spatial: (h, w) },
                ))
            }
        }
    }

    /// `dcam` adds to the gradient arriving through the logits.
    pub fn backward(
        &mut self,
        tape: &ClassifierTape<T>,
        dlogits: &Array2<T>,
        dcam: Option<&Array4<T>>,
    ) -> Result<Array4<T>> {
        let (h, w) = tape.spatial;
        match self.kind {
            ClassifierKind::Bgap => {
                let mut d = global_avg_pool_backward(dlogits, h, w);
                if let Some(extra) = dcam {
                    d += extra;
                }
                let d = self.conv.backward(&tape.normed, &d)?;
                self.bn.backward(&tape.bn, &d)
            }
            ClassifierKind::BnNeck => {
                if dcam.is_some() {
                    return Err(Error::config("BNNeck classifier has no activation maps"));
                }
                let (n, classes) = dlogits.dim();
                let dz = dlogits.to_owned().into_shape_with_order((n, classes, 1, 1)).expect("contiguous");
                let d = self.conv.backward(&tape.normed, &dz)?;
                let d = self.bn.backward(&tape.bn, &d)?;
                let c = d.dim().1;
                let d = d.into_shape_with_order((n, c)).expect("contiguous");
                Ok(global_avg_pool_backward(&d, h, w))
            }
        }
    }

    pub fn absorb(&mut self, tape: &ClassifierTape<T>) {
        self.bn.absorb_stats(&tape.bn);
    }

    /// Pooled, batch-normalized feature that feeds the classifier weights.
    pub fn embed(&self, f: &Array4<T>) -> Result<Array2<T>> {
        match self.kind {
            ClassifierKind::Bgap => {
                let (normed, _) = self.bn.forward(f, Mode::Eval)?;
                Ok(global_avg_pool(&normed))
            }
            ClassifierKind::BnNeck => {
                let pooled = global_avg_pool(f);
                let (n, c) = pooled.dim();
                let v = pooled.into_shape_with_order((n, c, 1, 1)).expect("contiguous");
                let (normed, _) = self.bn.forward(&v, Mode::Eval)?;
                Ok(normed.into_shape_with_order((n, c)).expect("contiguous"))
            }
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.bn.params(&format!("{prefix}.bn"), out);
        self.conv.params(&format!("{prefix}.conv"), out);
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.bn.params_mut(&format!("{prefix}.bn"), out);
        self.conv.params_mut(&format!("{prefix}.conv"), out);
    }
}
