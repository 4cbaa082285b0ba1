//! Tri-stream model: one shared backbone, part attention, head-enhanced
//! features and a classifier head per stream.

pub mod backbone;
pub mod checkpoint;
pub mod heads;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneConfig, BackboneTape, BlockKind};
pub use heads::{head_enhance, head_enhance_backward, Attention, Classifier, ClassifierKind, ClassifierOutput};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Mode, Param, Real};
use heads::ClassifierTape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Raw,
    Head,
    Black,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Raw, Stream::Head, Stream::Black];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Stream::Raw => "r",
            Stream::Head => "h",
            Stream::Black => "b",
        }
    }
}

/// Which optional streams are active; the raw stream always is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSet {
    pub head: bool,
    pub black: bool,
}

impl Default for StreamSet {
    fn default() -> Self {
        Self { head: true, black: true }
    }
}

impl StreamSet {
    pub fn raw_only() -> Self {
        Self { head: false, black: false }
    }

    pub fn contains(&self, s: Stream) -> bool {
        match s {
            Stream::Raw => true,
            Stream::Head => self.head,
            Stream::Black => self.black,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Stream> {
        Stream::ALL.into_iter().filter(move |&s| self.contains(s))
    }

    /// Parses a comma list such as `raw,head`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = Self::raw_only();
        let mut raw = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "raw" | "r" => raw = true,
                "head" | "h" => set.head = true,
                "black" | "b" => set.black = true,
                other => return Err(Error::config(format!("unknown stream {other:?} (expected raw, head, black)"))),
            }
        }
        if !raw {
            return Err(Error::config("the raw stream cannot be disabled"));
        }
        Ok(set)
    }

    pub fn to_list(self) -> String {
        self.iter()
            .map(|s| match s {
                Stream::Raw => "raw",
                Stream::Head => "head",
                Stream::Black => "black",
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub backbone: BackboneConfig,
    pub classifier: ClassifierKind,
    pub num_identities: usize,
    pub streams: StreamSet,
}

impl NetworkConfig {
    pub fn toy(num_identities: usize) -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            classifier: ClassifierKind::Bgap,
            num_identities,
            streams: StreamSet::default(),
        }
    }

    /// `requires_cams` is set when a downstream loss reads activation maps.
    pub fn validate(&self, requires_cams: bool) -> Result<()> {
        self.backbone.validate()?;
        if self.num_identities < 2 {
            return Err(Error::config("classifier needs at least two identities"));
        }
        if requires_cams && self.classifier == ClassifierKind::BnNeck {
            return Err(Error::config(
                "BNNeck classifier produces no activation maps; disable the semantic consistency loss",
            ));
        }
        Ok(())
    }
}

/// Per-stream forward products. Maps are `[N, C, h, w]`.
#[derive(Debug, Clone)]
pub struct StreamOutput<T> {
    pub features: Array4<T>,
    /// Spatially pooled features before the classifier, `[N, C]`.
    pub pooled: Array2<T>,
    pub logits: Array2<T>,
    /// Class activation maps `[N, I, h, w]` (BGAP only).
    pub cam: Option<Array4<T>>,
}

#[derive(Debug, Clone)]
pub struct StreamOutputs<T> {
    /// Part attention `[N, K, h, w]`.
    pub attention: Array4<T>,
    pub streams: [Option<StreamOutput<T>>; 3],
    pub backbone_passes: usize,
}

impl<T> StreamOutputs<T> {
    pub fn get(&self, s: Stream) -> Option<&StreamOutput<T>> {
        self.streams[s.index()].as_ref()
    }
}

/// Upstream gradients for `ScNet::backward`; absent entries are zero.
#[derive(Debug, Clone)]
pub struct StreamGrad<T> {
    pub features: Option<Array4<T>>,
    pub pooled: Option<Array2<T>>,
    pub logits: Option<Array2<T>>,
    pub cam: Option<Array4<T>>,
}

impl<T> Default for StreamGrad<T> {
    fn default() -> Self {
        Self {
            features: None,
            pooled: None,
            logits: None,
            cam: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub attention: Option<Array4<T>>,
    pub streams: [StreamGrad<T>; 3],
}

impl<T> Default for OutputGrads<T> {
    fn default() -> Self {
        Self {
            attention: None,
            streams: Default::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    raw: BackboneTape<T>,
    black: Option<BackboneTape<T>>,
    classifiers: [Option<ClassifierTape<T>>; 3],
}

#[derive(Debug, Clone)]
pub struct ScNet<T> {
    pub config: NetworkConfig,
    pub backbone: Backbone<T>,
    pub attention: Attention<T>,
    pub classifiers: [Option<Classifier<T>>; 3],
    initialized: bool,
}

impl<T: Real> ScNet<T> {
    /// Builds the architecture with placeholder weights; call `init` or load
    /// a checkpoint before inference.
    pub fn new(config: NetworkConfig, requires_cams: bool) -> Result<Self> {
        config.validate(requires_cams)?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let c = config.backbone.out_channels();
        let classifiers = Stream::ALL.map(|s| {
            config
                .streams
                .contains(s)
                .then(|| Classifier::new(config.classifier, c, config.num_identities))
        });
        Ok(Self {
            attention: Attention::new(c),
            backbone,
            classifiers,
            config,
            initialized: false,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.backbone.init(rng);
        self.attention.conv.init_normal(0.01, rng);
        for cls in self.classifiers.iter_mut().flatten() {
            cls.conv.init_normal(0.001, rng);
        }
        self.initialized = true;
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.config.backbone.output_size()
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.backbone.out_channels()
    }

    pub fn backbone_forward(&self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        Ok(self.backbone.forward(x, mode)?.0)
    }

    /// Runs every enabled stream. `black` is required iff the black stream is on.
    pub fn forward_train(
        &self,
        raw: &Array4<T>,
        black: Option<&Array4<T>>,
        mode: Mode,
    ) -> Result<(StreamOutputs<T>, ForwardTape<T>)> {
        let streams = self.config.streams;
        let (f_r, raw_tape) = self.backbone.forward(raw, mode)?;
        let mut passes = 1;
        let black_pass = if streams.black {
            let b = black.ok_or_else(|| Error::config("black stream enabled but no black-clothing view given"))?;
            if b.dim() != raw.dim() {
                return Err(Error::shape("raw and black-clothing views differ in shape"));
            }
            passes += 1;
            Some(self.backbone.forward(b, mode)?)
        } else {
            None
        };
        let attention = self.attention.forward(&f_r)?;
        let f_h = if streams.head { Some(head_enhance(&f_r, &attention)?) } else { None };

        let mut outs: [Option<StreamOutput<T>>; 3] = Default::default();
        let mut tapes: [Option<ClassifierTape<T>>; 3] = Default::default();
        let (f_b, black_tape) = match black_pass {
            Some((f, t)) => (Some(f), Some(t)),
            None => (None, None),
        };
        for (s, f) in [(Stream::Raw, Some(f_r)), (Stream::Head, f_h), (Stream::Black, f_b)] {
            let Some(features) = f else { continue };
            let cls = self.classifiers[s.index()].as_ref().expect("classifier per enabled stream");
            let (out, tape) = cls.forward(&features, mode)?;
            outs[s.index()] = Some(StreamOutput {
                pooled: global_avg_pool(&features),
                features,
                logits: out.logits,
                cam: out.cam,
            });
            tapes[s.index()] = Some(tape);
        }
        Ok((
            StreamOutputs {
                attention,
                streams: outs,
                backbone_passes: passes,
            },
            ForwardTape {
                raw: raw_tape,
                black: black_tape,
                classifiers: tapes,
            },
        ))
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, outputs: &StreamOutputs<T>, tape: &ForwardTape<T>, grads: &OutputGrads<T>) -> Result<()> {
        let f_r = &outputs.get(Stream::Raw).expect("raw stream").features;
        let zeros = || Array4::<T>::zeros(f_r.raw_dim());
        let mut d_raw = zeros();
        let mut d_black = None;
        let mut d_att = grads.attention.clone();
        for s in Stream::ALL {
            let Some(out) = outputs.get(s) else { continue };
            let g = &grads.streams[s.index()];
            let mut df = g.features.clone().unwrap_or_else(zeros);
            let (_, _, h, w) = out.features.dim();
            if let Some(dp) = &g.pooled {
                df += &global_avg_pool_backward(dp, h, w);
            }
            if g.logits.is_some() || g.cam.is_some() {
                let dl = g.logits.clone().unwrap_or_else(|| Array2::zeros(out.logits.raw_dim()));
                let cls = self.classifiers[s.index()].as_mut().expect("classifier");
                let t = tape.classifiers[s.index()].as_ref().expect("classifier tape");
                df += &cls.backward(t, &dl, g.cam.as_ref())?;
            }
            match s {
                Stream::Raw => d_raw += &df,
                Stream::Head => {
                    let (dfr, dm) = head_enhance_backward(f_r, &outputs.attention, &df);
                    d_raw += &dfr;
                    match &mut d_att {
                        Some(a) => *a += &dm,
                        None => d_att = Some(dm),
                    }
                }
                Stream::Black => d_black = Some(df),
            }
        }
        if let Some(dm) = d_att {
            d_raw += &self.attention.backward(f_r, &outputs.attention, &dm)?;
        }
        self.backbone.backward(&tape.raw, &d_raw)?;
        if let (Some(t), Some(d)) = (&tape.black, d_black) {
            self.backbone.backward(t, &d)?;
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running estimates,
    /// raw pass before black pass.
    pub fn absorb_stats(&mut self, tape: &ForwardTape<T>) {
        self.backbone.absorb(&tape.raw);
        if let Some(t) = &tape.black {
            self.backbone.absorb(t);
        }
        for (cls, t) in self.classifiers.iter_mut().zip(&tape.classifiers) {
            if let (Some(c), Some(t)) = (cls, t) {
                c.absorb(t);
            }
        }
    }

    /// Raw-stream retrieval embedding of a batch, eval mode.
    pub fn infer_embedding(&self, images: &Array4<T>) -> Result<Array2<T>> {
        if !self.initialized {
            return Err(Error::State("model parameters are not initialized".into()));
        }
        let f = self.backbone_forward(images, Mode::Eval)?;
        self.classifiers[Stream::Raw.index()].as_ref().expect("raw classifier").embed(&f)
    }

    /// Raw-stream class activation maps `[N, I, h, w]` and logits, eval mode.
    pub fn raw_cam(&self, images: &Array4<T>) -> Result<(Array4<T>, Array2<T>)> {
        if !self.initialized {
            return Err(Error::State("model parameters are not initialized".into()));
        }
        let f = self.backbone_forward(images, Mode::Eval)?;
        let cls = self.classifiers[Stream::Raw.index()].as_ref().expect("raw classifier");
        let (out, _) = cls.forward(&f, Mode::Eval)?;
        let cam = out.cam.ok_or_else(|| Error::config("the bnneck classifier produces no activation maps"))?;
        Ok((cam, out.logits))
    }

    /// Embeds HWC images in chunks of `batch`.
    pub fn embed_images(&self, images: &[Array3<f32>], batch: usize) -> Result<Array2<T>> {
        let mut out = Array2::zeros((images.len(), self.embedding_dim()));
        for (ci, chunk) in images.chunks(batch.max(1)).enumerate() {
            let x = to_input::<T>(chunk)?;
            let e = self.infer_embedding(&x)?;
            out.slice_mut(ndarray::s![ci * batch.max(1)..ci * batch.max(1) + chunk.len(), ..]).assign(&e);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.backbone.params("backbone.", &mut out);
        self.attention.conv.params("attention.conv", &mut out);
        for s in Stream::ALL {
            if let Some(c) = &self.classifiers[s.index()] {
                c.params(&format!("classifier.{}", s.tag()), &mut out);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.backbone.params_mut("backbone.", &mut out);
        self.attention.conv.params_mut("attention.conv", &mut out);
        for (s, c) in Stream::ALL.iter().zip(self.classifiers.iter_mut()) {
            if let Some(c) = c {
                c.params_mut(&format!("classifier.{}", s.tag()), &mut out);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every named tensor (including running statistics) as `f32`.
    pub fn state_dict(&self) -> Vec<(String, ArrayD<f32>)> {
        self.params()
            .into_iter()
            .map(|(n, p)| (n, p.value.mapv(|v| v.as_f64() as f32)))
            .collect()
    }

    pub fn load_state_dict(&mut self, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &ArrayD<f32>> =
            tensors.iter().map(|(n, a)| (n.as_str(), a)).collect();
        let mut params = self.params_mut();
        if lookup.len() != params.len() {
            return Err(Error::State(format!(
                "state has {} tensors, model expects {}",
                lookup.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter_mut() {
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::State(format!("missing tensor {name}")))?;
            if src.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.mapv(|v| T::lit(v as f64));
        }
        self.initialized = true;
        Ok(())
    }
}

/// Per-channel input normalization applied to `[0, 1]` images.
pub const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Stacks HWC images into a normalized NCHW batch.
pub fn to_input<T: Real>(images: &[Array3<f32>]) -> Result<Array4<T>> {
    let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 colour channels, got {c}")));
    }
    let mut x = Array4::<T>::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(Error::shape("images in a batch differ in size"));
        }
        for ch in 0..3 {
            let mut plane = x.index_axis_mut(Axis(0), n);
            let mut plane = plane.index_axis_mut(Axis(0), ch);
            let src = img.index_axis(Axis(2), ch);
            plane.zip_mut_with(&src, |d, &s| *d = T::lit(((s - PIXEL_MEAN[ch]) / PIXEL_STD[ch]) as f64));
        }
    }
    Ok(x)
}
