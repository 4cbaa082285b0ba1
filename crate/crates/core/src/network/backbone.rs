use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, BatchNorm, BnCache, Conv2d, MaxPool2d, MaxPoolCache, Mode, Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (4x).
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    /// Output channels of each of the four stages.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub block: BlockKind,
    pub last_stage_stride: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl BackboneConfig {
    /// Small residual net for desk-scale runs, 128x64 input.
    pub fn toy() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            block: BlockKind::Basic,
            last_stage_stride: 1,
            input_height: 128,
            input_width: 64,
        }
    }

    /// 50-layer bottleneck layout at 384x192.
    pub fn resnet50() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            last_stage_stride: 1,
            input_height: 384,
            input_width: 192,
        }
    }

    pub fn stage_strides(&self) -> [usize; 4] {
        [1, 2, 2, self.last_stage_stride]
    }

    /// Stem conv (2) and max pool (2) followed by the stage strides.
    pub fn total_stride(&self) -> usize {
        4 * self.stage_strides().iter().product::<usize>()
    }

    pub fn output_size(&self) -> (usize, usize) {
        let s = self.total_stride();
        (self.input_height / s, self.input_width / s)
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.blocks_per_stage.len() != 4 {
            return Err(Error::config("backbone needs exactly four stages"));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::config("backbone widths and depths must be positive"));
        }
        if self.block == BlockKind::Bottleneck && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(Error::config("bottleneck stage channels must be divisible by 4"));
        }
        if !matches!(self.last_stage_stride, 1 | 2) {
            return Err(Error::config("last_stage_stride must be 1 or 2"));
        }
        let s = self.total_stride();
        if self.input_height % s != 0 || self.input_width % s != 0 {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by the total stride {s}",
                self.input_height, self.input_width
            )));
        }
        let (h, w) = self.output_size();
        if h < 4 || w < 4 {
            return Err(Error::config(format!("feature map {h}x{w} is smaller than 4x4")));
        }
        Ok(())
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBnTape<T> {
    input: Array4<T>,
    bn: BnCache<T>,
    out: Option<Array4<T>>,
}

impl<T: Real> ConvBn<T> {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, false),
            bn: BatchNorm::new(cout),
            relu,
        }
    }

    fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, ConvBnTape<T>)> {
        let z = self.conv.forward(x)?;
        let (y, bn) = self.bn.forward(&z, mode)?;
        let (y, out) = if self.relu {
            let y = relu(&y);
            (y.clone(), Some(y))
        } else {
            (y, None)
        };
        Ok((
            y,
            ConvBnTape {
                input: x.clone(),
                bn,
                out,
            },
        ))
    }

    fn backward(&mut self, tape: &ConvBnTape<T>, dy: &Array4<T>) -> Result<Array4<T>> {
        let d = match &tape.out {
            Some(y) => relu_backward(y, dy),
            None => dy.clone(),
        };
        let d = self.bn.backward(&tape.bn, &d)?;
        self.conv.backward(&tape.input, &d)
    }

    fn absorb(&mut self, tape: &ConvBnTape<T>) {
        self.bn.absorb_stats(&tape.bn);
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.params(&format!("{prefix}.conv"), out);
        self.bn.params(&format!("{prefix}.bn"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.params_mut(&format!("{prefix}.conv"), out);
        self.bn.params_mut(&format!("{prefix}.bn"), out);
    }
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    /// Main branch; the last layer carries no ReLU.
    pub layers: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    layers: Vec<ConvBnTape<T>>,
    shortcut: Option<ConvBnTape<T>>,
    out: Array4<T>,
}

impl<T: Real> Block<T> {
    fn new(kind: BlockKind, cin: usize, cout: usize, stride: usize) -> Self {
        let layers = match kind {
            BlockKind::Basic => vec![ConvBn::new(cin, cout, 3, stride, true), ConvBn::new(cout, cout, 3, 1, false)],
            BlockKind::Bottleneck => {
                let mid = cout / 4;
                vec![
                    ConvBn::new(cin, mid, 1, 1, true),
                    ConvBn::new(mid, mid, 3, stride, true),
                    ConvBn::new(mid, cout, 1, 1, false),
                ]
            }
        };
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, false));
        Self { layers, shortcut }
    }

    fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, BlockTape<T>)> {
        let mut h = x.clone();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, t) = layer.forward(&h, mode)?;
            tapes.push(t);
            h = y;
        }
        let shortcut = match &self.shortcut {
            Some(s) => {
                let (y, t) = s.forward(x, mode)?;
                h += &y;
                Some(t)
            }
            None => {
                h += x;
                None
            }
        };
        let out = relu(&h);
        Ok((
            out.clone(),
            BlockTape {
                layers: tapes,
                shortcut,
                out,
            },
        ))
    }

    fn backward(&mut self, tape: &BlockTape<T>, dy: &Array4<T>) -> Result<Array4<T>> {
        let d = relu_backward(&tape.out, dy);
        let mut dm = d.clone();
        for (layer, t) in self.layers.iter_mut().zip(&tape.layers).rev() {
            dm = layer.backward(t, &dm)?;
        }
        match (&mut self.shortcut, &tape.shortcut) {
            (Some(s), Some(t)) => dm += &s.backward(t, &d)?,
            _ => dm += &d,
        }
        Ok(dm)
    }

    fn absorb(&mut self, tape: &BlockTape<T>) {
        for (layer, t) in self.layers.iter_mut().zip(&tape.layers) {
            layer.absorb(t);
        }
        if let (Some(s), Some(t)) = (&mut self.shortcut, &tape.shortcut) {
            s.absorb(t);
        }
    }
}

/// Residual feature extractor shared by every image stream.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub stem: ConvBn<T>,
    pub pool: MaxPool2d,
    pub stages: Vec<Vec<Block<T>>>,
}

#[derive(Debug, Clone)]
pub struct BackboneTape<T> {
    stem: ConvBnTape<T>,
    pool: MaxPoolCache,
    blocks: Vec<Vec<BlockTape<T>>>,
}

impl<T: Real> Backbone<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(3, config.stem_channels, 7, 2, true);
        let mut cin = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (si, stride) in config.stage_strides().into_iter().enumerate() {
            let cout = config.stage_channels[si];
            let blocks = (0..config.blocks_per_stage[si])
                .map(|bi| {
                    let b = Block::new(config.block, cin, cout, if bi == 0 { stride } else { 1 });
                    cin = cout;
                    b
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self {
            config,
            stem,
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            stages,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut convs = Vec::new();
        self.params_mut("", &mut convs);
        for (name, p) in convs {
            if name.ends_with("conv.weight") {
                let fan_in: usize = p.value.shape()[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                for v in p.value.iter_mut() {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    *v = T::lit(z * std);
                }
            }
        }
    }

    /// `[N, 3, H, W]` to `[N, C, h, w]`.
    pub fn forward(&self, x: &Array4<T>, mode: Mode) -> Result<(Array4<T>, BackboneTape<T>)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.config.input_height || w != self.config.input_width {
            return Err(Error::shape(format!(
                "backbone expects 3x{}x{} input, got {c}x{h}x{w}",
                self.config.input_height, self.config.input_width
            )));
        }
        let (y, stem) = self.stem.forward(x, mode)?;
        let (mut y, pool) = self.pool.forward(&y);
        let mut blocks = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut tapes = Vec::with_capacity(stage.len());
            for block in stage {
                let (out, t) = block.forward(&y, mode)?;
                tapes.push(t);
                y = out;
            }
            blocks.push(tapes);
        }
        Ok((y, BackboneTape { stem, pool, blocks }))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, tape: &BackboneTape<T>, dy: &Array4<T>) -> Result<Array4<T>> {
        let mut d = dy.clone();
        for (stage, tapes) in self.stages.iter_mut().zip(&tape.blocks).rev() {
            for (block, t) in stage.iter_mut().zip(tapes).rev() {
                d = block.backward(t, &d)?;
            }
        }
        let d = self.pool.backward(&tape.pool, &d);
        self.stem.backward(&tape.stem, &d)
    }

    pub fn absorb(&mut self, tape: &BackboneTape<T>) {
        self.stem.absorb(&tape.stem);
        for (stage, tapes) in self.stages.iter_mut().zip(&tape.blocks) {
            for (block, t) in stage.iter_mut().zip(tapes) {
                block.absorb(t);
            }
        }
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.stem.params(&format!("{prefix}stem"), out);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("{prefix}stage{}.{bi}", si + 1);
                for (li, layer) in block.layers.iter().enumerate() {
                    layer.params(&format!("{p}.layer{li}"), out);
                }
                if let Some(s) = &block.shortcut {
                    s.params(&format!("{p}.shortcut"), out);
                }
            }
        }
    }

    pub fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.stem.params_mut(&format!("{prefix}stem"), out);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("{prefix}stage{}.{bi}", si + 1);
                for (li, layer) in block.layers.iter_mut().enumerate() {
                    layer.params_mut(&format!("{p}.layer{li}"), out);
                }
                if let Some(s) = &mut block.shortcut {
                    s.params_mut(&format!("{p}.shortcut"), out);
                }
            }
        }
    }
}
