//! Flat `key = value` run configuration with `[section]` headers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use scnet::error::{Error, Result};
use scnet::evalproto::{EvalSetting, Metric, SettingKind};
use scnet::losses::LossConfig;
use scnet::network::backbone::BackboneConfig;
use scnet::network::heads::ClassifierKind;
use scnet::network::{NetworkConfig, StreamSet};
use scnet::synthdata::SynthConfig;
use scnet::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const RUN_ROOT_ENV: &str = "SCNET_RUN_ROOT";
pub const PRESETS: [&str; 5] = ["toy", "ltcc", "prcc", "vc", "deepchange"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub data: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    /// `toy` or `resnet50`.
    pub backbone: String,
    pub last_stride: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub classifier: ClassifierKind,
    pub streams: StreamSet,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval_settings: Vec<SettingKind>,
    pub discard_same_camera: bool,
    pub metric: Metric,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            preset: name.to_string(),
            data: None,
            run_dir: None,
            backbone: "resnet50".into(),
            last_stride: 1,
            input_height: 384,
            input_width: 192,
            classifier: ClassifierKind::Bgap,
            streams: StreamSet::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval_settings: SettingKind::ALL.to_vec(),
            discard_same_camera: true,
            metric: Metric::Cosine,
            synth: SynthConfig::default(),
        };
        match name {
            "ltcc" | "vc" | "deepchange" => {}
            "prcc" => {
                cfg.loss.lambda1 = 0.1;
                cfg.loss.lambda2 = 0.1;
            }
            "toy" => {
                cfg.backbone = "toy".into();
                cfg.last_stride = 1;
                cfg.input_height = 128;
                cfg.input_width = 64;
                cfg.eval_settings = vec![SettingKind::General, SettingKind::ClothChanging];
                let t = &mut cfg.train;
                t.epochs = 30;
                t.p = 2;
                t.k = 4;
                t.base_lr = 5e-3;
                t.warmup_start_lr = 5e-4;
                t.warmup_epochs = 3;
                t.decay_epochs = vec![20];
                t.checkpoint_every = 10;
                t.augment.crop_padding = 0;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}` (valid: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        cfg.sync_augment();
        Ok(cfg)
    }

    fn sync_augment(&mut self) {
        self.train.augment.target_height = self.input_height;
        self.train.augment.target_width = self.input_width;
    }

    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::config(format!("{key}: `{v}` is not a valid {what}"));
        let f = || v.parse::<f64>().map_err(|_| bad("number"));
        let u = || v.parse::<usize>().map_err(|_| bad("non-negative integer"));
        let b = || match v {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(bad("boolean")),
        };
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "run.preset" => {
                if v != self.preset {
                    return Err(Error::config("run.preset must be applied before other keys"));
                }
            }
            "run.dir" => self.run_dir = path(),
            "run.seed" => t.seed = v.parse().map_err(|_| bad("seed"))?,
            "data.root" => self.data = path(),
            "model.backbone" => match v {
                "toy" | "resnet50" => self.backbone = v.into(),
                _ => return Err(bad("backbone (toy, resnet50)")),
            },
            "model.last_stride" => self.last_stride = u()?,
            "model.input_height" => self.input_height = u()?,
            "model.input_width" => self.input_width = u()?,
            "model.classifier" => self.classifier = v.parse()?,
            "model.streams" => self.streams = StreamSet::parse(v)?,
            "loss.lambda1" => l.lambda1 = f()?,
            "loss.lambda2" => l.lambda2 = f()?,
            "loss.margin" => l.triplet_margin = f()?,
            "loss.log_epsilon" => l.log_epsilon = f()?,
            "loss.enable_part" => l.enable_part = b()?,
            "loss.enable_sc" => l.enable_sc = b()?,
            "loss.enable_id" => l.enable_id = b()?,
            "loss.enable_triplet" => l.enable_triplet = b()?,
            "loss.streams" => l.streams = StreamSet::parse(v)?,
            "loss.sc_pixel_mean" => l.sc_pixel_mean = b()?,
            "loss.label_smoothing" => l.label_smoothing = f()?,
            "train.epochs" => t.epochs = u()?,
            "train.p" => t.p = u()?,
            "train.k" => t.k = u()?,
            "train.base_lr" => t.base_lr = f()?,
            "train.warmup_start_lr" => t.warmup_start_lr = f()?,
            "train.warmup_epochs" => t.warmup_epochs = u()?,
            "train.decay_epochs" => {
                t.decay_epochs = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| s.trim().parse().map_err(|_| bad("epoch list"))).collect::<Result<_>>()?
                }
            }
            "train.decay_factor" => t.decay_factor = f()?,
            "train.beta1" => t.adam.beta1 = f()?,
            "train.beta2" => t.adam.beta2 = f()?,
            "train.adam_eps" => t.adam.eps = f()?,
            "train.weight_decay" => t.adam.weight_decay = f()?,
            "train.checkpoint_every" => t.checkpoint_every = u()?,
            "train.flip_probability" => t.augment.flip_probability = f()?,
            "train.crop_padding" => t.augment.crop_padding = u()?,
            "train.erase_probability" => t.augment.erase_probability = f()?,
            "eval.settings" => {
                self.eval_settings = v.split(',').map(|s| s.parse()).collect::<Result<_>>()?;
            }
            "eval.discard_same_camera" => self.discard_same_camera = b()?,
            "eval.metric" => self.metric = v.parse()?,
            "synth.ids" => self.synth.num_identities = u()?,
            "synth.outfits" => self.synth.outfits_per_identity = u()?,
            "synth.per_outfit" => self.synth.images_per_outfit = u()?,
            "synth.cams" => self.synth.num_cameras = u()?,
            "synth.height" => self.synth.image_height = u()?,
            "synth.width" => self.synth.image_width = u()?,
            "synth.seed" => self.synth.seed = v.parse().map_err(|_| bad("seed"))?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        self.sync_augment();
        Ok(())
    }

    /// Resolves preset, then file entries, then overrides, then validates.
    pub fn resolve(preset: Option<&str>, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let entries = match file {
            Some(p) => parse_file(p)?,
            None => Vec::new(),
        };
        let from_file = entries.iter().find(|(k, _)| k == "run.preset").map(|(_, v)| v.as_str());
        let name = preset.or(from_file).unwrap_or("ltcc");
        let mut cfg = Self::preset(name)?;
        for (k, v) in entries.iter().chain(overrides).filter(|(k, _)| k != "run.preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let mut b = match self.backbone.as_str() {
            "toy" => BackboneConfig::toy(),
            "resnet50" => BackboneConfig::resnet50(),
            other => return Err(Error::config(format!("unknown backbone `{other}`"))),
        };
        b.last_stage_stride = self.last_stride;
        b.input_height = self.input_height;
        b.input_width = self.input_width;
        Ok(b)
    }

    pub fn network_config(&self, num_identities: usize) -> Result<NetworkConfig> {
        Ok(NetworkConfig {
            backbone: self.backbone_config()?,
            classifier: self.classifier,
            num_identities,
            streams: self.streams,
        })
    }

    pub fn eval_setting(&self, kind: SettingKind) -> EvalSetting {
        EvalSetting {
            kind,
            discard_same_camera: self.discard_same_camera,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config()?.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        for s in self.loss.streams.iter() {
            if !self.streams.contains(s) {
                return Err(Error::validation(format!("loss.streams uses `{}` but model.streams disables it", s.tag())));
            }
        }
        if self.classifier == ClassifierKind::BnNeck && self.loss.sc_active() {
            return Err(Error::validation("the consistency loss needs activation maps; use the bgap classifier or set lambda2 = 0"));
        }
        if self.eval_settings.is_empty() {
            return Err(Error::validation("eval.settings is empty"));
        }
        self.synth.validate()
    }

    /// Canonical text form; reading it back gives the same configuration.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let t = &self.train;
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let list = |v: &[usize]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[run]\npreset = {}\ndir = {}\nseed = {}\n", self.preset, p(&self.run_dir), t.seed);
        let _ = writeln!(s, "[data]\nroot = {}\n", p(&self.data));
        let _ = writeln!(
            s,
            "[model]\nbackbone = {}\nlast_stride = {}\ninput_height = {}\ninput_width = {}\nclassifier = {}\nstreams = {}\n",
            self.backbone,
            self.last_stride,
            self.input_height,
            self.input_width,
            match self.classifier {
                ClassifierKind::Bgap => "bgap",
                ClassifierKind::BnNeck => "bnneck",
            },
            self.streams.to_list()
        );
        let _ = writeln!(
            s,
            "[loss]\nlambda1 = {}\nlambda2 = {}\nmargin = {}\nlog_epsilon = {}\nenable_part = {}\nenable_sc = {}\nenable_id = {}\nenable_triplet = {}\nstreams = {}\nsc_pixel_mean = {}\nlabel_smoothing = {}\n",
            l.lambda1, l.lambda2, l.triplet_margin, l.log_epsilon, l.enable_part, l.enable_sc, l.enable_id, l.enable_triplet,
            l.streams.to_list(), l.sc_pixel_mean, l.label_smoothing
        );
        let _ = writeln!(
            s,
            "[train]\nepochs = {}\np = {}\nk = {}\nbase_lr = {}\nwarmup_start_lr = {}\nwarmup_epochs = {}\ndecay_epochs = {}\ndecay_factor = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\nweight_decay = {}\ncheckpoint_every = {}\nflip_probability = {}\ncrop_padding = {}\nerase_probability = {}\n",
            t.epochs, t.p, t.k, t.base_lr, t.warmup_start_lr, t.warmup_epochs, list(&t.decay_epochs), t.decay_factor,
            t.adam.beta1, t.adam.beta2, t.adam.eps, t.adam.weight_decay, t.checkpoint_every,
            t.augment.flip_probability, t.augment.crop_padding, t.augment.erase_probability
        );
        let settings: Vec<&str> = self.eval_settings.iter().map(|k| k.short()).collect();
        let _ = writeln!(
            s,
            "[eval]\nsettings = {}\ndiscard_same_camera = {}\nmetric = {}\n",
            settings.join(","),
            self.discard_same_camera,
            match self.metric {
                Metric::Cosine => "cosine",
                Metric::Euclidean => "euclidean",
            }
        );
        let y = &self.synth;
        let _ = write!(
            s,
            "[synth]\nids = {}\noutfits = {}\nper_outfit = {}\ncams = {}\nheight = {}\nwidth = {}\nseed = {}\n",
            y.num_identities, y.outfits_per_identity, y.images_per_outfit, y.num_cameras, y.image_height, y.image_width, y.seed
        );
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Parses `[section]` headers and `key = value` lines into `section.key` pairs.
pub fn parse_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err("bad section name"));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
        if section.is_empty() {
            return Err(err("key outside of any section"));
        }
        out.push((format!("{section}.{}", k.trim()), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text(&text, path)
}

/// Places a relative run directory under `$SCNET_RUN_ROOT` when it is set.
pub fn under_run_root(dir: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
