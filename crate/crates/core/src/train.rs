//! PK sampling, the learning-rate schedule and the training loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array3, Array4};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetIndex, LabelVocabulary, Split, NUM_PARTS};
use crate::error::{Error, Result};
use crate::losses::{compute_losses, LossConfig, LossReport};
use crate::network::checkpoint::{hash_hex, Checkpoint, CheckpointMeta, RngState};
use crate::network::{to_input, NetworkConfig, ScNet};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{augment, build_part_masks, erase_clothing, AugmentConfig};
use crate::seeding::derived_rng;

pub const LOG_FILE: &str = "train.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint after every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            p: 4,
            k: 8,
            base_lr: 3.5e-4,
            warmup_start_lr: 3.5e-6,
            warmup_epochs: 10,
            decay_epochs: vec![40, 80],
            decay_factor: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be positive"));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::validation("batches need at least 2 identities and 2 images per identity"));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("warmup_start_lr", self.warmup_start_lr),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::validation("decay_epochs must be strictly increasing"));
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return Err(Error::validation("warmup must end before the first decay epoch"));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::validation("invalid optimizer hyperparameters"));
        }
        self.augment.validate()
    }
}

/// Learning rate for a zero-based epoch: linear warmup reaching `base_lr`
/// on the last warmup epoch, then a step decay at each decay epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        if cfg.warmup_epochs == 1 {
            return cfg.base_lr;
        }
        let t = epoch as f64 / (cfg.warmup_epochs - 1) as f64;
        return cfg.warmup_start_lr + t * (cfg.base_lr - cfg.warmup_start_lr);
    }
    let decays = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

/// Training images held in memory with their dense class labels.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<Array3<f32>>,
    pub black: Vec<Array3<f32>>,
    pub parsing: Vec<ndarray::Array2<u8>>,
    pub labels: Vec<usize>,
    /// Sample indices per class.
    pub by_class: Vec<Vec<usize>>,
    /// Original person id of each class.
    pub person_ids: Vec<u32>,
    pub vocabulary: LabelVocabulary,
}

impl TrainData {
    pub fn from_index(index: &DatasetIndex) -> Result<Self> {
        let entries: Vec<_> = index.split(Split::Train).collect();
        if entries.is_empty() {
            return Err(Error::validation("dataset has no train entries"));
        }
        let ids: BTreeMap<u32, usize> = {
            let mut uniq: Vec<u32> = entries.iter().map(|e| e.person_id).collect();
            uniq.sort_unstable();
            uniq.dedup();
            uniq.into_iter().enumerate().map(|(i, p)| (p, i)).collect()
        };
        let mut data = Self {
            images: Vec::with_capacity(entries.len()),
            black: Vec::with_capacity(entries.len()),
            parsing: Vec::with_capacity(entries.len()),
            labels: Vec::with_capacity(entries.len()),
            by_class: vec![Vec::new(); ids.len()],
            person_ids: ids.keys().copied().collect(),
            vocabulary: index.vocabulary.clone(),
        };
        for (i, e) in entries.into_iter().enumerate() {
            let s = index.load_sample(e)?;
            let label = ids[&e.person_id];
            data.black.push(erase_clothing(&s, &index.vocabulary));
            data.images.push(s.image);
            data.parsing.push(s.parsing);
            data.labels.push(label);
            data.by_class[label].push(i);
        }
        Ok(data)
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Splits one epoch into PK batches: identities in a seeded shuffle, taken
/// `p` at a time (an incomplete tail group is dropped), `k` samples each,
/// drawn with replacement only when an identity has fewer than `k`.
pub fn pk_sample<R: Rng + ?Sized>(by_class: &[Vec<usize>], p: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let usable: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if usable.len() < p {
        return Err(Error::config(format!(
            "PK sampling needs {p} identities, the train split has {}",
            usable.len()
        )));
    }
    let mut order = usable;
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len() / p);
    for group in order.chunks_exact(p) {
        let mut batch = Vec::with_capacity(p * k);
        for &c in group {
            let pool = &by_class[c];
            if pool.len() >= k {
                batch.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
            } else {
                batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub const LOG_HEADER: &str = "# epoch\tstep\tlr\tL_part\tL_sc\tL_id_r\tL_id_h\tL_id_b\tL_tri_r\tL_tri_h\tL_tri_b\tL_total";

impl LogRecord {
    /// Tab-separated; floats use the shortest exact representation.
    pub fn to_line(&self) -> String {
        let r = &self.report;
        let vals = [r.part, r.sc, r.id[0], r.id[1], r.id[2], r.tri[0], r.tri[1], r.tri[2], r.total];
        let mut s = format!("{}\t{}\t{}", self.epoch, self.step, self.lr);
        for v in vals {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        if f.len() != 12 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            lr: num(2)?,
            report: LossReport {
                part: num(3)?,
                sc: num(4)?,
                id: [num(5)?, num(6)?, num(7)?],
                tri: [num(8)?, num(9)?, num(10)?],
                total: num(11)?,
            },
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(i, l)| {
            LogRecord::parse(l).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "malformed log record".into(),
            })
        })
        .collect()
}

/// How often optional loss machinery actually ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub part_mask_batches: usize,
    pub fusion_batches: usize,
    pub steps: usize,
}

/// Mutable training state; everything needed to resume lives here.
pub struct Trainer {
    pub net: ScNet<f32>,
    pub optim: Adam<f32>,
    pub net_cfg: NetworkConfig,
    pub loss_cfg: LossConfig,
    pub train_cfg: TrainConfig,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    pub log: Vec<LogRecord>,
    pub stats: TrainStats,
    /// Person id behind each class index, recorded from the training data.
    pub class_person_ids: Vec<u32>,
    run_dir: Option<PathBuf>,
    log_file: Option<File>,
}

/// Fingerprint of the configuration, ignoring the epoch budget and the
/// checkpoint cadence so a run can be resumed and extended.
pub fn config_hash(net: &NetworkConfig, loss: &LossConfig, train: &TrainConfig) -> String {
    let mut t = train.clone();
    t.epochs = 0;
    t.checkpoint_every = 0;
    let v = serde_json::json!({ "network": net, "loss": loss, "train": t });
    hash_hex(v.to_string().as_bytes())
}

impl Trainer {
    pub fn new(net_cfg: NetworkConfig, loss_cfg: LossConfig, train_cfg: TrainConfig) -> Result<Self> {
        loss_cfg.validate()?;
        train_cfg.validate()?;
        let b = &net_cfg.backbone;
        if (train_cfg.augment.target_height, train_cfg.augment.target_width) != (b.input_height, b.input_width) {
            return Err(Error::validation(format!(
                "augmentation target {}x{} differs from the network input {}x{}",
                train_cfg.augment.target_height, train_cfg.augment.target_width, b.input_height, b.input_width
            )));
        }
        for s in loss_cfg.streams.iter() {
            if !net_cfg.streams.contains(s) {
                return Err(Error::validation(format!("loss uses stream {} that the network disables", s.tag())));
            }
        }
        let mut net = ScNet::new(net_cfg.clone(), loss_cfg.sc_active())?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        net.init(&mut rng);
        Ok(Self {
            net,
            optim: Adam::new(train_cfg.adam),
            net_cfg,
            loss_cfg,
            train_cfg,
            rng,
            epoch: 0,
            global_step: 0,
            log: Vec::new(),
            stats: TrainStats::default(),
            class_person_ids: Vec::new(),
            run_dir: None,
            log_file: None,
        })
    }

    /// Sends the log and checkpoints to `dir` (the log is appended to).
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        self.log_file = Some(f);
        self.run_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.net_cfg, &self.loss_cfg, &self.train_cfg)
    }

    /// Restores model, optimizer, sampler state and counters from `path`.
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if ck.meta.config_hash != self.config_hash() {
            return Err(bad("configuration differs from the checkpointed run".into()));
        }
        let (model, optim): (Vec<_>, Vec<_>) = ck.tensors.iter().cloned().partition(|(n, _)| !n.starts_with("optim."));
        self.net.load_state_dict(&model)?;
        let lookup: BTreeMap<String, ndarray::ArrayD<f32>> = optim.into_iter().collect();
        let step = ck.meta.extra.get("optim_step").and_then(|v| v.as_u64()).unwrap_or(0);
        self.optim = Adam::new(self.train_cfg.adam);
        self.optim.step = step;
        if step > 0 {
            for (name, p) in self.net.params() {
                if p.role == crate::nn::ParamRole::Buffer {
                    continue;
                }
                let m = lookup.get(&format!("optim.m.{name}")).ok_or_else(|| bad(format!("missing moment for {name}")))?;
                let v = lookup.get(&format!("optim.v.{name}")).ok_or_else(|| bad(format!("missing moment for {name}")))?;
                self.optim.moments.push((name, m.clone(), v.clone()));
            }
        }
        self.rng = ck.meta.rng.as_ref().ok_or_else(|| bad("no rng state".into()))?.restore()?;
        self.epoch = ck.meta.epoch;
        self.global_step = ck.meta.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = self.net.state_dict();
        for (name, m, v) in &self.optim.moments {
            tensors.push((format!("optim.m.{name}"), m.clone()));
            tensors.push((format!("optim.v.{name}"), v.clone()));
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.config_hash(),
                epoch: self.epoch,
                step: self.global_step,
                rng: Some(RngState::capture(&self.rng)),
                extra: serde_json::json!({
                    "optim_step": self.optim.step,
                    "person_ids": self.class_person_ids,
                    "network": self.net_cfg,
                    "loss": self.loss_cfg,
                    "train": self.train_cfg,
                }),
            },
            tensors,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    fn write_log(&mut self, rec: &LogRecord) -> Result<()> {
        if let (Some(f), Some(dir)) = (&mut self.log_file, &self.run_dir) {
            writeln!(f, "{}", rec.to_line()).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
        }
        Ok(())
    }

    /// One optimizer step on the batch `batch` (sample indices).
    pub fn step(&mut self, data: &TrainData, batch: &[usize], step_in_epoch: usize) -> Result<LogRecord> {
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.train_cfg);
        let (h, w) = self.net.feature_size();
        let part = self.loss_cfg.part_active();
        let mut raws = Vec::with_capacity(batch.len());
        let mut blacks = Vec::with_capacity(batch.len());
        let mut masks = part.then(|| Array4::<f32>::zeros((batch.len(), NUM_PARTS, h, w)));
        for (slot, &i) in batch.iter().enumerate() {
            let key = [epoch as u64, step_in_epoch as u64, slot as u64];
            let mut rng = derived_rng(self.train_cfg.seed, &key);
            let v = augment(&data.images[i], &data.black[i], &data.parsing[i], &self.train_cfg.augment, &mut rng)?;
            if let Some(m) = masks.as_mut() {
                let set = build_part_masks(&v.parsing, &data.vocabulary, h, w)?;
                m.index_axis_mut(ndarray::Axis(0), slot).assign(&set.masks.mapv(f32::from));
            }
            raws.push(v.raw);
            blacks.push(v.black);
        }
        if part {
            self.stats.part_mask_batches += 1;
        }
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let raw = to_input::<f32>(&raws)?;
        let black = if self.net_cfg.streams.black { Some(to_input::<f32>(&blacks)?) } else { None };

        let (out, tape) = self.net.forward_train(&raw, black.as_ref(), Mode::Train)?;
        let (report, grads) = compute_losses(&out, &labels, masks.as_ref(), &self.loss_cfg)?;
        if grads.streams.iter().any(|g| g.features.is_some()) {
            self.stats.fusion_batches += 1;
        }
        let finite = [report.part, report.sc, report.total]
            .iter()
            .chain(&report.id)
            .chain(&report.tri)
            .all(|v| v.is_finite());
        if !finite {
            let err = Error::NonFinite {
                epoch,
                step: self.global_step,
                indices: batch.to_vec(),
                detail: format!("{report:?}"),
            };
            if let Some(dir) = &self.run_dir {
                let dump = dir.join("nonfinite_batch.txt");
                let text = format!("{err}\nlabels {labels:?}\n");
                fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
            }
            return Err(err);
        }
        self.net.zero_grad();
        self.net.backward(&out, &tape, &grads)?;
        self.net.absorb_stats(&tape);
        self.optim.update(&mut self.net.params_mut(), lr)?;

        let rec = LogRecord {
            epoch,
            step: self.global_step,
            lr,
            report,
        };
        self.global_step += 1;
        self.stats.steps += 1;
        self.write_log(&rec)?;
        self.log.push(rec);
        Ok(rec)
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<()> {
        let batches = pk_sample(&data.by_class, self.train_cfg.p, self.train_cfg.k, &mut self.rng)?;
        for (i, b) in batches.iter().enumerate() {
            self.step(data, b, i)?;
        }
        self.epoch += 1;
        if let Some(last) = self.log.last() {
            info!("epoch {} done, lr {:.3e}, L_total {:.4}", self.epoch, last.lr, last.report.total);
        }
        if let Some(dir) = self.run_dir.clone() {
            let every = self.train_cfg.checkpoint_every;
            if every > 0 && self.epoch % every == 0 {
                self.save_checkpoint(&dir.join(CHECKPOINT_DIR).join(format!("epoch_{:04}.ckpt", self.epoch)))?;
            }
        }
        Ok(())
    }

    /// Trains until `train_cfg.epochs` epochs are complete, then writes the
    /// final checkpoint.
    pub fn run(&mut self, data: &TrainData) -> Result<()> {
        if data.num_classes() != self.net_cfg.num_identities {
            return Err(Error::validation(format!(
                "network has {} identity classes, train split has {}",
                self.net_cfg.num_identities,
                data.num_classes()
            )));
        }
        self.class_person_ids = data.person_ids.clone();
        while self.epoch < self.train_cfg.epochs {
            self.run_epoch(data)?;
        }
        if let Some(dir) = self.run_dir.clone() {
            self.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }
}

/// Builds a trainer, optionally resumes it, and runs to completion.
pub fn train_loop(
    data: &TrainData,
    net_cfg: NetworkConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    run_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Trainer> {
    let mut t = Trainer::new(net_cfg, loss_cfg, train_cfg)?;
    if let Some(dir) = run_dir {
        t = t.with_run_dir(dir)?;
    }
    if let Some(ck) = resume {
        t.resume(ck)?;
    }
    t.run(data)?;
    Ok(t)
}

/// Rebuilds a model for inference from a checkpoint written by `Trainer`.
pub fn load_model(path: &Path) -> Result<ScNet<f32>> {
    Ok(load_model_with_classes(path)?.0)
}

/// Like `load_model`, also returning the person id of each class index.
pub fn load_model_with_classes(path: &Path) -> Result<(ScNet<f32>, Vec<u32>)> {
    let ck = Checkpoint::load(path)?;
    let person_ids: Vec<u32> = ck
        .meta
        .extra
        .get("person_ids")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let net_cfg: NetworkConfig = serde_json::from_value(ck.meta.extra.get("network").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("network configuration: {e}"),
        })?;
    let model: Vec<_> = ck.tensors.into_iter().filter(|(n, _)| !n.starts_with("optim.")).collect();
    let mut net = ScNet::new(net_cfg, false)?;
    net.load_state_dict(&model)?;
    Ok((net, person_ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn schedule_anchor_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 3.5e-6);
        assert!((lr_at(9, &cfg) - 3.5e-4).abs() < 1e-18);
        assert!((lr_at(40, &cfg) - 3.5e-5).abs() < 1e-18);
        assert!((lr_at(80, &cfg) - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_matches_independent_table() {
        // hand-built table: warmup values from (5/9)-style fractions, then plateaus
        let cfg = TrainConfig::default();
        let mut table = Vec::new();
        for e in 0..10 {
            table.push(3.5e-6 + (e as f64 / 9.0) * (3.5e-4 - 3.5e-6));
        }
        table.extend(std::iter::repeat_n(3.5e-4, 30));
        table.extend(std::iter::repeat_n(3.5e-5, 40));
        table.extend(std::iter::repeat_n(3.5e-6, 70));
        assert_eq!(table.len(), 150);
        for (e, want) in table.iter().enumerate() {
            assert!((lr_at(e, &cfg) - want).abs() <= 1e-15, "epoch {e}");
        }
        let five = 3.5e-6 + (5.0 / 9.0) * (3.5e-4 - 3.5e-6);
        assert!((lr_at(5, &cfg) - five).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_monotone(e in 0usize..149) {
            let cfg = TrainConfig::default();
            let (a, b) = (lr_at(e, &cfg), lr_at(e + 1, &cfg));
            if e + 1 < cfg.warmup_epochs {
                prop_assert!(b > a);
            } else if cfg.decay_epochs.contains(&(e + 1)) {
                prop_assert!((b - a * 0.1).abs() < 1e-18);
            } else if e + 1 >= cfg.warmup_epochs {
                prop_assert!(b <= a);
            }
        }
    }

    #[test]
    fn pk_batches_have_p_identities_of_k() {
        let by_class: Vec<Vec<usize>> = (0..6).map(|c| (c * 10..c * 10 + 9).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = pk_sample(&by_class, 4, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.len(), 32);
        let mut counts = BTreeMap::new();
        for &i in b {
            *counts.entry(i / 10).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&n| n == 8));
        // without replacement when enough images exist
        for chunk in b.chunks(8) {
            let mut c = chunk.to_vec();
            c.sort();
            c.dedup();
            assert_eq!(c.len(), 8);
        }
    }

    #[test]
    fn small_identities_are_drawn_with_replacement() {
        let by_class = vec![vec![0, 1, 2], vec![3, 4, 5, 6, 7, 8, 9, 10, 11]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = &pk_sample(&by_class, 2, 8, &mut rng).unwrap()[0];
        let small: Vec<usize> = b.iter().copied().filter(|&i| i < 3).collect();
        assert_eq!(small.len(), 8);
        assert!(small.iter().all(|i| by_class[0].contains(i)));
    }

    #[test]
    fn pk_sampling_is_seeded_and_checks_identity_count() {
        let by_class: Vec<Vec<usize>> = (0..8).map(|c| vec![c * 2, c * 2 + 1]).collect();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..3).map(|_| pk_sample(&by_class, 4, 2, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(pk_sample(&by_class[..3], 4, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn log_lines_round_trip() {
        let rec = LogRecord {
            epoch: 3,
            step: 7,
            lr: 3.5e-4,
            report: LossReport {
                part: 1.0 / 3.0,
                sc: 0.1,
                id: [1.2, 0.0, 2.0f64.sqrt()],
                tri: [0.3, 0.0, 1e-9],
                total: 4.25,
            },
        };
        assert_eq!(LogRecord::parse(&rec.to_line()), Some(rec));
    }

    fn tiny_setup(dir: &Path) -> (TrainData, NetworkConfig, LossConfig, TrainConfig) {
        let cfg = SynthConfig {
            num_identities: 4,
            outfits_per_identity: 2,
            images_per_outfit: 2,
            num_cameras: 2,
            ..SynthConfig::default()
        };
        let idx = generate(&cfg, dir).unwrap();
        let data = TrainData::from_index(&idx).unwrap();
        let net = NetworkConfig::toy(data.num_classes());
        let train = TrainConfig {
            epochs: 3,
            p: 2,
            k: 2,
            warmup_epochs: 1,
            decay_epochs: vec![],
            checkpoint_every: 1,
            augment: AugmentConfig {
                target_height: 128,
                target_width: 64,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        };
        (data, net, LossConfig::default(), train)
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trace() {
        let dir = tempfile::tempdir().unwrap();
        let (data, net, loss, train) = tiny_setup(&dir.path().join("data"));
        let full = train_loop(&data, net.clone(), loss.clone(), train.clone(), Some(&dir.path().join("a")), None).unwrap();
        assert_eq!(full.log.len(), 6);
        let mut first = TrainConfig { epochs: 1, ..train.clone() };
        first.checkpoint_every = 1;
        train_loop(&data, net.clone(), loss.clone(), first, Some(&dir.path().join("b")), None).unwrap();
        let ck = dir.path().join("b").join(CHECKPOINT_DIR).join("epoch_0001.ckpt");
        let resumed = train_loop(&data, net, loss, train, Some(&dir.path().join("b")), Some(&ck)).unwrap();
        assert_eq!(resumed.log[..], full.log[2..]);
        let logged = read_log(&dir.path().join("b").join(LOG_FILE)).unwrap();
        assert_eq!(logged, full.log);
    }

    #[test]
    fn logged_totals_recombine() {
        let dir = tempfile::tempdir().unwrap();
        let (data, net, loss, train) = tiny_setup(&dir.path().join("data"));
        let t = train_loop(&data, net, loss.clone(), TrainConfig { epochs: 1, ..train }, Some(&dir.path().join("run")), None).unwrap();
        for rec in read_log(&dir.path().join("run").join(LOG_FILE)).unwrap() {
            assert!((rec.report.recombine(loss.lambda1, loss.lambda2) - rec.report.total).abs() <= 1e-6);
        }
        assert_eq!(t.stats.part_mask_batches, 2);
        assert_eq!(t.stats.fusion_batches, 2);
    }

    #[test]
    fn zero_lambdas_skip_masks_and_fusion() {
        let dir = tempfile::tempdir().unwrap();
        let (data, net, _, train) = tiny_setup(&dir.path().join("data"));
        let loss = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let t = train_loop(&data, net, loss, TrainConfig { epochs: 1, ..train }, None, None).unwrap();
        assert_eq!(t.stats.steps, 2);
        assert_eq!((t.stats.part_mask_batches, t.stats.fusion_batches), (0, 0));
        assert!(t.log.iter().all(|r| r.report.part == 0.0 && r.report.sc == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let (data, net, loss, train) = tiny_setup(&dir.path().join("data"));
        let t = train_loop(&data, net, loss, TrainConfig { epochs: 1, ..train }, Some(&dir.path().join("run")), None).unwrap();
        let loaded = load_model(&dir.path().join("run").join(FINAL_CHECKPOINT)).unwrap();
        let a = t.net.embed_images(&data.images, 4).unwrap();
        let b = loaded.embed_images(&data.images, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_augment_size_is_rejected() {
        let train = TrainConfig::default();
        let err = Trainer::new(NetworkConfig::toy(4), LossConfig::default(), train);
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
