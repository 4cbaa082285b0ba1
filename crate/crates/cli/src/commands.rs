//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use scnet::datamodel::{load_image, load_index, DatasetIndex};
use scnet::evalproto::{embed_splits, write_embeddings, write_results, EvalResult, SettingKind};
use scnet::network::checkpoint::hash_hex;
use scnet::network::to_input;
use scnet::preprocess::resize_bilinear;
use scnet::synthdata::{generate, INDEX_FILE};
use scnet::train::{load_model, load_model_with_classes, train_loop, TrainData, FINAL_CHECKPOINT};

use crate::config::{under_run_root, RunConfig, RESOLVED_CONFIG};
use crate::viz::composite;

/// Raised for command-line misuse; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "scnet", version, about = "Cloth-changing person re-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic cloth-changing dataset.
    GenSynth(GenSynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval(EvalArgs),
    /// Write raw-stream activation-map overlays.
    VizCam(VizArgs),
    /// Train and evaluate one short run per value of a loss weight.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// Configuration file (`[section]` + `key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hyperparameter preset: toy, ltcc, prcc, vc, deepchange.
    #[arg(long)]
    pub preset: Option<String>,
    /// Raw override, `section.key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct ModelArgs {
    /// Dataset directory holding index.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Enabled streams, e.g. `raw,head,black`.
    #[arg(long)]
    pub streams: Option<String>,
    /// Streams that receive identity and triplet losses.
    #[arg(long)]
    pub loss_streams: Option<String>,
    /// `bgap` or `bnneck`.
    #[arg(long)]
    pub classifier: Option<String>,
    #[arg(long)]
    pub no_part: bool,
    #[arg(long)]
    pub no_sc: bool,
    #[arg(long)]
    pub no_id: bool,
    #[arg(long)]
    pub no_triplet: bool,
}

impl ModelArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("data.root", self.data.as_ref().map(|p| p.display().to_string()));
        put("loss.lambda1", self.lambda1.map(|v| v.to_string()));
        put("loss.lambda2", self.lambda2.map(|v| v.to_string()));
        put("loss.margin", self.margin.map(|v| v.to_string()));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("run.seed", self.seed.map(|v| v.to_string()));
        put("model.streams", self.streams.clone());
        put("loss.streams", self.loss_streams.clone().or_else(|| self.streams.clone()));
        put("model.classifier", self.classifier.clone());
        for (flag, key) in [
            (self.no_part, "loss.enable_part"),
            (self.no_sc, "loss.enable_sc"),
            (self.no_id, "loss.enable_id"),
            (self.no_triplet, "loss.enable_triplet"),
        ] {
            if flag {
                put(key, Some("false".into()));
            }
        }
        o
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ids: Option<usize>,
    #[arg(long)]
    pub outfits: Option<usize>,
    #[arg(long)]
    pub per_outfit: Option<usize>,
    #[arg(long)]
    pub cams: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Run directory (relative paths go under $SCNET_RUN_ROOT when set).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue from a checkpoint of the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    General,
    Cc,
    Sc,
}

impl From<SettingArg> for SettingKind {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::General => SettingKind::General,
            SettingArg::Cc => SettingKind::ClothChanging,
            SettingArg::Sc => SettingKind::SameClothes,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Setting(s) to report; may repeat.
    #[arg(long, value_enum)]
    pub setting: Vec<SettingArg>,
    /// Keep same-person same-camera gallery entries.
    #[arg(long)]
    pub no_cam_filter: bool,
    /// `cosine` or `euclidean`.
    #[arg(long)]
    pub metric: Option<String>,
    /// Result file (default: eval.tsv next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the query/gallery embeddings to this file.
    #[arg(long)]
    pub dump_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the composites.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset whose index supplies ground-truth identities; without it the
    /// top-scoring class is shown.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated values, e.g. `0,0.001,0.01,0.1`.
    #[arg(long)]
    pub grid: String,
    #[arg(long, value_enum, default_value = "lambda1")]
    pub param: SweepParam,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

fn split_sets(sets: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn resolve(cfg: &ConfigArgs, mut overrides: Vec<(String, String)>) -> anyhow::Result<RunConfig> {
    overrides.extend(split_sets(&cfg.set)?);
    Ok(RunConfig::resolve(cfg.preset.as_deref(), cfg.config.as_deref(), &overrides)?)
}

fn index_path(root: &Path) -> PathBuf {
    if root.is_dir() {
        root.join(INDEX_FILE)
    } else {
        root.to_path_buf()
    }
}

fn open_index(root: Option<&Path>) -> anyhow::Result<DatasetIndex> {
    let root = root.ok_or_else(|| usage("no dataset given (--data or data.root)"))?;
    let p = index_path(root);
    Ok(load_index(&p).with_context(|| format!("loading dataset index {}", p.display()))?)
}

fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-seed{}", cfg.preset, cfg.train.seed))
}

pub fn cmd_gen_synth(a: &GenSynthArgs) -> anyhow::Result<DatasetIndex> {
    let mut o = Vec::new();
    for (k, v) in [
        ("synth.ids", a.ids.map(|v| v.to_string())),
        ("synth.outfits", a.outfits.map(|v| v.to_string())),
        ("synth.per_outfit", a.per_outfit.map(|v| v.to_string())),
        ("synth.cams", a.cams.map(|v| v.to_string())),
        ("synth.height", a.height.map(|v| v.to_string())),
        ("synth.width", a.width.map(|v| v.to_string())),
        ("synth.seed", a.seed.map(|v| v.to_string())),
        ("data.root", a.out.as_ref().map(|p| p.display().to_string())),
    ] {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    }
    let cfg = resolve(&a.cfg, o)?;
    let out = cfg.data.clone().ok_or_else(|| usage("gen-synth needs --out (or data.root)"))?;
    let idx = generate(&cfg.synth, &out)?;
    let count = |s| idx.split(s).count();
    println!(
        "wrote {} images for {} identities to {} (train {}, query {}, gallery {})",
        idx.entries.len(),
        cfg.synth.num_identities,
        out.display(),
        count(scnet::datamodel::Split::Train),
        count(scnet::datamodel::Split::Query),
        count(scnet::datamodel::Split::Gallery)
    );
    Ok(idx)
}

/// Trains with a resolved configuration; returns the run directory.
pub fn train_with(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>) -> anyhow::Result<PathBuf> {
    let index = open_index(cfg.data.as_deref())?;
    let data = TrainData::from_index(&index)?;
    let net = cfg.network_config(data.num_classes())?;
    net.validate(cfg.loss.sc_active())?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    cfg.write(&run_dir.join(RESOLVED_CONFIG))?;
    info!("training {} classes from {} images into {}", data.num_classes(), data.len(), run_dir.display());
    let t = train_loop(&data, net, cfg.loss.clone(), cfg.train.clone(), Some(run_dir), resume)?;
    if let Some(last) = t.log.last() {
        println!(
            "finished {} epochs ({} steps), final L_total {:.4}; checkpoint {}",
            t.epoch,
            t.global_step,
            last.report.total,
            run_dir.join(FINAL_CHECKPOINT).display()
        );
    }
    Ok(run_dir.to_path_buf())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<PathBuf> {
    let mut o = a.model.overrides();
    if let Some(d) = &a.run_dir {
        o.push(("run.dir".into(), d.display().to_string()));
    }
    let cfg = resolve(&a.cfg, o)?;
    let dir = under_run_root(&cfg.run_dir.clone().unwrap_or_else(|| default_run_dir(&cfg)));
    train_with(&cfg, &dir, a.resume.as_deref())
}

pub fn evaluate_settings(
    cfg: &RunConfig,
    checkpoint: &Path,
    index: &DatasetIndex,
    settings: &[SettingKind],
    dump: Option<&Path>,
    skip_empty: bool,
) -> anyhow::Result<Vec<(SettingKind, EvalResult)>> {
    if !checkpoint.exists() {
        bail!(scnet::Error::Eval(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let model = load_model(checkpoint)?;
    let emb = embed_splits(&model, index, 16)?;
    if let Some(p) = dump {
        write_embeddings(p, &emb)?;
    }
    let mut rows = Vec::new();
    for &kind in settings {
        match emb.evaluate(cfg.eval_setting(kind), cfg.metric) {
            Ok(r) => rows.push((kind, r)),
            Err(scnet::Error::Eval(msg)) if skip_empty && msg == "no valid queries" => {
                warn!("setting {kind} skipped: no query has a valid gallery match");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if rows.is_empty() {
        bail!(scnet::Error::Eval("no valid queries in any setting".into()));
    }
    Ok(rows)
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<Vec<(SettingKind, EvalResult)>> {
    let mut o = Vec::new();
    if let Some(d) = &a.data {
        o.push(("data.root".into(), d.display().to_string()));
    }
    if a.no_cam_filter {
        o.push(("eval.discard_same_camera".into(), "false".into()));
    }
    if let Some(m) = &a.metric {
        o.push(("eval.metric".into(), m.clone()));
    }
    let cfg = resolve(&a.cfg, o)?;
    let settings: Vec<SettingKind> = if a.setting.is_empty() {
        cfg.eval_settings.clone()
    } else {
        a.setting.iter().map(|&s| s.into()).collect()
    };
    let index = open_index(cfg.data.as_deref())?;
    let rows = evaluate_settings(&cfg, &a.checkpoint, &index, &settings, a.dump_embeddings.as_deref(), a.setting.is_empty())?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.with_file_name("eval.tsv"));
    write_results(&out, &rows)?;
    for (k, r) in &rows {
        println!("{k}: Rank-1 {:.4}  mAP {:.4}  ({} queries)", r.rank1(), r.map, r.num_valid_queries);
    }
    Ok(rows)
}

/// Writes one composite per readable input; returns the files written.
pub fn cmd_viz_cam(a: &VizArgs) -> anyhow::Result<Vec<PathBuf>> {
    let (model, person_ids) = load_model_with_classes(&a.checkpoint)?;
    let by_path: BTreeMap<PathBuf, u32> = match &a.data {
        Some(d) => {
            let idx = open_index(Some(d))?;
            idx.entries.iter().map(|e| (idx.resolve(&e.image_path), e.person_id)).collect()
        }
        None => BTreeMap::new(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let b = &model.config.backbone;
    let mut written = Vec::new();
    for path in &a.images {
        let img = match load_image(path) {
            Ok(i) => i,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let img = if img.dim() == (b.input_height, b.input_width, 3) {
            img
        } else {
            resize_bilinear(&img, b.input_height, b.input_width)
        };
        let (cam, logits) = model.raw_cam(&to_input::<f32>(std::slice::from_ref(&img))?)?;
        let gt = by_path
            .get(path)
            .and_then(|pid| person_ids.iter().position(|p| p == pid));
        let class = gt.unwrap_or_else(|| {
            let row = logits.row(0);
            (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        });
        let out_img = composite(&img, cam.slice(ndarray::s![0, class, .., ..]), 0.5);
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let out = a.out.join(format!("{stem}_cam.png"));
        scnet::datamodel::save_image(&out, &out_img)?;
        written.push(out);
    }
    println!("wrote {} overlays to {}", written.len(), a.out.display());
    Ok(written)
}

pub const SWEEP_TABLE: &str = "sweep.tsv";
const SWEEP_ROWS: &str = "rows.tsv";

/// One completed grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub general_rank1: f64,
    pub cc_rank1: f64,
    pub general_map: f64,
    pub cc_map: f64,
}

impl SweepRow {
    fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.value, self.general_rank1, self.cc_rank1, self.general_map, self.cc_map
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let f: Vec<f64> = line.split('\t').map(|s| s.parse().ok()).collect::<Option<_>>()?;
        (f.len() == 5).then(|| Self {
            value: f[0],
            general_rank1: f[1],
            cc_rank1: f[2],
            general_map: f[3],
            cc_map: f[4],
        })
    }
}

pub fn parse_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| usage(format!("grid value `{t}` is not a number"))))
        .collect::<anyhow::Result<_>>()?;
    if vals.is_empty() {
        return Err(usage("the sweep grid is empty"));
    }
    Ok(vals)
}

pub fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<Vec<SweepRow>> {
    let grid = parse_grid(&a.grid)?;
    let base = resolve(&a.cfg, a.model.overrides())?;
    let dir = under_run_root(
        &a.run_dir
            .clone()
            .or(base.run_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("sweep-{}", base.preset))),
    );
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let key = hash_hex(format!("{:?}\n{}", a.param, base.to_text()).as_bytes());
    let rows_path = dir.join(SWEEP_ROWS);
    let mut done: Vec<SweepRow> = match fs::read_to_string(&rows_path) {
        Ok(text) if text.lines().next() == Some(&format!("# {key}")) => text.lines().skip(1).filter_map(SweepRow::parse).collect(),
        _ => {
            fs::write(&rows_path, format!("# {key}\n")).with_context(|| format!("writing {}", rows_path.display()))?;
            Vec::new()
        }
    };
    let index = open_index(base.data.as_deref())?;
    for &v in &grid {
        if done.iter().any(|r| r.value == v) {
            info!("grid point {v} already done");
            continue;
        }
        let mut cfg = base.clone();
        if matches!(a.param, SweepParam::Lambda1 | SweepParam::Both) {
            cfg.loss.lambda1 = v;
        }
        if matches!(a.param, SweepParam::Lambda2 | SweepParam::Both) {
            cfg.loss.lambda2 = v;
        }
        cfg.validate()?;
        let run = dir.join(format!("value_{v}"));
        if run.exists() {
            fs::remove_dir_all(&run).with_context(|| format!("clearing {}", run.display()))?;
        }
        train_with(&cfg, &run, None)?;
        let res = evaluate_settings(
            &cfg,
            &run.join(FINAL_CHECKPOINT),
            &index,
            &[SettingKind::General, SettingKind::ClothChanging],
            None,
            false,
        )?;
        let row = SweepRow {
            value: v,
            general_rank1: res[0].1.rank1(),
            cc_rank1: res[1].1.rank1(),
            general_map: res[0].1.map,
            cc_map: res[1].1.map,
        };
        let mut text = fs::read_to_string(&rows_path).unwrap_or_default();
        text.push_str(&row.line());
        text.push('\n');
        fs::write(&rows_path, text).with_context(|| format!("writing {}", rows_path.display()))?;
        done.push(row);
    }
    let mut rows: Vec<SweepRow> = done.into_iter().filter(|r| grid.contains(&r.value)).collect();
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    let mut table = String::from("# value\tgeneral_rank1\tcc_rank1\tgeneral_mAP\tcc_mAP\n");
    for r in &rows {
        table.push_str(&r.line());
        table.push('\n');
        println!("{}", r.line());
    }
    fs::write(dir.join(SWEEP_TABLE), table).with_context(|| format!("writing {}", dir.join(SWEEP_TABLE).display()))?;
    Ok(rows)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::VizCam(a) => cmd_viz_cam(a).map(drop),
        Command::Sweep(a) => cmd_sweep(a).map(drop),
    }
}

/// 2 usage, 3 validation, 4 runtime abort.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<scnet::Error>() {
        Some(scnet::Error::Validation(_) | scnet::Error::Config(_) | scnet::Error::Parse { .. }) => 3,
        _ => 4,
    }
}
