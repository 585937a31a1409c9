//! Command-line driver: corpus generation, color pretraining, encoder
//! training, propagation, evaluation and the gradient suite.
//!
//! Every command writes `<command>.config.toml` into the output directory
//! holding the effective configuration; passing that file back with
//! `--config` reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::affinity::FeatureMap;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::color::lab_to_rgb8;
use crate::encoder::{pretrain_color_autoencoder, ColorAutoencoder, ConvEncoder, Module, PretrainConfig, STRIDE_TOTAL};
use crate::error::{Error, Result};
use crate::gradsuite::{registry, run_cases, CaseReport, GradCase, TOLERANCE};
use crate::propagation::{
    encode_frames, first_frame_keypoints, first_frame_mask, propagate_video, score_keypoints, score_masks,
    static_copy, JaccardScore, LabelKind, LabelMap, Mode, PropagationConfig,
};
use crate::synthetic::{generate_scene, oracle_features, SceneSpec};
use crate::tensor::Tensor;
use crate::trainer::{run_training, TrainConfig, FINAL_CHECKPOINT};
use crate::video::{write_label_png, write_png, Video};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::SceneSpec(_) | Error::Dimension(_) => EXIT_CONFIG,
        Error::MissingDependency(_) => EXIT_MISSING,
        Error::Numeric(_) | Error::Training { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Smoke,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
    SameColor,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::SameColor => "same_color",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_videos: usize,
    pub eval_videos: usize,
    pub same_color_videos: usize,
    /// Scene seeds are `seed + offset + index` per split.
    pub eval_seed_offset: u64,
    pub same_color_seed_offset: u64,
    pub scene: SceneSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_videos: 64,
            eval_videos: 16,
            same_color_videos: 8,
            eval_seed_offset: 1_000_000,
            same_color_seed_offset: 2_000_000,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Every `frame_stride`-th frame of each training video is used.
    pub frame_stride: usize,
    pub model: PretrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            frame_stride: 4,
            model: PretrainConfig {
                epochs: 20,
                ..PretrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagateSection {
    pub split: Split,
    pub kind: LabelKind,
    /// Use planted ground-truth features instead of a trained encoder.
    pub oracle: bool,
    /// Heatmap spread in cells for keypoint propagation.
    pub heatmap_sigma: f64,
    pub config: PropagationConfig,
}

impl Default for PropagateSection {
    fn default() -> Self {
        Self {
            split: Split::Eval,
            kind: LabelKind::MaskOnehot,
            oracle: false,
            heatmap_sigma: 1.0,
            config: PropagationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub propagate: PropagateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Full)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = Self {
            profile,
            seed: 0,
            corpus: CorpusConfig::default(),
            pretrain: PretrainSection::default(),
            train: TrainConfig::default(),
            propagate: PropagateSection::default(),
        };
        match profile {
            Profile::Full => base,
            Profile::Smoke => Self {
                corpus: CorpusConfig {
                    train_videos: 4,
                    eval_videos: 2,
                    same_color_videos: 2,
                    ..base.corpus
                },
                pretrain: PretrainSection {
                    model: PretrainConfig {
                        epochs: 10,
                        ..base.pretrain.model
                    },
                    ..base.pretrain
                },
                train: TrainConfig {
                    warmup_epochs: 1,
                    joint_epochs: 1,
                    ..base.train
                },
                ..base
            },
        }
    }

    /// Profile defaults, overlaid by the TOML file, overlaid by flags.
    pub fn resolve(file: Option<&str>, profile: Option<Profile>, seed: Option<u64>, mode: Option<Mode>) -> Result<Self> {
        let overlay: toml::Table = match file {
            Some(text) => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        let profile = match (profile, overlay.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("profile: {e}")))?,
            (None, None) => Profile::Full,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        merged.insert("profile".into(), toml::Value::try_from(profile).expect("profile serializes"));
        let mut cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(m) = mode {
            cfg.propagate.config.mode = m;
        }
        cfg.train.seed = cfg.seed;
        cfg.pretrain.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.propagate.config.validate()?;
        if self.pretrain.frame_stride == 0 {
            return Err(Error::Config("pretrain.frame_stride must be positive".into()));
        }
        if self.corpus.train_videos == 0 {
            return Err(Error::Config("corpus.train_videos must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn scene_seed(&self, split: Split, index: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Eval => self.corpus.eval_seed_offset,
            Split::SameColor => self.corpus.same_color_seed_offset,
        };
        self.seed + offset + index as u64
    }

    pub fn scene_spec(&self, split: Split) -> SceneSpec {
        match split {
            Split::SameColor => SceneSpec {
                same_color: true,
                ..self.corpus.scene.clone()
            },
            _ => self.corpus.scene.clone(),
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.corpus.train_videos,
            Split::Eval => self.corpus.eval_videos,
            Split::SameColor => self.corpus.same_color_videos,
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "aftk", version, about = "Self-supervised dense correspondence on synthetic video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; unspecified keys take profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Working directory for the corpus, models and reports.
    #[arg(long, global = true, default_value = "aftk-run")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Global,
    Track,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Global => Mode::Global,
            ModeArg::Track => Mode::Track,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the train, eval and same-color corpora.
    Gen,
    /// Pretrains and freezes the Lab color autoencoder.
    PretrainColor,
    /// Trains the correspondence encoder.
    Train {
        /// Continue from the newest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Propagates first-frame labels and writes predictions with metrics.
    Propagate,
    /// Compares the trained encoder against baselines.
    Evaluate,
    /// Checks every registered gradient against central differences.
    Gradcheck {
        /// Random points per operation.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), cli.profile, cli.seed, cli.mode.map(Mode::from))?;
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    let name = match &cli.command {
        Command::Gen => "gen",
        Command::PretrainColor => "pretrain-color",
        Command::Train { .. } => "train",
        Command::Propagate => "propagate",
        Command::Evaluate => "evaluate",
        Command::Gradcheck { .. } => "gradcheck",
    };
    write_atomic(&out.join(format!("{name}.config.toml")), cfg.to_toml().as_bytes())?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, out).map(|_| EXIT_OK),
        Command::PretrainColor => cmd_pretrain_color(&cfg, out).map(|_| EXIT_OK),
        Command::Train { resume } => cmd_train(&cfg, out, *resume).map(|_| EXIT_OK),
        Command::Propagate => cmd_propagate(&cfg, out).map(|_| EXIT_OK),
        Command::Evaluate => cmd_evaluate(&cfg, out).map(|_| EXIT_OK),
        Command::Gradcheck { points } => {
            let (code, _) = cmd_gradcheck(&registry(), *points, cfg.seed, Some(out))?;
            Ok(code)
        }
    }
}

pub fn corpus_dir(out: &Path, split: Split) -> PathBuf {
    out.join("corpus").join(split.dir_name())
}

pub const COLOR_MODEL: &str = "color.aftk";

pub fn color_model_path(out: &Path) -> PathBuf {
    out.join(COLOR_MODEL)
}

pub fn encoder_path(out: &Path) -> PathBuf {
    out.join("train").join(FINAL_CHECKPOINT)
}

/// Generates one split in memory.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<Video>> {
    let spec = cfg.scene_spec(split);
    (0..cfg.split_len(split))
        .map(|i| Ok(generate_scene(&spec, cfg.scene_seed(split, i))?.to_video()))
        .collect()
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    for split in [Split::Train, Split::Eval, Split::SameColor] {
        let dir = corpus_dir(out, split);
        for (i, v) in generate_split(cfg, split)?.iter().enumerate() {
            v.save(&dir.join(format!("{i:03}")))?;
        }
        eprintln!("gen: {} videos in {}", cfg.split_len(split), dir.display());
    }
    Ok(())
}

/// Loads every video of a split, in directory order.
pub fn load_split(out: &Path, split: Split) -> Result<Vec<Video>> {
    let dir = corpus_dir(out, split);
    let entries = fs::read_dir(&dir).map_err(|_| {
        Error::MissingDependency(format!("no corpus at {}; run `aftk gen` first", dir.display()))
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingDependency(format!("{} holds no videos; run `aftk gen` first", dir.display())));
    }
    dirs.iter().map(|d| Video::load(d)).collect()
}

pub fn pretrain_frames(cfg: &RunConfig, videos: &[Video]) -> Result<Vec<Tensor>> {
    let mut frames = Vec::new();
    for v in videos {
        for t in (0..v.len()).step_by(cfg.pretrain.frame_stride) {
            frames.push(v.lab(t)?);
        }
    }
    Ok(frames)
}

pub fn cmd_pretrain_color(cfg: &RunConfig, out: &Path) -> Result<ColorAutoencoder> {
    let train = load_split(out, Split::Train)?;
    let frames = pretrain_frames(cfg, &train)?;
    let start = Instant::now();
    let (ae, curve) = pretrain_color_autoencoder(&frames, &cfg.pretrain.model)?;
    let mut ck = Checkpoint::new();
    ae.write_checkpoint(&mut ck);
    ck.save(&color_model_path(out))?;
    let json = serde_json::to_string_pretty(&curve).expect("curve serializes");
    write_atomic(&out.join("color_curve.json"), json.as_bytes())?;
    eprintln!(
        "pretrain-color: Lab MSE {:.3} -> {:.3} over {} epochs ({:.0}s)",
        curve[0],
        curve.last().copied().unwrap_or(curve[0]),
        cfg.pretrain.model.epochs,
        start.elapsed().as_secs_f64()
    );
    Ok(ae)
}

pub fn load_color_model(out: &Path) -> Result<ColorAutoencoder> {
    let path = color_model_path(out);
    if !path.is_file() {
        return Err(Error::MissingDependency(format!(
            "no pretrained color autoencoder at {}; run `aftk pretrain-color` first",
            path.display()
        )));
    }
    ColorAutoencoder::load(&path)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<ConvEncoder> {
    let ae = load_color_model(out)?;
    let train = load_split(out, Split::Train)?;
    let start = Instant::now();
    let result = run_training(&train, &ae, &cfg.train, Some(&out.join("train")), resume)?;
    if let Some(last) = result.log.last() {
        eprintln!(
            "train: {} steps, final loss {:.4} ({:.0}s)",
            result.log.len(),
            last.total,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(result.encoder)
}

pub fn load_encoder(out: &Path) -> Result<ConvEncoder> {
    let path = encoder_path(out);
    if !path.is_file() {
        return Err(Error::MissingDependency(format!(
            "no trained encoder at {}; run `aftk train` first",
            path.display()
        )));
    }
    ConvEncoder::load(&path)
}

/// Planted features for a generated video, recovered from its metadata.
pub fn oracle_frames(video: &Video) -> Result<Vec<FeatureMap>> {
    let seed = video.metadata["seed"]
        .as_u64()
        .ok_or_else(|| Error::format("manifest", "video metadata has no seed"))?;
    let spec: SceneSpec = serde_json::from_value(video.metadata["spec"].clone())
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    let scene = generate_scene(&spec, seed)?;
    (0..video.len()).map(|t| oracle_features(&scene, t)).collect()
}

/// Mean Lab color of every cell, as a `3×N` texture map.
pub fn cell_colors(video: &Video, t: usize) -> Result<LabelMap> {
    let lab = video.lab(t)?;
    let geo = video.cell_geometry();
    let (h, w) = (video.height, video.width);
    let mut values = Tensor::zeros(&[3, geo.len()]);
    let inv = 1.0 / (STRIDE_TOTAL * STRIDE_TOTAL) as f64;
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let j = geo.index(x / STRIDE_TOTAL, y / STRIDE_TOTAL);
                let v = values.at(c, j) + lab.data()[c * h * w + y * w + x] * inv;
                values.set(c, j, v);
            }
        }
    }
    LabelMap::new(LabelKind::Texture, values, geo)
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    /// Mean Lab distance to the true cell colors (texture only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lab_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoReport {
    pub video: usize,
    pub frames: Vec<FrameRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j: Option<JaccardScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck: Option<[f64; 2]>,
    pub track_fallbacks: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropagateSummary {
    pub split: Split,
    pub mode: Mode,
    pub kind: LabelKind,
    pub oracle: bool,
    pub videos: Vec<VideoReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub j_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pck_mean: Option<[f64; 2]>,
}

/// Nearest-neighbour upsampling of a cell grid to pixels.
fn upsample<T: Copy>(cells: &[T], gw: usize, h: usize, w: usize, per: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w * per);
    for y in 0..h {
        for x in 0..w {
            let j = (y / STRIDE_TOTAL) * gw + x / STRIDE_TOTAL;
            out.extend_from_slice(&cells[j * per..(j + 1) * per]);
        }
    }
    out
}

/// Propagates one split with either the trained encoder or oracle features.
pub fn propagate_split(cfg: &RunConfig, videos: &[Video], encoder: Option<&ConvEncoder>, dir: Option<&Path>) -> Result<PropagateSummary> {
    let p = &cfg.propagate;
    let mut reports = Vec::with_capacity(videos.len());
    for (vi, video) in videos.iter().enumerate() {
        let feats = match encoder {
            Some(enc) => encode_frames(video, enc)?,
            None => oracle_frames(video)?,
        };
        let first = match p.kind {
            LabelKind::MaskOnehot => first_frame_mask(video)?,
            LabelKind::KeypointHeatmap => first_frame_keypoints(video, p.heatmap_sigma)?,
            LabelKind::Texture => cell_colors(video, 0)?,
        };
        let result = propagate_video(&feats, &first, &p.config)?;
        let geo = video.cell_geometry();
        let vdir = dir.map(|d| d.join(format!("{vi:03}")));
        if let Some(d) = &vdir {
            fs::create_dir_all(d)?;
        }
        let mut frames = Vec::with_capacity(video.len());
        let mut report = VideoReport {
            video: vi,
            frames: Vec::new(),
            j: None,
            f: None,
            pck: None,
            track_fallbacks: result.fallbacks.len(),
        };
        match p.kind {
            LabelKind::MaskOnehot => {
                let hard = result.hard_labels();
                let (j, f) = score_masks(video, &hard)?;
                report.j = Some(j);
                report.f = Some(f);
                for (t, h) in hard.iter().enumerate() {
                    let file = format!("{t:03}.png");
                    if let Some(d) = &vdir {
                        let px = upsample(h, geo.width, video.height, video.width, 1);
                        write_label_png(&d.join(&file), video.width, video.height, &px)?;
                    }
                    let jt = crate::propagation::metric_jaccard(
                        std::slice::from_ref(h),
                        &[video.cell_labels(t)],
                        &(1..=video.instances() as u8).collect::<Vec<_>>(),
                    )?;
                    frames.push(FrameRecord { frame: t, file, j: Some(jt.mean), lab_error: None });
                }
            }
            LabelKind::KeypointHeatmap => {
                report.pck = Some(score_keypoints(video, &result.maps)?);
                let mut text = String::new();
                for (t, m) in result.maps.iter().enumerate() {
                    for (k, joint) in m.joints().iter().enumerate() {
                        if let Some(c) = joint {
                            let [x, y] = crate::synthetic::cell_to_pixel(*c);
                            text.push_str(&format!("{t} {k} {x} {y}\n"));
                        }
                    }
                    frames.push(FrameRecord { frame: t, file: "keypoints.txt".into(), j: None, lab_error: None });
                }
                if let Some(d) = &vdir {
                    write_atomic(&d.join("keypoints.txt"), text.as_bytes())?;
                }
            }
            LabelKind::Texture => {
                for (t, m) in result.maps.iter().enumerate() {
                    let truth = cell_colors(video, t)?;
                    let err = (0..geo.len())
                        .map(|j| {
                            (0..3)
                                .map(|c| (m.values().at(c, j) - truth.values().at(c, j)).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .sum::<f64>()
                        / geo.len() as f64;
                    let file = format!("{t:03}.png");
                    if let Some(d) = &vdir {
                        let lab = m.values().reshape(&[3, geo.height, geo.width])?;
                        let rgb = lab_to_rgb8(&lab)?;
                        let px = upsample(&rgb, geo.width, video.height, video.width, 3);
                        write_png(&d.join(&file), video.width, video.height, png::ColorType::Rgb, &px)?;
                    }
                    frames.push(FrameRecord { frame: t, file, j: None, lab_error: Some(err) });
                }
            }
        }
        report.frames = frames;
        if let Some(d) = &vdir {
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_atomic(&d.join("manifest.json"), json.as_bytes())?;
        }
        reports.push(report);
    }
    let n = reports.len().max(1) as f64;
    let j_mean = (p.kind == LabelKind::MaskOnehot)
        .then(|| reports.iter().filter_map(|r| r.j.map(|j| j.mean)).sum::<f64>() / n);
    let pck_mean = (p.kind == LabelKind::KeypointHeatmap).then(|| {
        let s = reports.iter().filter_map(|r| r.pck).fold([0.0; 2], |a, b| [a[0] + b[0], a[1] + b[1]]);
        [s[0] / n, s[1] / n]
    });
    Ok(PropagateSummary {
        split: p.split,
        mode: p.config.mode,
        kind: p.kind,
        oracle: p.oracle,
        videos: reports,
        j_mean,
        pck_mean,
    })
}

pub fn cmd_propagate(cfg: &RunConfig, out: &Path) -> Result<PropagateSummary> {
    let p = &cfg.propagate;
    let videos = load_split(out, p.split)?;
    let encoder = if p.oracle { None } else { Some(load_encoder(out)?) };
    let mode = match p.config.mode {
        Mode::Global => "global",
        Mode::Track => "track",
    };
    let dir = out
        .join("propagate")
        .join(format!("{}-{mode}{}", p.split.dir_name(), if p.oracle { "-oracle" } else { "" }));
    let summary = propagate_split(cfg, &videos, encoder.as_ref(), Some(&dir))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    if let Some(j) = summary.j_mean {
        eprintln!("propagate: J mean {j:.4} over {} videos -> {}", videos.len(), dir.display());
    }
    if let Some(p) = summary.pck_mean {
        eprintln!("propagate: PCK@0.1 {:.4} PCK@0.2 {:.4} -> {}", p[0], p[1], dir.display());
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub trained_j: f64,
    pub trained_f: f64,
    pub untrained_j: f64,
    pub static_j: f64,
    pub same_color_global_j: f64,
    pub same_color_track_j: f64,
}

fn mean_j(videos: &[Video], enc: &ConvEncoder, config: &PropagationConfig) -> Result<(f64, f64)> {
    let (mut j, mut f) = (0.0, 0.0);
    for v in videos {
        let feats = encode_frames(v, enc)?;
        let r = propagate_video(&feats, &first_frame_mask(v)?, config)?;
        let (js, fs) = score_masks(v, &r.hard_labels())?;
        j += js.mean;
        f += fs;
    }
    let n = videos.len().max(1) as f64;
    Ok((j / n, f / n))
}

/// Held-out J of an encoder against the untrained and static-copy
/// baselines, plus track versus global on the same-color split.
pub fn evaluate_encoder(cfg: &RunConfig, enc: &ConvEncoder, eval: &[Video], same: &[Video]) -> Result<Evaluation> {
    let global = PropagationConfig {
        mode: Mode::Global,
        ..cfg.propagate.config.clone()
    };
    let track = PropagationConfig {
        mode: Mode::Track,
        ..global.clone()
    };
    let untrained = ConvEncoder::new(cfg.train.feature_channels, cfg.train.seed).with_feature_scale(cfg.train.feature_scale);
    let (trained_j, trained_f) = mean_j(eval, enc, &global)?;
    let (untrained_j, _) = mean_j(eval, &untrained, &global)?;
    let static_j = eval
        .iter()
        .map(|v| score_masks(v, &static_copy(v)).map(|(j, _)| j.mean))
        .sum::<Result<f64>>()?
        / eval.len().max(1) as f64;
    let (same_color_global_j, _) = mean_j(same, enc, &global)?;
    let (same_color_track_j, _) = mean_j(same, enc, &track)?;
    Ok(Evaluation {
        trained_j,
        trained_f,
        untrained_j,
        static_j,
        same_color_global_j,
        same_color_track_j,
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Evaluation> {
    let enc = load_encoder(out)?;
    let eval = load_split(out, Split::Eval)?;
    let same = load_split(out, Split::SameColor)?;
    let e = evaluate_encoder(cfg, &enc, &eval, &same)?;
    let json = serde_json::to_string_pretty(&e).expect("evaluation serializes");
    write_atomic(&out.join("evaluation.json"), json.as_bytes())?;
    println!("held-out J   trained {:.4}  untrained {:.4}  static copy {:.4}", e.trained_j, e.untrained_j, e.static_j);
    println!("held-out F   trained {:.4}", e.trained_f);
    println!("same-color J global {:.4}  track {:.4}", e.same_color_global_j, e.same_color_track_j);
    Ok(e)
}

/// Runs `cases`, prints one line per case and returns the exit code
/// (non-zero when any case fails) with the report.
pub fn cmd_gradcheck(cases: &[GradCase], points: usize, seed: u64, out: Option<&Path>) -> Result<(i32, Vec<CaseReport>)> {
    let reports = run_cases(cases, points, seed, TOLERANCE);
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        match &r.error {
            Some(e) => println!("{:<28} {:>12} {status} ({e})", r.name, "-"),
            None => println!("{:<28} {:>12.3e} {status}", r.name, r.max_rel_error),
        }
    }
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&reports).expect("report serializes");
        write_atomic(&dir.join("gradcheck.json"), json.as_bytes())?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok((EXIT_OK, reports))
    } else {
        eprintln!("gradcheck failed: {}", failed.join(", "));
        Ok((EXIT_NUMERIC, reports))
    }
}
