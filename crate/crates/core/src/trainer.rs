//! Two-stage training of the gray-scale encoder.
//!
//! Warm-up matches patches cut at the same place in two frames. The joint
//! stage cuts the reference patch only, localizes it in the whole target
//! frame and matches against a bilinear crop of the located box, so the
//! localization is trained through the crop. The frozen color autoencoder
//! supplies the reconstruction targets.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{affinity_var, canonical_grid, FeatureMap, Geometry, DEFAULT_TEMPERATURE};
use crate::checkpoint::Checkpoint;
use crate::encoder::{encode_color, encode_gray_var, shuffle, ColorAutoencoder, ConvEncoder, Module, FEATURE_SCALE, STRIDE_TOTAL};
use crate::error::{Error, Result};
use crate::localization::{localize_patch_var, roi_crop, roi_crop_var, BBox, LocalizeConfig};
use crate::objectives::{
    concentration_local_var, concentration_truncated_var, cycle_mse_var, reconstruction_loss_var, total_loss,
    total_loss_var, LossBreakdown, LossTerms, LossVars, LossWeights, Stage,
};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::{Graph, Tensor, Var};
use crate::video::Video;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub lr_warmup: f64,
    pub lr_joint: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    pub max_gap: usize,
    /// Samples drawn from each video per epoch.
    pub pairs_per_video: usize,
    pub feature_channels: usize,
    /// Norm of every encoder output vector.
    pub feature_scale: f64,
    /// Block side, in cells, for the local concentration term.
    pub local_grid: usize,
    pub temperature: f64,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// When false the joint stage keeps using aligned crops.
    pub localization: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            joint_epochs: 10,
            lr_warmup: 1e-3,
            lr_joint: 0.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            patch_size: 64,
            max_gap: 4,
            pairs_per_video: 8,
            feature_channels: 32,
            feature_scale: FEATURE_SCALE,
            local_grid: 4,
            temperature: DEFAULT_TEMPERATURE,
            clip_norm: 10.0,
            weights: LossWeights::default(),
            localization: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % STRIDE_TOTAL != 0 {
            return Err(Error::Config(format!(
                "patch size {} must be a positive multiple of {STRIDE_TOTAL}",
                self.patch_size
            )));
        }
        if !(self.lr_warmup > 0.0 && self.lr_joint > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.max_gap == 0 || self.pairs_per_video == 0 || self.local_grid == 0 {
            return Err(Error::Config(
                "batch size, max gap, pairs per video and local grid must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.clip_norm > 0.0 && self.feature_scale > 0.0) {
            return Err(Error::Config("temperature, clip norm and feature scale must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Warmup => self.lr_warmup,
            Stage::Joint => self.lr_joint,
        }
    }

    pub fn stage_of_epoch(&self, epoch: usize) -> Stage {
        if epoch < self.warmup_epochs {
            Stage::Warmup
        } else {
            Stage::Joint
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.joint_epochs
    }
}

/// Cell-aligned square patch, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PixelBox {
    /// Frame cell indices covered by the box, row-major.
    pub fn cells(&self, frame: Geometry) -> Vec<usize> {
        let (x0, y0, n) = (self.x / STRIDE_TOTAL, self.y / STRIDE_TOTAL, self.size / STRIDE_TOTAL);
        (0..n * n).map(|k| frame.index(x0 + k % n, y0 + k / n)).collect()
    }

    pub fn cell_geometry(&self) -> Geometry {
        let n = self.size / STRIDE_TOTAL;
        Geometry::new(n, n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub video: usize,
    pub reference: usize,
    pub target: usize,
    pub patch: PixelBox,
    pub stage: Stage,
}

/// Draws a frame pair with gap in `[1, max_gap]` and a cell-aligned
/// reference patch. In warm-up the same box is cut from the target; in the
/// joint stage the whole target frame is kept.
pub fn sample_pair(
    video: &Video,
    video_index: usize,
    stage: Stage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairSample> {
    if video.len() < 2 {
        return Err(Error::Sampling(format!("video {video_index} has {} frame(s); need 2", video.len())));
    }
    if cfg.patch_size > video.height || cfg.patch_size > video.width {
        return Err(Error::Sampling(format!(
            "patch {} px does not fit a {}×{} video",
            cfg.patch_size, video.height, video.width
        )));
    }
    let gap = rng.gen_range(1..=cfg.max_gap.min(video.len() - 1));
    let reference = rng.gen_range(0..video.len() - gap);
    let cells = |extent: usize| (extent - cfg.patch_size) / STRIDE_TOTAL;
    let x = STRIDE_TOTAL * rng.gen_range(0..=cells(video.width));
    let y = STRIDE_TOTAL * rng.gen_range(0..=cells(video.height));
    Ok(PairSample {
        video: video_index,
        reference,
        target: reference + gap,
        patch: PixelBox {
            x,
            y,
            size: cfg.patch_size,
        },
        stage,
    })
}

/// Inputs for one sample: gray frames and color latents on the full grid.
pub struct SampleData<'a> {
    pub gray_ref: Tensor,
    pub gray_tgt: Tensor,
    pub color_ref: &'a Tensor,
    pub color_tgt: &'a Tensor,
    pub patch: PixelBox,
}

/// Builds every loss term with nonzero weight for one sample.
pub fn sample_losses(
    g: &mut Graph,
    enc: &ConvEncoder,
    params: &[Var],
    s: &SampleData,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let (f1, frame) = encode_gray_var(g, enc, params, &s.gray_ref)?;
    let (f2, _) = encode_gray_var(g, enc, params, &s.gray_tgt)?;
    let cells = s.patch.cells(frame);
    let pgeo = s.patch.cell_geometry();
    let p1 = g.select_cols(f1, &cells)?;
    let c1 = g.constant(select_cols(s.color_ref, &cells)?);

    let mut out = LossVars::default();
    let (p2, c2) = if stage == Stage::Warmup || !cfg.localization {
        (g.select_cols(f2, &cells)?, g.constant(select_cols(s.color_tgt, &cells)?))
    } else {
        let lcfg = LocalizeConfig {
            temperature: cfg.temperature,
            ..LocalizeConfig::default()
        };
        let loc = localize_patch_var(g, p1, f2, frame, &lcfg)?;
        let p2 = roi_crop_var(g, f2, frame, loc.bbox, pgeo.height, pgeo.width)?;
        let bbox = BBox::from_tensor(g.value(loc.bbox))?;
        let color = FeatureMap::new(frame, s.color_tgt.clone())?;
        let c2 = roi_crop(&color, &bbox, pgeo.height, pgeo.width)?;
        if w.concentration_region != 0.0 {
            out.concentration_region = Some(concentration_truncated_var(g, loc.traced, loc.center, bbox.w, bbox.h)?);
        }
        (p2, g.constant(c2.into_values()))
    };

    let a12 = affinity_var(g, p1, p2, cfg.temperature)?;
    if w.reconstruction != 0.0 {
        out.reconstruction = Some(reconstruction_loss_var(g, c1, c2, a12)?);
    }
    if w.orthogonal_location != 0.0 {
        let l11 = g.constant(canonical_grid(pgeo));
        out.orthogonal_location = Some(cycle_mse_var(g, l11, a12)?);
    }
    if w.orthogonal_feature != 0.0 {
        out.orthogonal_feature = Some(cycle_mse_var(g, p1, a12)?);
    }
    if w.concentration_local != 0.0 {
        // where each reference cell lands in the target patch
        let a21 = affinity_var(g, p2, p1, cfg.temperature)?;
        let l22 = g.constant(canonical_grid(pgeo));
        let traced = g.matmul(l22, a21)?;
        out.concentration_local = Some(concentration_local_var(g, traced, pgeo, cfg.local_grid)?);
    }
    Ok(out)
}

fn select_cols(t: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (r, n) = t.ensure_matrix("select_cols")?;
    if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
        return Err(Error::dim(format!("column {bad} out of range {n}")));
    }
    let mut d = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        d.extend(cols.iter().map(|&c| t.at(i, c)));
    }
    Tensor::new(&[r, cols.len()], d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer update on the mean loss over `batch`.
pub fn train_step(
    enc: &mut ConvEncoder,
    adam: &mut Adam,
    batch: &[SampleData],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let shapes: Vec<Tensor> = enc.named_parameters().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut grads = shapes;
    let mut terms = [0.0; 5];
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        let mut g = Graph::new();
        let params = enc.bind(&mut g, true);
        let lv = sample_losses(&mut g, enc, &params, s, stage, cfg)?;
        let total = total_loss_var(&mut g, stage, &lv, &cfg.weights)?;
        let t = lv.values(&g);
        for (acc, v) in terms.iter_mut().zip([
            t.reconstruction,
            t.concentration_region,
            t.concentration_local,
            t.orthogonal_location,
            t.orthogonal_feature,
        ]) {
            *acc += v * inv;
        }
        let gr = g.backward(total)?;
        for (acc, &p) in grads.iter_mut().zip(&params) {
            if let Some(d) = gr.get(p) {
                for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                    *a += b * inv;
                }
            }
        }
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {grad_norm}")));
    }
    adam.config.lr = cfg.lr(stage);
    adam.update(&mut enc.parameters_mut(), &grads)?;
    let losses = total_loss(
        stage,
        &LossTerms {
            reconstruction: terms[0],
            concentration_region: terms[1],
            concentration_local: terms[2],
            orthogonal_location: terms[3],
            orthogonal_feature: terms[4],
        },
        &cfg.weights,
    );
    Ok(StepReport { losses, grad_norm })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub stage: Stage,
    pub reconstruction: f64,
    pub concentration_region: f64,
    pub concentration_local: f64,
    pub orthogonal_location: f64,
    pub orthogonal_feature: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LogRecord {
    fn new(step: usize, epoch: usize, stage: Stage, r: &StepReport) -> Self {
        let l = &r.losses;
        Self {
            step,
            epoch,
            stage,
            reconstruction: l.reconstruction,
            concentration_region: l.concentration_region,
            concentration_local: l.concentration_local,
            orthogonal_location: l.orthogonal_location,
            orthogonal_feature: l.orthogonal_feature,
            total: l.total,
            grad_norm: r.grad_norm,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("training log", e.to_string())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub encoder: ConvEncoder,
    pub log: Vec<LogRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Per-video color latents, computed once and scaled so every channel has
/// unit standard deviation over the corpus.
pub fn color_latents(corpus: &[Video], ae: &ColorAutoencoder) -> Result<Vec<Vec<Tensor>>> {
    let mut latents = corpus
        .iter()
        .map(|v| (0..v.len()).map(|t| encode_color(&v.lab(t)?, ae)).collect())
        .collect::<Result<Vec<Vec<Tensor>>>>()?;
    let c = ae.latent_channels();
    let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
    for z in latents.iter().flatten() {
        for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
            for &v in z.row(ch) {
                *s += v;
                *q += v * v;
            }
        }
        n += z.cols();
    }
    let inv: Vec<f64> = (0..c)
        .map(|ch| {
            let mean = sum[ch] / n.max(1) as f64;
            let var = sq[ch] / n.max(1) as f64 - mean * mean;
            if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();
    for z in latents.iter_mut().flatten() {
        let cols = z.cols();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v *= inv[i / cols];
        }
    }
    Ok(latents)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub const FINAL_CHECKPOINT: &str = "encoder.aftk";
pub const LOG_FILE: &str = "train_log.jsonl";

fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:03}.aftk"))
}

fn save_state(path: &Path, enc: &ConvEncoder, adam: &Adam, epoch: usize, step: usize) -> Result<()> {
    let mut ck = Checkpoint::new();
    enc.write_checkpoint(&mut ck);
    for (k, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
        ck.push(format!("adam.m.{k}"), m.clone());
        ck.push(format!("adam.v.{k}"), v.clone());
    }
    ck.push("adam.step", Tensor::scalar(adam.step as f64));
    ck.push("train.epoch", Tensor::scalar(epoch as f64));
    ck.push("train.step", Tensor::scalar(step as f64));
    ck.save(path)
}

fn load_state(path: &Path, enc: &mut ConvEncoder, adam: &mut Adam) -> Result<(usize, usize)> {
    let ck = Checkpoint::load(path)?;
    enc.read_checkpoint(&ck)?;
    for k in 0..adam.m.len() {
        adam.m[k] = ck.require(&format!("adam.m.{k}"))?.clone();
        adam.v[k] = ck.require(&format!("adam.v.{k}"))?.clone();
    }
    adam.step = ck.require("adam.step")?.item() as u64;
    Ok((
        ck.require("train.epoch")?.item() as usize,
        ck.require("train.step")?.item() as usize,
    ))
}

/// Latest finished epoch checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| {
            let p = e.ok()?.path();
            let name = p.file_name()?.to_str()?;
            let n = name.strip_prefix("epoch_")?.strip_suffix(".aftk")?.parse().ok()?;
            Some((n, p))
        })
        .max_by_key(|(n, _)| *n)
}

/// Runs warm-up then joint epochs. With `out`, writes the JSON-lines log,
/// a checkpoint per epoch and the final `encoder.aftk`; `resume` continues
/// after the newest epoch checkpoint found there.
pub fn run_training(
    corpus: &[Video],
    ae: &ColorAutoencoder,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !ae.frozen {
        return Err(Error::State("the color autoencoder must be frozen before training".into()));
    }
    let mut enc = ConvEncoder::new(cfg.feature_channels, cfg.seed).with_feature_scale(cfg.feature_scale);
    let shapes = enc.shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.adam(cfg.lr_warmup), &shape_refs);
    let mut first_epoch = 0;
    let mut step = 0;
    let mut log = Vec::new();
    let mut last_checkpoint = None;

    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let log_path = dir.join(LOG_FILE);
            if resume {
                if let Some((epoch, path)) = latest_checkpoint(dir) {
                    let (e, s) = load_state(&path, &mut enc, &mut adam)?;
                    debug_assert_eq!(e, epoch);
                    first_epoch = e + 1;
                    step = s;
                    last_checkpoint = Some(path);
                    log = read_log(&log_path)?.into_iter().filter(|r| r.step < step).collect();
                }
            }
            let mut w = BufWriter::new(File::create(&log_path)?);
            for r in &log {
                writeln!(w, "{}", serde_json::to_string(r).expect("log record serializes"))?;
            }
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    if cfg.total_epochs() > first_epoch {
        if corpus.is_empty() {
            return Err(Error::Sampling("training corpus is empty".into()));
        }
        let latents = color_latents(corpus, ae)?;
        for epoch in first_epoch..cfg.total_epochs() {
            let stage = cfg.stage_of_epoch(epoch);
            let mut rng = epoch_rng(cfg.seed, epoch);
            let mut samples = Vec::with_capacity(corpus.len() * cfg.pairs_per_video);
            for (vi, v) in corpus.iter().enumerate() {
                for _ in 0..cfg.pairs_per_video {
                    samples.push(sample_pair(v, vi, stage, cfg, &mut rng)?);
                }
            }
            shuffle(&mut samples, &mut rng);
            for chunk in samples.chunks(cfg.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|s| {
                        let v = &corpus[s.video];
                        Ok(SampleData {
                            gray_ref: v.gray(s.reference)?,
                            gray_tgt: v.gray(s.target)?,
                            color_ref: &latents[s.video][s.reference],
                            color_tgt: &latents[s.video][s.target],
                            patch: s.patch,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let report = train_step(&mut enc, &mut adam, &batch, stage, cfg).map_err(|e| {
                    if let Some(w) = writer.as_mut() {
                        let _ = w.flush();
                    }
                    Error::Training {
                        step,
                        message: format!("epoch {epoch} ({stage}): {e}"),
                        last_checkpoint: last_checkpoint.clone(),
                    }
                })?;
                let rec = LogRecord::new(step, epoch, stage, &report);
                if let Some(w) = writer.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
                }
                log.push(rec);
                step += 1;
            }
            if let (Some(dir), Some(w)) = (out, writer.as_mut()) {
                w.flush()?;
                let path = epoch_checkpoint(dir, epoch);
                save_state(&path, &enc, &adam, epoch, step)?;
                last_checkpoint = Some(path);
            }
        }
    }

    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            let mut ck = Checkpoint::new();
            enc.write_checkpoint(&mut ck);
            ck.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutput {
        encoder: enc,
        log,
        checkpoint,
    })
}

/// Mean of `field` over the log records of one epoch.
pub fn epoch_mean(log: &[LogRecord], epoch: usize, field: impl Fn(&LogRecord) -> f64) -> Option<f64> {
    let v: Vec<f64> = log.iter().filter(|r| r.epoch == epoch).map(field).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
