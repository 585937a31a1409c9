//! Recurrent label propagation and the evaluation metrics built on it.
//!
//! Every label kind is a `L×N` tensor on the feature grid and travels through
//! the same top-k sparsified affinity. Masks are re-hardened to one-hot before
//! they are reused as sources.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::affinity::{compute_affinity, topk_sparsify, transport, FeatureMap, Geometry};
use crate::encoder::{encode_gray, ConvEncoder};
use crate::error::{Error, Result};
use crate::localization::{localize_patch, mean_shift_refine, BBox, LocalizeConfig, MIN_HALF_EXTENT};
use crate::synthetic::{cell_to_pixel, pixel_to_cell};
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    MaskOnehot,
    KeypointHeatmap,
    Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    kind: LabelKind,
    values: Tensor,
    geometry: Geometry,
}

impl LabelMap {
    pub fn new(kind: LabelKind, values: Tensor, geometry: Geometry) -> Result<Self> {
        let (l, n) = values.ensure_matrix("label map")?;
        if l == 0 {
            return Err(Error::dim("label map needs at least one channel"));
        }
        if n != geometry.len() {
            return Err(Error::dim(format!("label map has {n} cells, geometry {}", geometry.len())));
        }
        values.check_finite("label map")?;
        let d = values.data();
        match kind {
            LabelKind::MaskOnehot if d.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) => {
                return Err(Error::param("mask probabilities must lie in [0, 1]"));
            }
            LabelKind::KeypointHeatmap if d.iter().any(|&v| v < -1e-12) => {
                return Err(Error::param("keypoint heatmaps must be nonnegative"));
            }
            _ => {}
        }
        Ok(Self { kind, values, geometry })
    }

    /// One-hot map with `channels` channels; label `0` is background.
    pub fn from_hard_labels(labels: &[u8], channels: usize, geometry: Geometry) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::dim("hard labels do not match geometry"));
        }
        let mut values = Tensor::zeros(&[channels, labels.len()]);
        for (j, &l) in labels.iter().enumerate() {
            if l as usize >= channels {
                return Err(Error::param(format!("label {l} needs more than {channels} channels")));
            }
            values.set(l as usize, j, 1.0);
        }
        Self::new(LabelKind::MaskOnehot, values, geometry)
    }

    /// Gaussian heatmaps centred on joints given in cell coordinates.
    /// Missing joints give an all-zero channel.
    pub fn keypoint_heatmaps(joints: &[Option<[f64; 2]>], geometry: Geometry, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::param("heatmap sigma must be positive"));
        }
        let mut values = Tensor::zeros(&[joints.len(), geometry.len()]);
        for (k, joint) in joints.iter().enumerate() {
            let Some([x, y]) = *joint else { continue };
            for j in 0..geometry.len() {
                let (cx, cy) = geometry.coords(j);
                let d2 = (cx as f64 - x).powi(2) + (cy as f64 - y).powi(2);
                values.set(k, j, (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        Self::new(LabelKind::KeypointHeatmap, values, geometry)
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        self.values.row(l)
    }

    /// Per-cell argmax, ties to the lower channel.
    pub fn hard_labels(&self) -> Vec<u8> {
        (0..self.geometry.len())
            .map(|j| {
                let mut best = 0;
                for l in 1..self.channels() {
                    if self.values.at(l, j) > self.values.at(best, j) {
                        best = l;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Decoded joints in cell coordinates, one per channel.
    pub fn joints(&self) -> Vec<Option<[f64; 2]>> {
        (0..self.channels())
            .map(|l| heatmap_to_joint(self.channel(l), self.geometry))
            .collect()
    }

    fn hardened(&self) -> LabelMap {
        match self.kind {
            LabelKind::MaskOnehot => {
                LabelMap::from_hard_labels(&self.hard_labels(), self.channels(), self.geometry)
                    .expect("argmax is a valid channel")
            }
            _ => self.clone(),
        }
    }

    fn crop(&self, range: CellRange) -> Result<Tensor> {
        let f = FeatureMap::new(self.geometry, self.values.clone())?;
        Ok(f.crop_cells(range.x0, range.y0, range.w(), range.h())?.into_values())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Global,
    Track,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Recent predictions kept besides the pinned first frame.
    pub k_frames: usize,
    /// Sources kept per target cell.
    pub k_nn: usize,
    pub temperature: f64,
    pub mode: Mode,
    /// Cells added around every tracked box.
    pub track_margin: f64,
    pub bandwidth: f64,
    pub mean_shift_iters: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k_frames: 7,
            k_nn: 5,
            temperature: crate::affinity::DEFAULT_TEMPERATURE,
            mode: Mode::Global,
            track_margin: 1.0,
            bandwidth: 1.5,
            mean_shift_iters: 50,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_nn == 0 {
            return Err(Error::Config("k_nn must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.bandwidth > 0.0) {
            return Err(Error::Config("temperature and bandwidth must be positive".into()));
        }
        if !(self.track_margin >= 0.0) {
            return Err(Error::Config("track_margin must be nonnegative".into()));
        }
        Ok(())
    }
}

fn transported(src: &FeatureMap, labels: &Tensor, target: &FeatureMap, cfg: &PropagationConfig) -> Result<Tensor> {
    let a = compute_affinity(src, target, cfg.temperature)?;
    let a = topk_sparsify(&a, cfg.k_nn.min(src.geometry().len()))?;
    transport(labels, &a)
}

/// Mean of the transports of every source into `target`.
pub fn propagate_step(
    sources: &[(&FeatureMap, &LabelMap)],
    target: &FeatureMap,
    cfg: &PropagationConfig,
) -> Result<LabelMap> {
    let (_, first_l) = sources
        .first()
        .ok_or_else(|| Error::param("propagation needs at least one source"))?;
    let mut sum = Tensor::zeros(&[first_l.channels(), target.geometry().len()]);
    for (f, l) in sources {
        if l.channels() != first_l.channels() || l.kind != first_l.kind {
            return Err(Error::dim(format!(
                "source label channels disagree: {} vs {}",
                l.channels(),
                first_l.channels()
            )));
        }
        if l.geometry != f.geometry() {
            return Err(Error::dim("source labels and features differ in geometry"));
        }
        sum.add_assign(&transported(f, &l.values, target, cfg)?)?;
    }
    LabelMap::new(first_l.kind, sum.scale(1.0 / sources.len() as f64), target.geometry())
}

/// Half-open cell rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRange {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellRange {
    pub fn full(geometry: Geometry) -> Self {
        Self { x0: 0, x1: geometry.width, y0: 0, y1: geometry.height }
    }

    pub fn from_box(b: &BBox, geometry: Geometry) -> Option<Self> {
        let (x0, x1, y0, y1) = b.cell_range(geometry)?;
        Some(Self { x0, x1, y0, y1 })
    }

    pub fn w(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn h(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn to_box(&self) -> BBox {
        BBox::from_cells(self.x0, self.y0, self.w(), self.h())
    }

    fn indices(&self, geometry: Geometry) -> Vec<usize> {
        (self.y0..self.y1)
            .flat_map(|y| (self.x0..self.x1).map(move |x| geometry.index(x, y)))
            .collect()
    }
}

/// Bounding cell rectangle of `label` in a hard map.
pub fn instance_range(labels: &[u8], label: u8, geometry: Geometry) -> Option<CellRange> {
    let mut r: Option<CellRange> = None;
    for (j, _) in labels.iter().enumerate().filter(|(_, &l)| l == label) {
        let (x, y) = geometry.coords(j);
        r = Some(match r {
            None => CellRange { x0: x, x1: x + 1, y0: y, y1: y + 1 },
            Some(r) => CellRange {
                x0: r.x0.min(x),
                x1: r.x1.max(x + 1),
                y0: r.y0.min(y),
                y1: r.y1.max(y + 1),
            },
        });
    }
    r
}

/// Channel `channel` propagated with each source restricted to its box and
/// the target restricted to `target_box`. Cells outside `target_box` are 0.
pub fn propagate_step_restricted(
    sources: &[(&FeatureMap, &LabelMap, CellRange)],
    target: &FeatureMap,
    target_box: CellRange,
    channel: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<f64>> {
    if sources.is_empty() {
        return Err(Error::param("propagation needs at least one source"));
    }
    let geo = target.geometry();
    let tgt = target.crop_cells(target_box.x0, target_box.y0, target_box.w(), target_box.h())?;
    let mut acc = vec![0.0; tgt.geometry().len()];
    for (f, l, r) in sources {
        if channel >= l.channels() {
            return Err(Error::dim(format!("channel {channel} outside {} channels", l.channels())));
        }
        let src = f.crop_cells(r.x0, r.y0, r.w(), r.h())?;
        let m = transported(&src, &l.crop(*r)?, &tgt, cfg)?;
        for (a, v) in acc.iter_mut().zip(m.row(channel)) {
            *a += v;
        }
    }
    let mut out = vec![0.0; geo.len()];
    for (jj, j) in target_box.indices(geo).into_iter().enumerate() {
        out[j] = acc[jj] / sources.len() as f64;
    }
    Ok(out)
}

/// A track-mode instance that fell back to global propagation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackFallback {
    pub frame: usize,
    pub instance: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Propagation {
    /// One map per frame; entry 0 is the given first-frame labels.
    pub maps: Vec<LabelMap>,
    pub fallbacks: Vec<TrackFallback>,
}

impl Propagation {
    pub fn hard_labels(&self) -> Vec<Vec<u8>> {
        self.maps.iter().map(LabelMap::hard_labels).collect()
    }
}

/// Propagates `first` through per-frame features.
///
/// Sources at frame `t` are frame 0 with `first` plus the last `k_frames`
/// predictions. Track mode applies to masks only.
pub fn propagate_video(features: &[FeatureMap], first: &LabelMap, cfg: &PropagationConfig) -> Result<Propagation> {
    cfg.validate()?;
    if features.len() < 2 {
        return Err(Error::param("propagation needs at least two frames"));
    }
    if first.geometry != features[0].geometry() {
        return Err(Error::dim("first-frame labels do not match the feature grid"));
    }
    if first.kind == LabelKind::MaskOnehot
        && (first.channels() < 2 || first.hard_labels().iter().all(|&l| l == 0))
    {
        return Err(Error::param("first-frame mask has no foreground instance"));
    }
    let first = first.hardened();
    let mut memory: Vec<LabelMap> = vec![first.clone()];
    let mut maps = vec![first.clone()];
    let mut ring: VecDeque<usize> = VecDeque::new();
    let mut fallbacks = Vec::new();
    for t in 1..features.len() {
        let mut idx = vec![0];
        idx.extend(ring.iter().copied());
        let sources: Vec<(&FeatureMap, &LabelMap)> = idx.iter().map(|&s| (&features[s], &memory[s])).collect();
        let mut pred = propagate_step(&sources, &features[t], cfg)?;
        if cfg.mode == Mode::Track && first.kind == LabelKind::MaskOnehot {
            pred = track_step(t, &idx, features, &memory, pred, cfg, &mut fallbacks)?;
        }
        memory.push(pred.hardened());
        maps.push(pred);
        if cfg.k_frames > 0 {
            ring.push_back(t);
            if ring.len() > cfg.k_frames {
                ring.pop_front();
            }
        }
    }
    Ok(Propagation { maps, fallbacks })
}

fn track_step(
    t: usize,
    idx: &[usize],
    features: &[FeatureMap],
    memory: &[LabelMap],
    global: LabelMap,
    cfg: &PropagationConfig,
    fallbacks: &mut Vec<TrackFallback>,
) -> Result<LabelMap> {
    let geo = global.geometry;
    let mut values = global.values.clone();
    let prev = memory[t - 1].hard_labels();
    for k in 1..global.channels() {
        let target_box = match locate_instance(&prev, k as u8, &features[t - 1], &features[t], cfg) {
            Ok(b) => b,
            Err(reason) => {
                fallbacks.push(TrackFallback { frame: t, instance: k, reason });
                continue;
            }
        };
        let hard: Vec<Vec<u8>> = idx.iter().map(|&s| memory[s].hard_labels()).collect();
        let sources: Vec<(&FeatureMap, &LabelMap, CellRange)> = idx
            .iter()
            .zip(&hard)
            .map(|(&s, h)| {
                let r = instance_range(h, k as u8, geo)
                    .and_then(|r| CellRange::from_box(&r.to_box().grown(cfg.track_margin), geo))
                    .unwrap_or(CellRange::full(geo));
                (&features[s], &memory[s], r)
            })
            .collect();
        let row = propagate_step_restricted(&sources, &features[t], target_box, k, cfg)?;
        for (j, v) in row.into_iter().enumerate() {
            values.set(k, j, v);
        }
    }
    LabelMap::new(global.kind, values, geo)
}

/// Target-frame cell box for instance `k`, or the reason the track was lost.
fn locate_instance(
    prev: &[u8],
    k: u8,
    f_prev: &FeatureMap,
    f_t: &FeatureMap,
    cfg: &PropagationConfig,
) -> std::result::Result<CellRange, String> {
    let geo = f_t.geometry();
    let r = instance_range(prev, k, geo).ok_or("instance absent from previous frame")?;
    let patch = f_prev
        .crop_cells(r.x0, r.y0, r.w(), r.h())
        .map_err(|e| e.to_string())?;
    let loc_cfg = LocalizeConfig {
        temperature: cfg.temperature,
        min_half_extent: MIN_HALF_EXTENT,
        topk: Some(cfg.k_nn),
    };
    let loc = localize_patch(&patch, f_t, &loc_cfg).map_err(|e| e.to_string())?;
    let ms = mean_shift_refine(
        &loc.traced,
        (loc.bbox.cx, loc.bbox.cy),
        cfg.bandwidth,
        cfg.mean_shift_iters,
        1e-3,
    )
    .map_err(|e| e.to_string())?;
    if ms.fell_back || !ms.center.0.is_finite() || !ms.center.1.is_finite() {
        return Err("mean shift lost every traced point".into());
    }
    let b = BBox {
        cx: ms.center.0,
        cy: ms.center.1,
        ..loc.bbox
    }
    .grown(cfg.track_margin);
    if b.overlap_area(geo) <= 0.0 {
        return Err("tracked box left the frame".into());
    }
    CellRange::from_box(&b, geo).ok_or_else(|| "tracked box covers no cell".into())
}

/// Encodes every frame of `video`.
pub fn encode_frames(video: &Video, enc: &ConvEncoder) -> Result<Vec<FeatureMap>> {
    (0..video.len()).map(|t| encode_gray(&video.gray(t)?, enc)).collect()
}

/// One-hot cell labels of frame 0, background plus one channel per instance.
pub fn first_frame_mask(video: &Video) -> Result<LabelMap> {
    LabelMap::from_hard_labels(&video.cell_labels(0), video.instances() + 1, video.cell_geometry())
}

/// Heatmaps of the frame-0 keypoints.
pub fn first_frame_keypoints(video: &Video, sigma: f64) -> Result<LabelMap> {
    let joints: Vec<Option<[f64; 2]>> = video.keypoints[0].iter().map(|k| k.map(pixel_to_cell)).collect();
    LabelMap::keypoint_heatmaps(&joints, video.cell_geometry(), sigma)
}

/// Every frame predicted as the frame-0 labels.
pub fn static_copy(video: &Video) -> Vec<Vec<u8>> {
    vec![video.cell_labels(0); video.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardScore {
    pub mean: f64,
    pub recall: f64,
}

/// Intersection over union of `object` in two label maps; 1 when both are empty.
pub fn jaccard(pred: &[u8], truth: &[u8], object: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("masks differ in size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p == object, t == object);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean J over objects and frames, and the fraction of (object, frame)
/// pairs with J > 0.5.
pub fn metric_jaccard(pred: &[Vec<u8>], truth: &[Vec<u8>], objects: &[u8]) -> Result<JaccardScore> {
    if pred.len() != truth.len() {
        return Err(Error::dim("prediction and truth differ in frame count"));
    }
    if objects.is_empty() || pred.is_empty() {
        return Err(Error::Metric("no objects or frames to score".into()));
    }
    let (mut sum, mut hits, mut n) = (0.0, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        for &o in objects {
            let j = jaccard(p, t, o)?;
            sum += j;
            hits += (j > 0.5) as usize;
            n += 1;
        }
    }
    Ok(JaccardScore {
        mean: sum / n as f64,
        recall: hits as f64 / n as f64,
    })
}

/// Foreground cells with a 4-neighbour outside the mask.
pub fn boundary_cells(mask: &[bool], geometry: Geometry) -> Vec<(usize, usize)> {
    let (w, h) = (geometry.width, geometry.height);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[geometry.index(x, y)] {
                continue;
            }
            let edge = [(0i64, -1i64), (0, 1), (-1, 0), (1, 0)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                (0..w as i64).contains(&nx)
                    && (0..h as i64).contains(&ny)
                    && !mask[geometry.index(nx as usize, ny as usize)]
            });
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// Boundary F-measure: a boundary cell counts as matched when the other
/// boundary has a cell within Chebyshev distance `tol`.
pub fn metric_boundary_f(pred: &[bool], truth: &[bool], geometry: Geometry, tol: usize) -> Result<f64> {
    if pred.len() != geometry.len() || truth.len() != geometry.len() {
        return Err(Error::dim("masks do not match geometry"));
    }
    let bp = boundary_cells(pred, geometry);
    let bt = boundary_cells(truth, geometry);
    match (bp.is_empty(), bt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let near = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| a.0.abs_diff(b.0) <= tol && a.1.abs_diff(b.1) <= tol)
    };
    let precision = bp.iter().filter(|&&p| near(p, &bt)).count() as f64 / bp.len() as f64;
    let recall = bt.iter().filter(|&&t| near(t, &bp)).count() as f64 / bt.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean boundary F of each object over frames.
pub fn mean_boundary_f(pred: &[Vec<u8>], truth: &[Vec<u8>], objects: &[u8], geometry: Geometry) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() || objects.is_empty() {
        return Err(Error::Metric("nothing to score".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for &o in objects {
            let pm: Vec<bool> = p.iter().map(|&l| l == o).collect();
            let tm: Vec<bool> = t.iter().map(|&l| l == o).collect();
            sum += metric_boundary_f(&pm, &tm, geometry, 1)?;
        }
    }
    Ok(sum / (pred.len() * objects.len()) as f64)
}

/// Largest side of the bounding box of the joints.
pub fn pck_norm(truth: &[[f64; 2]]) -> Result<f64> {
    let span = |i: usize| {
        let (lo, hi) = truth
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[i]), hi.max(p[i])));
        hi - lo
    };
    let norm = if truth.is_empty() { 0.0 } else { span(0).max(span(1)) };
    if norm > 0.0 {
        Ok(norm)
    } else {
        Err(Error::Metric("joint bounding box is degenerate".into()))
    }
}

/// Fraction of joints within `threshold · norm` of the truth, per threshold.
/// Undefined predictions count as misses.
pub fn metric_pck(
    pred: &[Option<[f64; 2]>],
    truth: &[[f64; 2]],
    thresholds: &[f64],
    norm: f64,
) -> Result<Vec<f64>> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::dim("joint counts differ or are zero"));
    }
    if !(norm > 0.0) {
        return Err(Error::Metric(format!("normaliser must be positive, got {norm}")));
    }
    Ok(thresholds
        .iter()
        .map(|&th| {
            let hits = pred
                .iter()
                .zip(truth)
                .filter(|(p, t)| {
                    p.is_some_and(|p| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt() <= th * norm)
                })
                .count();
            hits as f64 / truth.len() as f64
        })
        .collect())
}

/// Argmax cell `(x, y)` of a heatmap channel; ties to the lowest index.
/// `None` for an all-zero channel.
pub fn heatmap_to_joint(channel: &[f64], geometry: Geometry) -> Option<[f64; 2]> {
    let mut best: Option<usize> = None;
    for (j, &v) in channel.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|b| v > channel[b]) {
            best = Some(j);
        }
    }
    best.map(|j| {
        let (x, y) = geometry.coords(j);
        [x as f64, y as f64]
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub j: JaccardScore,
    pub f: f64,
    /// PCK at 0.1 and 0.2, when keypoints were propagated.
    pub pck: Option<[f64; 2]>,
}

/// Scores mask predictions for frames `1..T` against the video's cell labels.
pub fn score_masks(video: &Video, pred: &[Vec<u8>]) -> Result<(JaccardScore, f64)> {
    let truth: Vec<Vec<u8>> = (1..video.len()).map(|t| video.cell_labels(t)).collect();
    let objects: Vec<u8> = (1..=video.instances() as u8).collect();
    let pred = pred.get(1..).ok_or_else(|| Error::Metric("no predicted frames".into()))?;
    let j = metric_jaccard(pred, &truth, &objects)?;
    let f = mean_boundary_f(pred, &truth, &objects, video.cell_geometry())?;
    Ok((j, f))
}

/// Per-frame PCK at 0.1 and 0.2 in pixels, averaged over frames `1..T`.
pub fn score_keypoints(video: &Video, maps: &[LabelMap]) -> Result<[f64; 2]> {
    let mut acc = [0.0; 2];
    let mut frames = 0;
    for (t, map) in maps.iter().enumerate().skip(1) {
        let pairs: Vec<(Option<[f64; 2]>, [f64; 2])> = map
            .joints()
            .into_iter()
            .zip(&video.keypoints[t])
            .filter_map(|(p, k)| k.map(|k| (p.map(cell_to_pixel), k)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let pck = metric_pck(&pred, &truth, &[0.1, 0.2], pck_norm(&truth)?)?;
        acc[0] += pck[0];
        acc[1] += pck[1];
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::Metric("no annotated keypoints".into()));
    }
    Ok(acc.map(|a| a / frames as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::AffinityMatrix;
    use crate::synthetic::{generate_scene, oracle_features, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, c: usize, geo: Geometry) -> FeatureMap {
        let data = (0..c * geo.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(geo, Tensor::new(&[c, geo.len()], data).unwrap()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, l: usize, geo: Geometry) -> LabelMap {
        let labels: Vec<u8> = (0..geo.len()).map(|_| rng.gen_range(0..l as u8)).collect();
        LabelMap::from_hard_labels(&labels, l, geo).unwrap()
    }

    /// Features whose dense affinity is (numerically) the identity.
    fn one_hot_features(geo: Geometry) -> FeatureMap {
        FeatureMap::new(geo, Tensor::identity(geo.len()).scale(50.0)).unwrap()
    }

    #[test]
    fn identity_features_keep_labels() {
        let geo = Geometry::new(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 3, geo);
        let f = one_hot_features(geo);
        let out = propagate_step(&[(&f, &m)], &f, &PropagationConfig::default()).unwrap();
        assert!(out.values().max_abs_diff(m.values()) < 1e-12);
        assert_eq!(out.hard_labels(), m.hard_labels());
    }

    #[test]
    fn two_sources_average() {
        let geo = Geometry::new(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f1, f2, ft) = (
            random_features(&mut rng, 4, geo),
            random_features(&mut rng, 4, geo),
            random_features(&mut rng, 4, geo),
        );
        let (m1, m2) = (random_mask(&mut rng, 2, geo), random_mask(&mut rng, 2, geo));
        let cfg = PropagationConfig::default();
        let a = propagate_step(&[(&f1, &m1)], &ft, &cfg).unwrap();
        let b = propagate_step(&[(&f2, &m2)], &ft, &cfg).unwrap();
        let both = propagate_step(&[(&f1, &m1), (&f2, &m2)], &ft, &cfg).unwrap();
        let expect = a.values().add(b.values()).unwrap().scale(0.5);
        assert!(both.values().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let geo = Geometry::new(2, 2);
        let f = one_hot_features(geo);
        let a = LabelMap::from_hard_labels(&[0, 1, 0, 1], 2, geo).unwrap();
        let b = LabelMap::from_hard_labels(&[0, 1, 2, 1], 3, geo).unwrap();
        let cfg = PropagationConfig::default();
        assert!(matches!(propagate_step(&[(&f, &a), (&f, &b)], &f, &cfg), Err(Error::Dimension(_))));
        assert!(propagate_step(&[], &f, &cfg).is_err());
    }

    #[test]
    fn permutation_features_move_labels() {
        let geo = Geometry::new(1, 4);
        let f1 = one_hot_features(geo);
        // target cell j looks like source cell (j + 1) % 4
        let perm = [1, 2, 3, 0];
        let mut t = Tensor::zeros(&[4, 4]);
        for (j, &i) in perm.iter().enumerate() {
            t.set(i, j, 50.0);
        }
        let f2 = FeatureMap::new(geo, t).unwrap();
        let m = LabelMap::from_hard_labels(&[0, 1, 2, 3], 4, geo).unwrap();
        let out = propagate_step(&[(&f1, &m)], &f2, &PropagationConfig::default()).unwrap();
        assert_eq!(out.hard_labels(), vec![1, 2, 3, 0]);
        let a = AffinityMatrix::permutation(&perm, geo, geo).unwrap();
        assert!(out.values().max_abs_diff(&transport(m.values(), &a).unwrap()) < 1e-12);
    }

    #[test]
    fn static_video_is_exact() {
        let geo = Geometry::new(6, 6);
        let f = one_hot_features(geo);
        let frames = vec![f.clone(); 5];
        let mut labels = vec![0u8; 36];
        for y in 1..4 {
            for x in 2..5 {
                labels[y * 6 + x] = 1;
            }
        }
        let first = LabelMap::from_hard_labels(&labels, 2, geo).unwrap();
        for mode in [Mode::Global, Mode::Track] {
            let cfg = PropagationConfig {
                mode,
                ..Default::default()
            };
            let out = propagate_video(&frames, &first, &cfg).unwrap();
            for h in out.hard_labels() {
                assert_eq!(jaccard(&h, &labels, 1).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn empty_first_labels_rejected() {
        let geo = Geometry::new(2, 2);
        let f = one_hot_features(geo);
        let first = LabelMap::from_hard_labels(&[0; 4], 2, geo).unwrap();
        let cfg = PropagationConfig::default();
        assert!(propagate_video(&[f.clone(), f.clone()], &first, &cfg).is_err());
        let ok = LabelMap::from_hard_labels(&[0, 1, 0, 0], 2, geo).unwrap();
        assert!(propagate_video(&[f], &ok, &cfg).is_err());
    }

    #[test]
    fn oracle_translation_tracks_exactly() {
        let scene = generate_scene(&SceneSpec::translation_oracle(), 5).unwrap();
        let video = scene.to_video();
        let feats: Vec<FeatureMap> = (0..video.len()).map(|t| oracle_features(&scene, t).unwrap()).collect();
        let out = propagate_video(&feats, &first_frame_mask(&video).unwrap(), &PropagationConfig::default()).unwrap();
        let pred = out.hard_labels();
        for (t, p) in pred.iter().enumerate() {
            assert_eq!(p, &video.cell_labels(t), "frame {t}");
        }
        let kp = first_frame_keypoints(&video, 1.0).unwrap();
        let out = propagate_video(&feats, &kp, &PropagationConfig::default()).unwrap();
        assert_eq!(score_keypoints(&video, &out.maps).unwrap(), [1.0, 1.0]);
    }

    #[test]
    fn full_frame_boxes_equal_global() {
        let geo = Geometry::new(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f1, f2, ft) = (
            random_features(&mut rng, 4, geo),
            random_features(&mut rng, 4, geo),
            random_features(&mut rng, 4, geo),
        );
        let (m1, m2) = (random_mask(&mut rng, 3, geo), random_mask(&mut rng, 3, geo));
        let cfg = PropagationConfig::default();
        let global = propagate_step(&[(&f1, &m1), (&f2, &m2)], &ft, &cfg).unwrap();
        let full = CellRange::full(geo);
        for k in 0..3 {
            let row = propagate_step_restricted(&[(&f1, &m1, full), (&f2, &m2, full)], &ft, full, k, &cfg).unwrap();
            assert_eq!(row.as_slice(), global.channel(k));
        }
    }

    #[test]
    fn restricted_step_zeroes_outside_box() {
        let geo = Geometry::new(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (f, ft) = (random_features(&mut rng, 3, geo), random_features(&mut rng, 3, geo));
        let m = random_mask(&mut rng, 2, geo);
        let b = CellRange { x0: 1, x1: 3, y0: 0, y1: 2 };
        let row = propagate_step_restricted(&[(&f, &m, b)], &ft, b, 1, &PropagationConfig::default()).unwrap();
        for (j, v) in row.iter().enumerate() {
            let (x, y) = geo.coords(j);
            if !b.contains(x, y) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn instance_range_bounds() {
        let geo = Geometry::new(3, 4);
        let labels = [0, 0, 0, 0, 0, 2, 2, 0, 0, 0, 2, 0];
        assert_eq!(instance_range(&labels, 2, geo), Some(CellRange { x0: 1, x1: 3, y0: 1, y1: 3 }));
        assert_eq!(instance_range(&labels, 1, geo), None);
    }

    #[test]
    fn jaccard_examples() {
        let a = [1, 1, 0, 0];
        assert_eq!(jaccard(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &[0, 0, 1, 1], 1).unwrap(), 0.0);
        // |∩| = 1, |∪| = 3
        assert!((jaccard(&a, &[0, 1, 1, 0], 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[0; 4], &[0; 4], 1).unwrap(), 1.0);
        let s = metric_jaccard(&[a.to_vec(), vec![0, 1, 1, 0]], &[a.to_vec(), a.to_vec()], &[1]).unwrap();
        assert!((s.mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.recall, 0.5);
    }

    fn square(geo: Geometry, x0: usize, y0: usize, side: usize) -> Vec<bool> {
        (0..geo.len())
            .map(|j| {
                let (x, y) = geo.coords(j);
                (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y)
            })
            .collect()
    }

    #[test]
    fn boundary_f_examples() {
        let geo = Geometry::new(12, 12);
        let sq = square(geo, 4, 4, 4);
        assert_eq!(metric_boundary_f(&sq, &sq, geo, 1).unwrap(), 1.0);
        let dilated = square(geo, 3, 3, 6);
        assert_eq!(boundary_cells(&dilated, geo).len(), 20);
        assert_eq!(metric_boundary_f(&dilated, &sq, geo, 1).unwrap(), 1.0);
        assert!(metric_boundary_f(&dilated, &sq, geo, 0).unwrap() < 1.0);
        let far = square(geo, 9, 0, 3);
        assert_eq!(metric_boundary_f(&square(geo, 0, 8, 3), &far, geo, 1).unwrap(), 0.0);
        assert_eq!(metric_boundary_f(&[false; 144], &[false; 144], geo, 1).unwrap(), 1.0);
    }

    #[test]
    fn pck_examples() {
        let truth = [[0.0, 0.0], [10.0, 0.0]];
        let norm = pck_norm(&truth).unwrap();
        assert_eq!(norm, 10.0);
        let exact: Vec<_> = truth.iter().map(|&p| Some(p)).collect();
        assert_eq!(metric_pck(&exact, &truth, &[0.1, 0.2], norm).unwrap(), vec![1.0, 1.0]);
        let shifted: Vec<_> = truth.iter().map(|p| Some([p[0], p[1] + 0.15 * norm])).collect();
        assert_eq!(metric_pck(&shifted, &truth, &[0.1, 0.2], norm).unwrap(), vec![0.0, 1.0]);
        let half = [Some(truth[0]), Some([50.0, 50.0])];
        assert_eq!(metric_pck(&half, &truth, &[0.1], norm).unwrap(), vec![0.5]);
        assert_eq!(metric_pck(&[None, Some(truth[1])], &truth, &[0.1], norm).unwrap(), vec![0.5]);
        assert!(matches!(pck_norm(&[[1.0, 1.0], [1.0, 1.0]]), Err(Error::Metric(_))));
        assert!(metric_pck(&exact, &truth, &[0.1], 0.0).is_err());
    }

    #[test]
    fn heatmap_decoding() {
        let geo = Geometry::new(3, 3);
        let mut h = vec![0.0; 9];
        assert_eq!(heatmap_to_joint(&h, geo), None);
        h[5] = 0.3;
        assert_eq!(heatmap_to_joint(&h, geo), Some([2.0, 1.0]));
        h[1] = 0.3;
        assert_eq!(heatmap_to_joint(&h, geo), Some([1.0, 0.0]));
        let blob = LabelMap::keypoint_heatmaps(&[Some([1.2, 0.9])], geo, 0.8).unwrap();
        assert_eq!(blob.joints(), vec![Some([1.0, 1.0])]);
    }

    #[test]
    fn label_invariants() {
        let geo = Geometry::new(1, 2);
        let bad = Tensor::new(&[1, 2], vec![0.5, 1.5]).unwrap();
        assert!(LabelMap::new(LabelKind::MaskOnehot, bad.clone(), geo).is_err());
        assert!(LabelMap::new(LabelKind::Texture, bad, geo).is_ok());
        let neg = Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap();
        assert!(LabelMap::new(LabelKind::KeypointHeatmap, neg, geo).is_err());
        assert!(LabelMap::from_hard_labels(&[0, 3], 2, geo).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PropagationConfig::default().validate().is_ok());
        let bad = PropagationConfig { k_nn: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
