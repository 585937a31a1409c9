//! Region-level localization: find where a reference patch went, how big
//! it is now, and cut it out differentiably.
//!
//! The patch cells are traced into the target frame with the affinity
//! normalised over target cells (the transposed normalisation of the one used
//! for transport). Their mean is the new center; twice their mean absolute
//! deviation is the half-extent, which is exact for points spread uniformly
//! over a rectangle.

use serde::{Deserialize, Serialize};

use crate::affinity::{
    affinity_logits, canonical_grid, compute_affinity, topk_sparsify, trace_locations,
    AffinityMatrix, FeatureMap, Geometry, LocationMap,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest half-extent a box may shrink to, in cells.
pub const MIN_HALF_EXTENT: f64 = 2.0;
pub const DEFAULT_BANDWIDTH: f64 = 1.5;

/// Axis-aligned box: center and half-extents in feature-grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::param(format!("box half-extents must be positive: {w}x{h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Box exactly covering `w×h` cells whose top-left cell is `(x0, y0)`.
    pub fn from_cells(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            cx: x0 as f64 + (w as f64 - 1.0) / 2.0,
            cy: y0 as f64 + (h as f64 - 1.0) / 2.0,
            w: w as f64 / 2.0,
            h: h as f64 / 2.0,
        }
    }

    pub fn full_frame(geometry: Geometry) -> Self {
        Self::from_cells(0, 0, geometry.width, geometry.height)
    }

    /// Half-extents clamped to `[w_min, frame half-size]`.
    pub fn clamped(self, geometry: Geometry, w_min: f64) -> Self {
        let (w, h) = clamp_half_extents(self.w, self.h, geometry, w_min);
        Self { w, h, ..self }
    }

    pub fn grown(self, margin: f64) -> Self {
        Self {
            w: self.w + margin,
            h: self.h + margin,
            ..self
        }
    }

    /// Integer cell ranges `(x0..x1, y0..y1)` whose centers fall inside the
    /// box, clipped to the frame. `None` if no cell center is covered.
    pub fn cell_range(&self, geometry: Geometry) -> Option<(usize, usize, usize, usize)> {
        let range = |c: f64, half: f64, size: usize| -> Option<(usize, usize)> {
            let lo = (c - half + 0.5).ceil().max(0.0);
            let hi = ((c + half - 0.5).floor() + 1.0).min(size as f64);
            (hi > lo).then_some((lo as usize, hi as usize))
        };
        let (x0, x1) = range(self.cx, self.w, geometry.width)?;
        let (y0, y1) = range(self.cy, self.h, geometry.height)?;
        Some((x0, x1, y0, y1))
    }

    /// Overlap area between the box and the frame's cell extent.
    pub fn overlap_area(&self, geometry: Geometry) -> f64 {
        let ox = ((self.cx + self.w).min(geometry.width as f64 - 0.5)
            - (self.cx - self.w).max(-0.5))
        .max(0.0);
        let oy = ((self.cy + self.h).min(geometry.height as f64 - 0.5)
            - (self.cy - self.h).max(-0.5))
        .max(0.0);
        ox * oy
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[4, 1], vec![self.cx, self.cy, self.w, self.h]).expect("4 values")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.len() != 4 {
            return Err(Error::dim("box tensor must hold 4 values"));
        }
        let d = t.data();
        Self::new(d[0], d[1], d[2], d[3])
    }
}

pub fn clamp_half_extents(w: f64, h: f64, geometry: Geometry, w_min: f64) -> (f64, f64) {
    let max_w = (geometry.width as f64 / 2.0).max(w_min);
    let max_h = (geometry.height as f64 / 2.0).max(w_min);
    (w.clamp(w_min, max_w), h.clamp(w_min, max_h))
}

/// Mean of the traced points.
pub fn locate_center(l_traced: &LocationMap) -> Result<(f64, f64)> {
    if l_traced.is_empty() {
        return Err(Error::param("cannot locate the center of no points"));
    }
    let n = l_traced.len() as f64;
    Ok((
        l_traced.xs().iter().sum::<f64>() / n,
        l_traced.ys().iter().sum::<f64>() / n,
    ))
}

/// `ŵ = (2/N) Σ |x_i − cx|` and likewise for `ĥ`. Returns half-extents;
/// degenerate spreads come back as zero and are the caller's to clamp.
pub fn estimate_scale(l_traced: &LocationMap, center: (f64, f64)) -> (f64, f64) {
    let n = l_traced.len() as f64;
    let w = 2.0 / n * l_traced.xs().iter().map(|x| (x - center.0).abs()).sum::<f64>();
    let h = 2.0 / n * l_traced.ys().iter().map(|y| (y - center.1).abs()).sum::<f64>();
    (w, h)
}

/// Bilinear crop of an `out_h×out_w` lattice spanning the box.
pub fn roi_crop(f: &FeatureMap, bbox: &BBox, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let fv = g.constant(f.values().clone());
    let bv = g.constant(bbox.to_tensor());
    let out = roi_crop_var(&mut g, fv, f.geometry(), bv, out_h, out_w)?;
    FeatureMap::new(Geometry::new(out_h, out_w), g.value(out).clone())
}

/// Differentiable ROI crop. `bbox` is a `4×1` variable `(cx, cy, w, h)`.
pub fn roi_crop_var(
    g: &mut Graph,
    f: Var,
    geometry: Geometry,
    bbox: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("roi output must be at least 1x1"));
    }
    let b = BBox::from_tensor(g.value(bbox))?;
    if b.overlap_area(geometry) <= 0.0 {
        return Err(Error::Localization(format!(
            "box {b:?} does not overlap the {}x{} frame",
            geometry.width, geometry.height
        )));
    }
    let lattice = roi_lattice_var(g, bbox, out_h, out_w)?;
    g.bilinear_sample(f, lattice, geometry.height, geometry.width)
}

/// Sample positions `cx + w·u`, `u` at the centers of `out_w` equal bins of
/// `[-1, 1]` (and the same along y). Returns `2×(out_h·out_w)`.
pub fn roi_lattice_var(g: &mut Graph, bbox: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let m = out_h * out_w;
    let unit = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let ux: Vec<f64> = (0..m).map(|p| unit(p % out_w, out_w)).collect();
    let uy: Vec<f64> = (0..m).map(|p| unit(p / out_w, out_h)).collect();
    let pick = |g: &mut Graph, row: usize| g.gather(bbox, &vec![Some(row); m], &[1, m]);
    let cx = pick(g, 0)?;
    let cy = pick(g, 1)?;
    let w = pick(g, 2)?;
    let h = pick(g, 3)?;
    let ux = g.constant(Tensor::new(&[1, m], ux)?);
    let uy = g.constant(Tensor::new(&[1, m], uy)?);
    let dx = g.mul(w, ux)?;
    let dy = g.mul(h, uy)?;
    let x = g.add(cx, dx)?;
    let y = g.add(cy, dy)?;
    g.concat(&[x, y], 0)
}

/// Center of a `2×N` location variable, as `2×1`.
pub fn locate_center_var(g: &mut Graph, l: Var) -> Result<Var> {
    if g.shape(l)[1] == 0 {
        return Err(Error::param("cannot locate the center of no points"));
    }
    g.mean_axis(l, 1)
}

/// Half-extents `(ŵ, ĥ)` of a `2×N` location variable, as `2×1`.
pub fn estimate_scale_var(g: &mut Graph, l: Var, center: Var) -> Result<Var> {
    let n = g.shape(l)[1];
    let c = g.broadcast_col(center, n)?;
    let d = g.sub(l, c)?;
    let m = g.l1_norm_axis(d, 1)?;
    g.scale(m, 2.0 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanShift {
    pub center: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    /// `Σ K(l_i − C)` at the start point and after every iteration.
    pub densities: Vec<f64>,
    /// Set when every kernel weight underflowed and the plain mean was used.
    pub fell_back: bool,
}

/// Gaussian-kernel mean shift, `K(d) = exp(−‖d‖² / bandwidth²)`.
pub fn mean_shift_refine(
    l_traced: &LocationMap,
    init: (f64, f64),
    bandwidth: f64,
    max_iters: usize,
    tol: f64,
) -> Result<MeanShift> {
    if !(bandwidth > 0.0) {
        return Err(Error::param(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let pts = l_traced.points();
    let density = |c: (f64, f64)| -> f64 {
        pts.iter()
            .map(|p| kernel(p.0 - c.0, p.1 - c.1, bandwidth))
            .sum()
    };
    let mut c = init;
    let mut densities = vec![density(c)];
    let mut fell_back = false;
    for it in 1..=max_iters {
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for p in &pts {
            let k = kernel(p.0 - c.0, p.1 - c.1, bandwidth);
            sx += k * p.0;
            sy += k * p.1;
            sw += k;
        }
        let next = if sw > 0.0 {
            (sx / sw, sy / sw)
        } else {
            fell_back = true;
            locate_center(l_traced)?
        };
        let moved = ((next.0 - c.0).powi(2) + (next.1 - c.1).powi(2)).sqrt();
        c = next;
        densities.push(density(c));
        if moved < tol {
            return Ok(MeanShift {
                center: c,
                iterations: it,
                converged: true,
                densities,
                fell_back,
            });
        }
    }
    Ok(MeanShift {
        center: c,
        iterations: max_iters,
        converged: false,
        densities,
        fell_back,
    })
}

fn kernel(dx: f64, dy: f64, bandwidth: f64) -> f64 {
    (-(dx * dx + dy * dy) / (bandwidth * bandwidth)).exp()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub temperature: f64,
    pub min_half_extent: f64,
    /// Sparsify the tracing affinity before averaging (inference only).
    pub topk: Option<usize>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            temperature: crate::affinity::DEFAULT_TEMPERATURE,
            min_half_extent: MIN_HALF_EXTENT,
            topk: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Localization {
    /// Target-frame box, extents clamped.
    pub bbox: BBox,
    /// Unclamped `(ŵ, ĥ)`.
    pub raw_extent: (f64, f64),
    /// Patch cells traced into the target frame.
    pub traced: LocationMap,
    /// Patch→frame affinity, normalised over patch cells (for transport).
    pub affinity_pf: AffinityMatrix,
}

/// Finds patch `p1` in frame `f2`.
pub fn localize_patch(p1: &FeatureMap, f2: &FeatureMap, cfg: &LocalizeConfig) -> Result<Localization> {
    let affinity_pf = compute_affinity(p1, f2, cfg.temperature)?;
    let mut tracing = compute_affinity(f2, p1, cfg.temperature)?;
    if let Some(k) = cfg.topk {
        tracing = topk_sparsify(&tracing, k.min(f2.geometry().len()))?;
    }
    let traced = trace_locations(&LocationMap::canonical(f2.geometry()), &tracing)?;
    let (cx, cy) = locate_center(&traced)?;
    let raw_extent = estimate_scale(&traced, (cx, cy));
    let (w, h) = clamp_half_extents(raw_extent.0, raw_extent.1, f2.geometry(), cfg.min_half_extent);
    Ok(Localization {
        bbox: BBox { cx, cy, w, h },
        raw_extent,
        traced,
        affinity_pf,
    })
}

/// Graph-side pieces of [`localize_patch`].
#[derive(Clone, Copy, Debug)]
pub struct LocalizationVars {
    /// Patch→frame logits `p1ᵀ f2` (`N1×N2`).
    pub logits: Var,
    /// Patch cells traced into the frame (`2×N1`).
    pub traced: Var,
    /// `2×1` center.
    pub center: Var,
    /// `2×1` clamped half-extents.
    pub extent: Var,
    /// `4×1` box `(cx, cy, w, h)`.
    pub bbox: Var,
}

pub fn localize_patch_var(
    g: &mut Graph,
    p1: Var,
    f2: Var,
    f2_geometry: Geometry,
    cfg: &LocalizeConfig,
) -> Result<LocalizationVars> {
    let logits = affinity_logits(g, p1, f2)?;
    let lt = g.transpose(logits)?;
    let tracing = g.softmax_columns(lt, cfg.temperature)?;
    let grid = g.constant(canonical_grid(f2_geometry));
    let traced = g.matmul(grid, tracing)?;
    let center = locate_center_var(g, traced)?;
    let raw = estimate_scale_var(g, traced, center)?;
    let rw = g.slice_rows(raw, 0, 1)?;
    let rh = g.slice_rows(raw, 1, 2)?;
    let max_w = (f2_geometry.width as f64 / 2.0).max(cfg.min_half_extent);
    let max_h = (f2_geometry.height as f64 / 2.0).max(cfg.min_half_extent);
    let w = g.clamp(rw, cfg.min_half_extent, max_w)?;
    let h = g.clamp(rh, cfg.min_half_extent, max_h)?;
    let extent = g.concat(&[w, h], 0)?;
    let bbox = g.concat(&[center, extent], 0)?;
    Ok(LocalizationVars {
        logits,
        traced,
        center,
        extent,
        bbox,
    })
}
