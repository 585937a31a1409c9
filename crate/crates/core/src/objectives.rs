//! Training objectives over traced locations, affinities and color features.
//!
//! Each loss has a plain version over values (for evaluation and tests) and
//! a graph version that the trainer differentiates.

use serde::{Deserialize, Serialize};

use crate::affinity::{transport, AffinityMatrix, Geometry, LocationMap};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Graph, Tensor, Var};

/// Default side of the local concentration blocks, in feature cells.
pub const DEFAULT_LOCAL_GRID: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Joint,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
        })
    }
}

/// Multipliers for the five loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub concentration_region: f64,
    pub concentration_local: f64,
    pub orthogonal_location: f64,
    pub orthogonal_feature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            reconstruction: w,
            concentration_region: w,
            concentration_local: w,
            orthogonal_location: w,
            orthogonal_feature: w,
        }
    }

    /// Reconstruction only: no concentration or orthogonal terms.
    pub fn reconstruction_only() -> Self {
        Self {
            reconstruction: 1.0,
            ..Self::uniform(0.0)
        }
    }
}

/// Raw (unweighted) term values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: f64,
    pub concentration_region: f64,
    pub concentration_local: f64,
    pub orthogonal_location: f64,
    pub orthogonal_feature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub concentration_region: f64,
    pub concentration_local: f64,
    pub orthogonal_location: f64,
    pub orthogonal_feature: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Combines the terms for `stage`. Warm-up has no localization, so the
/// region concentration term never enters its total.
pub fn total_loss(stage: Stage, terms: &LossTerms, weights: &LossWeights) -> LossBreakdown {
    let region_weight = match stage {
        Stage::Warmup => 0.0,
        Stage::Joint => weights.concentration_region,
    };
    let total = weights.reconstruction * terms.reconstruction
        + region_weight * terms.concentration_region
        + weights.concentration_local * terms.concentration_local
        + weights.orthogonal_location * terms.orthogonal_location
        + weights.orthogonal_feature * terms.orthogonal_feature;
    LossBreakdown {
        reconstruction: terms.reconstruction,
        concentration_region: terms.concentration_region,
        concentration_local: terms.concentration_local,
        orthogonal_location: terms.orthogonal_location,
        orthogonal_feature: terms.orthogonal_feature,
        total,
        weights: LossWeights {
            concentration_region: region_weight,
            ..*weights
        },
    }
}

/// Mean over points of `‖l_j − C‖₂`, counting only points that leave the
/// `(±w, ±h)` window around the center.
pub fn concentration_truncated(l_traced: &LocationMap, center: (f64, f64), w: f64, h: f64) -> Result<f64> {
    check_window(w, h)?;
    let n = l_traced.len();
    let total: f64 = l_traced
        .points()
        .into_iter()
        .filter(|p| outside(*p, center, w, h))
        .map(|p| ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt())
        .sum();
    Ok(total / n as f64)
}

fn check_window(w: f64, h: f64) -> Result<()> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::param(format!("window must be positive, got {w}x{h}")));
    }
    Ok(())
}

fn outside(p: (f64, f64), c: (f64, f64), w: f64, h: f64) -> bool {
    (p.0 - c.0).abs() > w || (p.1 - c.1).abs() > h
}

/// Graph version of [`concentration_truncated`]. The window only gates
/// points; it carries no gradient.
pub fn concentration_truncated_var(g: &mut Graph, l: Var, center: Var, w: f64, h: f64) -> Result<Var> {
    check_window(w, h)?;
    let n = g.shape(l)[1];
    let c = g.value(center).data().to_vec();
    let lv = g.value(l);
    let mask: Vec<f64> = (0..n)
        .map(|j| {
            let p = (lv.at(0, j), lv.at(1, j));
            if outside(p, (c[0], c[1]), w, h) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let cb = g.broadcast_col(center, n)?;
    let d = g.sub(l, cb)?;
    let dist = g.l2_norm_axis(d, 0)?;
    let m = g.constant(Tensor::new(&[1, n], mask)?);
    let kept = g.mul(dist, m)?;
    g.mean(kept)
}

/// Source cells grouped into non-overlapping `grid×grid` blocks (edge blocks
/// may be smaller).
pub fn local_blocks(geometry: Geometry, grid: usize) -> Result<Vec<Vec<usize>>> {
    if grid == 0 {
        return Err(Error::param("local grid must be at least 1"));
    }
    let bw = geometry.width.div_ceil(grid);
    let bh = geometry.height.div_ceil(grid);
    let mut blocks = vec![Vec::new(); bw * bh];
    for j in 0..geometry.len() {
        let (x, y) = geometry.coords(j);
        blocks[(y / grid) * bw + x / grid].push(j);
    }
    Ok(blocks)
}

/// Mean over blocks of the mean distance from each traced point to its
/// block's traced centroid.
pub fn concentration_local(l_traced: &LocationMap, grid: usize) -> Result<f64> {
    let blocks = local_blocks(l_traced.geometry(), grid)?;
    let mut total = 0.0;
    for block in &blocks {
        let n = block.len() as f64;
        let cx = block.iter().map(|&j| l_traced.xs()[j]).sum::<f64>() / n;
        let cy = block.iter().map(|&j| l_traced.ys()[j]).sum::<f64>() / n;
        total += block
            .iter()
            .map(|&j| {
                let (x, y) = l_traced.point(j);
                ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()
            })
            .sum::<f64>()
            / n;
    }
    Ok(total / blocks.len() as f64)
}

/// Graph version of [`concentration_local`]; `l` is `2×N` over `geometry`.
pub fn concentration_local_var(g: &mut Graph, l: Var, geometry: Geometry, grid: usize) -> Result<Var> {
    if g.shape(l)[1] != geometry.len() {
        return Err(Error::dim("local concentration: points do not match geometry"));
    }
    let blocks = local_blocks(geometry, grid)?;
    let mut per_block = Vec::with_capacity(blocks.len());
    for block in &blocks {
        let pts = g.select_cols(l, block)?;
        let c = g.mean_axis(pts, 1)?;
        let cb = g.broadcast_col(c, block.len())?;
        let d = g.sub(pts, cb)?;
        let dist = g.l2_norm_axis(d, 0)?;
        let m = g.mean(dist)?;
        per_block.push(g.reshape(m, &[1, 1])?);
    }
    let all = g.concat(&per_block, 1)?;
    g.mean(all)
}

/// `x·A·normalize_columns(Aᵀ)` compared with `x` by MSE.
pub fn cycle_mse(x: &Tensor, a12: &AffinityMatrix) -> Result<f64> {
    let forward = transport(x, a12)?;
    let back = a12.values().transpose()?.normalize_columns()?;
    let round_trip = gemm(&forward, false, &back, false)?;
    Ok(round_trip.sub(x)?.data().iter().map(|d| d * d).sum::<f64>() / x.len() as f64)
}

/// Location round trip through the affinity and its column-normalised
/// transpose.
pub fn orthogonal_cycle_location(l11: &LocationMap, a12: &AffinityMatrix) -> Result<f64> {
    cycle_mse(l11.coords(), a12)
}

/// Feature round trip, same construction as the location cycle.
pub fn orthogonal_cycle_feature(f1: &Tensor, a12: &AffinityMatrix) -> Result<f64> {
    cycle_mse(f1, a12)
}

/// Graph version of [`cycle_mse`].
pub fn cycle_mse_var(g: &mut Graph, x: Var, a12: Var) -> Result<Var> {
    let forward = g.matmul(x, a12)?;
    let at = g.transpose(a12)?;
    let back = g.normalize_columns(at)?;
    let round_trip = g.matmul(forward, back)?;
    g.mse(round_trip, x)
}

/// `MSE(c1·A, c2_true)`.
pub fn reconstruction_loss(c1: &Tensor, c2_true: &Tensor, a: &AffinityMatrix) -> Result<f64> {
    let pred = transport(c1, a)?;
    if pred.shape() != c2_true.shape() {
        return Err(Error::dim(format!(
            "reconstruction: predicted {:?} vs target {:?}",
            pred.shape(),
            c2_true.shape()
        )));
    }
    Ok(pred.sub(c2_true)?.data().iter().map(|d| d * d).sum::<f64>() / pred.len() as f64)
}

pub fn reconstruction_loss_var(g: &mut Graph, c1: Var, c2_true: Var, a: Var) -> Result<Var> {
    let pred = g.matmul(c1, a)?;
    g.mse(pred, c2_true)
}

/// Graph-side loss terms; `None` for terms that were not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub reconstruction: Option<Var>,
    pub concentration_region: Option<Var>,
    pub concentration_local: Option<Var>,
    pub orthogonal_location: Option<Var>,
    pub orthogonal_feature: Option<Var>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossTerms {
            reconstruction: v(self.reconstruction),
            concentration_region: v(self.concentration_region),
            concentration_local: v(self.concentration_local),
            orthogonal_location: v(self.orthogonal_location),
            orthogonal_feature: v(self.orthogonal_feature),
        }
    }
}

/// Weighted total on the graph, with the same stage gating as [`total_loss`].
/// Terms with zero weight are left out of the graph entirely.
pub fn total_loss_var(g: &mut Graph, stage: Stage, terms: &LossVars, weights: &LossWeights) -> Result<Var> {
    let region_weight = match stage {
        Stage::Warmup => 0.0,
        Stage::Joint => weights.concentration_region,
    };
    let pairs = [
        (terms.reconstruction, weights.reconstruction),
        (terms.concentration_region, region_weight),
        (terms.concentration_local, weights.concentration_local),
        (terms.orthogonal_location, weights.orthogonal_location),
        (terms.orthogonal_feature, weights.orthogonal_feature),
    ];
    let mut total: Option<Var> = None;
    for (term, w) in pairs {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = g.scale(term, w)?;
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(p: &[(f64, f64)]) -> LocationMap {
        LocationMap::from_points(p).unwrap()
    }

    #[test]
    fn truncated_examples() {
        let l = pts(&[(1.0, 1.0); 4]);
        assert_eq!(concentration_truncated(&l, (1.0, 1.0), 1.0, 1.0).unwrap(), 0.0);

        let l = pts(&[(0.5, 0.0), (-0.5, 0.5), (0.0, -1.0), (1.0, 1.0)]);
        assert_eq!(concentration_truncated(&l, (0.0, 0.0), 1.0, 1.0).unwrap(), 0.0);

        // one point at distance 5 (3-4-5) outside a unit window
        let l = pts(&[(0.5, 0.0), (-0.5, 0.5), (0.0, -1.0), (3.0, 4.0)]);
        assert_eq!(concentration_truncated(&l, (0.0, 0.0), 1.0, 1.0).unwrap(), 1.25);
        assert!(concentration_truncated(&l, (0.0, 0.0), 0.0, 1.0).is_err());
    }

    #[test]
    fn truncated_is_monotone_in_outside_distance() {
        let mut last = 0.0;
        for k in 0..20 {
            let d = 2.0 + k as f64 * 0.5;
            let l = pts(&[(0.1, 0.2), (d, 0.3), (-0.4, 0.0)]);
            let v = concentration_truncated(&l, (0.0, 0.0), 1.0, 1.0).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn truncated_graph_matches_plain() {
        let raw = [(0.5, 0.0), (-2.5, 0.5), (0.0, -1.0), (3.0, 4.0)];
        let l = pts(&raw);
        let plain = concentration_truncated(&l, (0.1, -0.2), 1.0, 1.5).unwrap();
        let mut g = Graph::new();
        let lv = g.constant(l.coords().clone());
        let c = g.constant(Tensor::new(&[2, 1], vec![0.1, -0.2]).unwrap());
        let v = concentration_truncated_var(&mut g, lv, c, 1.0, 1.5).unwrap();
        assert!((g.value(v).item() - plain).abs() < 1e-15);
    }

    /// Mean distance to the centre of a `g×g` block of unit-spaced points,
    /// summed directly.
    fn regular_block_spread(grid: usize) -> f64 {
        let c = (grid as f64 - 1.0) / 2.0;
        let mut s = 0.0;
        for i in 0..grid {
            for j in 0..grid {
                s += ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            }
        }
        s / (grid * grid) as f64
    }

    #[test]
    fn local_on_canonical_grid_is_block_spread() {
        for grid in [2usize, 4, 8] {
            let l = LocationMap::canonical(Geometry::new(16, 16));
            let v = concentration_local(&l, grid).unwrap();
            assert!((v - regular_block_spread(grid)).abs() < 1e-12, "grid {grid}");
        }
        assert!((regular_block_spread(2) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn local_is_translation_invariant() {
        let geo = Geometry::new(8, 8);
        let l = LocationMap::canonical(geo);
        let moved = l.coords().map(|v| v + 3.0);
        let moved = LocationMap::new(moved, geo).unwrap();
        let a = concentration_local(&l, 4).unwrap();
        let b = concentration_local(&moved, 4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn collapsed_block_contributes_zero() {
        let geo = Geometry::new(4, 4);
        let mut coords = crate::affinity::canonical_grid(geo);
        // collapse the top-left 2x2 block
        for &j in &[0usize, 1, 4, 5] {
            coords.set(0, j, 0.7);
            coords.set(1, j, 0.2);
        }
        let l = LocationMap::new(coords, geo).unwrap();
        let v = concentration_local(&l, 2).unwrap();
        let expected = 3.0 * regular_block_spread(2) / 4.0;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn local_graph_matches_plain_with_partial_blocks() {
        let geo = Geometry::new(5, 3);
        let coords = Tensor::new(&[2, 15], (0..30).map(|v| ((v * 7) % 11) as f64 * 0.3).collect()).unwrap();
        let l = LocationMap::new(coords.clone(), geo).unwrap();
        let plain = concentration_local(&l, 2).unwrap();
        let mut g = Graph::new();
        let lv = g.constant(coords);
        let v = concentration_local_var(&mut g, lv, geo, 2).unwrap();
        assert!((g.value(v).item() - plain).abs() < 1e-12);
    }

    #[test]
    fn cycle_permutation_and_identity_are_zero() {
        let geo = Geometry::new(3, 3);
        let perm = [4usize, 0, 8, 1, 7, 2, 6, 3, 5];
        let a = AffinityMatrix::permutation(&perm, geo, geo).unwrap();
        let l = LocationMap::canonical(geo);
        assert_eq!(orthogonal_cycle_location(&l, &a).unwrap(), 0.0);
        let f = Tensor::new(&[2, 9], (0..18).map(|v| (v as f64).sin()).collect()).unwrap();
        assert_eq!(orthogonal_cycle_feature(&f, &a).unwrap(), 0.0);
        assert_eq!(
            orthogonal_cycle_location(&l, &AffinityMatrix::identity(geo)).unwrap(),
            0.0
        );
    }

    #[test]
    fn cycle_uniform_two_by_two() {
        let geo = Geometry::new(1, 2);
        let u = AffinityMatrix::uniform(geo, geo);
        let x = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!((cycle_mse(&x, &u).unwrap() - 0.25).abs() < 1e-12);
        assert!((orthogonal_cycle_feature(&x, &u).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn cycle_constant_features_vanish() {
        let geo = Geometry::new(2, 2);
        let a = AffinityMatrix::from_tensor(
            Tensor::new(
                &[4, 4],
                vec![
                    0.1, 0.4, 0.25, 0.7, 0.2, 0.1, 0.25, 0.1, 0.3, 0.3, 0.25, 0.1, 0.4, 0.2, 0.25, 0.1,
                ],
            )
            .unwrap(),
            geo,
            geo,
        )
        .unwrap();
        let f = Tensor::full(&[3, 4], 2.5);
        assert!(orthogonal_cycle_feature(&f, &a).unwrap() < 1e-28);
    }

    #[test]
    fn reconstruction_examples() {
        let geo = Geometry::new(1, 2);
        let c1 = Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(reconstruction_loss(&c1, &c1, &AffinityMatrix::identity(geo)).unwrap(), 0.0);
        let p = AffinityMatrix::permutation(&[1, 0], geo, geo).unwrap();
        let swapped = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert_eq!(reconstruction_loss(&c1, &swapped, &p).unwrap(), 0.0);
        let u = AffinityMatrix::uniform(geo, geo);
        assert_eq!(reconstruction_loss(&c1, &c1, &u).unwrap(), 1.0);
        let wrong = Tensor::zeros(&[2, 2]);
        assert!(reconstruction_loss(&c1, &wrong, &u).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let zero = total_loss(Stage::Joint, &LossTerms::default(), &w);
        assert_eq!(zero.total, 0.0);

        let terms = LossTerms {
            reconstruction: 1.0,
            concentration_region: 2.0,
            concentration_local: 3.0,
            orthogonal_location: 4.0,
            orthogonal_feature: 5.0,
        };
        let joint = total_loss(Stage::Joint, &terms, &w);
        assert_eq!(joint.total, 15.0);
        let warm = total_loss(Stage::Warmup, &terms, &w);
        assert_eq!(warm.total, 13.0);
        assert_eq!(warm.concentration_region, 2.0);
        assert_eq!(warm.weights.concentration_region, 0.0);
    }

    #[test]
    fn total_loss_var_gates_region_term() {
        let mut g = Graph::new();
        let r = g.param(Tensor::scalar(2.0));
        let other = g.param(Tensor::scalar(1.0));
        let terms = LossVars {
            reconstruction: Some(other),
            concentration_region: Some(r),
            ..Default::default()
        };
        let t = total_loss_var(&mut g, Stage::Warmup, &terms, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 1.0);
        let grads = g.backward(t).unwrap();
        assert!(grads.get(r).is_none());
        let t = total_loss_var(&mut g, Stage::Joint, &terms, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 3.0);
    }
}
