//! Registry of differentiable operations and composed losses, each checked
//! against central differences at seeded random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affinity::{affinity_var, canonical_grid, transport_var, Geometry};
use crate::encoder::{conv2d_var, l2_normalize_columns, pixel_shuffle_var};
use crate::error::Result;
use crate::localization::{
    estimate_scale_var, locate_center_var, localize_patch_var, roi_crop_var, roi_lattice_var, LocalizeConfig,
};
use crate::objectives::{
    concentration_local_var, concentration_truncated_var, cycle_mse_var, reconstruction_loss_var, total_loss_var,
    LossVars, LossWeights, Stage,
};
use crate::tensor::{finite_difference_check, Graph, Tensor, Var};

type CaseFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<f64>>;

/// A scalar function of one flat `1×dim` input.
pub struct GradCase {
    pub name: String,
    sampler: Sampler,
    f: CaseFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        sampler: impl Fn(&mut ChaCha8Rng) -> Vec<f64> + 'static,
        f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            sampler: Box::new(sampler),
            f: Box::new(f),
        }
    }

    /// Inputs drawn uniformly from `[-1, 1]`.
    pub fn uniform(name: impl Into<String>, dim: usize, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> Self {
        Self::new(name, move |rng| uniform(rng, dim, -1.0, 1.0), f)
    }

    /// Worst relative error at one sampled point.
    pub fn check(&self, rng: &mut ChaCha8Rng, epsilon: f64) -> Result<f64> {
        let x = self.sample(rng);
        finite_difference_check(|g, v| (self.f)(g, v), &x, epsilon)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (self.sampler)(rng);
        Tensor::new(&[1, data.len()], data).expect("flat sample")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when evaluating the case itself failed.
    pub error: Option<String>,
}

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Runs every case at `points` points; case `i` draws from stream `i` of `seed`.
pub fn run_cases(cases: &[GradCase], points: usize, seed: u64, tol: f64) -> Vec<CaseReport> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst = 0.0f64;
            let mut error = None;
            for _ in 0..points {
                match case.check(&mut rng, EPSILON) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            CaseReport {
                name: case.name.clone(),
                points,
                max_rel_error: worst,
                passed: error.is_none() && worst < tol,
                error,
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `shape`-sized piece of the flat input starting at `start`.
fn part(g: &mut Graph, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let s = g.slice_cols(x, start, start + n)?;
    g.reshape(s, shape)
}

/// `Σ y ⊙ W` with a fixed pseudo-random `W`, so no direction is blind.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| ((k * 7919 + 13) % 17) as f64 / 17.0 - 0.4).collect();
    let w = g.constant(Tensor::new(&shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn unary(name: &str, op: fn(&mut Graph, Var) -> Result<Var>) -> GradCase {
    GradCase::uniform(name, 12, move |g, x| {
        let a = part(g, x, 0, &[3, 4])?;
        let y = op(g, a)?;
        project(g, y)
    })
}

fn binary(name: &str, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> GradCase {
    GradCase::uniform(name, 12, move |g, x| {
        let a = part(g, x, 0, &[2, 3])?;
        let b = part(g, x, 6, &[2, 3])?;
        let y = op(g, a, b)?;
        project(g, y)
    })
}

/// Features `C×N1`, `C×N2` and a `D×N1` payload packed in that order.
const C: usize = 3;
const G1: Geometry = Geometry { height: 2, width: 3 };
const G2: Geometry = Geometry { height: 3, width: 3 };

fn affinity_from(g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
    let f1 = part(g, x, 0, &[C, G1.len()])?;
    let f2 = part(g, x, C * G1.len(), &[C, G2.len()])?;
    let a = affinity_var(g, f1, f2, 1.0)?;
    Ok((f1, f2, a))
}

const AFF_DIM: usize = C * (G1.height * G1.width + G2.height * G2.width);

/// Every graph primitive plus the composed model pieces and losses.
pub fn registry() -> Vec<GradCase> {
    vec![
        binary("add", |g, a, b| g.add(a, b)),
        binary("sub", |g, a, b| g.sub(a, b)),
        binary("mul", |g, a, b| g.mul(a, b)),
        GradCase::new(
            "div",
            |rng| {
                let mut v = uniform(rng, 6, -1.0, 1.0);
                v.extend(uniform(rng, 6, 0.5, 2.0));
                v
            },
            |g, x| {
                let a = part(g, x, 0, &[2, 3])?;
                let b = part(g, x, 6, &[2, 3])?;
                let y = g.div(a, b)?;
                project(g, y)
            },
        ),
        unary("scale", |g, a| g.scale(a, -1.7)),
        unary("offset", |g, a| g.offset(a, 0.3)),
        GradCase::uniform("matmul", 12, |g, x| {
            let a = part(g, x, 0, &[2, 3])?;
            let b = part(g, x, 6, &[3, 2])?;
            let y = g.matmul(a, b)?;
            project(g, y)
        }),
        unary("transpose", |g, a| g.transpose(a)),
        unary("softmax_columns", |g, a| g.softmax_columns(a, 0.7)),
        unary("exp", |g, a| g.exp(a)),
        unary("abs", |g, a| g.abs(a)),
        GradCase::new(
            "sqrt",
            |rng| uniform(rng, 12, 0.2, 2.0),
            |g, x| {
                let y = g.sqrt(x)?;
                project(g, y)
            },
        ),
        unary("leaky_relu", |g, a| g.leaky_relu(a, 0.1)),
        unary("clamp", |g, a| g.clamp(a, -0.5, 0.5)),
        unary("sum", |g, a| {
            let s = g.sum(a)?;
            g.square(s)
        }),
        unary("mean", |g, a| {
            let s = g.mean(a)?;
            g.exp(s)
        }),
        unary("sum_axis_0", |g, a| g.sum_axis(a, 0)),
        unary("sum_axis_1", |g, a| g.sum_axis(a, 1)),
        unary("mean_axis", |g, a| g.mean_axis(a, 1)),
        unary("reshape", |g, a| g.reshape(a, &[6, 2])),
        unary("gather", |g, a| g.gather(a, &[Some(3), None, Some(0), Some(3), Some(11)], &[1, 5])),
        unary("slice_cols", |g, a| g.slice_cols(a, 1, 3)),
        unary("slice_rows", |g, a| g.slice_rows(a, 1, 3)),
        unary("select_cols", |g, a| g.select_cols(a, &[3, 0, 3])),
        GradCase::uniform("broadcast_row", 4, |g, x| {
            let y = g.broadcast_row(x, 3)?;
            project(g, y)
        }),
        GradCase::uniform("broadcast_col", 3, |g, x| {
            let c = g.reshape(x, &[3, 1])?;
            let y = g.broadcast_col(c, 4)?;
            project(g, y)
        }),
        GradCase::uniform("broadcast_scalar", 1, |g, x| {
            let y = g.broadcast_scalar(x, &[2, 3])?;
            let y = g.square(y)?;
            project(g, y)
        }),
        binary("concat_rows", |g, a, b| g.concat(&[a, b], 0)),
        binary("concat_cols", |g, a, b| g.concat(&[a, b], 1)),
        unary("square", |g, a| g.square(a)),
        binary("mse", |g, a, b| g.mse(a, b)),
        GradCase::new(
            "normalize_columns",
            |rng| uniform(rng, 12, 0.2, 1.5),
            |g, x| {
                let a = g.reshape(x, &[3, 4])?;
                let y = g.normalize_columns(a)?;
                project(g, y)
            },
        ),
        unary("l1_norm_axis", |g, a| g.l1_norm_axis(a, 1)),
        unary("l2_norm_axis", |g, a| g.l2_norm_axis(a, 0)),
        GradCase::new(
            "bilinear_sample",
            |rng| {
                let mut v = uniform(rng, 2 * 12, -1.0, 1.0);
                v.extend(uniform(rng, 5, 0.05, 2.95));
                v.extend(uniform(rng, 5, 0.05, 1.95));
                v
            },
            |g, x| {
                let f = part(g, x, 0, &[2, 12])?;
                let pts = part(g, x, 24, &[2, 5])?;
                let y = g.bilinear_sample(f, pts, 3, 4)?;
                project(g, y)
            },
        ),
        GradCase::uniform("conv2d", 2 * 36 + 3 * 18 + 3, |g, x| {
            let geom = Geometry::new(6, 6);
            let img = part(g, x, 0, &[2, 36])?;
            let w = part(g, x, 72, &[3, 18])?;
            let b = part(g, x, 126, &[3, 1])?;
            let (y, _) = conv2d_var(g, img, geom, w, b, 3, 2)?;
            project(g, y)
        }),
        GradCase::uniform("pixel_shuffle", 8 * 4, |g, x| {
            let a = g.reshape(x, &[8, 4])?;
            let (y, _) = pixel_shuffle_var(g, a, Geometry::new(2, 2))?;
            project(g, y)
        }),
        GradCase::uniform("l2_normalize_features", 12, |g, x| {
            let a = g.reshape(x, &[3, 4])?;
            let y = l2_normalize_columns(g, a, 2.5)?;
            project(g, y)
        }),
        GradCase::uniform("affinity", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            project(g, a)
        }),
        GradCase::uniform("transport", AFF_DIM + 2 * G1.len(), |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let c = part(g, x, AFF_DIM, &[2, G1.len()])?;
            let y = transport_var(g, c, a)?;
            project(g, y)
        }),
        GradCase::uniform("trace_locations", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let y = g.matmul(grid, a)?;
            project(g, y)
        }),
        GradCase::uniform("locate_center", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let l = g.matmul(grid, a)?;
            let c = locate_center_var(g, l)?;
            project(g, c)
        }),
        GradCase::uniform("estimate_scale", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let l = g.matmul(grid, a)?;
            let c = locate_center_var(g, l)?;
            let s = estimate_scale_var(g, l, c)?;
            project(g, s)
        }),
        GradCase::new("roi_lattice", bbox_sampler(0), |g, x| {
            let b = g.reshape(x, &[4, 1])?;
            let y = roi_lattice_var(g, b, 2, 3)?;
            project(g, y)
        }),
        GradCase::new("roi_crop", bbox_sampler(2 * 20), |g, x| {
            let f = part(g, x, 0, &[2, 20])?;
            let b = part(g, x, 40, &[4, 1])?;
            let y = roi_crop_var(g, f, Geometry::new(4, 5), b, 2, 2)?;
            project(g, y)
        }),
        GradCase::uniform("localize_patch", C * (4 + 12), |g, x| {
            let p1 = part(g, x, 0, &[C, 4])?;
            let f2 = part(g, x, C * 4, &[C, 12])?;
            let cfg = LocalizeConfig {
                min_half_extent: 0.5,
                ..LocalizeConfig::default()
            };
            let loc = localize_patch_var(g, p1, f2, Geometry::new(3, 4), &cfg)?;
            project(g, loc.bbox)
        }),
        GradCase::uniform("concentration_truncated", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let l = g.matmul(grid, a)?;
            let c = locate_center_var(g, l)?;
            concentration_truncated_var(g, l, c, 0.2, 0.2)
        }),
        GradCase::uniform("concentration_local", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let l = g.matmul(grid, a)?;
            concentration_local_var(g, l, G2, 2)
        }),
        GradCase::uniform("orthogonal_location", AFF_DIM, |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let l = g.constant(canonical_grid(G1));
            cycle_mse_var(g, l, a)
        }),
        GradCase::uniform("orthogonal_feature", AFF_DIM, |g, x| {
            let (f1, _, a) = affinity_from(g, x)?;
            cycle_mse_var(g, f1, a)
        }),
        GradCase::uniform("reconstruction", AFF_DIM + 2 * (G1.len() + G2.len()), |g, x| {
            let (_, _, a) = affinity_from(g, x)?;
            let c1 = part(g, x, AFF_DIM, &[2, G1.len()])?;
            let c2 = part(g, x, AFF_DIM + 2 * G1.len(), &[2, G2.len()])?;
            reconstruction_loss_var(g, c1, c2, a)
        }),
        GradCase::new("roi_crop_through_affinity", bbox_sampler(AFF_DIM), |g, x| {
            let (_, f2, _) = affinity_from(g, x)?;
            let b = part(g, x, AFF_DIM, &[4, 1])?;
            let crop = roi_crop_var(g, f2, G2, b, 2, 2)?;
            let (f1, _, _) = affinity_from(g, x)?;
            let f1c = g.slice_cols(f1, 0, 4)?;
            let a = affinity_var(g, f1c, crop, 1.0)?;
            let l = g.constant(canonical_grid(Geometry::new(2, 2)));
            cycle_mse_var(g, l, a)
        }),
        GradCase::uniform("total_loss", AFF_DIM + 2 * (G1.len() + G2.len()), |g, x| {
            let (f1, _, a) = affinity_from(g, x)?;
            let grid = g.constant(canonical_grid(G1));
            let traced = g.matmul(grid, a)?;
            let center = locate_center_var(g, traced)?;
            let c1 = part(g, x, AFF_DIM, &[2, G1.len()])?;
            let c2 = part(g, x, AFF_DIM + 2 * G1.len(), &[2, G2.len()])?;
            let terms = LossVars {
                reconstruction: Some(reconstruction_loss_var(g, c1, c2, a)?),
                concentration_region: Some(concentration_truncated_var(g, traced, center, 0.2, 0.2)?),
                concentration_local: Some(concentration_local_var(g, traced, G2, 2)?),
                orthogonal_location: Some(cycle_mse_var(g, grid, a)?),
                orthogonal_feature: Some(cycle_mse_var(g, f1, a)?),
            };
            let w = LossWeights {
                reconstruction: 1.0,
                concentration_region: 0.5,
                concentration_local: 0.25,
                orthogonal_location: 2.0,
                orthogonal_feature: 0.75,
            };
            total_loss_var(g, Stage::Joint, &terms, &w)
        }),
    ]
}

/// `features` uniform values followed by a box well inside a 4×5 grid.
fn bbox_sampler(features: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| {
        let mut v = uniform(rng, features, -1.0, 1.0);
        v.push(rng.gen_range(1.2..2.8));
        v.push(rng.gen_range(1.2..1.8));
        v.push(rng.gen_range(0.4..1.1));
        v.push(rng.gen_range(0.4..1.1));
        v
    }
}

/// A case whose backward rule is deliberately wrong (claims `d(x²)/dx = x`).
pub fn broken_case() -> GradCase {
    GradCase::uniform("broken_square", 4, |g, x| {
        let v = g.value(x).map(|t| t * t);
        let y = g.custom(&[x], v, std::rc::Rc::new(|inp, _out, go| vec![inp[0].mul(go).unwrap()]))?;
        g.sum(y)
    })
}
