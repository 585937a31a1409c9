//! Seeded sprite videos with exact ground truth.
//!
//! Each sprite is a textured ellipse carried by a per-frame pose
//! `(cx, cy, s)`: a point `p` of the sprite frame lands at `c + s·p` on the
//! canvas. Pixel `(x, y)` has its center at integer coordinates; feature cell
//! `(i, j)` covers pixels `8i..8i+8` and has its center at `8i + 3.5`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{FeatureMap, Geometry};
use crate::encoder::STRIDE_TOTAL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::Video;

/// Gap in pixels kept between sprite silhouettes.
const SEPARATION: f64 = 3.0;
const MAX_ATTEMPTS: usize = 200;
/// Width in pixels of the alpha ramp at sprite edges.
pub const FEATHER: f64 = 3.0;
/// Magnitude of each one-hot oracle embedding.
pub const ORACLE_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    /// Bouncing translation with a slowly drifting scale.
    Random,
    /// Scale 1, one-cell steps that zig-zag between the canvas walls.
    CellAligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sprites: usize,
    /// Range of ellipse semi-axes at scale 1, in pixels.
    pub radius: (f64, f64),
    /// Translation speed range, pixels per frame.
    pub speed: (f64, f64),
    pub scale_range: (f64, f64),
    /// Largest per-frame scale change.
    pub scale_rate: f64,
    pub keypoints_per_sprite: usize,
    /// Every sprite shares one texture, palette and silhouette.
    pub same_color: bool,
    pub motion: Motion,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            frames: 16,
            sprites: 2,
            radius: (11.0, 18.0),
            speed: (1.0, 3.0),
            scale_range: (0.7, 1.4),
            scale_rate: 0.02,
            keypoints_per_sprite: 4,
            same_color: false,
            motion: Motion::Random,
        }
    }
}

impl SceneSpec {
    /// Two identical-looking sprites.
    pub fn same_color() -> Self {
        Self {
            same_color: true,
            ..Self::default()
        }
    }

    /// One sprite translating by whole cells; keypoints on cell centers.
    pub fn translation_oracle() -> Self {
        Self {
            sprites: 1,
            radius: (14.0, 14.0),
            motion: Motion::CellAligned,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SceneSpec(m));
        if self.height == 0 || self.width == 0 || self.height % STRIDE_TOTAL != 0 || self.width % STRIDE_TOTAL != 0 {
            return bad(format!("canvas {}×{} must be a positive multiple of {STRIDE_TOTAL}", self.height, self.width));
        }
        if self.frames == 0 || self.sprites == 0 || self.sprites > 254 {
            return bad("need at least one frame and 1..=254 sprites".into());
        }
        let (r0, r1) = self.radius;
        let (s0, s1) = self.scale_range;
        if !(r0 > 0.0 && r1 >= r0 && s0 > 0.0 && s1 >= s0 && self.speed.1 >= self.speed.0 && self.speed.0 >= 0.0) {
            return bad("radius, scale and speed ranges must be positive and ordered".into());
        }
        let extent = 2.0 * r1 * s1.max(1.0) + 2.0;
        if extent > self.height.min(self.width) as f64 {
            return bad(format!(
                "sprite extent {extent:.1} px exceeds the {}×{} canvas",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
}

impl Pose {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.cx + self.scale * p[0], self.cy + self.scale * p[1]]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        [(q[0] - self.cx) / self.scale, (q[1] - self.cy) / self.scale]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub rx: f64,
    pub ry: f64,
    /// RGB in `[0, 1]`, `size × size`, centered on the sprite origin.
    pub texture: Vec<[f64; 3]>,
    pub texture_size: usize,
    pub keypoints: Vec<[f64; 2]>,
    pub trajectory: Vec<Pose>,
}

impl Sprite {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] / self.rx).powi(2) + (p[1] / self.ry).powi(2) <= 1.0
    }

    fn color(&self, p: [f64; 2]) -> [f64; 3] {
        let c = (self.texture_size as f64 - 1.0) / 2.0;
        bilinear_rgb(&self.texture, self.texture_size, self.texture_size, p[0] + c, p[1] + c)
    }

    /// Approximate distance to the silhouette in sprite units, negative
    /// inside.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let rho = ((p[0] / self.rx).powi(2) + (p[1] / self.ry).powi(2)).sqrt();
        (rho - 1.0) * self.rx.min(self.ry)
    }

    pub fn radius(&self) -> f64 {
        self.rx.max(self.ry)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub background: Vec<[f64; 3]>,
    /// Drawing order; later sprites are on top.
    pub sprites: Vec<Sprite>,
}

impl SpriteScene {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.spec.height / STRIDE_TOTAL, self.spec.width / STRIDE_TOTAL)
    }

    /// Topmost sprite covering canvas point `q` at frame `t`.
    pub fn sprite_at(&self, t: usize, q: [f64; 2]) -> Option<usize> {
        (0..self.sprites.len())
            .rev()
            .find(|&k| self.sprites[k].contains(self.sprites[k].trajectory[t].invert(q)))
    }

    /// Where canvas point `q` of sprite `k` at frame `t0` is at frame `t1`.
    pub fn map_point(&self, k: usize, t0: usize, t1: usize, q: [f64; 2]) -> [f64; 2] {
        let tr = &self.sprites[k].trajectory;
        tr[t1].apply(tr[t0].invert(q))
    }

    /// Frame-to-frame map as `(a, b)` with `q' = a·q + b` per axis.
    pub fn step_affine(&self, k: usize, t: usize) -> (f64, [f64; 2]) {
        let (p0, p1) = (self.sprites[k].trajectory[t], self.sprites[k].trajectory[t + 1]);
        let a = p1.scale / p0.scale;
        (a, [p1.cx - a * p0.cx, p1.cy - a * p0.cy])
    }

    /// Sprites are alpha-blended over what lies beneath with a
    /// [`FEATHER`]-pixel ramp centered on the silhouette, so the mask (alpha
    /// ≥ 0.5) is exactly the ellipse.
    pub fn render_rgb(&self, t: usize) -> Vec<u8> {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let q = [x as f64, y as f64];
                let mut c = self.background[y * w + x];
                for s in &self.sprites {
                    let pose = s.trajectory[t];
                    let p = pose.invert(q);
                    let alpha = (0.5 - s.signed_distance(p) * pose.scale / FEATHER).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        let sc = s.color(p);
                        c = [0, 1, 2].map(|i| alpha * sc[i] + (1.0 - alpha) * c[i]);
                    }
                }
                out.extend(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
        out
    }

    pub fn render_mask(&self, t: usize) -> Vec<u8> {
        let (h, w) = (self.spec.height, self.spec.width);
        (0..h * w)
            .map(|i| {
                let q = [(i % w) as f64, (i / w) as f64];
                self.sprite_at(t, q).map_or(0, |k| k as u8 + 1)
            })
            .collect()
    }

    /// Joints of all sprites, sprite-major, in canvas pixels.
    pub fn keypoints(&self, t: usize) -> Vec<[f64; 2]> {
        self.sprites
            .iter()
            .flat_map(|s| s.keypoints.iter().map(move |&p| s.trajectory[t].apply(p)))
            .collect()
    }

    /// Displacement in pixels of every cell center from frame 0 to frame `t`;
    /// background cells and cells whose sprite does not cover the center
    /// stay at zero.
    pub fn flow(&self, t: usize) -> Tensor {
        let geo = self.geometry();
        let mut d = vec![0.0; 2 * geo.len()];
        for j in 0..geo.len() {
            let q = cell_center(geo, j);
            if let Some(k) = self.sprite_at(0, q) {
                let q1 = self.map_point(k, 0, t, q);
                d[j] = q1[0] - q[0];
                d[geo.len() + j] = q1[1] - q[1];
            }
        }
        Tensor::new(&[2, geo.len()], d).expect("flow shape")
    }

    /// Frame-0 source cell of each cell of frame `t`, following the object
    /// under its center. `None` when the source falls outside the canvas or is
    /// covered by a different object at frame 0.
    pub fn correspondence(&self, t: usize) -> Vec<Option<usize>> {
        let geo = self.geometry();
        (0..geo.len())
            .map(|j| {
                let (owner, src) = self.source_cell(t, j);
                let q0 = cell_center(geo, src?);
                (self.sprite_at(0, q0) == owner).then_some(src?)
            })
            .collect()
    }

    fn source_cell(&self, t: usize, j: usize) -> (Option<usize>, Option<usize>) {
        let geo = self.geometry();
        let q = cell_center(geo, j);
        match self.sprite_at(t, q) {
            None => (None, Some(j)),
            Some(k) => (Some(k), nearest_cell(geo, self.map_point(k, t, 0, q))),
        }
    }

    pub fn to_video(&self) -> Video {
        let n = self.spec.frames;
        Video {
            height: self.spec.height,
            width: self.spec.width,
            frames: (0..n).map(|t| self.render_rgb(t)).collect(),
            masks: (0..n).map(|t| self.render_mask(t)).collect(),
            keypoints: (0..n)
                .map(|t| self.keypoints(t).into_iter().map(Some).collect())
                .collect(),
            flow: (0..n).map(|t| self.flow(t).map(|v| v as f32 as f64)).collect(),
            metadata: serde_json::json!({ "seed": self.seed, "spec": self.spec }),
        }
    }
}

pub fn cell_center(geo: Geometry, j: usize) -> [f64; 2] {
    let (x, y) = geo.coords(j);
    let c = |i: usize| (STRIDE_TOTAL * i) as f64 + (STRIDE_TOTAL as f64 - 1.0) / 2.0;
    [c(x), c(y)]
}

/// Pixel position to feature-grid coordinates.
pub fn pixel_to_cell(p: [f64; 2]) -> [f64; 2] {
    let half = (STRIDE_TOTAL as f64 - 1.0) / 2.0;
    p.map(|v| (v - half) / STRIDE_TOTAL as f64)
}

pub fn cell_to_pixel(c: [f64; 2]) -> [f64; 2] {
    let half = (STRIDE_TOTAL as f64 - 1.0) / 2.0;
    c.map(|v| v * STRIDE_TOTAL as f64 + half)
}

fn nearest_cell(geo: Geometry, q: [f64; 2]) -> Option<usize> {
    let [x, y] = pixel_to_cell(q).map(f64::round);
    (x >= 0.0 && y >= 0.0 && (x as usize) < geo.width && (y as usize) < geo.height)
        .then(|| geo.index(x as usize, y as usize))
}

fn bilinear_rgb(tex: &[[f64; 3]], h: usize, w: usize, x: f64, y: f64) -> [f64; 3] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = tex[y0 * w + x0][c] * (1.0 - fx) + tex[y0 * w + x1][c] * fx;
        let bot = tex[y1 * w + x0][c] * (1.0 - fx) + tex[y1 * w + x1][c] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Multi-octave value noise in `[0, 1]` on an `h × w` grid; the coarsest
/// lattice has spacing `period` pixels.
pub fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, period: f64, octaves: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut p = period;
    for _ in 0..octaves {
        let gw = (w as f64 / p).ceil() as usize + 2;
        let gh = (h as f64 / p).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let gy = y as f64 / p;
            let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
            for x in 0..w {
                let gx = x as f64 / p;
                let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
                let v00 = lattice[iy * gw + ix];
                let v01 = lattice[iy * gw + ix + 1];
                let v10 = lattice[(iy + 1) * gw + ix];
                let v11 = lattice[(iy + 1) * gw + ix + 1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                acc[y * w + x] += amp * (top + (bot - top) * fy);
            }
        }
        amp *= 0.5;
        p /= 2.0;
    }
    let (lo, hi) = acc.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    acc.iter().map(|v| (v - lo) / span).collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Three stops around one hue with spread-out brightness.
fn palette(rng: &mut ChaCha8Rng, saturated: bool) -> [[f64; 3]; 3] {
    let hue = rng.gen::<f64>();
    let (s_lo, s_hi) = if saturated { (0.55, 0.9) } else { (0.05, 0.25) };
    let vals = if saturated { [0.3, 0.65, 0.95] } else { [0.35, 0.5, 0.65] };
    vals.map(|v| {
        let dh = rng.gen_range(-0.08..0.08);
        hsv(hue + dh, rng.gen_range(s_lo..s_hi), v)
    })
}

fn colorize(noise: &[f64], pal: &[[f64; 3]; 3]) -> Vec<[f64; 3]> {
    noise
        .iter()
        .map(|&t| {
            let u = t * 2.0;
            let (a, b, f) = if u < 1.0 { (pal[0], pal[1], u) } else { (pal[1], pal[2], u - 1.0) };
            [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
        })
        .collect()
}

struct Look {
    rx: f64,
    ry: f64,
    texture: Vec<[f64; 3]>,
    size: usize,
    keypoints: Vec<[f64; 2]>,
}

fn make_look(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Look {
    let (rx, ry) = match spec.motion {
        Motion::CellAligned => (spec.radius.0, spec.radius.0),
        Motion::Random => (
            rng.gen_range(spec.radius.0..=spec.radius.1),
            rng.gen_range(spec.radius.0..=spec.radius.1),
        ),
    };
    let size = (2.0 * rx.max(ry)).ceil() as usize + 7;
    let noise = value_noise(rng, size, size, 12.0, 1);
    let texture = colorize(&noise, &palette(rng, true));
    let keypoints = match spec.motion {
        // offsets are whole cells, so joints sit on cell centers
        Motion::CellAligned => {
            let step = STRIDE_TOTAL as f64;
            [[-step, -step], [step, -step], [-step, step], [step, step], [0.0, 0.0]]
                .into_iter()
                .cycle()
                .take(spec.keypoints_per_sprite)
                .collect()
        }
        Motion::Random => (0..spec.keypoints_per_sprite)
            .map(|_| {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = rng.gen_range(0.0..0.7);
                [r * rx * a.cos(), r * ry * a.sin()]
            })
            .collect(),
    };
    Look {
        rx,
        ry,
        texture,
        size,
        keypoints,
    }
}

fn trajectory(rng: &mut ChaCha8Rng, spec: &SceneSpec, radius: f64) -> Vec<Pose> {
    let (w, h) = (spec.width as f64, spec.height as f64);
    match spec.motion {
        Motion::CellAligned => {
            let step = STRIDE_TOTAL as f64;
            let half = (step - 1.0) / 2.0;
            let margin = (radius / step).ceil() as usize;
            let (gw, gh) = (spec.width / STRIDE_TOTAL, spec.height / STRIDE_TOTAL);
            let lo = margin;
            let hi_x = gw - 1 - margin;
            let hi_y = gh - 1 - margin;
            let mut cx = rng.gen_range(lo..=hi_x) as isize;
            let cy = rng.gen_range(lo..=hi_y) as isize;
            let mut dir: isize = if rng.gen::<bool>() { 1 } else { -1 };
            let mut out = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                out.push(Pose {
                    cx: cx as f64 * step + half,
                    cy: cy as f64 * step + half,
                    scale: 1.0,
                });
                if hi_x == lo {
                    continue;
                }
                if cx + dir < lo as isize || cx + dir > hi_x as isize {
                    dir = -dir;
                }
                cx += dir;
            }
            out
        }
        Motion::Random => {
            let (s_lo, s_hi) = spec.scale_range;
            let mut s = rng.gen_range(s_lo.max(0.85).min(s_hi)..=s_hi.min(1.15).max(s_lo));
            let mut ds = rng.gen_range(-spec.scale_rate..=spec.scale_rate);
            let bound = |s: f64| radius * s + 1.0;
            let mut cx = rng.gen_range(bound(s)..=w - 1.0 - bound(s));
            let mut cy = rng.gen_range(bound(s)..=h - 1.0 - bound(s));
            let speed = rng.gen_range(spec.speed.0..=spec.speed.1);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let (mut vx, mut vy) = (speed * a.cos(), speed * a.sin());
            let mut out = Vec::with_capacity(spec.frames);
            for _ in 0..spec.frames {
                out.push(Pose { cx, cy, scale: s });
                if s + ds < s_lo || s + ds > s_hi {
                    ds = -ds;
                }
                s += ds;
                let b = bound(s);
                if cx + vx < b || cx + vx > w - 1.0 - b {
                    vx = -vx;
                }
                if cy + vy < b || cy + vy > h - 1.0 - b {
                    vy = -vy;
                }
                cx = (cx + vx).clamp(b, w - 1.0 - b);
                cy = (cy + vy).clamp(b, h - 1.0 - b);
            }
            out
        }
    }
}

fn overlaps(a: &Sprite, b: &Sprite) -> bool {
    a.trajectory.iter().zip(&b.trajectory).any(|(p, q)| {
        let d = ((p.cx - q.cx).powi(2) + (p.cy - q.cy).powi(2)).sqrt();
        d < p.scale * a.radius() + q.scale * b.radius() + SEPARATION
    })
}

/// Renders nothing; builds the scene description. Sprites never overlap and
/// stay entirely inside the canvas.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SpriteScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_noise = value_noise(&mut rng, spec.height, spec.width, 32.0, 3);
    let background = colorize(&bg_noise, &palette(&mut rng, false));
    let shared = spec.same_color.then(|| make_look(&mut rng, spec));
    for _ in 0..MAX_ATTEMPTS {
        let mut sprites: Vec<Sprite> = Vec::with_capacity(spec.sprites);
        for _ in 0..spec.sprites {
            let look = match &shared {
                Some(l) => Look {
                    rx: l.rx,
                    ry: l.ry,
                    texture: l.texture.clone(),
                    size: l.size,
                    keypoints: l.keypoints.clone(),
                },
                None => make_look(&mut rng, spec),
            };
            let traj = trajectory(&mut rng, spec, look.rx.max(look.ry));
            sprites.push(Sprite {
                rx: look.rx,
                ry: look.ry,
                texture: look.texture,
                texture_size: look.size,
                keypoints: look.keypoints,
                trajectory: traj,
            });
        }
        let clear = (0..sprites.len()).all(|i| (0..i).all(|j| !overlaps(&sprites[i], &sprites[j])));
        if clear {
            return Ok(SpriteScene {
                spec: spec.clone(),
                seed,
                background,
                sprites,
            });
        }
    }
    Err(Error::SceneSpec(format!(
        "could not place {} non-overlapping sprites in {MAX_ATTEMPTS} attempts",
        spec.sprites
    )))
}

/// One-hot embeddings of (object, frame-0 source cell), scaled by
/// [`ORACLE_SCALE`]. Channel `o·N + i` is object `o` (0 = background,
/// `k + 1` = sprite `k`) at source cell `i`. Cells whose source leaves the
/// canvas get a zero embedding.
pub fn oracle_features(scene: &SpriteScene, t: usize) -> Result<FeatureMap> {
    let geo = scene.geometry();
    let n = geo.len();
    let objects = scene.sprites.len() + 1;
    let mut v = Tensor::zeros(&[objects * n, n]);
    for j in 0..n {
        let (owner, src) = scene.source_cell(t, j);
        if let Some(i) = src {
            let o = owner.map_or(0, |k| k + 1);
            v.set(o * n + i, j, ORACLE_SCALE);
        }
    }
    FeatureMap::new(geo, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::compute_affinity;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 5).unwrap();
        assert_eq!(a, generate_scene(&spec, 5).unwrap());
        assert_ne!(a, generate_scene(&spec, 6).unwrap());
        assert_eq!(a.render_rgb(3), generate_scene(&spec, 5).unwrap().render_rgb(3));
    }

    #[test]
    fn oversized_sprite_is_rejected() {
        let spec = SceneSpec {
            radius: (40.0, 70.0),
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 1), Err(Error::SceneSpec(_))));
        let spec = SceneSpec {
            height: 60,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec, 1).is_err());
    }

    #[test]
    fn zero_velocity_gives_static_video() {
        let spec = SceneSpec {
            speed: (0.0, 0.0),
            scale_rate: 0.0,
            ..SceneSpec::default()
        };
        let s = generate_scene(&spec, 2).unwrap();
        let v = s.to_video();
        for t in 1..v.len() {
            assert_eq!(v.frames[t], v.frames[0]);
            assert!(v.flow[t].data().iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn integer_translation_shifts_mask_exactly() {
        let spec = SceneSpec {
            sprites: 1,
            frames: 4,
            scale_rate: 0.0,
            ..SceneSpec::default()
        };
        let mut s = generate_scene(&spec, 3).unwrap();
        for (t, p) in s.sprites[0].trajectory.iter_mut().enumerate() {
            *p = Pose {
                cx: 40.0 + 2.0 * t as f64,
                cy: 50.0,
                scale: 1.0,
            };
        }
        let w = spec.width;
        let m0 = s.render_mask(0);
        for t in 1..4 {
            let mt = s.render_mask(t);
            for y in 0..spec.height {
                for x in 2 * t..w {
                    assert_eq!(mt[y * w + x], m0[y * w + x - 2 * t]);
                }
            }
        }
    }

    #[test]
    fn step_affines_compose_to_direct_map() {
        let s = generate_scene(&SceneSpec::default(), 9).unwrap();
        for k in 0..s.sprites.len() {
            let q0 = [s.sprites[k].trajectory[0].cx + 3.0, s.sprites[k].trajectory[0].cy - 2.0];
            let mut q = q0;
            for t in 0..s.spec.frames - 1 {
                let (a, b) = s.step_affine(k, t);
                q = [a * q[0] + b[0], a * q[1] + b[1]];
                let direct = s.map_point(k, 0, t + 1, q0);
                assert!((q[0] - direct[0]).abs() < 1e-9 && (q[1] - direct[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn keypoints_inside_their_masks() {
        for seed in 0..8 {
            let s = generate_scene(&SceneSpec::default(), seed).unwrap();
            let w = s.spec.width;
            for t in 0..s.spec.frames {
                let mask = s.render_mask(t);
                for (j, p) in s.keypoints(t).iter().enumerate() {
                    let k = j / s.spec.keypoints_per_sprite;
                    let (x, y) = (p[0].round() as usize, p[1].round() as usize);
                    assert_eq!(mask[y * w + x] as usize, k + 1, "seed {seed} t {t} joint {j}");
                }
            }
        }
    }

    #[test]
    fn scales_stay_in_range_and_sprites_inside() {
        for seed in 0..8 {
            let s = generate_scene(&SceneSpec::default(), seed).unwrap();
            for sp in &s.sprites {
                for p in &sp.trajectory {
                    assert!((0.7..=1.4).contains(&p.scale));
                    assert!(p.cx - p.scale * sp.radius() >= 0.0);
                    assert!(p.cx + p.scale * sp.radius() <= 127.0);
                }
            }
        }
    }

    #[test]
    fn oracle_affinity_peaks_at_true_sources() {
        let s = generate_scene(&SceneSpec::translation_oracle(), 4).unwrap();
        let f0 = oracle_features(&s, 0).unwrap();
        let f1 = oracle_features(&s, 1).unwrap();
        let a = compute_affinity(&f0, &f1, 1.0).unwrap();
        let corr = s.correspondence(1);
        let mask = s.to_video().cell_labels(1);
        let mut hits = 0;
        let mut total = 0;
        for j in 0..corr.len() {
            if mask[j] == 0 {
                continue;
            }
            total += 1;
            let col = a.values().column(j);
            let best = (0..col.len()).max_by(|&x, &y| col[x].total_cmp(&col[y])).unwrap();
            hits += usize::from(Some(best) == corr[j]);
        }
        assert!(total > 0);
        assert!(hits as f64 / total as f64 > 0.99, "{hits}/{total}");
    }

    #[test]
    fn static_oracle_affinity_is_identity() {
        let s = generate_scene(&SceneSpec::translation_oracle(), 4).unwrap();
        let f = oracle_features(&s, 2).unwrap();
        let a = compute_affinity(&f, &f, 1.0).unwrap();
        let eye = Tensor::identity(f.geometry().len());
        assert!(a.values().max_abs_diff(&eye) < 1e-40);
    }

    #[test]
    fn cell_aligned_joints_sit_on_cell_centers() {
        let s = generate_scene(&SceneSpec::translation_oracle(), 1).unwrap();
        for t in 0..s.spec.frames {
            for p in s.keypoints(t) {
                let c = pixel_to_cell(p);
                assert_eq!(c[0], c[0].round());
                assert_eq!(c[1], c[1].round());
            }
        }
    }

    #[test]
    fn same_color_sprites_share_texture() {
        let s = generate_scene(&SceneSpec::same_color(), 2).unwrap();
        assert_eq!(s.sprites[0].texture, s.sprites[1].texture);
        assert_ne!(s.sprites[0].trajectory, s.sprites[1].trajectory);
    }
}
