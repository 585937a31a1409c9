//! Small convolutional networks: a gray-scale feature encoder that emits
//! features at 1/8 resolution, and a Lab color autoencoder whose latent sits
//! on the same grid.
//!
//! Convolutions are lowered to an im2col gather followed by one matrix
//! product, so every layer is differentiable through [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{FeatureMap, Geometry};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_FEATURE_CHANNELS: usize = 32;
pub const DEFAULT_LATENT_CHANNELS: usize = 8;
pub const STRIDE_TOTAL: usize = 8;
/// Norm of every output feature vector of [`ConvEncoder`].
pub const FEATURE_SCALE: f64 = 4.0;

/// Lab channels are mapped to roughly unit range before entering the
/// autoencoder: `(L − 50)/50, a/50, b/50`.
pub const LAB_SHIFT: [f64; 3] = [50.0, 0.0, 0.0];
pub const LAB_SCALE: f64 = 50.0;

/// One convolution layer; `weight` is `out × (in·k·k)`, `bias` is `out × 1`.
/// Padding is `kernel / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = c_in * kernel * kernel;
        let a = (1.0 / fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-a..=a)).collect::<Vec<_>>();
        let weight = Tensor::new(&[c_out, fan_in], draw(c_out * fan_in)).expect("conv weight shape");
        let bias = Tensor::new(&[c_out, 1], draw(c_out)).expect("conv bias shape");
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.cols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }
}

/// im2col gather indices for a `c × h × w` input.
fn im2col_index(c: usize, geom: Geometry, kernel: usize, stride: usize) -> (Vec<Option<usize>>, Geometry) {
    let pad = kernel / 2;
    let (h, w) = (geom.height, geom.width);
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let n_out = ho * wo;
    let mut index = Vec::with_capacity(c * kernel * kernel * n_out);
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        index.push(inside.then(|| ci * h * w + iy as usize * w + ix as usize));
                    }
                }
            }
        }
    }
    (index, Geometry::new(ho, wo))
}

/// Convolution of `x: c × (h·w)` with bound parameters `(weight, bias)`.
pub fn conv2d_var(
    g: &mut Graph,
    x: Var,
    geom: Geometry,
    weight: Var,
    bias: Var,
    kernel: usize,
    stride: usize,
) -> Result<(Var, Geometry)> {
    let c = g.shape(x)[0];
    if g.shape(x).iter().skip(1).product::<usize>() != geom.len() {
        return Err(Error::dim("conv: input does not match geometry"));
    }
    if g.shape(weight)[1] != c * kernel * kernel {
        return Err(Error::dim(format!(
            "conv: kernel expects {} input channels, got {c}",
            g.shape(weight)[1] / (kernel * kernel)
        )));
    }
    let (index, out) = im2col_index(c, geom, kernel, stride);
    let cols = g.gather(x, &index, &[c * kernel * kernel, out.len()])?;
    let y = g.matmul(weight, cols)?;
    let b = g.broadcast_col(bias, out.len())?;
    Ok((g.add(y, b)?, out))
}

/// Depth-to-space by 2: `4c × (h·w)` → `c × (2h·2w)`, with input channel
/// `4k + 2dy + dx` landing at offset `(dy, dx)` of each 2×2 block.
pub fn pixel_shuffle_var(g: &mut Graph, x: Var, geom: Geometry) -> Result<(Var, Geometry)> {
    let c4 = g.shape(x)[0];
    if c4 % 4 != 0 {
        return Err(Error::dim("pixel shuffle: channels not divisible by 4"));
    }
    let c = c4 / 4;
    let out = Geometry::new(2 * geom.height, 2 * geom.width);
    let mut index = Vec::with_capacity(c * out.len());
    for k in 0..c {
        for y in 0..out.height {
            for x_ in 0..out.width {
                let ch = 4 * k + 2 * (y % 2) + (x_ % 2);
                index.push(Some(ch * geom.len() + (y / 2) * geom.width + x_ / 2));
            }
        }
    }
    Ok((g.gather(x, &index, &[c, out.len()])?, out))
}

/// Shared parameter plumbing for the networks.
pub trait Module {
    fn named_parameters(&self) -> Vec<(String, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every parameter on the graph, as trainable leaves or constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        for (name, t) in self.named_parameters() {
            ckpt.push(name, t.clone());
        }
    }

    fn read_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        read_parameters(self, ckpt)
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.named_parameters()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect()
    }
}

fn read_parameters<M: Module + ?Sized>(m: &mut M, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
    let loaded = names
        .iter()
        .map(|n| ckpt.require(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    for ((name, dst), src) in names.iter().zip(m.parameters_mut()).zip(loaded) {
        if dst.shape() != src.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("block {name:?} has shape {:?}, expected {:?}", src.shape(), dst.shape()),
            ));
        }
        *dst = src;
    }
    Ok(())
}

fn conv_params<'a>(prefix: &str, layers: &'a [Conv]) -> Vec<(String, &'a Tensor)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), &l.weight),
                (format!("{prefix}.{i}.bias"), &l.bias),
            ]
        })
        .collect()
}

fn conv_params_mut(layers: &mut [Conv]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

/// Runs a conv stack; `vars` holds `(weight, bias)` per layer in order.
fn run_stack(
    g: &mut Graph,
    layers: &[Conv],
    vars: &[Var],
    mut x: Var,
    mut geom: Geometry,
    activate_last: bool,
) -> Result<(Var, Geometry)> {
    for (i, l) in layers.iter().enumerate() {
        let (y, gy) = conv2d_var(g, x, geom, vars[2 * i], vars[2 * i + 1], l.kernel, l.stride)?;
        x = if i + 1 < layers.len() || activate_last {
            g.leaky_relu(y, LEAKY_SLOPE)?
        } else {
            y
        };
        geom = gy;
    }
    Ok((x, geom))
}

/// `s · x_j / ‖x_j‖` for every column `j`.
pub fn l2_normalize_columns(g: &mut Graph, x: Var, s: f64) -> Result<Var> {
    let c = g.shape(x)[0];
    let sq = g.square(x)?;
    let n2 = g.sum_axis(sq, 0)?;
    let n2 = g.offset(n2, 1e-12)?;
    let n = g.sqrt(n2)?;
    let n = g.scale(n, 1.0 / s)?;
    let nb = g.broadcast_row(n, c)?;
    g.div(x, nb)
}

fn check_divisible(shape: &[usize], channels: usize, what: &str) -> Result<Geometry> {
    match shape {
        [c, h, w] if *c == channels => {
            if h % STRIDE_TOTAL != 0 || w % STRIDE_TOTAL != 0 || *h == 0 || *w == 0 {
                Err(Error::dim(format!(
                    "{what}: {h}×{w} is not divisible by {STRIDE_TOTAL}; pad the input"
                )))
            } else {
                Ok(Geometry::new(*h, *w))
            }
        }
        s => Err(Error::dim(format!("{what}: expected {channels}×H×W, got {s:?}"))),
    }
}

/// Gray-scale encoder: three 3×3 stride-2 convolutions, 1→16→32→C_out,
/// leaky rectification between layers, a linear last layer, then every
/// cell's feature vector rescaled to norm `feature_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEncoder {
    pub layers: Vec<Conv>,
    pub feature_scale: f64,
}

impl ConvEncoder {
    pub fn new(out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = [(1, 16), (16, 32), (32, out_channels)];
        Self {
            layers: plan
                .iter()
                .map(|&(i, o)| Conv::init(&mut rng, i, o, 3, 2))
                .collect(),
            feature_scale: FEATURE_SCALE,
        }
    }

    pub fn with_feature_scale(mut self, scale: f64) -> Self {
        self.feature_scale = scale;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, Conv::out_channels)
    }

    /// `x` is `1 × (H·W)` on the graph; returns `C_out × (H/8·W/8)`.
    pub fn forward_var(&self, g: &mut Graph, params: &[Var], x: Var, geom: Geometry) -> Result<(Var, Geometry)> {
        if params.len() != 2 * self.layers.len() {
            return Err(Error::dim("encoder: wrong number of bound parameters"));
        }
        let (y, geom) = run_stack(g, &self.layers, params, x, geom, false)?;
        Ok((l2_normalize_columns(g, y, self.feature_scale)?, geom))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let out = ckpt.require("enc.2.weight")?.rows();
        let mut enc = Self::new(out, 0);
        enc.read_checkpoint(ckpt)?;
        Ok(enc)
    }
}

impl Module for ConvEncoder {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        conv_params("enc", &self.layers)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        conv_params_mut(&mut self.layers)
    }

    fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        for (name, t) in self.named_parameters() {
            ckpt.push(name, t.clone());
        }
        ckpt.push("enc.scale", Tensor::scalar(self.feature_scale));
    }

    fn read_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        read_parameters(self, ckpt)?;
        let scale = ckpt.require("enc.scale")?.item();
        if !(scale > 0.0) {
            return Err(Error::format("checkpoint", format!("feature scale {scale} is not positive")));
        }
        self.feature_scale = scale;
        Ok(())
    }
}

/// Features of a `1 × H × W` gray image on the `H/8 × W/8` grid.
pub fn encode_gray(img: &Tensor, enc: &ConvEncoder) -> Result<FeatureMap> {
    let geom = check_divisible(img.shape(), 1, "encode_gray")?;
    let mut g = Graph::new();
    let params = enc.bind(&mut g, false);
    let x = g.constant(img.reshape(&[1, geom.len()])?);
    let (y, out) = enc.forward_var(&mut g, &params, x, geom)?;
    FeatureMap::new(out, g.value(y).clone())
}

/// Graph version of [`encode_gray`] for a `1 × H × W` image leaf.
pub fn encode_gray_var(
    g: &mut Graph,
    enc: &ConvEncoder,
    params: &[Var],
    img: &Tensor,
) -> Result<(Var, Geometry)> {
    let geom = check_divisible(img.shape(), 1, "encode_gray")?;
    let x = g.constant(img.reshape(&[1, geom.len()])?);
    enc.forward_var(g, params, x, geom)
}

/// Lab autoencoder. The encoder mirrors [`ConvEncoder`] (3→16→32→D_c, three
/// stride-2 steps); the decoder runs a 3×3 convolution at latent resolution
/// then three 3×3 convolution + depth-to-space stages back to 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorAutoencoder {
    pub encoder: Vec<Conv>,
    pub decoder: Vec<Conv>,
    pub frozen: bool,
}

impl ColorAutoencoder {
    pub fn new(latent_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = [(3, 16), (16, 32), (32, latent_channels)]
            .iter()
            .map(|&(i, o)| Conv::init(&mut rng, i, o, 3, 2))
            .collect();
        let mut decoder = vec![Conv::init(&mut rng, latent_channels, 64, 3, 1)];
        for (i, o) in [(64, 32), (32, 32), (32, 3)] {
            decoder.push(Conv::init(&mut rng, i, 4 * o, 3, 1));
        }
        Self {
            encoder,
            decoder,
            frozen: false,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.encoder.last().map_or(0, Conv::out_channels)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Number of bound parameters belonging to the encoder half.
    pub fn encoder_param_count(&self) -> usize {
        2 * self.encoder.len()
    }

    /// Normalized Lab `3 × (H·W)` to the latent `D_c × (H/8·W/8)`.
    pub fn encode_var(&self, g: &mut Graph, params: &[Var], x: Var, geom: Geometry) -> Result<(Var, Geometry)> {
        run_stack(g, &self.encoder, &params[..self.encoder_param_count()], x, geom, false)
    }

    /// Latent back to normalized Lab.
    pub fn decode_var(&self, g: &mut Graph, params: &[Var], z: Var, geom: Geometry) -> Result<(Var, Geometry)> {
        let p = &params[self.encoder_param_count()..];
        let head = &self.decoder[0];
        let (h, mut geom) = conv2d_var(g, z, geom, p[0], p[1], head.kernel, head.stride)?;
        let mut x = g.leaky_relu(h, LEAKY_SLOPE)?;
        let last = self.decoder.len() - 1;
        for (i, l) in self.decoder.iter().enumerate().skip(1) {
            let (y, gy) = conv2d_var(g, x, geom, p[2 * i], p[2 * i + 1], l.kernel, l.stride)?;
            let (s, gs) = pixel_shuffle_var(g, y, gy)?;
            x = if i < last { g.leaky_relu(s, LEAKY_SLOPE)? } else { s };
            geom = gs;
        }
        Ok((x, geom))
    }

    /// Reconstruction of a raw `3 × H × W` Lab image, in raw Lab units.
    pub fn reconstruct(&self, lab: &Tensor) -> Result<Tensor> {
        let geom = check_divisible(lab.shape(), 3, "reconstruct")?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(normalize_lab(lab)?);
        let (z, zg) = self.encode_var(&mut g, &params, x, geom)?;
        let (y, _) = self.decode_var(&mut g, &params, z, zg)?;
        denormalize_lab(g.value(y), geom)
    }

    /// Per-pixel Lab mean squared error of `D(E(x))`.
    pub fn reconstruction_mse(&self, lab: &Tensor) -> Result<f64> {
        let r = self.reconstruct(lab)?;
        Ok(r.sub(lab)?.data().iter().map(|d| d * d).sum::<f64>() / lab.len() as f64)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loaded models are frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let latent = ckpt.require("color.enc.2.weight")?.rows();
        let mut ae = Self::new(latent, 0);
        ae.read_checkpoint(ckpt)?;
        Ok(ae.freeze())
    }
}

impl Module for ColorAutoencoder {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut v = conv_params("color.enc", &self.encoder);
        v.extend(conv_params("color.dec", &self.decoder));
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = conv_params_mut(&mut self.encoder);
        v.extend(conv_params_mut(&mut self.decoder));
        v
    }
}

/// Raw `3 × H × W` Lab to normalized `3 × (H·W)`.
pub fn normalize_lab(lab: &Tensor) -> Result<Tensor> {
    let n = match lab.shape() {
        [3, h, w] => h * w,
        s => return Err(Error::dim(format!("expected 3×H×W Lab, got {s:?}"))),
    };
    let data = lab
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - LAB_SHIFT[i / n]) / LAB_SCALE)
        .collect();
    Tensor::new(&[3, n], data)
}

fn denormalize_lab(x: &Tensor, geom: Geometry) -> Result<Tensor> {
    let n = geom.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * LAB_SCALE + LAB_SHIFT[i / n])
        .collect();
    Tensor::new(&[3, geom.height, geom.width], data)
}

/// Latent color features `D_c × (H/8·W/8)` of a raw Lab image.
pub fn encode_color(img_lab: &Tensor, ae: &ColorAutoencoder) -> Result<Tensor> {
    if !ae.frozen {
        return Err(Error::State(
            "color autoencoder must be frozen before it is used as a target".into(),
        ));
    }
    let geom = check_divisible(img_lab.shape(), 3, "encode_color")?;
    let mut g = Graph::new();
    let params = ae.bind(&mut g, false);
    let x = g.constant(normalize_lab(img_lab)?);
    let (z, _) = ae.encode_var(&mut g, &params, x, geom)?;
    Ok(g.value(z).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub latent_channels: usize,
    /// Side of the random cell-aligned square crop taken from each image per
    /// step; `0` trains on whole images.
    pub crop: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-3,
            latent_channels: DEFAULT_LATENT_CHANNELS,
            crop: 64,
            seed: 0,
        }
    }
}

/// Fits the autoencoder to a corpus of raw `3 × H × W` Lab images by Adam on
/// the reconstruction MSE, one image (or crop) per step in a seeded order,
/// with the learning rate decayed by [`cosine_lr`]. Returns the
/// frozen model and the per-epoch mean training loss in raw Lab units; entry
/// 0 is the loss of the initial model.
pub fn pretrain_color_autoencoder(corpus: &[Tensor], cfg: &PretrainConfig) -> Result<(ColorAutoencoder, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::param("pretraining corpus is empty"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::param("learning rate must be positive"));
    }
    let inputs = corpus
        .iter()
        .map(|img| {
            let geom = check_divisible(img.shape(), 3, "pretrain")?;
            Ok((normalize_lab(img)?, geom))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ae = ColorAutoencoder::new(cfg.latent_channels, cfg.seed);
    let shapes = ae.shapes();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &shape_refs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC010_A0E0);
    let raw = LAB_SCALE * LAB_SCALE;

    let mut curve = vec![corpus
        .iter()
        .map(|img| ae.reconstruction_mse(img))
        .sum::<Result<f64>>()?
        / corpus.len() as f64];
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let total_steps = (cfg.epochs * inputs.len()) as f64;
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut total = 0.0;
        for (step, &k) in order.iter().enumerate() {
            let (x, geom) = random_crop(&inputs[k].0, inputs[k].1, cfg.crop, &mut rng)?;
            let geom = &geom;
            let mut g = Graph::new();
            let params = ae.bind(&mut g, true);
            let xv = g.constant(x);
            let loss = (|| {
                let (z, zg) = ae.encode_var(&mut g, &params, xv, *geom)?;
                let (y, _) = ae.decode_var(&mut g, &params, z, zg)?;
                g.mse(y, xv)
            })()
            .map_err(|e| training_error(epoch, step, e))?;
            total += g.value(loss).item() * raw;
            let grads = g.backward(loss).map_err(|e| training_error(epoch, step, e))?;
            let grads: Vec<Tensor> = params
                .iter()
                .zip(ae.named_parameters())
                .map(|(&v, (_, t))| grads.get_or_zeros(v, t))
                .collect();
            let progress = (epoch * inputs.len() + step) as f64 / total_steps;
            adam.config.lr = cosine_lr(cfg.lr, progress);
            adam.update(&mut ae.parameters_mut(), &grads)
                .map_err(|e| training_error(epoch, step, e))?;
        }
        curve.push(total / inputs.len() as f64);
    }
    Ok((ae.freeze(), curve))
}

/// Cosine decay from `base` at `progress = 0` to zero at `progress = 1`.
pub fn cosine_lr(base: f64, progress: f64) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos())
}

/// Cell-aligned square window of a `c × (h·w)` tensor.
fn random_crop(x: &Tensor, geom: Geometry, side: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Geometry)> {
    if side == 0 {
        return Ok((x.clone(), geom));
    }
    if side % STRIDE_TOTAL != 0 {
        return Err(Error::param(format!("crop {side} is not a multiple of {STRIDE_TOTAL}")));
    }
    if side >= geom.height && side >= geom.width {
        return Ok((x.clone(), geom));
    }
    let (ch, cw) = (side.min(geom.height), side.min(geom.width));
    let y0 = STRIDE_TOTAL * rng.gen_range(0..=(geom.height - ch) / STRIDE_TOTAL);
    let x0 = STRIDE_TOTAL * rng.gen_range(0..=(geom.width - cw) / STRIDE_TOTAL);
    let c = x.rows();
    let mut data = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y0 + ch {
            let row = k * geom.len() + y * geom.width;
            data.extend_from_slice(&x.data()[row + x0..row + x0 + cw]);
        }
    }
    Ok((Tensor::new(&[c, ch * cw], data)?, Geometry::new(ch, cw)))
}

fn training_error(epoch: usize, step: usize, e: Error) -> Error {
    Error::Training {
        step: epoch * 1_000_000 + step,
        message: format!("color pretraining diverged at epoch {epoch}, image {step}: {e}"),
        last_checkpoint: None,
    }
}

/// Fisher–Yates with the caller's generator.
pub(crate) fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}
