//! sRGB (D65) ↔ CIE Lab conversion.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const XN: f64 = 0.950_47;
const YN: f64 = 1.0;
const ZN: f64 = 1.088_83;
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One sRGB triple in `[0, 1]` to `(L, a, b)`.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (f(x / XN), f(y / YN), f(z / ZN));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_to_lab`]; output is clamped to `[0, 1]`.
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (XN * f_inv(fx), YN * f_inv(fy), ZN * f_inv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [r, g, b].map(|c| linear_to_srgb(c).clamp(0.0, 1.0))
}

/// Interleaved 8-bit RGB (`H·W·3`) to a `3 × H × W` Lab tensor.
pub fn rgb8_to_lab(rgb: &[u8], height: usize, width: usize) -> Result<Tensor> {
    let n = height * width;
    if rgb.len() != 3 * n {
        return Err(Error::dim(format!(
            "rgb buffer has {} bytes, expected {}",
            rgb.len(),
            3 * n
        )));
    }
    let mut out = vec![0.0; 3 * n];
    for p in 0..n {
        let px = [0, 1, 2].map(|c| rgb[3 * p + c] as f64 / 255.0);
        let lab = srgb_to_lab(px);
        for c in 0..3 {
            out[c * n + p] = lab[c];
        }
    }
    Tensor::new(&[3, height, width], out)
}

/// `3 × H × W` Lab tensor back to interleaved 8-bit RGB.
pub fn lab_to_rgb8(lab: &Tensor) -> Result<Vec<u8>> {
    let n = plane_len(lab, 3)?;
    let d = lab.data();
    let mut out = Vec::with_capacity(3 * n);
    for p in 0..n {
        let rgb = lab_to_srgb([d[p], d[n + p], d[2 * n + p]]);
        out.extend(rgb.map(|c| (c * 255.0).round() as u8));
    }
    Ok(out)
}

/// Lightness `L/100` of interleaved 8-bit RGB as a `1 × H × W` tensor in `[0, 1]`.
pub fn rgb8_to_gray(rgb: &[u8], height: usize, width: usize) -> Result<Tensor> {
    let n = height * width;
    if rgb.len() != 3 * n {
        return Err(Error::dim("rgb buffer does not match dimensions"));
    }
    let data = (0..n)
        .map(|p| {
            let px = [0, 1, 2].map(|c| rgb[3 * p + c] as f64 / 255.0);
            srgb_to_lab(px)[0] / 100.0
        })
        .collect();
    Tensor::new(&[1, height, width], data)
}

fn plane_len(t: &Tensor, channels: usize) -> Result<usize> {
    match t.shape() {
        [c, h, w] if *c == channels => Ok(h * w),
        s => Err(Error::dim(format!("expected {channels}×H×W, got {s:?}"))),
    }
}
