//! In-memory video clips with annotations, and their on-disk layout.
//!
//! ```text
//! <dir>/manifest.json        height, width, frame count, joints, free-form metadata
//! <dir>/frames/000.png       8-bit RGB
//! <dir>/masks/000.png        8-bit gray, 0 = background, k = instance k
//! <dir>/keypoints.txt        one "frame joint x y" line per visible joint (pixels)
//! <dir>/flow.bin             per frame, 2 × cells little-endian f32 (optional)
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::Geometry;
use crate::checkpoint::write_atomic;
use crate::color::{rgb8_to_gray, rgb8_to_lab};
use crate::encoder::STRIDE_TOTAL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, `H·W·3` bytes per frame.
    pub frames: Vec<Vec<u8>>,
    /// Instance label per pixel.
    pub masks: Vec<Vec<u8>>,
    /// `keypoints[t][j]`, pixel coordinates; `None` when not visible.
    pub keypoints: Vec<Vec<Option<[f64; 2]>>>,
    /// Ground-truth cell displacement from frame 0, `2 × cells`, in pixels.
    pub flow: Vec<Tensor>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    height: usize,
    width: usize,
    frames: usize,
    joints: usize,
    has_flow: bool,
    metadata: serde_json::Value,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_geometry(&self) -> Geometry {
        Geometry::new(self.height / STRIDE_TOTAL, self.width / STRIDE_TOTAL)
    }

    pub fn joints(&self) -> usize {
        self.keypoints.first().map_or(0, Vec::len)
    }

    pub fn gray(&self, t: usize) -> Result<Tensor> {
        rgb8_to_gray(&self.frames[t], self.height, self.width)
    }

    pub fn lab(&self, t: usize) -> Result<Tensor> {
        rgb8_to_lab(&self.frames[t], self.height, self.width)
    }

    /// Number of instances (largest label present in any mask).
    pub fn instances(&self) -> usize {
        self.masks
            .iter()
            .flat_map(|m| m.iter())
            .copied()
            .max()
            .unwrap_or(0) as usize
    }

    /// Majority label per 8×8 cell; ties go to the smaller label.
    pub fn cell_labels(&self, t: usize) -> Vec<u8> {
        cell_majority(&self.masks[t], self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.height % STRIDE_TOTAL != 0 || self.width % STRIDE_TOTAL != 0 || n == 0 {
            return Err(Error::dim(format!(
                "video {}×{} is not divisible by {STRIDE_TOTAL}",
                self.height, self.width
            )));
        }
        if self.frames.iter().any(|f| f.len() != 3 * n) || self.masks.iter().any(|m| m.len() != n) {
            return Err(Error::dim("frame or mask buffer does not match dimensions"));
        }
        if self.masks.len() != self.frames.len() || self.keypoints.len() != self.frames.len() {
            return Err(Error::dim("frames, masks and keypoints disagree in length"));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir.join("frames"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for (t, (f, m)) in self.frames.iter().zip(&self.masks).enumerate() {
            write_png(&dir.join(format!("frames/{t:03}.png")), self.width, self.height, png::ColorType::Rgb, f)?;
            write_png(&dir.join(format!("masks/{t:03}.png")), self.width, self.height, png::ColorType::Grayscale, m)?;
        }
        let mut kp = String::new();
        for (t, joints) in self.keypoints.iter().enumerate() {
            for (j, p) in joints.iter().enumerate() {
                if let Some([x, y]) = p {
                    kp.push_str(&format!("{t} {j} {x} {y}\n"));
                }
            }
        }
        write_atomic(&dir.join("keypoints.txt"), kp.as_bytes())?;
        if !self.flow.is_empty() {
            let mut bytes = Vec::new();
            for f in &self.flow {
                for v in f.data() {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            write_atomic(&dir.join("flow.bin"), &bytes)?;
        }
        let manifest = Manifest {
            height: self.height,
            width: self.width,
            frames: self.len(),
            joints: self.joints(),
            has_flow: !self.flow.is_empty(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
        write_atomic(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
        let (h, w) = (manifest.height, manifest.width);
        let mut frames = Vec::with_capacity(manifest.frames);
        let mut masks = Vec::with_capacity(manifest.frames);
        for t in 0..manifest.frames {
            frames.push(read_png(&dir.join(format!("frames/{t:03}.png")), w, h, png::ColorType::Rgb)?);
            masks.push(read_png(&dir.join(format!("masks/{t:03}.png")), w, h, png::ColorType::Grayscale)?);
        }
        let keypoints = parse_keypoints(&fs::read_to_string(dir.join("keypoints.txt"))?, manifest.frames, manifest.joints)?;
        let cells = (h / STRIDE_TOTAL) * (w / STRIDE_TOTAL);
        let flow = if manifest.has_flow {
            let bytes = fs::read(dir.join("flow.bin"))?;
            if bytes.len() != manifest.frames * 2 * cells * 4 {
                return Err(Error::format("flow", "flow.bin has the wrong length"));
            }
            bytes
                .chunks_exact(2 * cells * 4)
                .map(|chunk| {
                    let data = chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect();
                    Tensor::new(&[2, cells], data)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let v = Self {
            height: h,
            width: w,
            frames,
            masks,
            keypoints,
            flow,
            metadata: manifest.metadata,
        };
        v.validate()?;
        Ok(v)
    }
}

pub fn cell_majority(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let (gh, gw) = (height / STRIDE_TOTAL, width / STRIDE_TOTAL);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts = [0u16; 256];
    for cy in 0..gh {
        for cx in 0..gw {
            counts.fill(0);
            for y in cy * STRIDE_TOTAL..(cy + 1) * STRIDE_TOTAL {
                for x in cx * STRIDE_TOTAL..(cx + 1) * STRIDE_TOTAL {
                    counts[mask[y * width + x] as usize] += 1;
                }
            }
            let best = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap_or(0);
            out.push(best as u8);
        }
    }
    out
}

fn parse_keypoints(text: &str, frames: usize, joints: usize) -> Result<Vec<Vec<Option<[f64; 2]>>>> {
    let mut out = vec![vec![None; joints]; frames];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format("keypoints", format!("line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let t: usize = f[0].parse().map_err(|_| bad())?;
        let j: usize = f[1].parse().map_err(|_| bad())?;
        let x: f64 = f[2].parse().map_err(|_| bad())?;
        let y: f64 = f[3].parse().map_err(|_| bad())?;
        if t >= frames || j >= joints || !x.is_finite() || !y.is_finite() {
            return Err(bad());
        }
        out[t][j] = Some([x, y]);
    }
    Ok(out)
}

pub fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
        w.write_image_data(data).map_err(|e| Error::format("png", e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

/// Indexed PNG with a fixed label palette.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), width as u32, height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(label_palette());
        let mut w = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
        w.write_image_data(labels).map_err(|e| Error::format("png", e.to_string()))?;
    }
    write_atomic(path, &bytes)
}

fn label_palette() -> Vec<u8> {
    let mut p = vec![0u8; 256 * 3];
    let base: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ];
    for l in 0..256 {
        p[3 * l..3 * l + 3].copy_from_slice(&base[l % 8]);
    }
    p
}

/// Reads an 8-bit PNG, requiring the given size and color type. Indexed
/// images are returned as raw indices.
pub fn read_png(path: &Path, width: usize, height: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let (w, h, c, data) = read_png_any(path)?;
    if (w, h) != (width, height) {
        return Err(Error::format("png", format!("{}: {w}×{h}, expected {width}×{height}", path.display())));
    }
    if c != color {
        return Err(Error::format("png", format!("{}: color type {c:?}, expected {color:?}", path.display())));
    }
    Ok(data)
}

pub fn read_png_any(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format("png", format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format("png", "only 8-bit images are supported"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}
