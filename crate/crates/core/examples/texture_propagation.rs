//! Treats the first frame's colors as a label map and carries them through
//! the video, writing the propagated frames as PNGs.
//!
//! ```text
//! cargo run --release --example texture_propagation -- [out_dir]
//! ```

use std::path::PathBuf;

use aftk::cli::{cell_colors, oracle_frames};
use aftk::color::lab_to_rgb8;
use aftk::propagation::{propagate_video, PropagationConfig};
use aftk::synthetic::{generate_scene, SceneSpec};
use aftk::video::write_png;

fn main() -> aftk::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "texture-demo".into()));
    std::fs::create_dir_all(&out)?;
    let video = generate_scene(&SceneSpec::translation_oracle(), 2)?.to_video();
    let feats = oracle_frames(&video)?;
    let result = propagate_video(&feats, &cell_colors(&video, 0)?, &PropagationConfig::default())?;
    let geo = video.cell_geometry();
    for (t, m) in result.maps.iter().enumerate() {
        let truth = cell_colors(&video, t)?;
        let err = (0..geo.len())
            .map(|j| (0..3).map(|c| (m.values().at(c, j) - truth.values().at(c, j)).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / geo.len() as f64;
        let rgb = lab_to_rgb8(&m.values().reshape(&[3, geo.height, geo.width])?)?;
        write_png(&out.join(format!("{t:03}.png")), geo.width, geo.height, png::ColorType::Rgb, &rgb)?;
        println!("frame {t:>2}: mean Lab distance to true cell colors {err:.3}");
    }
    println!("cell-resolution frames in {}", out.display());
    Ok(())
}
