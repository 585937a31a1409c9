//! Renders a few synthetic sprite videos to disk and prints what each one
//! holds.
//!
//! ```text
//! cargo run --release --example generate_corpus -- [out_dir] [videos]
//! ```

use std::path::PathBuf;

use aftk::synthetic::{generate_scene, SceneSpec};

fn main() -> aftk::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus-demo".into()));
    let n: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    for (name, spec) in [("default", SceneSpec::default()), ("same_color", SceneSpec::same_color())] {
        for seed in 0..n {
            let scene = generate_scene(&spec, seed)?;
            let video = scene.to_video();
            let dir = out.join(name).join(format!("{seed:03}"));
            video.save(&dir)?;
            let cells = video.cell_labels(0).iter().filter(|&&l| l > 0).count();
            let f = scene.flow(video.len() - 1);
            let shift = (0..f.cols()).map(|j| f.at(0, j).hypot(f.at(1, j))).fold(0.0, f64::max);
            println!(
                "{}: {} frames, {} sprites, {cells} foreground cells, farthest cell moved {shift:.1} px",
                dir.display(),
                video.len(),
                video.instances(),
            );
        }
    }
    Ok(())
}
