//! Compares per-instance tracked propagation against whole-frame
//! propagation on two identically colored sprites, using an encoder
//! checkpoint written by `aftk train`.
//!
//! ```text
//! cargo run --release --example track_vs_global -- RUN_DIR/train/encoder.aftk [videos]
//! ```

use aftk::encoder::ConvEncoder;
use aftk::propagation::{encode_frames, first_frame_mask, propagate_video, score_masks, Mode, PropagationConfig};
use aftk::synthetic::{generate_scene, SceneSpec};

fn main() -> aftk::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next() else {
        eprintln!("usage: track_vs_global ENCODER_CHECKPOINT [videos]");
        std::process::exit(2);
    };
    let n: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let enc = ConvEncoder::load(std::path::Path::new(&path))?;
    let (mut global, mut track, mut fallbacks) = (0.0, 0.0, 0);
    for seed in 0..n {
        let video = generate_scene(&SceneSpec::same_color(), 2_000_000 + seed)?.to_video();
        let feats = encode_frames(&video, &enc)?;
        let first = first_frame_mask(&video)?;
        for mode in [Mode::Global, Mode::Track] {
            let cfg = PropagationConfig { mode, ..PropagationConfig::default() };
            let r = propagate_video(&feats, &first, &cfg)?;
            let j = score_masks(&video, &r.hard_labels())?.0.mean;
            match mode {
                Mode::Global => global += j,
                Mode::Track => {
                    track += j;
                    fallbacks += r.fallbacks.len();
                }
            }
            println!("video {seed} {mode:?}: J {j:.4}");
        }
    }
    println!("mean J global {:.4} track {:.4} ({fallbacks} lost tracks)", global / n as f64, track / n as f64);
    Ok(())
}
