//! Propagates the first-frame mask and keypoints through a video with
//! planted features, where every correspondence is exact.

use aftk::propagation::{first_frame_keypoints, first_frame_mask, propagate_video, score_keypoints, score_masks, PropagationConfig};
use aftk::synthetic::{generate_scene, oracle_features, SceneSpec};

fn main() -> aftk::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let scene = generate_scene(&SceneSpec::translation_oracle(), seed)?;
    let video = scene.to_video();
    let feats = (0..video.len()).map(|t| oracle_features(&scene, t)).collect::<aftk::Result<Vec<_>>>()?;
    let cfg = PropagationConfig::default();

    let t0 = std::time::Instant::now();
    let masks = propagate_video(&feats, &first_frame_mask(&video)?, &cfg)?;
    let (j, f) = score_masks(&video, &masks.hard_labels())?;
    println!("masks: J mean {:.4} recall {:.4} F {f:.4}", j.mean, j.recall);

    let keypoints = propagate_video(&feats, &first_frame_keypoints(&video, 1.0)?, &cfg)?;
    let [p1, p2] = score_keypoints(&video, &keypoints.maps)?;
    println!("keypoints: PCK@0.1 {p1:.4} PCK@0.2 {p2:.4}");
    println!("{} frames in {:.2}s", video.len(), t0.elapsed().as_secs_f64());
    Ok(())
}
