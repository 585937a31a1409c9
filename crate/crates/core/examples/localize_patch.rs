//! Cuts a patch out of one frame and finds it in a later frame: the traced
//! center, the estimated extent, and the mean-shift refinement.

use aftk::localization::{localize_patch, mean_shift_refine, LocalizeConfig};
use aftk::synthetic::{generate_scene, oracle_features, SceneSpec};

fn main() -> aftk::Result<()> {
    let scene = generate_scene(&SceneSpec::translation_oracle(), 3)?;
    let video = scene.to_video();
    let (t0, t1) = (0, 6);
    let f0 = oracle_features(&scene, t0)?;
    let f1 = oracle_features(&scene, t1)?;
    let labels = video.cell_labels(t0);
    let geo = f0.geometry();

    let range = aftk::propagation::instance_range(&labels, 1, geo).expect("sprite 1 is visible");
    let patch = f0.crop_cells(range.x0, range.y0, range.w(), range.h())?;
    println!("patch: cells x {}..{} y {}..{} of frame {t0}", range.x0, range.x1, range.y0, range.y1);

    let cfg = LocalizeConfig { topk: Some(5), ..LocalizeConfig::default() };
    let loc = localize_patch(&patch, &f1, &cfg)?;
    let b = loc.bbox;
    println!("frame {t1}: center ({:.2},{:.2}) half-extent ({:.2},{:.2})", b.cx, b.cy, b.w, b.h);

    let ms = mean_shift_refine(&loc.traced, (b.cx, b.cy), 1.5, 50, 1e-3)?;
    println!(
        "mean-shift: ({:.2},{:.2}) after {} iterations, density {:.2} -> {:.2}",
        ms.center.0,
        ms.center.1,
        ms.iterations,
        ms.densities[0],
        ms.densities.last().unwrap()
    );

    let truth = aftk::propagation::instance_range(&video.cell_labels(t1), 1, geo).unwrap();
    let tb = truth.to_box();
    println!("true box center ({:.2},{:.2})", tb.cx, tb.cy);
    Ok(())
}
