//! Builds the affinity between two frames from planted features and uses it
//! three ways: to move colors, to trace where cells came from, and to check
//! that the transposed transport returns them.

use aftk::affinity::{compute_affinity, topk_sparsify, trace_locations, transport, LocationMap};
use aftk::objectives::{orthogonal_cycle_feature, orthogonal_cycle_location};
use aftk::synthetic::{generate_scene, oracle_features, SceneSpec};

fn main() -> aftk::Result<()> {
    let scene = generate_scene(&SceneSpec::translation_oracle(), 7)?;
    let video = scene.to_video();
    let (f0, f1) = (oracle_features(&scene, 0)?, oracle_features(&scene, 1)?);
    let geo = f0.geometry();

    let a = compute_affinity(&f0, &f1, 1.0)?;
    let sparse = topk_sparsify(&a, 5)?;
    let sharpest = (0..geo.len()).map(|j| a.column_entropy(j)).fold(f64::MAX, f64::min);
    println!("{}x{} affinity, sharpest column entropy {sharpest:.3} nats", geo.len(), geo.len());

    // Labels as colors: transport frame-0 cell labels and compare with frame 1.
    let labels0 = aftk::propagation::LabelMap::from_hard_labels(&video.cell_labels(0), video.instances() + 1, geo)?;
    let moved = transport(labels0.values(), &sparse)?;
    let truth = video.cell_labels(1);
    let agree = (0..geo.len())
        .filter(|&j| {
            let col = moved.column(j);
            let best = (0..col.len()).max_by(|&p, &q| col[p].total_cmp(&col[q])).unwrap();
            best as u8 == truth[j]
        })
        .count();
    println!("transported labels match frame 1 on {agree}/{} cells", geo.len());

    let traced = trace_locations(&LocationMap::canonical(geo), &a)?;
    let sprite_cell = (0..geo.len()).find(|&j| truth[j] > 0).unwrap();
    let (x, y) = geo.coords(sprite_cell);
    let (sx, sy) = traced.point(sprite_cell);
    println!("cell ({x},{y}) of frame 1 came from ({sx:.2},{sy:.2}) in frame 0");

    println!(
        "cycle errors: locations {:.2e}, features {:.2e}",
        orthogonal_cycle_location(&LocationMap::canonical(geo), &a)?,
        orthogonal_cycle_feature(f0.values(), &a)?,
    );
    Ok(())
}
