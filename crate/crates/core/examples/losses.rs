//! Evaluates each training objective on hand-built affinities: a shift, a
//! uniform blur, and a learned-looking softmax, to show what each term
//! rewards.

use aftk::affinity::{compute_affinity, trace_locations, AffinityMatrix, FeatureMap, Geometry, LocationMap};
use aftk::localization::locate_center;
use aftk::objectives::{concentration_local, concentration_truncated, orthogonal_cycle_feature, orthogonal_cycle_location};
use rand::{Rng, SeedableRng};

fn report(name: &str, a: &AffinityMatrix, f: &FeatureMap) -> aftk::Result<()> {
    let geo = a.source();
    let traced = trace_locations(&LocationMap::canonical(geo), a)?;
    let center = locate_center(&traced)?;
    println!(
        "{name:<8} region {:>8.4}  local {:>8.4}  cycle-loc {:>8.4}  cycle-feat {:>8.4}",
        concentration_truncated(&traced, center, 2.0, 2.0)? + 0.0,
        concentration_local(&traced, 4)?,
        orthogonal_cycle_location(&LocationMap::canonical(geo), a)?,
        orthogonal_cycle_feature(f.values(), a)?,
    );
    Ok(())
}

fn main() -> aftk::Result<()> {
    let geo = Geometry::new(8, 8);
    let n = geo.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let f = FeatureMap::from_chw(4, 8, 8, (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let shift: Vec<usize> = (0..n).map(|j| { let (x, y) = geo.coords(j); geo.index((x + 1) % 8, y) }).collect();
    report("shift", &AffinityMatrix::permutation(&shift, geo, geo)?, &f)?;
    report("uniform", &AffinityMatrix::uniform(geo, geo), &f)?;
    report("softmax", &compute_affinity(&f, &f.scaled(3.0), 1.0)?, &f)?;
    Ok(())
}
