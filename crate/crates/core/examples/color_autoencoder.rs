//! Pretrains the Lab color autoencoder on synthetic frames and reports the
//! held-out reconstruction error.
//!
//! ```text
//! cargo run --release --example color_autoencoder -- [epochs] [videos]
//! ```

use aftk::encoder::{pretrain_color_autoencoder, PretrainConfig};
use aftk::synthetic::{generate_scene, SceneSpec};

fn main() -> aftk::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let videos: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let spec = SceneSpec::default();
    let mut train = Vec::new();
    for seed in 0..videos {
        let v = generate_scene(&spec, seed)?.to_video();
        for t in (0..v.len()).step_by(4) {
            train.push(v.lab(t)?);
        }
    }
    let held = generate_scene(&spec, 10_000)?.to_video();
    let t0 = std::time::Instant::now();
    let cfg = PretrainConfig { epochs, ..PretrainConfig::default() };
    let (ae, curve) = pretrain_color_autoencoder(&train, &cfg)?;
    for (e, l) in curve.iter().enumerate() {
        println!("epoch {e:>3}  train Lab MSE {l:.3}");
    }
    let held_mse = (0..held.len())
        .map(|t| ae.reconstruction_mse(&held.lab(t)?))
        .sum::<aftk::Result<f64>>()?
        / held.len() as f64;
    println!("held-out Lab MSE {held_mse:.3}  ({:.1}s)", t0.elapsed().as_secs_f64());
    Ok(())
}
