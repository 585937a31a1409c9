//! Pretrains the color autoencoder, trains the correspondence encoder on a
//! small corpus and compares it with the untrained encoder and with copying
//! the first mask.
//!
//! ```text
//! cargo run --release --example train_encoder -- [videos] [epochs_per_stage]
//! ```

use aftk::cli::{evaluate_encoder, pretrain_frames, Profile, RunConfig, Split};
use aftk::encoder::pretrain_color_autoencoder;
use aftk::trainer::{epoch_mean, run_training};

fn main() -> aftk::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::for_profile(Profile::Full);
    cfg.corpus.train_videos = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    cfg.corpus.eval_videos = 8;
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    cfg.train.warmup_epochs = epochs;
    cfg.train.joint_epochs = epochs;

    let train = aftk::cli::generate_split(&cfg, Split::Train)?;
    let eval = aftk::cli::generate_split(&cfg, Split::Eval)?;
    let same = aftk::cli::generate_split(&cfg, Split::SameColor)?;
    let t0 = std::time::Instant::now();
    let (ae, curve) = pretrain_color_autoencoder(&pretrain_frames(&cfg, &train)?, &cfg.pretrain.model)?;
    println!("color autoencoder: Lab MSE {:.2} -> {:.2}", curve[0], curve.last().unwrap());

    let out = run_training(&train, &ae, &cfg.train, None, false)?;
    for e in 0..cfg.train.total_epochs() {
        let total = epoch_mean(&out.log, e, |r| r.total).unwrap_or(f64::NAN);
        let rec = epoch_mean(&out.log, e, |r| r.reconstruction).unwrap_or(f64::NAN);
        println!("epoch {e:>2} ({:?}): loss {total:.4} reconstruction {rec:.4}", cfg.train.stage_of_epoch(e));
    }
    let ev = evaluate_encoder(&cfg, &out.encoder, &eval, &same)?;
    println!("held-out J: trained {:.4} untrained {:.4} static {:.4}", ev.trained_j, ev.untrained_j, ev.static_j);
    println!("same-color J: global {:.4} track {:.4}", ev.same_color_global_j, ev.same_color_track_j);
    println!("{:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
