use aftk::checkpoint::Checkpoint;
use aftk::encoder::{encode_color, pretrain_color_autoencoder, ColorAutoencoder, Module, PretrainConfig};
use aftk::synthetic::{generate_scene, SceneSpec};
use aftk::tensor::Tensor;
use aftk::trainer::{run_training, TrainConfig};
use aftk::video::Video;

fn videos(n: u64, offset: u64) -> Vec<Video> {
    (0..n)
        .map(|s| generate_scene(&SceneSpec::default(), offset + s).unwrap().to_video())
        .collect()
}

fn frames(vs: &[Video], stride: usize) -> Vec<Tensor> {
    vs.iter()
        .flat_map(|v| (0..v.len()).step_by(stride).map(move |t| v.lab(t).unwrap()))
        .collect()
}

fn crop(lab: &Tensor, side: usize) -> Tensor {
    let (h, w) = (lab.shape()[1], lab.shape()[2]);
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            out.extend_from_slice(&lab.data()[c * h * w + y * w..c * h * w + y * w + side]);
        }
    }
    Tensor::new(&[3, side, side], out).unwrap()
}

fn checkpoint_bytes(ae: &ColorAutoencoder) -> Vec<u8> {
    let mut ck = Checkpoint::new();
    ae.write_checkpoint(&mut ck);
    ck.to_bytes()
}

#[test]
fn latent_has_one_vector_per_cell_and_is_deterministic() {
    let img = crop(&videos(1, 0)[0].lab(0).unwrap(), 64);
    let ae = ColorAutoencoder::new(8, 0).freeze();
    let z = encode_color(&img, &ae).unwrap();
    assert_eq!(z.shape(), &[8, 64]);
    assert_eq!(encode_color(&img, &ae).unwrap(), z);
}

#[test]
fn memorizes_a_single_image() {
    let img = crop(&videos(1, 3)[0].lab(0).unwrap(), 64);
    let cfg = PretrainConfig { epochs: 1500, crop: 0, lr: 3e-3, ..PretrainConfig::default() };
    let (ae, curve) = pretrain_color_autoencoder(std::slice::from_ref(&img), &cfg).unwrap();
    let mse = ae.reconstruction_mse(&img).unwrap();
    println!("single-image Lab MSE {:.4} (initial {:.2})", mse, curve[0]);
    assert!(mse < 0.1, "memorization MSE {mse}");
}

#[test]
fn training_loss_drops_within_ten_epochs() {
    let corpus = frames(&videos(4, 0), 4);
    let cfg = PretrainConfig { epochs: 10, ..PretrainConfig::default() };
    let (_, curve) = pretrain_color_autoencoder(&corpus, &cfg).unwrap();
    assert!(curve[10] < curve[0], "{curve:?}");
    // Smoothed over three epochs the curve does not rise.
    let smooth: Vec<f64> = curve[1..].windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    assert!(smooth.last().unwrap() <= smooth.first().unwrap(), "{curve:?}");
}

#[test]
fn held_out_reconstruction_error_is_below_one_lab_unit() {
    let corpus = frames(&videos(64, 0), 4);
    let cfg = PretrainConfig { epochs: 20, ..PretrainConfig::default() };
    let (ae, curve) = pretrain_color_autoencoder(&corpus, &cfg).unwrap();
    let held = frames(&videos(8, 50_000), 4);
    let mse = held.iter().map(|x| ae.reconstruction_mse(x).unwrap()).sum::<f64>() / held.len() as f64;
    println!("held-out Lab MSE {mse:.3} (train curve {:.2} -> {:.2})", curve[0], curve.last().unwrap());
    assert!(mse < 1.0, "held-out Lab MSE {mse:.3}");
}

#[test]
fn main_training_leaves_the_autoencoder_untouched() {
    let vs = videos(2, 0);
    let (ae, _) = pretrain_color_autoencoder(&frames(&vs, 8), &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let before = checkpoint_bytes(&ae);
    let cfg = TrainConfig { warmup_epochs: 1, joint_epochs: 1, pairs_per_video: 2, ..TrainConfig::default() };
    run_training(&vs, &ae, &cfg, None, false).unwrap();
    assert_eq!(checkpoint_bytes(&ae), before);
}
