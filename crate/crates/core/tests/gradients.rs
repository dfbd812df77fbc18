mod common;

use candle_core::{DType, Device, Tensor};
use contrakd::losses::{dice_loss, recon_mse_loss};
use contrakd::models::{ModelConfig, TapNetwork, UNet};
use contrakd::nn::Mode;
use rand::SeedableRng;

use common::{fd_check_all, fd_relative_error, uniform};

#[test]
fn every_loss_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for (name, rel) in fd_check_all(1e-4, seed).unwrap() {
            assert!(rel < 1e-3, "{name} (seed {seed}): relative error {rel:.3e}");
        }
    }
}

#[test]
fn network_input_gradients_match_finite_differences() {
    // Exercises the fused convolution, normalization and pooling ops end to end.
    for (i, cfg) in [
        ModelConfig::student_s1().with_base_channels(2),
        ModelConfig::student_s2().with_base_channels(2),
        ModelConfig::teacher().with_base_channels(1),
    ]
    .into_iter()
    .enumerate()
    {
        let model = UNet::new(&cfg, 3, DType::F64, &Device::Cpu).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4 + i as u64);
        let x = uniform((2, 3, 16, 16), 0.0, 1.0, &mut rng);
        let target = common::binary((2, 1, 16, 16), &mut rng);
        let f = |x: &Tensor| -> contrakd::Result<Tensor> {
            let out = model.forward_with_taps(x, Mode::Train)?;
            let mut loss = dice_loss(&sigmoid(&out.seg_logits)?, &target)?;
            if let Some(r) = out.recon {
                loss = (loss + recon_mse_loss(&r, x)?)?;
            }
            Ok(loss)
        };
        let rel = fd_relative_error(&f, &x, 1e-5).unwrap();
        assert!(rel < 1e-4, "{}: relative error {rel:.3e}", cfg.role);
    }
}

fn sigmoid(x: &Tensor) -> contrakd::Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
