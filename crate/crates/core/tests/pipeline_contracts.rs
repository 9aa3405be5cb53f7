//! Inference contracts on small untrained models.

use hdrfuse_core::diffusion::{Denoiser, DiffusionSchedule, Direction, Position, SamplerConfig, ScheduleConfig, UnetConfig};
use hdrfuse_core::fusion::{Fusion, FusionConfig};
use hdrfuse_core::imgio::LdrImage;
use hdrfuse_core::pipeline::{blend_masks, reconstruct_hdr, write_result, Ablation, InferOptions, Models};
use hdrfuse_core::tonemap::dr_stops;
use hdrfuse_core::vae::{HdrModel, Vae, VaeConfig};
use hdrfuse_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models(with_shadow: bool) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vae = Vae::new(VaeConfig { channels: [4, 4, 8], latent_channels: 4 }, &mut rng);
    let hdr = HdrModel {
        decoder: vae.decoder.clone(),
        fusion: Fusion::new(4, &FusionConfig::default(), &mut rng).unwrap(),
        latent_scale: 1.0,
        gan_weight: 0.0,
    };
    let unet = UnetConfig { channels: [8, 8, 8], blocks_per_level: 1, latent_channels: 4 };
    let sched = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let mut denoiser = |d| {
        let mut m = Denoiser::new(d, &unet, sched.clone(), &mut rng).unwrap();
        for id in m.unet.params.ids().collect::<Vec<_>>() {
            let t = m.unet.params.get(id).map(|v| v + 0.02);
            m.unet.params.set(id, t);
        }
        m
    };
    let highlight = Some(denoiser(Direction::Highlight));
    let shadow = with_shadow.then(|| denoiser(Direction::Shadow));
    Models { vae, hdr, highlight, shadow, base: None }
}

fn input() -> LdrImage {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    LdrImage::new(32, 32, (0..32 * 32 * 3).map(|i| if i % 97 < 20 { 255 } else { rng.random_range(10..240) }).collect())
        .unwrap()
}

fn opts(ablation: Ablation, seed: u64) -> InferOptions {
    InferOptions { ablation, seed, sampler: SamplerConfig { steps: 4, ..Default::default() }, ..Default::default() }
}

#[test]
fn highest_position_needs_only_the_highlight_model() {
    let m = models(false);
    let img = input();
    let a = reconstruct_hdr(&img, &m, &opts(Ablation::Full, 5)).unwrap();
    let b = reconstruct_hdr(&img, &m, &opts(Ablation::Full, 5)).unwrap();
    assert_eq!(a.hdr, b.hdr);
    assert_eq!(a.bracket.len(), 3);
    assert_eq!(a.bracket[2], m.vae.encode(&img).unwrap());
    let middle = InferOptions { position: Position::Middle, ..opts(Ablation::Full, 5) };
    assert!(matches!(reconstruct_hdr(&img, &m, &middle), Err(Error::MissingCheckpoint(_))));
    let full = models(true);
    assert_eq!(reconstruct_hdr(&img, &full, &middle).unwrap().bracket.len(), 3);
    let five = InferOptions { k: 5, ..opts(Ablation::Full, 5) };
    assert_eq!(reconstruct_hdr(&img, &m, &five).unwrap().bracket.len(), 5);
}

#[test]
fn ablations_follow_their_definitions() {
    let m = models(false);
    let img = input();
    let wo_den = reconstruct_hdr(&img, &m, &opts(Ablation::WoDenoiser, 1)).unwrap();
    assert!(wo_den.bracket.iter().all(|c| *c == wo_den.bracket[0]));
    let wo_dec = reconstruct_hdr(&img, &m, &opts(Ablation::WoDecoder, 1)).unwrap();
    assert!(wo_dec.hdr.max_value() <= 1.0);
    assert!(!wo_dec.blended);
    assert!(dr_stops(&wo_dec.hdr) < 8.0);
}

#[test]
fn blended_output_keeps_unclipped_input_pixels() {
    let m = models(false);
    let img = input();
    let r = reconstruct_hdr(&img, &m, &opts(Ablation::Full, 3)).unwrap();
    assert!(r.blended);
    let (_, _, mask) = blend_masks(&img, &Default::default()).unwrap();
    let lin = img.linearize(2.2);
    for p in (0..mask.len()).filter(|&p| mask[p] == 0.0) {
        assert_eq!(&r.hdr.data()[3 * p..3 * p + 3], &lin.data()[3 * p..3 * p + 3]);
    }
    let dir = tempfile::tempdir().unwrap();
    write_result(dir.path(), &r, &serde_json::json!({ "name": "x" })).unwrap();
    for f in ["result.pfm", "weights_0.pfm", "weights_1.pfm", "weights_2.pfm", "meta.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}
