//! Joint training of the latent fusion module and the log-domain HDR
//! decoder on frozen encoder latents.

use std::hash::{DefaultHasher, Hash, Hasher};

use hdrfuse_tensor::{Adam, Graph, ParamStore, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bracket::BracketSample;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::train::{EarlyStop, LossLog, Trainer};
use crate::vae::{hdr_to_tensor, split_bound, split_store, Discriminator, HdrModel, LatentTensor, Vae, LOG_EPS};

/// Encoded bracket and its log-domain decoder target.
#[derive(Clone, Debug)]
pub struct CachedSample {
    /// One scaled latent `[1, c, h, w]` per exposure, darkest first.
    pub latents: Vec<LatentTensor>,
    /// `log(H * 2^e_mid + LOG_EPS)` as `[1, 3, H, W]`.
    pub target: Tensor<f32>,
}

/// Exposure in stops the decoder target is expressed at: the midpoint of
/// the bracket's first and last exposures.
pub fn target_exposure(exposures: &[f64]) -> f64 {
    (exposures[0] + exposures[exposures.len() - 1]) / 2.0
}

pub fn log_target(sample: &BracketSample) -> Tensor<f32> {
    let f = f64::exp2(target_exposure(&sample.exposures));
    hdr_to_tensor(&sample.hdr_target, |v| (v * f + LOG_EPS).ln())
}

/// Encode every bracket once with the frozen encoder.
pub fn cache_samples(vae: &Vae, samples: &[BracketSample]) -> Result<Vec<CachedSample>> {
    samples
        .iter()
        .map(|s| {
            let latents = vae.encode_batch(&s.ldr_images.iter().collect::<Vec<_>>())?;
            Ok(CachedSample { latents: (0..latents.shape()[0]).map(|i| latents.batch_item(i)).collect(), target: log_target(s) })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub fusion: FusionConfig,
    /// Weight of the hinge adversarial term; 0 disables the discriminator.
    pub gan_weight: f64,
    pub disc_width: usize,
    pub disc_lr: f64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 4,
            lr: 1e-3,
            clip_norm: 1.0,
            fusion: FusionConfig::default(),
            gan_weight: 0.0,
            disc_width: 16,
            disc_lr: 1e-4,
            early_stop: None,
        }
    }
}

/// Fine-tune a copy of the pretrained LDR decoder, together with a fresh
/// fusion module, to map fused latents to the log-domain target. The
/// tracked loss is the L1 distance in the log domain.
pub fn finetune_hdr_decoder(vae: &Vae, data: &[CachedSample], tc: &DecoderTrainConfig, seed: u64) -> Result<(HdrModel, LossLog)> {
    let first = data.first().ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    let k = first.latents.len();
    if k < 2 {
        return Err(Error::InvalidArgument("brackets need at least 2 latents".into()));
    }
    if data.iter().any(|d| d.latents.len() != k || d.latents[0].shape() != first.latents[0].shape() || d.target.shape() != first.target.shape()) {
        return Err(Error::Shape("cached samples must share bracket size and shapes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fusion = Fusion::<f32>::new(vae.config.latent_channels, &tc.fusion, &mut rng)?;
    let mut model = HdrModel { decoder: vae.decoder.clone(), fusion, latent_scale: vae.latent_scale, gan_weight: tc.gan_weight };

    let mut store = model.fusion.params.clone();
    let n_fusion = store.len();
    for (_, name, t) in model.decoder.params.iter() {
        store.add(name, t.clone());
    }
    let mut disc = (tc.gan_weight > 0.0).then(|| Discriminator::<f32>::new(tc.disc_width, &mut rng));
    let mut disc_opt = Adam::new(tc.disc_lr).with_clip_norm(tc.clip_norm);
    let mut trainer = Trainer::new(Adam::new(tc.lr).with_clip_norm(tc.clip_norm), seed).with_early_stop(tc.early_stop);
    let inv_scale = 1.0 / vae.latent_scale;

    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| rng.random_range(0..data.len())).collect();
        let target = Tensor::stack_batch(&idx.iter().map(|&i| data[i].target.clone()).collect::<Vec<_>>());
        let positions: Vec<Tensor<f32>> = (0..k)
            .map(|j| Tensor::stack_batch(&idx.iter().map(|&i| data[i].latents[j].clone()).collect::<Vec<_>>()))
            .collect();

        let g = Graph::new();
        let p = store.bind(&g, true);
        let (pf, pd) = split_bound(&p, n_fusion);
        let latents: Vec<_> = positions.into_iter().map(|t| g.constant(t)).collect();
        let (merged, _) = model.fusion.forward(&pf, &latents);
        let pred = model.decoder.forward(&pd, merged.scale(inv_scale));
        let tv = g.constant(target.clone());
        let l1 = pred.sub(tv).abs().mean_all();
        let loss = match &disc {
            Some(d) => {
                let dp = d.params.bind(&g, false);
                l1.add(d.forward(&dp, pred).mean_all().scale(-tc.gan_weight))
            }
            None => l1,
        };
        let fake = pred.value().as_ref().clone();
        let stop = trainer.step(step, &g, loss, l1, &p, &mut store)?;

        if let Some(d) = disc.as_mut() {
            let gd = Graph::new();
            let dp = d.params.bind(&gd, true);
            let real = d.forward(&dp, gd.constant(target));
            let fake = d.forward(&dp, gd.constant(fake));
            let dl = real.neg().add_scalar(1.0).relu().mean_all().add(fake.add_scalar(1.0).relu().mean_all());
            let mut grads = gd.backward(dl);
            let gs = dp.grads(&mut grads);
            drop(grads);
            disc_opt.step(&mut d.params, &gs);
        }
        if stop {
            info!("hdr decoder: early stop at step {step}");
            break;
        }
    }
    let (f, d) = split_store(&store, n_fusion);
    model.fusion.params = f;
    model.decoder.params = d;
    Ok((model, trainer.into_log()))
}

/// Mean log-domain L1 of a model over cached samples.
pub fn evaluate_log_l1(model: &HdrModel, data: &[CachedSample]) -> Result<f64> {
    let mut total = 0.0;
    for d in data {
        let (merged, _) = model.fusion.fuse(&d.latents)?;
        let y = model.decode_log(&merged);
        total += y.data().iter().zip(d.target.data()).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / y.numel() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Hash of a parameter store's names and exact values.
pub fn params_fingerprint(store: &ParamStore<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for (_, name, t) in store.iter() {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bracket::synthesize_bracket;
    use crate::scenes::{generate_scene, SceneConfig};
    use crate::vae::VaeConfig;

    #[test]
    fn target_uses_the_middle_exposure() {
        assert_eq!(target_exposure(&[-3.0, -1.0, 2.0]), -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = generate_scene(16, 10.0, 2, &mut rng).unwrap();
        let s = synthesize_bracket(&img, 3, &mut rng).unwrap();
        let t = log_target(&s);
        let f = f64::exp2(target_exposure(&s.exposures));
        let px = img.pixel(3, 2);
        let expect = (f64::from(px[1]) * f + LOG_EPS).ln();
        assert!((f64::from(t.data()[16 * 16 + 2 * 16 + 3]) - expect).abs() < 1e-5);
    }

    #[test]
    fn finetuning_fits_and_leaves_encoder_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SceneConfig { size: 16, ..Default::default() };
        let samples: Vec<_> = (0..2)
            .map(|_| {
                let img = generate_scene(cfg.size, 9.0, 2, &mut rng).unwrap();
                synthesize_bracket(&img, 3, &mut rng).unwrap()
            })
            .collect();
        let vae = Vae::new(VaeConfig { channels: [4, 4, 8], latent_channels: 4 }, &mut rng);
        let before = params_fingerprint(&vae.encoder.params);
        let cache = cache_samples(&vae, &samples).unwrap();
        assert_eq!(cache[0].latents.len(), 3);
        let tc = DecoderTrainConfig { steps: 60, batch_size: 2, lr: 3e-3, gan_weight: 0.1, disc_width: 4, ..Default::default() };
        let (model, log) = finetune_hdr_decoder(&vae, &cache, &tc, 2).unwrap();
        assert_eq!(params_fingerprint(&vae.encoder.params), before);
        assert_eq!(log.len(), 60);
        let w = crate::train::window_means(&log.tracked, 10);
        assert!(w[5] < w[0], "{w:?}");
        let after = evaluate_log_l1(&model, &cache).unwrap();
        assert!(after.is_finite() && after < w[0]);
    }
}
