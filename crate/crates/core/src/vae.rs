//! Convolutional autoencoder with an LDR decoder and a log-domain HDR decoder.
//!
//! The encoder halves resolution three times (factor 8). LDR pixels enter
//! in `[-1, 1]`. Latents handed to other modules are the posterior mean
//! multiplied by `latent_scale`, which normalizes them to roughly unit
//! variance; decoders divide it back out.

use hdrfuse_tensor::{Adam, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::imgio::{HdrImage, LdrImage};
use crate::nn::{Conv, GroupNorm, ResBlock};
use crate::train::{LossLog, Trainer};

pub const DOWNSAMPLE: usize = 8;
/// Offset inside the HDR decoder's log target, one 8-bit code value.
pub const LOG_EPS: f64 = 1.0 / 255.0;

pub type LatentTensor = Tensor<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Widths of the three resolution levels, finest first.
    pub channels: [usize; 3],
    pub latent_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 128], latent_channels: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar> {
    pub params: ParamStore<T>,
    conv_in: Conv,
    stages: Vec<(ResBlock, Conv)>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv,
    latent_channels: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let [c1, _, c3] = cfg.channels;
        let conv_in = Conv::new(&mut p, "enc.conv_in", 3, c1, 3, 1, rng);
        let mut prev = c1;
        let mut stages = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let rb = ResBlock::new(&mut p, &format!("enc.down{i}.res"), prev, c, None, rng);
            let down = Conv::new(&mut p, &format!("enc.down{i}.conv"), c, c, 3, 2, rng);
            stages.push((rb, down));
            prev = c;
        }
        let mid = ResBlock::new(&mut p, "enc.mid", c3, c3, None, rng);
        let norm_out = GroupNorm::new(&mut p, "enc.norm_out", c3);
        let conv_out = Conv::new(&mut p, "enc.conv_out", c3, 2 * cfg.latent_channels, 3, 1, rng);
        Self { params: p, conv_in, stages, mid, norm_out, conv_out, latent_channels: cfg.latent_channels }
    }

    /// Posterior mean and log-variance.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let mut h = self.conv_in.forward(p, x);
        for (rb, down) in &self.stages {
            h = down.forward(p, rb.forward(p, h, None));
        }
        let h = self.mid.forward(p, h, None);
        let h = self.conv_out.forward(p, self.norm_out.forward(p, h).silu());
        (h.slice_channels(0, self.latent_channels), h.slice_channels(self.latent_channels, self.latent_channels))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar> {
    pub params: ParamStore<T>,
    conv_in: Conv,
    mid: ResBlock,
    stages: Vec<(Conv, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let [c1, _, c3] = cfg.channels;
        let conv_in = Conv::new(&mut p, "dec.conv_in", cfg.latent_channels, c3, 3, 1, rng);
        let mid = ResBlock::new(&mut p, "dec.mid", c3, c3, None, rng);
        let mut prev = c3;
        let mut stages = Vec::new();
        for (i, &c) in cfg.channels.iter().rev().enumerate() {
            let up = Conv::new(&mut p, &format!("dec.up{i}.conv"), prev, c, 3, 1, rng);
            let rb = ResBlock::new(&mut p, &format!("dec.up{i}.res"), c, c, None, rng);
            stages.push((up, rb));
            prev = c;
        }
        let norm_out = GroupNorm::new(&mut p, "dec.norm_out", c1);
        let conv_out = Conv::new(&mut p, "dec.conv_out", c1, 3, 3, 1, rng);
        Self { params: p, conv_in, mid, stages, norm_out, conv_out }
    }

    /// Unscaled latent `[n, c, h, w]` to a 3-channel image `[n, 3, 8h, 8w]`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.mid.forward(p, self.conv_in.forward(p, z), None);
        for (up, rb) in &self.stages {
            h = rb.forward(p, up.forward(p, h.upsample2x()), None);
        }
        self.conv_out.forward(p, self.norm_out.forward(p, h).silu())
    }
}

/// Pretrained autoencoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: Encoder<f32>,
    pub decoder: Decoder<f32>,
    pub latent_scale: f64,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Self {
        let encoder = Encoder::new(&config, rng);
        let decoder = Decoder::new(&config, rng);
        Self { config, encoder, decoder, latent_scale: 1.0 }
    }

    pub fn latent_shape(&self, width: usize, height: usize) -> Result<[usize; 4]> {
        check_dims(width, height)?;
        Ok([1, self.config.latent_channels, height / DOWNSAMPLE, width / DOWNSAMPLE])
    }

    /// Scaled posterior means for a batch of equally sized images.
    pub fn encode_batch(&self, imgs: &[&LdrImage]) -> Result<LatentTensor> {
        for img in imgs {
            check_dims(img.width(), img.height())?;
        }
        let x = Tensor::stack_batch(&imgs.iter().map(|i| ldr_to_tensor::<f32>(i)).collect::<Vec<_>>());
        let g = Graph::new();
        let p = self.encoder.params.bind(&g, false);
        let (mean, _) = self.encoder.forward(&p, g.constant(x));
        let s = self.latent_scale as f32;
        Ok(mean.value().map(|v| v * s))
    }

    pub fn encode(&self, img: &LdrImage) -> Result<LatentTensor> {
        self.encode_batch(&[img])
    }

    /// Decoder output in `[0, 1]`, `[n, 3, H, W]`.
    pub fn decode_unit(&self, c: &LatentTensor) -> Result<Tensor<f32>> {
        check_latent(c, self.config.latent_channels)?;
        let g = Graph::new();
        let p = self.decoder.params.bind(&g, false);
        let inv = 1.0 / self.latent_scale;
        let y = self.decoder.forward(&p, g.constant(c.clone()).scale(inv));
        Ok(y.value().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
    }

    pub fn decode_ldr(&self, c: &LatentTensor) -> Result<LdrImage> {
        let y = self.decode_unit(c)?;
        tensor_to_ldr(&y.batch_item(0))
    }
}

/// Fine-tuned HDR decoder together with its jointly trained fusion module.
#[derive(Clone, Debug)]
pub struct HdrModel {
    pub decoder: Decoder<f32>,
    pub fusion: Fusion<f32>,
    pub latent_scale: f64,
    pub gan_weight: f64,
}

impl HdrModel {
    /// Fuse a bracket of scaled latents and decode the result.
    pub fn reconstruct(&self, bracket: &[LatentTensor]) -> Result<(HdrImage, Vec<Tensor<f32>>)> {
        let (merged, weights) = self.fusion.fuse(bracket)?;
        Ok((self.decode_hdr(&merged)?, weights))
    }

    /// `exp(y) - LOG_EPS`, clamped at zero, from the log-domain network output.
    pub fn decode_hdr(&self, c_merge: &LatentTensor) -> Result<HdrImage> {
        check_latent(c_merge, self.fusion.channels)?;
        let y = self.decode_log(c_merge);
        if !y.all_finite() {
            let bad = y.data().iter().filter(|v| !v.is_finite()).count();
            return Err(Error::Numeric(format!("HDR decoder produced {bad} non-finite log values")));
        }
        let img = y.batch_item(0).map(|v| (f64::from(v).exp() - LOG_EPS).max(0.0) as f32);
        let out = tensor_to_hdr(&img)?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("HDR decoder output overflows f32".into()));
        }
        Ok(out)
    }

    /// Raw log-domain output `[n, 3, H, W]`.
    pub fn decode_log(&self, c_merge: &LatentTensor) -> Tensor<f32> {
        let g = Graph::new();
        let p = self.decoder.params.bind(&g, false);
        let y = self.decoder.forward(&p, g.constant(c_merge.clone()).scale(1.0 / self.latent_scale));
        y.value().as_ref().clone()
    }
}

/// Small patch discriminator on log-domain HDR images.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub params: ParamStore<T>,
    convs: Vec<Conv>,
    out: Conv,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let convs = vec![
            Conv::new(&mut p, "disc.c0", 3, width, 3, 2, rng),
            Conv::new(&mut p, "disc.c1", width, 2 * width, 3, 2, rng),
        ];
        let out = Conv::new(&mut p, "disc.out", 2 * width, 1, 3, 1, rng);
        Self { params: p, convs, out }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.convs.iter().fold(x, |h, c| c.forward(p, h).leaky_relu(0.2));
        self.out.forward(p, h)
    }
}

pub fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || !width.is_multiple_of(DOWNSAMPLE) || !height.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::Shape(format!("image {width}x{height} is not divisible by the factor {DOWNSAMPLE}")));
    }
    Ok(())
}

fn check_latent(c: &LatentTensor, channels: usize) -> Result<()> {
    let s = c.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape(format!("latent shape {s:?} does not have {channels} channels")));
    }
    Ok(())
}

/// `[1, 3, H, W]` with values `v / 127.5 - 1`.
pub fn ldr_to_tensor<T: Scalar>(img: &LdrImage) -> Tensor<T> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![T::zero(); 3 * w * h];
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + p] = T::of(f64::from(px[c]) / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(vec![1, 3, h, w], out)
}

/// `[1, 3, H, W]` planar copy of an HDR image with `f` applied per value.
pub fn hdr_to_tensor<T: Scalar>(img: &HdrImage, f: impl Fn(f64) -> f64) -> Tensor<T> {
    let (w, h) = (img.width(), img.height());
    let mut out = vec![T::zero(); 3 * w * h];
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + p] = T::of(f(f64::from(px[c])));
        }
    }
    Tensor::from_vec(vec![1, 3, h, w], out)
}

fn planar_to_interleaved(t: &Tensor<f32>) -> (usize, usize, Vec<f32>) {
    let (_, c, h, w) = t.dims4();
    assert_eq!(c, 3, "image tensors have 3 channels");
    let mut out = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            out[p * 3 + ch] = t.data()[ch * w * h + p];
        }
    }
    (w, h, out)
}

/// Values in `[0, 1]`, quantized half up.
pub fn tensor_to_ldr(t: &Tensor<f32>) -> Result<LdrImage> {
    let (w, h, data) = planar_to_interleaved(t);
    LdrImage::new(w, h, data.iter().map(|&v| (f64::from(v.clamp(0.0, 1.0)) * 255.0 + 0.5).floor() as u8).collect())
}

pub fn tensor_to_hdr(t: &Tensor<f32>) -> Result<HdrImage> {
    let (w, h, data) = planar_to_interleaved(t);
    HdrImage::new(w, h, data)
}

/// Square crop `[n, c, y0.., x0..]` of a 4-D tensor.
pub fn crop<T: Scalar>(t: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Tensor<T> {
    let (n, c, h, w) = t.dims4();
    assert!(y0 + size <= h && x0 + size <= w, "crop outside tensor");
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in t.data().chunks_exact(h * w) {
        for y in y0..y0 + size {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    Tensor::from_vec(vec![n, c, size, size], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the random square crops used for training; 0 uses whole images.
    pub crop: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub clip_norm: f64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 8, crop: 32, lr: 1e-3, kl_weight: 1e-6, clip_norm: 1.0 }
    }
}

/// Train the autoencoder on LDR images, then set `latent_scale` to the
/// inverse standard deviation of the training posterior means.
pub fn pretrain_vae(images: &[LdrImage], config: VaeConfig, tc: &VaeTrainConfig, seed: u64) -> Result<(Vae, LossLog)> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::Shape("training images must share dimensions".into()));
    }
    check_dims(w, h)?;
    let crop_size = if tc.crop == 0 { w.min(h) } else { tc.crop };
    if crop_size % DOWNSAMPLE != 0 || crop_size > w.min(h) {
        return Err(Error::Config(format!("crop {crop_size} must be a multiple of 8 within the image")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vae = Vae::new(config, &mut rng);
    let tensors: Vec<Tensor<f32>> = images.iter().map(ldr_to_tensor).collect();
    let mut store = vae.encoder.params.clone();
    let n_enc = store.len();
    for (_, name, t) in vae.decoder.params.iter() {
        store.add(name, t.clone());
    }
    let mut trainer = Trainer::new(Adam::new(tc.lr).with_clip_norm(tc.clip_norm), seed);
    for step in 0..tc.steps {
        let batch: Vec<_> = (0..tc.batch_size)
            .map(|_| {
                let t = &tensors[rng.random_range(0..tensors.len())];
                crop(t, rng.random_range(0..=h - crop_size), rng.random_range(0..=w - crop_size), crop_size)
            })
            .collect();
        let x = Tensor::stack_batch(&batch);
        let g = Graph::new();
        let p = store.bind(&g, true);
        let (pe, pd) = split_bound(&p, n_enc);
        let xv = g.constant(x);
        let (mean, logvar) = vae.encoder.forward(&pe, xv);
        let eps = g.constant(Tensor::randn(mean.shape(), &mut rng));
        let z = mean.add(logvar.scale(0.5).exp().mul(eps));
        let recon = vae.decoder.forward(&pd, z);
        let rec = recon.sub(xv).sqr().mean_all();
        let kl = mean.sqr().add(logvar.exp()).sub(logvar).add_scalar(-1.0).mean_all().scale(0.5);
        let loss = rec.add(kl.scale(tc.kl_weight));
        trainer.step(step, &g, loss, rec, &p, &mut store)?;
    }
    let (enc, dec) = split_store(&store, n_enc);
    vae.encoder.params = enc;
    vae.decoder.params = dec;
    let means = vae.encode_batch(&images.iter().collect::<Vec<_>>())?;
    let n = means.numel() as f64;
    let mu = means.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = means.data().iter().map(|&v| (f64::from(v) - mu).powi(2)).sum::<f64>() / n;
    vae.latent_scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    info!("vae: latent scale {:.4}", vae.latent_scale);
    Ok((vae, trainer.into_log()))
}

/// Bound parameters of a concatenated store, split at `at`.
pub(crate) fn split_bound<'g, T: Scalar>(p: &Bound<'g, T>, at: usize) -> (Bound<'g, T>, Bound<'g, T>) {
    p.split(at)
}

pub(crate) fn split_store<T: Scalar>(store: &ParamStore<T>, at: usize) -> (ParamStore<T>, ParamStore<T>) {
    let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
    for (id, name, t) in store.iter() {
        if id.index() < at { a.add(name, t.clone()) } else { b.add(name, t.clone()) };
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeConfig {
        VaeConfig { channels: [4, 4, 8], latent_channels: 4 }
    }

    #[test]
    fn shapes_round_trip() {
        let vae = Vae::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0));
        let img = LdrImage::new(64, 64, (0..64 * 64 * 3).map(|i| (i % 256) as u8).collect()).unwrap();
        let c = vae.encode(&img).unwrap();
        assert_eq!(c.shape(), &[1, 4, 8, 8]);
        assert_eq!(vae.encode(&img).unwrap(), c);
        let back = vae.decode_ldr(&c).unwrap();
        assert_eq!((back.width(), back.height()), (64, 64));
        let zero = vae.decode_ldr(&Tensor::zeros(vec![1, 4, 3, 5])).unwrap();
        assert_eq!((zero.width(), zero.height()), (40, 24));
        let odd = LdrImage::new(12, 8, vec![0; 12 * 8 * 3]).unwrap();
        assert!(matches!(vae.encode(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_conversions() {
        let img = LdrImage::new(2, 1, vec![0, 255, 51, 102, 153, 204]).unwrap();
        let t = ldr_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[2], 1.0);
        let unit = t.map(|v| (v + 1.0) / 2.0);
        assert_eq!(tensor_to_ldr(&unit).unwrap(), img);
        let c = crop(&Tensor::from_vec(vec![1, 1, 3, 3], (0..9).map(|v| v as f32).collect()), 1, 1, 2);
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn pretraining_reduces_reconstruction_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<_> = (0..4)
            .map(|_| {
                let a = rng.random_range(0..200u8);
                LdrImage::new(16, 16, (0..16 * 16 * 3).map(|i| a.wrapping_add((i / 48) as u8 * 3)).collect()).unwrap()
            })
            .collect();
        let tc = VaeTrainConfig { steps: 200, batch_size: 4, crop: 16, lr: 2e-3, ..Default::default() };
        let (vae, log) = pretrain_vae(&imgs, tiny(), &tc, 1).unwrap();
        let means = crate::train::window_means(&log.tracked, 20);
        assert!(means[9] < 0.5 * means[0], "{means:?}");
        assert!(vae.latent_scale > 0.0);
    }
}
