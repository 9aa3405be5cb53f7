//! LDR to HDR reconstruction and unconditional HDR generation.

use std::fs;
use std::path::Path;

use hdrfuse_tensor::Tensor;
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{generate_bracket_from_latent, Denoiser, Position, SamplerConfig};
use crate::error::{Error, Result};
use crate::imgio::{luma, write_pfm, HdrImage, LdrImage, RgbSource};
use crate::stats::median;
use crate::vae::{tensor_to_ldr, HdrModel, LatentTensor, Vae};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Rises from 0 to 1 as the brightest channel approaches white.
    Highlight,
    /// Rises from 0 to 1 as the darkest channel approaches black.
    Shadow,
}

/// Soft per-pixel clipping mask of an LDR image.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMask {
    pub kind: MaskKind,
    pub lo: f64,
    pub hi: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl ClipMask {
    /// Highlight masks ramp on the max channel, shadow masks on the min
    /// channel, both from code values read as `v / 255`.
    pub fn new(img: &LdrImage, kind: MaskKind, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("mask thresholds need lo < hi, got {lo}, {hi}")));
        }
        let data = (0..img.width() * img.height())
            .map(|p| {
                let rgb = img.rgb(p);
                match kind {
                    MaskKind::Highlight => smoothstep(lo, hi, rgb.iter().copied().fold(f64::MIN, f64::max)),
                    MaskKind::Shadow => 1.0 - smoothstep(lo, hi, rgb.iter().copied().fold(f64::MAX, f64::min)),
                }
            })
            .collect();
        Ok(Self { kind, lo, hi, width: img.width(), height: img.height(), data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendConfig {
    pub highlight: [f64; 2],
    pub shadow: [f64; 2],
    pub gamma: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self { highlight: [0.92, 0.98], shadow: [0.02, 0.08], gamma: 2.2 }
    }
}

/// Highlight and shadow masks of `input` and their elementwise maximum.
pub fn blend_masks(input: &LdrImage, cfg: &BlendConfig) -> Result<(ClipMask, ClipMask, Vec<f64>)> {
    let hl = ClipMask::new(input, MaskKind::Highlight, cfg.highlight[0], cfg.highlight[1])?;
    let sh = ClipMask::new(input, MaskKind::Shadow, cfg.shadow[0], cfg.shadow[1])?;
    let m = hl.data.iter().zip(&sh.data).map(|(a, b)| a.max(*b)).collect();
    Ok((hl, sh, m))
}

/// Keep the linearized input where it is unclipped and use scale-aligned
/// generated content where it is clipped. The scale `s` is the median of
/// `lum(input_lin) / lum(gen)` over pixels whose blend mask is exactly 0.
pub fn blend_unclipped(gen: &HdrImage, input: &LdrImage, cfg: &BlendConfig) -> Result<(HdrImage, f64)> {
    if (gen.width(), gen.height()) != (input.width(), input.height()) {
        return Err(Error::Shape(format!(
            "generated {}x{} vs input {}x{}",
            gen.width(),
            gen.height(),
            input.width(),
            input.height()
        )));
    }
    let (_, _, m) = blend_masks(input, cfg)?;
    blend_with_mask(gen, input, &m, cfg.gamma)
}

pub fn blend_with_mask(gen: &HdrImage, input: &LdrImage, m: &[f64], gamma: f64) -> Result<(HdrImage, f64)> {
    let lin = input.linearize(gamma);
    let ratios: Vec<f64> = (0..m.len())
        .filter(|&p| m[p] == 0.0)
        .filter_map(|p| {
            let g = luma(gen.rgb(p));
            (g > 0.0).then(|| luma(lin.rgb(p)) / g)
        })
        .collect();
    let s = median(&ratios).ok_or_else(|| Error::AlignmentImpossible("no unclipped pixels to align on".into()))?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::AlignmentImpossible(format!("alignment scale {s} is not positive")));
    }
    let data = lin
        .data()
        .iter()
        .zip(gen.data())
        .enumerate()
        .map(|(i, (&a, &g))| {
            let mi = m[i / 3];
            ((1.0 - mi) * f64::from(a) + mi * (s * f64::from(g))) as f32
        })
        .collect();
    Ok((HdrImage::new(gen.width(), gen.height(), data)?, s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    /// Fused latent decoded by the pretrained LDR decoder, gamma-linearized.
    WoDecoder,
    /// Bracket made of the input latent repeated.
    WoDenoiser,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::Full),
            "wo-decoder" | "no-decoder" | "no_decoder_finetune" => Ok(Ablation::WoDecoder),
            "wo-denoiser" | "no-denoiser" | "no_denoiser" => Ok(Ablation::WoDenoiser),
            _ => Err(Error::InvalidArgument(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferOptions {
    pub position: Position,
    pub k: usize,
    pub ablation: Ablation,
    pub blend: bool,
    pub blend_config: BlendConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            position: Position::Highest,
            k: 3,
            ablation: Ablation::Full,
            blend: true,
            blend_config: BlendConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

/// Trained components; the ones a run needs must be present.
#[derive(Clone, Debug)]
pub struct Models {
    pub vae: Vae,
    pub hdr: HdrModel,
    pub highlight: Option<Denoiser>,
    pub shadow: Option<Denoiser>,
    pub base: Option<Denoiser>,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub hdr: HdrImage,
    pub bracket: Vec<LatentTensor>,
    pub weights: Vec<Tensor<f32>>,
    pub scale: f64,
    pub blended: bool,
}

pub fn reconstruct_hdr(input: &LdrImage, models: &Models, opts: &InferOptions) -> Result<ReconstructionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let c_in = models.vae.encode(input)?;
    let bracket = match opts.ablation {
        Ablation::WoDenoiser => vec![c_in; opts.k.max(2)],
        _ => generate_bracket_from_latent(
            &c_in,
            opts.position,
            opts.k,
            models.highlight.as_ref(),
            models.shadow.as_ref(),
            &opts.sampler,
            &mut rng,
        )?,
    };
    let (merged, weights) = models.hdr.fusion.fuse(&bracket)?;
    if opts.ablation == Ablation::WoDecoder {
        let ldr = tensor_to_ldr(&models.vae.decode_unit(&merged)?.batch_item(0))?;
        let hdr = ldr.linearize(opts.blend_config.gamma);
        return Ok(ReconstructionResult { hdr, bracket, weights, scale: 1.0, blended: false });
    }
    let gen = models.hdr.decode_hdr(&merged)?;
    if !opts.blend {
        return Ok(ReconstructionResult { hdr: gen, bracket, weights, scale: 1.0, blended: false });
    }
    match blend_unclipped(&gen, input, &opts.blend_config) {
        Ok((hdr, scale)) => Ok(ReconstructionResult { hdr, bracket, weights, scale, blended: true }),
        Err(Error::AlignmentImpossible(msg)) => {
            warn!("blending skipped: {msg}");
            Ok(ReconstructionResult { hdr: gen, bracket, weights, scale: 1.0, blended: false })
        }
        Err(e) => Err(e),
    }
}

/// Sample a brightest-exposure latent from the base model, complete the
/// bracket downwards and decode it.
pub fn generate_hdr(
    seed: u64,
    models: &Models,
    latent_hw: (usize, usize),
    k: usize,
    sampler: &SamplerConfig,
) -> Result<ReconstructionResult> {
    let base = models.base.as_ref().ok_or_else(|| Error::MissingCheckpoint("unconditional base denoiser".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, models.vae.config.latent_channels, latent_hw.0, latent_hw.1];
    let c_plus = base.sample(None, &shape, sampler, &mut rng)?;
    let bracket = generate_bracket_from_latent(
        &c_plus,
        Position::Highest,
        k,
        models.highlight.as_ref(),
        None,
        sampler,
        &mut rng,
    )?;
    let (merged, weights) = models.hdr.fusion.fuse(&bracket)?;
    let hdr = models.hdr.decode_hdr(&merged)?;
    Ok(ReconstructionResult { hdr, bracket, weights, scale: 1.0, blended: false })
}

/// Channel-averaged weight map of one bracket position as a grey image.
pub fn weight_image(w: &Tensor<f32>) -> Result<HdrImage> {
    let (_, c, h, wd) = w.dims4();
    let mut data = Vec::with_capacity(h * wd * 3);
    for p in 0..h * wd {
        let v = (0..c).map(|ch| w.data()[ch * h * wd + p]).sum::<f32>() / c as f32;
        data.extend([v; 3]);
    }
    HdrImage::new(wd, h, data)
}

/// Write `result.pfm`, `weights_<i>.pfm` and `meta.json` into `dir`.
pub fn write_result(dir: &Path, result: &ReconstructionResult, meta: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&result.hdr, dir.join("result.pfm"))?;
    for (i, w) in result.weights.iter().enumerate() {
        write_pfm(&weight_image(w)?, dir.join(format!("weights_{i}.pfm")))?;
    }
    let mut meta = meta.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("blend_scale".into(), result.scale.into());
        obj.insert("blended".into(), result.blended.into());
        obj.insert("max_value".into(), f64::from(result.hdr.max_value()).into());
    }
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ldr(vals: &[[u8; 3]]) -> LdrImage {
        LdrImage::new(vals.len(), 1, vals.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn mask_ramps() {
        assert_eq!(smoothstep(0.92, 0.98, 0.5), 0.0);
        assert_eq!(smoothstep(0.92, 0.98, 0.99), 1.0);
        assert!((smoothstep(0.0, 1.0, 0.5) - 0.5).abs() < 1e-15);
        let img = ldr(&[[255, 0, 0], [128, 128, 128], [3, 3, 3]]);
        let h = ClipMask::new(&img, MaskKind::Highlight, 0.92, 0.98).unwrap();
        let s = ClipMask::new(&img, MaskKind::Shadow, 0.02, 0.08).unwrap();
        assert_eq!(h.data, vec![1.0, 0.0, 0.0]);
        assert_eq!(s.data, vec![1.0, 0.0, 1.0]);
        assert!(ClipMask::new(&img, MaskKind::Shadow, 0.5, 0.5).is_err());
    }

    #[test]
    fn blending_identity_and_scale() {
        let img = ldr(&[[100, 120, 140], [60, 70, 80], [255, 255, 255]]);
        let lin = img.linearize(2.2);
        let (out, s) = blend_unclipped(&lin, &img, &BlendConfig::default()).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(out, lin);

        let doubled = lin.map(|v| 2.0 * v).unwrap();
        let (out, s) = blend_unclipped(&doubled, &img, &BlendConfig::default()).unwrap();
        assert!((s - 0.5).abs() < 1e-6);
        assert_eq!(&out.data()[..6], &lin.data()[..6]);
    }

    #[test]
    fn full_mask_uses_scaled_generation() {
        let img = ldr(&[[255, 255, 255], [10, 20, 30]]);
        let gen = HdrImage::new(2, 1, vec![4.0, 4.0, 4.0, 0.1, 0.2, 0.3]).unwrap();
        let (out, s) = blend_with_mask(&gen, &img, &[0.0, 1.0], 2.2).unwrap();
        assert!(matches!(blend_with_mask(&gen, &img, &[1.0, 1.0], 2.2), Err(Error::AlignmentImpossible(_))));
        assert!((f64::from(out.data()[3]) - s * 0.1).abs() < 1e-6);
        let none = blend_unclipped(&gen, &ldr(&[[255, 255, 255], [0, 0, 0]]), &BlendConfig::default());
        assert!(matches!(none, Err(Error::AlignmentImpossible(_))));
    }
}
