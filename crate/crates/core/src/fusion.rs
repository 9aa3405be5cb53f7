//! Learnable fusion of bracket latents.
//!
//! Every latent in the bracket is scored by the same depthwise convolution;
//! a softmax across bracket positions turns the scores into per-element
//! weights, and the merged latent is the weighted sum.

use hdrfuse_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{luma, LdrImage, RgbSource};
use crate::nn::Conv;
use crate::stats::{pearson, percentile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub kernel_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { kernel_size: 3 }
    }
}

#[derive(Clone, Debug)]
pub struct Fusion<T: Scalar> {
    pub params: ParamStore<T>,
    conv: Conv,
    pub channels: usize,
}

impl<T: Scalar> Fusion<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        if cfg.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("fusion kernel size must be odd, got {}", cfg.kernel_size)));
        }
        let mut params = ParamStore::new();
        let conv = Conv::depthwise(&mut params, "fusion", channels, cfg.kernel_size, rng);
        Ok(Self { params, conv, channels })
    }

    pub fn kernel(&self) -> &Tensor<T> {
        self.params.get(self.conv.weight())
    }

    pub fn set_kernel(&mut self, w: Tensor<T>, b: Tensor<T>) {
        self.params.set(self.conv.weight(), w);
        self.params.set(self.conv.bias().expect("fusion conv has a bias"), b);
    }

    /// Merged latent and one weight map per bracket position.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, latents: &[Var<'g, T>]) -> (Var<'g, T>, Vec<Var<'g, T>>) {
        let g = latents[0].graph();
        let logits: Vec<_> = latents.iter().map(|&c| self.conv.forward(p, c)).collect();
        // Shift by the elementwise maximum; softmax is invariant to it.
        let vals: Vec<_> = logits.iter().map(|l| l.value()).collect();
        let mut m = vals[0].as_ref().clone();
        for v in &vals[1..] {
            m = m.zip_map(v, T::max);
        }
        let m = g.constant(m);
        let exps: Vec<_> = logits.iter().map(|&l| l.sub(m).exp()).collect();
        let denom = exps[1..].iter().fold(exps[0], |acc, &e| acc.add(e));
        let weights: Vec<_> = exps.iter().map(|&e| e.div(denom)).collect();
        let merged = weights
            .iter()
            .zip(latents)
            .map(|(&w, &c)| w.mul(c))
            .reduce(|a, b| a.add(b))
            .expect("non-empty bracket");
        (merged, weights)
    }

    /// Fuse concrete latents, all shaped `[n, c, h, w]`.
    pub fn fuse(&self, latents: &[Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        check_bracket(latents, self.channels)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let vars: Vec<_> = latents.iter().map(|t| g.constant(t.clone())).collect();
        let (merged, weights) = self.forward(&p, &vars);
        let out = (merged.value().as_ref().clone(), weights.iter().map(|w| w.value().as_ref().clone()).collect());
        Ok(out)
    }
}

fn check_bracket<T: Scalar>(latents: &[Tensor<T>], channels: usize) -> Result<()> {
    if latents.len() < 2 {
        return Err(Error::InvalidArgument(format!("fusion needs at least 2 latents, got {}", latents.len())));
    }
    let shape = latents[0].shape();
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Shape(format!("latent shape {shape:?} does not have {channels} channels")));
    }
    if let Some(bad) = latents.iter().find(|l| l.shape() != shape) {
        return Err(Error::Shape(format!("bracket latents differ in shape: {shape:?} vs {:?}", bad.shape())));
    }
    Ok(())
}

/// Per-element mean over bracket entries marked valid; the middle entry
/// where none is valid.
pub fn oracle_fuse(latents: &[Tensor<f32>], valid: &[Vec<bool>]) -> Result<Tensor<f32>> {
    if latents.is_empty() || latents.len() != valid.len() {
        return Err(Error::InvalidArgument("one validity mask per latent required".into()));
    }
    let n = latents[0].numel();
    if latents.iter().any(|l| l.shape() != latents[0].shape()) || valid.iter().any(|m| m.len() != n) {
        return Err(Error::Shape("latents and masks must share one shape".into()));
    }
    let mid = latents.len() / 2;
    let data = (0..n)
        .map(|i| {
            let (sum, count) = latents
                .iter()
                .zip(valid)
                .filter(|(_, m)| m[i])
                .fold((0.0f64, 0usize), |(s, c), (l, _)| (s + f64::from(l.data()[i]), c + 1));
            if count == 0 {
                latents[mid].data()[i]
            } else {
                (sum / count as f64) as f32
            }
        })
        .collect();
    Ok(Tensor::from_vec(latents[0].shape().to_vec(), data))
}

/// Pearson correlation between where the image is saturated and where the
/// latent is extreme, both on the latent grid.
///
/// A latent cell counts as saturated when any pixel of its image block has
/// luminance at or above `threshold` (in `[0, 1]`). A latent position counts
/// as extreme when its channel-summed absolute value lies at or above the
/// same fraction of latent positions the saturation mask covers.
pub fn latent_clip_correlation(img: &LdrImage, latent: &Tensor<f32>, threshold: f64) -> Result<f64> {
    let s = latent.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Shape(format!("expected a single latent [1, c, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    if !img.width().is_multiple_of(w) || !img.height().is_multiple_of(h) || img.width() / w != img.height() / h {
        return Err(Error::Shape(format!("{}x{} image does not tile a {w}x{h} latent", img.width(), img.height())));
    }
    let f = img.width() / w;
    let mut sat = vec![0.0; h * w];
    for y in 0..img.height() {
        for x in 0..img.width() {
            if luma(img.rgb(y * img.width() + x)) >= threshold {
                sat[(y / f) * w + x / f] = 1.0;
            }
        }
    }
    let mag: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| f64::from(latent.data()[ch * h * w + i]).abs()).sum())
        .collect();
    let frac = sat.iter().sum::<f64>() / sat.len() as f64;
    let cut = percentile(&mag, 100.0 * (1.0 - frac)).expect("non-empty latent");
    let extreme: Vec<f64> = mag.iter().map(|&m| if m >= cut { 1.0 } else { 0.0 }).collect();
    mask_correlation(&sat, &extreme)
}

/// Pearson correlation of two masks; an error when either is constant.
pub fn mask_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(a, b).ok_or_else(|| Error::UndefinedCorrelation("a mask is constant".into()))
}
