//! Simulated exposure brackets from HDR radiance.
//!
//! Each bracket image is `quantize(crf(H * 2^e_i))` with one randomly drawn
//! camera response shared across the bracket. Exposures are in stops.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{luminance, HdrImage, LdrImage};
use crate::stats::percentile_sorted;

/// Sampled CRF parameters are clamped to this range.
pub const CRF_PARAM_RANGE: (f64, f64) = (0.1, 2.0);
pub const BETA_MEAN: f64 = 0.6;
pub const GAMMA_MEAN: f64 = 0.9;
pub const CRF_PARAM_SD: f64 = 0.1;

/// Display value the `p_low` luminance maps to in the brightest exposure.
pub const SHADOW_TARGET: f64 = 0.05;
/// Minimum span between the darkest and brightest exposure.
pub const MIN_RANGE_STOPS: f64 = 0.5;

pub const DEFAULT_P_LOW: f64 = 0.1;
pub const DEFAULT_P_HIGH: f64 = 99.9;

/// Parameters of `v -> (1 + beta) v^gamma / (beta + v^gamma)` on `min(v, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub beta: f64,
    pub gamma: f64,
}

impl CrfParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !(beta > 0.0 && gamma > 0.0 && beta.is_finite() && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("CRF needs beta, gamma > 0 (got {beta}, {gamma})")));
        }
        Ok(Self { beta, gamma })
    }

    pub fn apply(&self, v: f64) -> f64 {
        let m = v.clamp(0.0, 1.0).powf(self.gamma);
        ((1.0 + self.beta) * m / (self.beta + m)).clamp(0.0, 1.0)
    }
}

/// Darkest, middle and brightest exposure, in stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureTriplet {
    pub e_minus: f64,
    pub e_zero: f64,
    pub e_plus: f64,
}

impl ExposureTriplet {
    /// `k` exposures evenly spaced in stops from `e_minus` to `e_plus`.
    /// Endpoints are exact; for odd `k` the centre is exactly `e_zero`.
    pub fn spread(&self, k: usize) -> Result<Vec<f64>> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("bracket needs at least 2 exposures, got {k}")));
        }
        let last = (k - 1) as f64;
        Ok((0..k)
            .map(|i| {
                if i == 0 {
                    self.e_minus
                } else if i == k - 1 {
                    self.e_plus
                } else if 2 * i == k - 1 {
                    self.e_zero
                } else {
                    ((last - i as f64) * self.e_minus + i as f64 * self.e_plus) / last
                }
            })
            .collect())
    }
}

/// One synthesized training pair.
#[derive(Clone, Debug)]
pub struct BracketSample {
    /// Ordered darkest to brightest.
    pub ldr_images: Vec<LdrImage>,
    pub hdr_target: HdrImage,
    pub crf: CrfParams,
    pub exposures: Vec<f64>,
}

/// Exposure bounds from luminance percentiles: the `p_high` luminance maps
/// to 1.0 in the darkest exposure, the `p_low` luminance to
/// [`SHADOW_TARGET`] in the brightest. Percentiles are taken over pixels
/// with positive luminance.
pub fn estimate_exposure_bounds(img: &HdrImage, p_low: f64, p_high: f64) -> Result<ExposureTriplet> {
    if !(0.0..=100.0).contains(&p_low) || !(0.0..=100.0).contains(&p_high) || p_low > p_high {
        return Err(Error::InvalidArgument(format!("bad percentiles {p_low}, {p_high}")));
    }
    let mut lum: Vec<f64> = luminance(img).data.into_iter().filter(|&l| l > 0.0).collect();
    if lum.is_empty() {
        return Err(Error::DegenerateInput("image has no pixel with positive luminance".into()));
    }
    lum.sort_by(f64::total_cmp);
    let hi = percentile_sorted(&lum, p_high).expect("non-empty");
    let lo = percentile_sorted(&lum, p_low).expect("non-empty");
    let e_minus = -hi.log2();
    let e_plus = (SHADOW_TARGET / lo).log2();
    if e_plus - e_minus < MIN_RANGE_STOPS {
        return Err(Error::DegenerateRange(format!(
            "exposure span {:.3} stops is below {MIN_RANGE_STOPS}",
            e_plus - e_minus
        )));
    }
    Ok(ExposureTriplet { e_minus, e_zero: (e_minus + e_plus) / 2.0, e_plus })
}

/// Scale radiance by `2^stops`.
pub fn apply_exposure(img: &HdrImage, stops: f64) -> HdrImage {
    let f = stops.exp2();
    img.map(|v| (f64::from(v) * f) as f32).expect("scaling preserves validity")
}

/// Display-referred image with values in `[0, 1]`.
pub fn apply_crf(img: &HdrImage, crf: &CrfParams) -> HdrImage {
    img.map(|v| crf.apply(f64::from(v)) as f32).expect("CRF output is in [0, 1]")
}

pub fn sample_crf<R: Rng + ?Sized>(rng: &mut R) -> CrfParams {
    let beta = Normal::new(BETA_MEAN, CRF_PARAM_SD).expect("valid normal");
    let gamma = Normal::new(GAMMA_MEAN, CRF_PARAM_SD).expect("valid normal");
    let (lo, hi) = CRF_PARAM_RANGE;
    CrfParams { beta: beta.sample(rng).clamp(lo, hi), gamma: gamma.sample(rng).clamp(lo, hi) }
}

/// `round(v * 255)` with halves rounded up.
pub fn quantize(img: &HdrImage) -> Result<LdrImage> {
    let mut out = Vec::with_capacity(img.data().len());
    for (i, &v) in img.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation { index: i / 3, msg: format!("display value {v} outside [0, 1]") });
        }
        out.push((f64::from(v) * 255.0 + 0.5).floor().min(255.0) as u8);
    }
    LdrImage::new(img.width(), img.height(), out)
}

pub fn synthesize_bracket<R: Rng + ?Sized>(img: &HdrImage, k: usize, rng: &mut R) -> Result<BracketSample> {
    synthesize_bracket_with(img, k, DEFAULT_P_LOW, DEFAULT_P_HIGH, rng)
}

pub fn synthesize_bracket_with<R: Rng + ?Sized>(
    img: &HdrImage,
    k: usize,
    p_low: f64,
    p_high: f64,
    rng: &mut R,
) -> Result<BracketSample> {
    let bounds = estimate_exposure_bounds(img, p_low, p_high)?;
    let exposures = bounds.spread(k)?;
    let crf = sample_crf(rng);
    let ldr_images = exposures
        .iter()
        .map(|&e| quantize(&apply_crf(&apply_exposure(img, e), &crf)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BracketSample { ldr_images, hdr_target: img.clone(), crf, exposures })
}
