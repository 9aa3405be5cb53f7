//! Procedural HDR scenes with a prescribed dynamic range.
//!
//! A scene is a textured mid-grey backdrop, one deep-shadow region about
//! two stops below it and a few Gaussian light sources six to ten stops
//! above it. A final luminance power curve sets the 0.1 to 99.9 percentile
//! range to the requested number of stops exactly, and the median luminance
//! is normalized to [`MIDDLE_GREY`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{luminance, HdrImage};
use crate::stats::{median, percentile_sorted};

pub const MIDDLE_GREY: f64 = 0.18;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub size: usize,
    /// Inclusive range the per-scene dynamic range is drawn from, in stops.
    pub dr_stops: [f64; 2],
    pub max_lights: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { size: 64, dr_stops: [8.0, 14.0], max_lights: 3 }
    }
}

/// Dynamic range in stops between the 0.1 and 99.9 luminance percentiles.
pub fn scene_dr(img: &HdrImage) -> f64 {
    let (lo, hi) = lum_bounds(img);
    (hi / lo).log2()
}

fn lum_bounds(img: &HdrImage) -> (f64, f64) {
    let mut l = luminance(img).data;
    l.sort_by(f64::total_cmp);
    (percentile_sorted(&l, 0.1).unwrap(), percentile_sorted(&l, 99.9).unwrap())
}

pub fn generate_scene<R: Rng + ?Sized>(size: usize, target_dr: f64, max_lights: usize, rng: &mut R) -> Result<HdrImage> {
    if size < 8 || !(target_dr > 1.0) {
        return Err(Error::InvalidArgument(format!("scene size {size} / range {target_dr} too small")));
    }
    let s = size as f64;
    let tint = |rng: &mut R, spread: f64| -> [f64; 3] {
        [1.0 + rng.random_range(-spread..spread), 1.0, 1.0 + rng.random_range(-spread..spread)]
    };
    let base_tint = tint(rng, 0.25);
    let (gx, gy) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
    let (fx, fy, phase) = (rng.random_range(0.05..0.35), rng.random_range(0.05..0.35), rng.random_range(0.0..6.3));
    let tex_amp = rng.random_range(0.2..0.6);

    let sw = rng.random_range(0.25..0.5) * s;
    let sh = rng.random_range(0.25..0.5) * s;
    let sx = rng.random_range(0.0..s - sw);
    let sy = rng.random_range(0.0..s - sh);
    let shadow_tint = tint(rng, 0.15);

    let n_lights = rng.random_range(1..=max_lights.max(1));
    let lights: Vec<_> = (0..n_lights)
        .map(|_| {
            let cx = rng.random_range(0.15..0.85) * s;
            let cy = rng.random_range(0.15..0.85) * s;
            let sigma = rng.random_range(2.0..(s / 12.0).max(2.5));
            let stops = rng.random_range(6.0..10.0);
            (cx, cy, sigma, stops, tint(rng, 0.2))
        })
        .collect();

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let grad = (gx * (xf / s - 0.5) + gy * (yf / s - 0.5)).exp2();
            let tex = (tex_amp * ((fx * xf + phase).sin() * (fy * yf).cos())).exp2();
            let mut rgb = base_tint.map(|t| t * grad * tex);
            if xf >= sx && xf < sx + sw && yf >= sy && yf < sy + sh {
                let inner = 0.25 * (1.0 + 0.2 * (0.7 * xf + 0.3 * yf).sin());
                for c in 0..3 {
                    rgb[c] = inner * shadow_tint[c];
                }
            }
            for &(cx, cy, sigma, stops, lt) in &lights {
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                let a = f64::exp2(stops) * (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    rgb[c] += a * lt[c];
                }
            }
            data.extend(rgb.map(|v| v as f32));
        }
    }
    let mut img = HdrImage::new(size, size, data)?;
    for _ in 0..6 {
        img = set_dynamic_range(&img, target_dr)?;
        if (scene_dr(&img) - target_dr).abs() < 1e-4 {
            break;
        }
    }
    Ok(img)
}

/// Apply a luminance power curve (hue preserved) so the scene spans
/// `target` stops, then normalize the median luminance to middle grey.
pub fn set_dynamic_range(img: &HdrImage, target: f64) -> Result<HdrImage> {
    let lum = luminance(img).data;
    if lum.iter().any(|&l| l <= 0.0) {
        return Err(Error::DegenerateInput("scene has black pixels".into()));
    }
    let dr = scene_dr(img);
    if !(dr > 0.0) {
        return Err(Error::DegenerateRange("scene has no luminance range".into()));
    }
    let (lo, _) = lum_bounds(img);
    let k = target / dr;
    let powered: Vec<f32> = img
        .data()
        .chunks_exact(3)
        .zip(&lum)
        .flat_map(|(px, &l)| {
            let f = (l / lo).powf(k) / (l / lo);
            px.iter().map(move |&v| (f64::from(v) / lo * f) as f32).collect::<Vec<_>>()
        })
        .collect();
    let out = HdrImage::new(img.width(), img.height(), powered)?;
    let med = median(&luminance(&out).data).unwrap();
    let g = MIDDLE_GREY / med;
    out.map(|v| (f64::from(v) * g) as f32)
}

/// `n` scenes; scene `i` is drawn from its own stream seeded `seed + i`.
pub fn generate_scene_set(n: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<HdrImage>> {
    if cfg.dr_stops[0] > cfg.dr_stops[1] {
        return Err(Error::Config(format!("scene range {:?} is inverted", cfg.dr_stops)));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let dr = if cfg.dr_stops[0] == cfg.dr_stops[1] {
                cfg.dr_stops[0]
            } else {
                rng.random_range(cfg.dr_stops[0]..=cfg.dr_stops[1])
            };
            generate_scene(cfg.size, dr, cfg.max_lights, &mut rng)
        })
        .collect()
}
