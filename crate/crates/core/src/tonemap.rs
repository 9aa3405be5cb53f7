//! Tone mapping, scanlines and reference metrics for HDR outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bracket::quantize;
use crate::error::{Error, Result};
use crate::imgio::{luma, luminance, HdrImage, LdrImage, RgbSource};
use crate::stats::{percentile, percentile_sorted};
use crate::vae::LOG_EPS;

pub const DISPLAY_GAMMA: f64 = 2.2;
pub const REINHARD_KEY: f64 = 0.18;
/// Percentile of the scaled luminance used as the default white point.
pub const REINHARD_WHITE_PERCENTILE: f64 = 95.0;
pub const DURAND_SIGMA_SPATIAL: f64 = 0.02;
/// Range sigma of the bilateral filter, in log10 luminance.
pub const DURAND_SIGMA_RANGE: f64 = 0.4;
pub const DURAND_BASE_CONTRAST: f64 = 5.0;
/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

const LOG_AVG_DELTA: f64 = 1e-6;
const LUM_FLOOR: f64 = 1e-12;

/// Rescale every pixel so its luminance becomes `target[p]`, keeping the
/// channel ratios; black pixels stay black.
fn with_luminance(img: &HdrImage, lum: &[f64], target: &[f64]) -> Result<HdrImage> {
    let data = img
        .data()
        .chunks_exact(3)
        .zip(lum.iter().zip(target))
        .flat_map(|(px, (&l, &t))| {
            let f = if l > 0.0 { t / l } else { 0.0 };
            px.iter().map(move |&v| (f64::from(v) * f) as f32).collect::<Vec<_>>()
        })
        .collect();
    HdrImage::new(img.width(), img.height(), data)
}

/// Clamp to [0, 1], gamma-encode and quantize.
pub fn display_encode(img: &HdrImage, gamma: f64) -> Result<LdrImage> {
    quantize(&img.map(|v| f64::from(v).clamp(0.0, 1.0).powf(1.0 / gamma) as f32)?)
}

/// Reinhard global operator before display encoding. `l_white` is in
/// key-scaled units; `None` takes the 95th percentile of the scaled
/// luminance.
pub fn reinhard_linear(img: &HdrImage, key: f64, l_white: Option<f64>) -> Result<HdrImage> {
    if !(key > 0.0) || l_white.is_some_and(|w| !(w > 0.0)) {
        return Err(Error::InvalidArgument(format!("reinhard needs positive key and white, got {key}, {l_white:?}")));
    }
    let lum = luminance(img).data;
    let log_avg = (lum.iter().map(|&l| (LOG_AVG_DELTA + l).ln()).sum::<f64>() / lum.len() as f64).exp();
    let scaled: Vec<f64> = lum.iter().map(|&l| key * l / log_avg).collect();
    let white = match l_white {
        Some(w) => w,
        None => percentile(&scaled, REINHARD_WHITE_PERCENTILE).unwrap_or(0.0).max(LOG_AVG_DELTA),
    };
    let display: Vec<f64> = scaled.iter().map(|&ls| ls * (1.0 + ls / (white * white)) / (1.0 + ls)).collect();
    with_luminance(img, &lum, &display)
}

pub fn tonemap_reinhard(img: &HdrImage, key: f64, l_white: Option<f64>) -> Result<LdrImage> {
    display_encode(&reinhard_linear(img, key, l_white)?, DISPLAY_GAMMA)
}

/// Base and detail layers of log10 luminance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub base: Vec<f64>,
    pub detail: Vec<f64>,
}

/// Naive bilateral filter on log10 luminance.
pub fn bilateral_decompose(log_lum: &[f64], width: usize, height: usize, sigma_s: f64, sigma_r: f64) -> Decomposition {
    let radius = (2.0 * sigma_s).ceil() as isize;
    let mut base = vec![0.0; log_lum.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let centre = log_lum[(y as usize) * width + x as usize];
            let (mut acc, mut norm) = (0.0, 0.0);
            for dy in -radius..=radius {
                let yy = y + dy;
                if yy < 0 || yy >= height as isize {
                    continue;
                }
                for dx in -radius..=radius {
                    let xx = x + dx;
                    if xx < 0 || xx >= width as isize {
                        continue;
                    }
                    let v = log_lum[yy as usize * width + xx as usize];
                    let ds = (dx * dx + dy * dy) as f64 / (2.0 * sigma_s * sigma_s);
                    let dr = (v - centre).powi(2) / (2.0 * sigma_r * sigma_r);
                    let wgt = (-ds - dr).exp();
                    acc += wgt * v;
                    norm += wgt;
                }
            }
            base[(y as usize) * width + x as usize] = acc / norm;
        }
    }
    let detail = log_lum.iter().zip(&base).map(|(l, b)| l - b).collect();
    Decomposition { base, detail }
}

/// Durand-style operator before display encoding: the base layer is
/// compressed to `base_contrast` stops with its maximum mapped to 1.
/// A flat base layer is left uncompressed.
pub fn durand_linear(img: &HdrImage, base_contrast: f64) -> Result<HdrImage> {
    if !(base_contrast > 0.0) {
        return Err(Error::InvalidArgument(format!("base contrast must be positive, got {base_contrast}")));
    }
    let lum = luminance(img).data;
    let log_lum: Vec<f64> = lum.iter().map(|&l| l.max(LUM_FLOOR).log10()).collect();
    let sigma_s = (DURAND_SIGMA_SPATIAL * img.width() as f64).max(0.5);
    let d = bilateral_decompose(&log_lum, img.width(), img.height(), sigma_s, DURAND_SIGMA_RANGE);
    let (lo, hi) = d.base.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let (factor, offset) = if range > 1e-12 {
        (base_contrast * 2f64.log10() / range, hi)
    } else {
        (1.0, 0.0)
    };
    let display: Vec<f64> = d
        .base
        .iter()
        .zip(&d.detail)
        .map(|(&b, &det)| 10f64.powf((b - offset) * factor + det))
        .collect();
    with_luminance(img, &lum, &display)
}

pub fn tonemap_durand(img: &HdrImage, base_contrast: f64) -> Result<LdrImage> {
    display_encode(&durand_linear(img, base_contrast)?, DISPLAY_GAMMA)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scanline {
    pub row: usize,
    pub luminance: Vec<f64>,
}

impl Scanline {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,x,luminance\n");
        for (x, l) in self.luminance.iter().enumerate() {
            writeln!(s, "{},{x},{l}", self.row).unwrap();
        }
        s
    }
}

/// Linear luminance along one row; LDR images read as `v / 255`.
pub fn extract_scanline(img: &impl RgbSource, row: usize) -> Result<Scanline> {
    let (w, h) = img.dims();
    if row >= h {
        return Err(Error::InvalidArgument(format!("row {row} outside image of height {h}")));
    }
    let luminance = (0..w).map(|x| luma(img.rgb(row * w + x))).collect();
    Ok(Scanline { row, luminance })
}

/// Line plot of several scanlines on a log2 luminance axis.
pub fn plot_scanlines(lines: &[(&Scanline, [u8; 3])], width: usize, height: usize) -> Result<LdrImage> {
    let mut data = vec![255u8; width * height * 3];
    let logs: Vec<Vec<f64>> = lines.iter().map(|(s, _)| s.luminance.iter().map(|&l| l.max(LOG_EPS).log2()).collect()).collect();
    let (lo, hi) = logs.iter().flatten().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if logs.iter().all(Vec::is_empty) {
        return LdrImage::new(width, height, data);
    }
    let span = (hi - lo).max(1e-9);
    for (log, (_, colour)) in logs.iter().zip(lines) {
        let n = log.len();
        if n == 0 {
            continue;
        }
        let to_xy = |i: usize| {
            let x = if n > 1 { i as f64 * (width - 1) as f64 / (n - 1) as f64 } else { 0.0 };
            let y = (height - 1) as f64 * (1.0 - (log[i] - lo) / span);
            (x, y)
        };
        for i in 0..n.max(2) - 1 {
            let (x0, y0) = to_xy(i);
            let (x1, y1) = to_xy((i + 1).min(n - 1));
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let x = (x0 + t * (x1 - x0)).round() as usize;
                let y = (y0 + t * (y1 - y0)).round() as usize;
                data[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(colour);
            }
        }
    }
    LdrImage::new(width, height, data)
}

const PQ_M1: f64 = 0.1593017578125;
const PQ_M2: f64 = 78.84375;
const PQ_C1: f64 = 0.8359375;
const PQ_C2: f64 = 18.8515625;
const PQ_C3: f64 = 18.6875;
/// Absolute luminance of one image-relative unit at `peak = 1`, in cd/m².
pub const PQ_UNIT_NITS: f64 = 100.0;

/// Perceptual quantizer encoding of relative luminance `l`; `peak` scales
/// one relative unit to `peak * 100` cd/m².
pub fn pq_encode(l: f64, peak: f64) -> f64 {
    let y = (l.max(0.0) * peak * PQ_UNIT_NITS / 10_000.0).min(1.0);
    let ym = y.powf(PQ_M1);
    ((PQ_C1 + PQ_C2 * ym) / (1.0 + PQ_C3 * ym)).powf(PQ_M2)
}

fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

fn rmse_log(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    let s: f64 = idx.iter().map(|&p| (log_floor(a[p]) - log_floor(b[p])).powi(2)).sum();
    (s / idx.len() as f64).sqrt()
}

fn log_floor(l: f64) -> f64 {
    l.max(LOG_EPS).log2()
}

fn pq_psnr_idx(a: &[f64], b: &[f64], idx: &[usize], peak: f64) -> f64 {
    let mse = idx.iter().map(|&p| (pq_encode(a[p], peak) - pq_encode(b[p], peak)).powi(2)).sum::<f64>() / idx.len() as f64;
    psnr(mse)
}

/// PSNR between PQ-encoded luminances, capped at [`PSNR_CAP`].
pub fn pq_psnr(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let (la, lb) = (luminance(a).data, luminance(b).data);
    let idx: Vec<usize> = (0..la.len()).collect();
    Ok(pq_psnr_idx(&la, &lb, &idx, peak))
}

/// RMSE of log2 luminance, with luminance floored at 1/255.
pub fn log_rmse(a: &HdrImage, b: &HdrImage) -> Result<f64> {
    check_same(a, b)?;
    let (la, lb) = (luminance(a).data, luminance(b).data);
    let idx: Vec<usize> = (0..la.len()).collect();
    Ok(rmse_log(&la, &lb, &idx))
}

/// Stops between the 0.1 and 99.9 luminance percentiles, with luminance
/// floored at 1/255 so an 8-bit image read linearly stays below 8 stops.
pub fn dr_stops(img: &impl RgbSource) -> f64 {
    let mut l: Vec<f64> = luminance(img).data.into_iter().map(|v| v.max(LOG_EPS)).collect();
    l.sort_by(f64::total_cmp);
    match (percentile_sorted(&l, 0.1), percentile_sorted(&l, 99.9)) {
        (Some(lo), Some(hi)) => (hi / lo).log2(),
        _ => 0.0,
    }
}

fn check_same(a: &HdrImage, b: &HdrImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub pixels: usize,
    pub log_rmse: f64,
    pub pq_psnr: f64,
}

/// Region entries are `None` when the region holds no pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub log_rmse: f64,
    pub pq_psnr: f64,
    pub dr_stops: f64,
    pub ref_dr_stops: f64,
    pub clipped: Option<RegionMetrics>,
    pub unclipped: Option<RegionMetrics>,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Compare `recon` with `reference`. `clip_mask` (one value per pixel, as
/// produced for blending) splits pixels into clipped (`> 0`) and unclipped
/// (`== 0`) regions.
pub fn metric_report(recon: &HdrImage, reference: &HdrImage, clip_mask: Option<&[f64]>, peak: f64) -> Result<MetricReport> {
    check_same(recon, reference)?;
    let (la, lb) = (luminance(recon).data, luminance(reference).data);
    let all: Vec<usize> = (0..la.len()).collect();
    let region = |idx: Vec<usize>| {
        (!idx.is_empty()).then(|| RegionMetrics {
            pixels: idx.len(),
            log_rmse: rmse_log(&la, &lb, &idx),
            pq_psnr: pq_psnr_idx(&la, &lb, &idx, peak),
        })
    };
    let (clipped, unclipped) = match clip_mask {
        Some(m) => {
            if m.len() != la.len() {
                return Err(Error::Shape(format!("mask has {} entries for {} pixels", m.len(), la.len())));
            }
            (region(all.iter().copied().filter(|&p| m[p] > 0.0).collect()), region(all.iter().copied().filter(|&p| m[p] == 0.0).collect()))
        }
        None => (None, None),
    };
    Ok(MetricReport {
        log_rmse: rmse_log(&la, &lb, &all),
        pq_psnr: pq_psnr_idx(&la, &lb, &all, peak),
        dr_stops: dr_stops(recon),
        ref_dr_stops: dr_stops(reference),
        clipped,
        unclipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hdr(w: usize, h: usize, seed: u64) -> HdrImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HdrImage::from_fn(w, h, |_, _| {
            let base = f64::exp2(rng.random_range(-6.0..6.0));
            [0, 1, 2].map(|_| (base * rng.random_range(0.5..1.5)) as f32)
        })
        .unwrap()
    }

    fn grey(w: usize, h: usize, v: f32) -> HdrImage {
        HdrImage::new(w, h, vec![v; w * h * 3]).unwrap()
    }

    #[test]
    fn reinhard_constant_and_black() {
        let out = tonemap_reinhard(&grey(5, 4, 3.0), REINHARD_KEY, None).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
        let black = tonemap_reinhard(&grey(5, 4, 0.0), REINHARD_KEY, None).unwrap();
        assert!(black.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn reinhard_white_point_maps_to_one() {
        let img = random_hdr(6, 6, 1);
        let lum = luminance(&img).data;
        let log_avg = (lum.iter().map(|&l| (LOG_AVG_DELTA + l).ln()).sum::<f64>() / lum.len() as f64).exp();
        let white = REINHARD_KEY * lum[7] / log_avg;
        let out = reinhard_linear(&img, REINHARD_KEY, Some(white)).unwrap();
        assert!((luma(out.rgb(7)) - 1.0).abs() < 1e-5);
        let inf = reinhard_linear(&img, REINHARD_KEY, Some(1e12)).unwrap();
        let ls = REINHARD_KEY * lum[3] / log_avg;
        assert!((luma(inf.rgb(3)) - ls / (1.0 + ls)).abs() < 1e-6);
    }

    #[test]
    fn durand_constant_image() {
        let img = grey(8, 8, 0.3);
        let lum = luminance(&img).data;
        let d = bilateral_decompose(&lum.iter().map(|l| l.log10()).collect::<Vec<_>>(), 8, 8, 1.0, DURAND_SIGMA_RANGE);
        assert!(d.detail.iter().all(|&v| v.abs() < 1e-12));
        let out = tonemap_durand(&img, DURAND_BASE_CONTRAST).unwrap();
        assert!(out.data().iter().all(|&v| v == out.data()[0]));
    }

    #[test]
    fn durand_base_range_is_bounded() {
        for seed in 0..3 {
            let img = random_hdr(16, 16, seed);
            let out = durand_linear(&img, 4.0).unwrap();
            let lum_in = luminance(&img).data;
            let log_in: Vec<f64> = lum_in.iter().map(|l| l.log10()).collect();
            let d = bilateral_decompose(&log_in, 16, 16, 0.5, DURAND_SIGMA_RANGE);
            let lum_out = luminance(&out).data;
            let base_out: Vec<f64> = lum_out.iter().zip(&d.detail).map(|(l, det)| (l.log10() - det) / 2f64.log10()).collect();
            let stops = percentile(&base_out, 99.9).unwrap() - percentile(&base_out, 0.1).unwrap();
            assert!(stops <= 4.0 + 1e-6, "{stops}");
        }
    }

    #[test]
    fn pq_constants() {
        assert!((pq_encode(0.0, 1.0) - 7.29e-7).abs() < 1e-8, "{}", pq_encode(0.0, 1.0));
        assert!((pq_encode(100.0, 1.0) - 1.0).abs() < 1e-12);
        assert!(pq_encode(1.0, 1.0) < pq_encode(1.0001, 1.0));
    }

    #[test]
    fn metric_examples() {
        let img = random_hdr(8, 8, 4);
        let r = metric_report(&img, &img, None, 1.0).unwrap();
        assert_eq!(r.log_rmse, 0.0);
        assert_eq!(r.pq_psnr, PSNR_CAP);
        let bright = img.map(|v| v.max(0.01)).unwrap();
        let doubled = bright.map(|v| 2.0 * v).unwrap();
        assert!((log_rmse(&doubled, &bright).unwrap() - 1.0).abs() < 1e-12);
        assert!(metric_report(&img, &grey(4, 4, 1.0), None, 1.0).is_err());
    }

    #[test]
    fn metric_report_matches_per_pixel_oracle() {
        let (a, b) = (random_hdr(7, 5, 8), random_hdr(7, 5, 9));
        let mask: Vec<f64> = (0..35).map(|p| if p % 3 == 0 { 0.5 } else { 0.0 }).collect();
        let r = metric_report(&a, &b, Some(&mask), 1.0).unwrap();
        let lum = |img: &HdrImage, p: usize| {
            let px = img.pixel(p % 7, p / 7);
            0.2126 * f64::from(px[0]) + 0.7152 * f64::from(px[1]) + 0.0722 * f64::from(px[2])
        };
        let (mut sq, mut sq_c, mut n_c) = (0.0, 0.0, 0);
        for p in 0..35 {
            let d = lum(&a, p).max(1.0 / 255.0).log2() - lum(&b, p).max(1.0 / 255.0).log2();
            sq += d * d;
            if p % 3 == 0 {
                sq_c += d * d;
                n_c += 1;
            }
        }
        assert!((r.log_rmse - (sq / 35.0).sqrt()).abs() < 1e-9);
        let c = r.clipped.unwrap();
        assert_eq!(c.pixels, n_c);
        assert!((c.log_rmse - (sq_c / n_c as f64).sqrt()).abs() < 1e-9);
        assert_eq!(r.unclipped.unwrap().pixels, 35 - n_c);
        assert!(r.clipped.is_some() && metric_report(&a, &b, Some(&[0.0; 35]), 1.0).unwrap().clipped.is_none());
    }

    #[test]
    fn scanline_rows() {
        let img = random_hdr(9, 4, 2);
        let s = extract_scanline(&img, 2).unwrap();
        assert_eq!(s.luminance.len(), 9);
        assert_eq!(s.to_csv().lines().count(), 10);
        assert!(extract_scanline(&img, 4).is_err());
        let c = extract_scanline(&grey(5, 2, 0.5), 1).unwrap();
        assert!(c.luminance.iter().all(|&v| v == c.luminance[0]));
        let plot = plot_scanlines(&[(&s, [255, 0, 0])], 40, 20).unwrap();
        assert!(plot.data().chunks(3).any(|p| p == [255, 0, 0]));
    }

    fn assert_same_order(a: &HdrImage, b: &HdrImage) {
        let (la, lb) = (luminance(a).data, luminance(b).data);
        for i in 0..la.len() {
            for j in 0..la.len() {
                if la[i] < la[j] - 1e-9 {
                    assert!(lb[i] <= lb[j] + 1e-9, "order of {i},{j} flipped");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tone_mappers_keep_order_under_scaling(seed in 0u64..1000) {
            let img = random_hdr(10, 10, seed);
            let doubled = img.map(|v| 2.0 * v).unwrap();
            assert_same_order(&reinhard_linear(&img, REINHARD_KEY, None).unwrap(), &reinhard_linear(&doubled, REINHARD_KEY, None).unwrap());
            assert_same_order(&durand_linear(&img, DURAND_BASE_CONTRAST).unwrap(), &durand_linear(&doubled, DURAND_BASE_CONTRAST).unwrap());
        }

        #[test]
        fn pq_is_strictly_monotone(a in 0.0f64..90.0, d in 1e-3f64..10.0) {
            prop_assert!(pq_encode(a, 1.0) < pq_encode(a + d, 1.0));
        }

        #[test]
        fn pq_psnr_is_symmetric(s1 in 0u64..100, s2 in 100u64..200) {
            let (a, b) = (random_hdr(6, 6, s1), random_hdr(6, 6, s2));
            prop_assert_eq!(pq_psnr(&a, &b, 1.0).unwrap(), pq_psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn ldr_range_is_below_eight_stops(data in proptest::collection::vec(any::<u8>(), 3..300)) {
            let n = data.len() / 3;
            let img = LdrImage::new(n, 1, data[..n * 3].to_vec()).unwrap();
            prop_assert!(dr_stops(&img) < 8.0);
        }
    }
}
