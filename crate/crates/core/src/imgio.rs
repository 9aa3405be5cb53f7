//! Raster types and bit-exact PFM / binary PPM I/O.
//!
//! In memory every image is top-down, row-major, interleaved RGB. PFM stores
//! rows bottom-up; the reader and writer flip.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Rec. 709 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Linear-radiance RGB raster. Values are finite and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// 8-bit display-referred RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LdrImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Per-pixel luminance.
#[derive(Clone, Debug, PartialEq)]
pub struct LuminanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height * 3 != len {
        return Err(Error::Shape(format!("{width}x{height} RGB image needs {} values, got {len}", width * height * 3)));
    }
    Ok(())
}

impl HdrImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation { index: i / 3, msg: format!("channel {} is {v}", i % 3) });
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Apply `f` to every channel value, revalidating the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

impl LdrImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values as reals in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.data.iter().map(|&v| f32::from(v) / 255.0).collect()
    }

    /// Linearized with a fixed display gamma.
    pub fn linearize(&self, gamma: f64) -> HdrImage {
        let data = self.data.iter().map(|&v| (f64::from(v) / 255.0).powf(gamma) as f32).collect();
        HdrImage { width: self.width, height: self.height, data }
    }
}

/// Anything with RGB pixels readable as reals.
pub trait RgbSource {
    fn dims(&self) -> (usize, usize);
    fn rgb(&self, pixel: usize) -> [f64; 3];
}

impl RgbSource for HdrImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn rgb(&self, p: usize) -> [f64; 3] {
        let i = p * 3;
        [f64::from(self.data[i]), f64::from(self.data[i + 1]), f64::from(self.data[i + 2])]
    }
}

/// LDR code values read linearly as `v / 255`.
impl RgbSource for LdrImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn rgb(&self, p: usize) -> [f64; 3] {
        let i = p * 3;
        [
            f64::from(self.data[i]) / 255.0,
            f64::from(self.data[i + 1]) / 255.0,
            f64::from(self.data[i + 2]) / 255.0,
        ]
    }
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

pub fn luminance(img: &impl RgbSource) -> LuminanceMap {
    let (width, height) = img.dims();
    let data = (0..width * height).map(|p| luma(img.rgb(p))).collect();
    LuminanceMap { width, height, data }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn token(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok()).flatten()
    }

    /// Consume the single whitespace byte that ends the header.
    fn end_of_header(&mut self) -> Option<usize> {
        let b = *self.bytes.get(self.pos)?;
        b.is_ascii_whitespace().then(|| {
            self.pos += 1;
            self.pos
        })
    }
}

fn parse_dim(tok: Option<&str>, path: &Path, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(path, format!("bad {what}")))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hdr = HeaderReader { bytes: &bytes, pos: 0 };
    match hdr.token() {
        Some("PF") => {}
        Some("Pf") => return Err(Error::Unsupported("grayscale PFM (Pf)".into())),
        _ => return Err(Error::format(path, "missing PF magic")),
    }
    let width = parse_dim(hdr.token(), path, "width")?;
    let height = parse_dim(hdr.token(), path, "height")?;
    let scale: f32 = hdr
        .token()
        .and_then(|t| t.parse().ok())
        .filter(|s: &f32| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, "bad scale"))?;
    let start = hdr.end_of_header().ok_or_else(|| Error::format(path, "truncated header"))?;
    let n = width * height * 3;
    let body = &bytes[start..];
    if body.len() != n * 4 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (row, chunk) in body.chunks_exact(width * 12).enumerate() {
        let dst_row = height - 1 - row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            data[dst_row * width * 3 + i] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    HdrImage::new(width, height, data)
}

/// Canonical little-endian PFM bytes.
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for row in (0..img.height).rev() {
        for v in &img.data[row * img.width * 3..(row + 1) * img.width * 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<LdrImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hdr = HeaderReader { bytes: &bytes, pos: 0 };
    if hdr.token() != Some("P6") {
        return Err(Error::Unsupported(format!("{}: only binary P6 PPM is supported", path.display())));
    }
    let width = parse_dim(hdr.token(), path, "width")?;
    let height = parse_dim(hdr.token(), path, "height")?;
    let maxval: u32 = hdr.token().and_then(|t| t.parse().ok()).ok_or_else(|| Error::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("{}: maxval {maxval} (only 255 supported)", path.display())));
    }
    let start = hdr.end_of_header().ok_or_else(|| Error::format(path, "truncated header"))?;
    let body = &bytes[start..];
    if body.len() != width * height * 3 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", width * height * 3, body.len())));
    }
    LdrImage::new(width, height, body.to_vec())
}

pub fn encode_ppm(img: &LdrImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(img: &LdrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_white_pfm_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.pfm");
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        assert_eq!((img.width(), img.height()), (1, 1));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);
        write_pfm(&img, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.pfm");
        let mut bytes = b"PF\n1 2\n1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        // First stored row is the bottom one.
        assert_eq!(img.pixel(0, 1), [1.0, 2.0, 3.0]);
        assert_eq!(img.pixel(0, 0), [4.0, 5.0, 6.0]);
    }

    #[test]
    fn pfm_rejects_bad_values_with_pixel_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.pfm");
        let mut bytes = b"PF\n2 1\n-1.0\n".to_vec();
        for v in [0.0f32, 0.0, 0.0, 0.0, -1.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        match read_pfm(&p) {
            Err(Error::Validation { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected validation error, got {other:?}"),
        }
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        for v in [0.0f32, f32::NAN, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Validation { index: 0, .. })));
    }

    #[test]
    fn malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        for bytes in [&b"P6\n1 1\n-1.0\n"[..], b"PF\nx 1\n-1.0\n", b"PF\n1 1\n-1.0\n\0\0"] {
            fs::write(&p, bytes).unwrap();
            assert!(matches!(read_pfm(&p), Err(Error::Format { .. })), "{bytes:?}");
        }
    }

    #[test]
    fn ppm_white_pixel_and_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        fs::write(&p, b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(read_ppm(&p).unwrap().data(), &[255, 255, 255]);
        fs::write(&p, b"P6\n1 1\n65535\n\xff\xff\xff\xff\xff\xff").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn luminance_definition() {
        let img = HdrImage::new(2, 1, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = luminance(&img);
        assert!((l.data[0] - 1.0).abs() < 1e-12);
        assert!((l.data[1] - 0.2126).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8).collect();
            let img = LdrImage::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.ppm");
            write_ppm(&img, &p).unwrap();
            prop_assert_eq!(read_ppm(&p).unwrap(), img);
        }

        #[test]
        fn pfm_round_trip_is_bit_exact(w in 1usize..7, h in 1usize..7, vals in proptest::collection::vec(0f32..1e6, 108)) {
            let img = HdrImage::new(w, h, vals[..w * h * 3].to_vec()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.pfm");
            write_pfm(&img, &p).unwrap();
            let back = read_pfm(&p).unwrap();
            prop_assert_eq!(&back, &img);
            let bytes = fs::read(&p).unwrap();
            write_pfm(&back, &p).unwrap();
            prop_assert_eq!(fs::read(&p).unwrap(), bytes);
        }

        #[test]
        fn luminance_is_linear(vals in proptest::collection::vec(0f32..100.0, 12), a in 0f32..8.0) {
            let img = HdrImage::new(2, 2, vals).unwrap();
            let scaled = img.map(|v| v * a).unwrap();
            let (l, ls) = (luminance(&img), luminance(&scaled));
            for (x, y) in l.data.iter().zip(&ls.data) {
                prop_assert!((x * f64::from(a) - y).abs() <= 1e-5 * (1.0 + y.abs()));
            }
        }
    }
}
