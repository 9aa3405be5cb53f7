//! On-disk bracket datasets.
//!
//! ```text
//! <root>/<sample_id>/hdr.pfm
//! <root>/<sample_id>/exp_<i>.ppm      i = 0 is the darkest exposure
//! <root>/<sample_id>/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bracket::{synthesize_bracket_with, BracketSample, CrfParams};
use crate::error::{Error, Result};
use crate::imgio::{read_pfm, read_ppm, write_pfm, write_ppm, HdrImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub exposures: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub source: String,
}

pub fn write_sample(dir: &Path, sample: &BracketSample, seed: u64, source: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&sample.hdr_target, dir.join("hdr.pfm"))?;
    for (i, img) in sample.ldr_images.iter().enumerate() {
        write_ppm(img, dir.join(format!("exp_{i}.ppm")))?;
    }
    let meta = SampleMeta {
        exposures: sample.exposures.clone(),
        beta: sample.crf.beta,
        gamma: sample.crf.gamma,
        seed,
        source: source.into(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<SampleMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

pub fn read_sample(dir: &Path) -> Result<BracketSample> {
    let meta = read_meta(dir)?;
    let hdr_target = read_pfm(dir.join("hdr.pfm"))?;
    let ldr_images = (0..meta.exposures.len())
        .map(|i| read_ppm(dir.join(format!("exp_{i}.ppm"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(BracketSample { ldr_images, hdr_target, crf: CrfParams::new(meta.beta, meta.gamma)?, exposures: meta.exposures })
}

/// Sample directories under `root`, sorted by name.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<BracketSample>> {
    let dirs = list_samples(root)?;
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no samples under {}", root.display())));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

/// Synthesize one bracket per HDR image; sample `i` uses seed `base_seed + i`.
pub fn synthesize_dataset(
    inputs: &[(String, HdrImage)],
    k: usize,
    p_low: f64,
    p_high: f64,
    base_seed: u64,
) -> Result<Vec<(String, BracketSample, u64)>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no HDR inputs to synthesize from".into()));
    }
    inputs
        .iter()
        .enumerate()
        .map(|(i, (name, img))| {
            let seed = base_seed.wrapping_add(i as u64);
            let s = synthesize_bracket_with(img, k, p_low, p_high, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok((name.clone(), s, seed))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bracket::{DEFAULT_P_HIGH, DEFAULT_P_LOW};
    use crate::scenes::{generate_scene_set, SceneConfig};

    #[test]
    fn samples_round_trip_through_disk() {
        let scenes = generate_scene_set(2, &SceneConfig { size: 16, ..Default::default() }, 0).unwrap();
        let inputs: Vec<_> = scenes.into_iter().enumerate().map(|(i, s)| (format!("s{i}"), s)).collect();
        let set = synthesize_dataset(&inputs, 5, DEFAULT_P_LOW, DEFAULT_P_HIGH, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, s, seed) in &set {
            write_sample(&dir.path().join(name), s, *seed, name).unwrap();
        }
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].ldr_images, set[1].1.ldr_images);
        assert_eq!(back[1].exposures, set[1].1.exposures);
        assert_eq!(read_meta(&dir.path().join("s1")).unwrap().seed, 11);
        assert_eq!(fs::read_dir(dir.path().join("s0")).unwrap().count(), 7);
    }
}
