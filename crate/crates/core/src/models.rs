//! Checkpoint round trips for the trained components.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{load_into, Archive};
use crate::diffusion::{Denoiser, DiffusionSchedule, Direction, ScheduleConfig, UnetConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::vae::{Decoder, HdrModel, Vae, VaeConfig};

pub const KIND_VAE: &str = "vae";
pub const KIND_HDR_DECODER: &str = "hdr-decoder";
pub const KIND_DENOISER: &str = "denoiser";

fn field<T: DeserializeOwned>(v: &Value, key: &str, path: &Path) -> Result<T> {
    let bad = |msg: String| Error::Format { path: path.into(), msg };
    let f = v.get(key).ok_or_else(|| bad(format!("checkpoint manifest lacks `{key}`")))?;
    serde_json::from_value(f.clone()).map_err(|e| bad(format!("`{key}`: {e}")))
}

pub fn save_vae(vae: &Vae, path: &Path, step: u64, seed: u64) -> Result<()> {
    Archive::new(KIND_VAE, step, seed, json!({ "vae": vae.config }), json!({ "latent_scale": vae.latent_scale }))
        .with_group("encoder", &vae.encoder.params)
        .with_group("decoder", &vae.decoder.params)
        .save(path)
}

pub fn load_vae(path: &Path) -> Result<Vae> {
    let a = Archive::load(path)?;
    a.expect_kind(KIND_VAE, path)?;
    let config: VaeConfig = field(&a.manifest.config, "vae", path)?;
    let mut vae = Vae::new(config, &mut ChaCha8Rng::seed_from_u64(0));
    load_into(&mut vae.encoder.params, a.group("encoder")?)?;
    load_into(&mut vae.decoder.params, a.group("decoder")?)?;
    vae.latent_scale = field(&a.manifest.meta, "latent_scale", path)?;
    Ok(vae)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct HdrConfig {
    vae: VaeConfig,
    fusion: FusionConfig,
}

pub fn save_hdr_model(m: &HdrModel, vae_config: &VaeConfig, fusion: &FusionConfig, path: &Path, step: u64, seed: u64) -> Result<()> {
    let config = HdrConfig { vae: vae_config.clone(), fusion: fusion.clone() };
    Archive::new(
        KIND_HDR_DECODER,
        step,
        seed,
        serde_json::to_value(config).expect("config serializes"),
        json!({ "latent_scale": m.latent_scale, "gan_weight": m.gan_weight }),
    )
    .with_group("decoder", &m.decoder.params)
    .with_group("fusion", &m.fusion.params)
    .save(path)
}

pub fn load_hdr_model(path: &Path) -> Result<HdrModel> {
    let a = Archive::load(path)?;
    a.expect_kind(KIND_HDR_DECODER, path)?;
    let config: HdrConfig = serde_json::from_value(a.manifest.config.clone())
        .map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut decoder = Decoder::new(&config.vae, &mut rng);
    let mut fusion = Fusion::new(config.vae.latent_channels, &config.fusion, &mut rng)?;
    load_into(&mut decoder.params, a.group("decoder")?)?;
    load_into(&mut fusion.params, a.group("fusion")?)?;
    Ok(HdrModel {
        decoder,
        fusion,
        latent_scale: field(&a.manifest.meta, "latent_scale", path)?,
        gan_weight: field(&a.manifest.meta, "gan_weight", path)?,
    })
}

pub fn save_denoiser(d: &Denoiser, path: &Path, step: u64, seed: u64) -> Result<()> {
    let config = json!({
        "direction": d.direction,
        "unet": d.unet.config,
        "schedule": d.schedule.config,
    });
    Archive::new(KIND_DENOISER, step, seed, config, Value::Null).with_group("unet", &d.unet.params).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    let a = Archive::load(path)?;
    a.expect_kind(KIND_DENOISER, path)?;
    let direction: Direction = field(&a.manifest.config, "direction", path)?;
    let unet: UnetConfig = field(&a.manifest.config, "unet", path)?;
    let schedule: ScheduleConfig = field(&a.manifest.config, "schedule", path)?;
    let mut d = Denoiser::new(direction, &unet, DiffusionSchedule::new(schedule)?, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_into(&mut d.unet.params, a.group("unet")?)?;
    Ok(d)
}
