//! Run configuration: one JSON file, unknown keys rejected, every field
//! optional with the defaults below.
//!
//! Defaults are sized for a single CPU core. Reference values for a full
//! scale run: the HDR decoder is fine-tuned for 200,000 steps at learning
//! rate 1e-6 and each denoiser is trained for 400,000 steps at 1e-5, all
//! with Adam.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use hdrfuse_core::bracket::{DEFAULT_P_HIGH, DEFAULT_P_LOW};
use hdrfuse_core::diffusion::{DenoiserTrainConfig, Position, SamplerConfig, ScheduleConfig, UnetConfig};
use hdrfuse_core::finetune::DecoderTrainConfig;
use hdrfuse_core::pipeline::{Ablation, BlendConfig};
use hdrfuse_core::scenes::SceneConfig;
use hdrfuse_core::vae::{VaeConfig, VaeTrainConfig};
use hdrfuse_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DATA_ROOT_ENV: &str = "HDRFUSE_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Dataset and output root. Falls back to `$HDRFUSE_DATA_ROOT`, then `data`.
    pub data_root: Option<PathBuf>,
    /// Number of exposures per bracket.
    pub k: usize,
    pub scenes: ScenesSection,
    pub synth: SynthSection,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    /// `gan_weight` is the adversarial weight lambda (0 disables it).
    /// Full scale: 200,000 steps at lr 1e-6.
    pub decoder_train: DecoderTrainConfig,
    pub unet: UnetConfig,
    pub schedule: ScheduleConfig,
    /// Shift denoisers. Full scale: 400,000 steps at lr 1e-5.
    pub denoiser_train: DenoiserTrainConfig,
    /// Unconditional base model.
    pub base_train: DenoiserTrainConfig,
    pub sampler: SamplerConfig,
    pub infer: InferSection,
    pub ablation: AblationSwitches,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            k: 3,
            scenes: ScenesSection::default(),
            synth: SynthSection::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            decoder_train: DecoderTrainConfig::default(),
            unet: UnetConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser_train: DenoiserTrainConfig::default(),
            base_train: DenoiserTrainConfig::default(),
            sampler: SamplerConfig::default(),
            infer: InferSection::default(),
            ablation: AblationSwitches::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenesSection {
    pub train: usize,
    pub test: usize,
    /// Image side, a multiple of 8 (32 for the latent UNet).
    pub size: usize,
    pub train_dr_stops: [f64; 2],
    pub test_dr_stops: [f64; 2],
    pub max_lights: usize,
}

impl Default for ScenesSection {
    fn default() -> Self {
        Self { train: 100, test: 5, size: 64, train_dr_stops: [8.0, 14.0], test_dr_stops: [12.0, 12.0], max_lights: 3 }
    }
}

impl ScenesSection {
    pub fn scene_config(&self, test: bool) -> SceneConfig {
        SceneConfig {
            size: self.size,
            dr_stops: if test { self.test_dr_stops } else { self.train_dr_stops },
            max_lights: self.max_lights,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { p_low: DEFAULT_P_LOW, p_high: DEFAULT_P_HIGH }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Bracket position the input LDR image is placed at.
    pub position: Position,
    pub blend: BlendConfig,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { position: Position::Highest, blend: BlendConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub no_decoder_finetune: bool,
    pub no_denoiser: bool,
    pub blend_off: bool,
}

impl AblationSwitches {
    pub fn ablation(&self) -> Result<Ablation> {
        match (self.no_decoder_finetune, self.no_denoiser) {
            (false, false) => Ok(Ablation::Full),
            (true, false) => Ok(Ablation::WoDecoder),
            (false, true) => Ok(Ablation::WoDenoiser),
            (true, true) => Err(Error::Config("at most one of no_decoder_finetune and no_denoiser may be set".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// cd/m² per relative unit divided by 100 for the PQ encoding.
    pub peak: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { peak: 1.0 }
    }
}

/// Per-stage random streams. Stage `s` of root seed `r` uses
/// `r + (s + 1) * 2^32`, so per-item offsets inside a stage (scene `i` uses
/// `stage_seed + i`) never reach another stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainScenes = 0,
    TestScenes,
    Synth,
    Vae,
    Decoder,
    Highlight,
    Shadow,
    Base,
    Infer,
    Generate,
}

pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    root.wrapping_add((stage as u64 + 1) << 32)
}

impl RunConfig {
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.scenes.size == 0 || !self.scenes.size.is_multiple_of(32) {
            return Err(Error::Config(format!("scene size {} must be a positive multiple of 32", self.scenes.size)));
        }
        self.ablation.ablation()?;
        Ok(())
    }

    pub fn root(&self) -> PathBuf {
        self.data_root
            .clone()
            .or_else(|| env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn scenes_dir(&self, split: &str) -> PathBuf {
        self.root().join("scenes").join(split)
    }

    pub fn dataset_dir(&self, split: &str) -> PathBuf {
        self.root().join("dataset").join(split)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root().join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.root().join("logs").join(format!("{name}_loss.csv"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.root().join("results")
    }
}

/// Apply one `dotted.key=value` override. The value is parsed as JSON and
/// taken as a plain string when that fails.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i == parts.len() - 1 {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(Error::Config("empty override key".into()))
}
