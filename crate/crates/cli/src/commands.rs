//! Subcommand implementations. Each returns a JSON summary of what it wrote.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use hdrfuse_core::dataset::{list_samples, load_dataset, read_meta, synthesize_dataset, write_sample};
use hdrfuse_core::diffusion::{shift_pairs, train_denoiser, Denoiser, Direction, Position};
use hdrfuse_core::finetune::{cache_samples, evaluate_log_l1, finetune_hdr_decoder, CachedSample};
use hdrfuse_core::imgio::{read_pfm, read_ppm, write_pfm, write_ppm, HdrImage, LdrImage};
use hdrfuse_core::models::{load_denoiser, load_hdr_model, load_vae, save_denoiser, save_hdr_model, save_vae};
use hdrfuse_core::pipeline::{blend_masks, generate_hdr, reconstruct_hdr, write_result, Ablation, InferOptions, Models};
use hdrfuse_core::scenes::generate_scene_set;
use hdrfuse_core::stats::mean_sd;
use hdrfuse_core::tonemap::{extract_scanline, metric_report, plot_scanlines, MetricReport, Scanline};
use hdrfuse_core::train::LossLog;
use hdrfuse_core::vae::{pretrain_vae, Vae};
use hdrfuse_core::{Error, Result};
use log::info;
use serde_json::{json, Value};

use crate::config::{stage_seed, RunConfig, Stage};

pub const VAE_CKPT: &str = "vae";
pub const HDR_CKPT: &str = "hdr_decoder";
pub const BASE_CKPT: &str = "denoiser_base";

pub fn denoiser_ckpt(direction: Direction) -> String {
    match direction {
        Direction::Unconditional => BASE_CKPT.into(),
        d => format!("denoiser_{}", d.name()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("json serializes") + "\n"))
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().or(path.file_name()).map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn require(path: PathBuf, what: &str, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingCheckpoint(format!("{} ({what}) not found; run `hdrfuse {command}` first", path.display())))
    }
}

fn load_vae_for(cfg: &RunConfig) -> Result<Vae> {
    load_vae(&require(cfg.checkpoint(VAE_CKPT), "pretrained autoencoder", "pretrain-vae")?)
}

fn tail_mean(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn loss_summary(log: &LossLog, path: &Path) -> Value {
    json!({
        "steps": log.len(),
        "final_tracked_loss": tail_mean(&log.tracked, 50),
        "loss_csv": path.display().to_string(),
    })
}

pub fn cmd_gen_scenes(cfg: &RunConfig) -> Result<Value> {
    let mut written = Vec::new();
    for (split, n, stage) in [("train", cfg.scenes.train, Stage::TrainScenes), ("test", cfg.scenes.test, Stage::TestScenes)] {
        let dir = cfg.scenes_dir(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for old in files_with_ext(&dir, "pfm")? {
            if stem(&old).starts_with("scene_") {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        let scenes = generate_scene_set(n, &cfg.scenes.scene_config(split == "test"), stage_seed(cfg.seed, stage))?;
        for (i, img) in scenes.iter().enumerate() {
            write_pfm(img, dir.join(format!("scene_{i:04}.pfm")))?;
        }
        written.push(json!({ "split": split, "dir": dir.display().to_string(), "count": scenes.len() }));
    }
    Ok(json!({ "scenes": written }))
}

fn synth_folder(cfg: &RunConfig, input: &Path, output: &Path, seed: u64) -> Result<usize> {
    let files = files_with_ext(input, "pfm")?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no .pfm files in {}", input.display())));
    }
    let inputs = files.iter().map(|f| Ok((stem(f), read_pfm(f)?))).collect::<Result<Vec<_>>>()?;
    let samples = synthesize_dataset(&inputs, cfg.k, cfg.synth.p_low, cfg.synth.p_high, seed)?;
    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for old in list_samples(output)? {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    for ((name, sample, seed), file) in samples.iter().zip(&files) {
        write_sample(&output.join(name), sample, *seed, &file.display().to_string())?;
    }
    Ok(samples.len())
}

/// Synthesize bracket samples from one folder of PFM files, or from both
/// generated scene splits when `input` is `None`.
pub fn cmd_synth(cfg: &RunConfig, input: Option<&Path>, output: Option<&Path>) -> Result<Value> {
    let base = stage_seed(cfg.seed, Stage::Synth);
    let jobs: Vec<(PathBuf, PathBuf, u64)> = match input {
        Some(dir) => {
            let out = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_dir(&stem(dir)));
            vec![(dir.to_path_buf(), out, base)]
        }
        None => vec![
            (cfg.scenes_dir("train"), cfg.dataset_dir("train"), base),
            (cfg.scenes_dir("test"), cfg.dataset_dir("test"), base.wrapping_add(1 << 31)),
        ],
    };
    let mut written = Vec::new();
    for (i, o, seed) in jobs {
        let n = synth_folder(cfg, &i, &o, seed)?;
        written.push(json!({ "input": i.display().to_string(), "output": o.display().to_string(), "samples": n, "k": cfg.k }));
    }
    Ok(json!({ "datasets": written }))
}

pub fn cmd_pretrain_vae(cfg: &RunConfig) -> Result<Value> {
    let samples = load_dataset(&cfg.dataset_dir("train"))?;
    let images: Vec<LdrImage> = samples.into_iter().flat_map(|s| s.ldr_images).collect();
    let seed = stage_seed(cfg.seed, Stage::Vae);
    let (vae, log) = pretrain_vae(&images, cfg.vae.clone(), &cfg.vae_train, seed)?;
    let path = cfg.checkpoint(VAE_CKPT);
    save_vae(&vae, &path, log.len() as u64, seed)?;
    let csv = cfg.log_path(VAE_CKPT);
    log.write_csv(&csv)?;
    Ok(json!({ "checkpoint": path.display().to_string(), "latent_scale": vae.latent_scale, "training": loss_summary(&log, &csv) }))
}

fn cached_training_set(cfg: &RunConfig, vae: &Vae) -> Result<Vec<CachedSample>> {
    let samples = load_dataset(&cfg.dataset_dir("train"))?;
    cache_samples(vae, &samples)
}

pub fn cmd_finetune_decoder(cfg: &RunConfig) -> Result<Value> {
    let vae = load_vae_for(cfg)?;
    let cache = cached_training_set(cfg, &vae)?;
    let seed = stage_seed(cfg.seed, Stage::Decoder);
    let (model, log) = finetune_hdr_decoder(&vae, &cache, &cfg.decoder_train, seed)?;
    let path = cfg.checkpoint(HDR_CKPT);
    save_hdr_model(&model, &vae.config, &cfg.decoder_train.fusion, &path, log.len() as u64, seed)?;
    let csv = cfg.log_path(HDR_CKPT);
    log.write_csv(&csv)?;
    Ok(json!({
        "checkpoint": path.display().to_string(),
        "train_log_l1": evaluate_log_l1(&model, &cache)?,
        "training": loss_summary(&log, &csv),
    }))
}

/// Train a shift denoiser, or the unconditional base model on the
/// brightest latent of every bracket.
pub fn cmd_train_denoiser(cfg: &RunConfig, direction: Direction) -> Result<Value> {
    let vae = load_vae_for(cfg)?;
    let cache = cached_training_set(cfg, &vae)?;
    let (pairs, tc, stage) = match direction {
        Direction::Unconditional => {
            let tops = cache.iter().map(|c| {
                let top = c.latents.last().expect("brackets are non-empty").clone();
                (top.clone(), top)
            });
            (tops.collect(), &cfg.base_train, Stage::Base)
        }
        d => {
            let brackets: Vec<_> = cache.into_iter().map(|c| c.latents).collect();
            let stage = if d == Direction::Highlight { Stage::Highlight } else { Stage::Shadow };
            (shift_pairs(&brackets, d)?, &cfg.denoiser_train, stage)
        }
    };
    let seed = stage_seed(cfg.seed, stage);
    let (model, log) = train_denoiser(direction, &pairs, &cfg.unet, &cfg.schedule, tc, seed)?;
    let name = denoiser_ckpt(direction);
    let path = cfg.checkpoint(&name);
    save_denoiser(&model, &path, log.len() as u64, seed)?;
    let csv = cfg.log_path(&name);
    log.write_csv(&csv)?;
    Ok(json!({
        "checkpoint": path.display().to_string(),
        "direction": direction.name(),
        "pairs": pairs.len(),
        "training": loss_summary(&log, &csv),
    }))
}

fn load_optional_denoiser(cfg: &RunConfig, direction: Direction, needed: bool) -> Result<Option<Denoiser>> {
    if !needed {
        return Ok(None);
    }
    let cmd = match direction {
        Direction::Unconditional => "train-base".to_string(),
        d => format!("train-denoiser --direction {}", d.name()),
    };
    let what = format!("{} denoiser", direction.name());
    Ok(Some(load_denoiser(&require(cfg.checkpoint(&denoiser_ckpt(direction)), &what, &cmd)?)?))
}

pub fn variant_name(ablation: Ablation, blend: bool) -> String {
    let base = match ablation {
        Ablation::Full => "full",
        Ablation::WoDecoder => "wo-decoder",
        Ablation::WoDenoiser => "wo-denoiser",
    };
    if blend || ablation == Ablation::WoDecoder {
        base.into()
    } else {
        format!("{base}-noblend")
    }
}

/// Overrides of the configured inference settings from the command line.
#[derive(Clone, Debug, Default)]
pub struct InferArgs {
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub ablation: Option<Ablation>,
    pub position: Option<Position>,
    pub no_blend: bool,
}

/// Input image, output name and the sample directory it came from.
fn resolve_input(path: &Path, position: Position) -> Result<(LdrImage, String, Option<PathBuf>)> {
    if path.is_dir() {
        let meta = read_meta(path)?;
        let idx = position.index(meta.exposures.len());
        let img = read_ppm(path.join(format!("exp_{idx}.ppm")))?;
        Ok((img, stem(path), Some(path.to_path_buf())))
    } else {
        Ok((read_ppm(path)?, stem(path), None))
    }
}

fn name_seed(root: u64, name: &str) -> u64 {
    let mut h = DefaultHasher::new();
    name.hash(&mut h);
    root ^ h.finish()
}

pub fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<Value> {
    let ablation = match args.ablation {
        Some(a) => a,
        None => cfg.ablation.ablation()?,
    };
    let position = args.position.unwrap_or(cfg.infer.position);
    let blend = !(args.no_blend || cfg.ablation.blend_off);
    let idx = position.index(cfg.k);
    let shifts = ablation != Ablation::WoDenoiser;
    let models = Models {
        vae: load_vae_for(cfg)?,
        hdr: load_hdr_model(&require(cfg.checkpoint(HDR_CKPT), "fine-tuned HDR decoder", "finetune-decoder")?)?,
        highlight: load_optional_denoiser(cfg, Direction::Highlight, shifts && idx > 0)?,
        shadow: load_optional_denoiser(cfg, Direction::Shadow, shifts && idx + 1 < cfg.k)?,
        base: None,
    };
    let inputs = if args.inputs.is_empty() { list_samples(&cfg.dataset_dir("test"))? } else { args.inputs.clone() };
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs to reconstruct".into()));
    }
    let variant = variant_name(ablation, blend);
    let out_root = args.out.clone().unwrap_or_else(|| cfg.results_dir().join(&variant));
    let stage = stage_seed(cfg.seed, Stage::Infer);
    let mut done = Vec::new();
    for path in &inputs {
        let (img, name, sample) = resolve_input(path, position)?;
        let seed = name_seed(stage, &name);
        let opts = InferOptions {
            position,
            k: cfg.k,
            ablation,
            blend,
            blend_config: cfg.infer.blend.clone(),
            sampler: cfg.sampler,
            seed,
        };
        let result = reconstruct_hdr(&img, &models, &opts)?;
        let dir = out_root.join(&name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let meta = json!({
            "name": name,
            "input": path.display().to_string(),
            "sample": sample.map(|s| s.display().to_string()),
            "position": position,
            "k": cfg.k,
            "ablation": ablation,
            "seed": seed,
        });
        write_result(&dir, &result, &meta)?;
        info!("{name}: max {:.3}, blend scale {:.4}", result.hdr.max_value(), result.scale);
        done.push(json!({ "name": name, "dir": dir.display().to_string(), "blended": result.blended }));
    }
    Ok(json!({ "variant": variant, "out": out_root.display().to_string(), "results": done }))
}

pub fn cmd_generate(cfg: &RunConfig, count: usize, out: Option<&Path>) -> Result<Value> {
    let models = Models {
        vae: load_vae_for(cfg)?,
        hdr: load_hdr_model(&require(cfg.checkpoint(HDR_CKPT), "fine-tuned HDR decoder", "finetune-decoder")?)?,
        highlight: load_optional_denoiser(cfg, Direction::Highlight, true)?,
        shadow: None,
        base: load_optional_denoiser(cfg, Direction::Unconditional, true)?,
    };
    let out_root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.results_dir().join("generated"));
    let hw = cfg.scenes.size / hdrfuse_core::vae::DOWNSAMPLE;
    let base = stage_seed(cfg.seed, Stage::Generate);
    let mut done = Vec::new();
    for i in 0..count {
        let seed = base.wrapping_add(i as u64);
        let result = generate_hdr(seed, &models, (hw, hw), cfg.k, &cfg.sampler)?;
        let dir = out_root.join(format!("gen_{i:04}"));
        write_result(&dir, &result, &json!({ "seed": seed, "k": cfg.k }))?;
        done.push(dir.display().to_string());
    }
    Ok(json!({ "generated": done }))
}

/// Reference at the input's exposure and the clip mask of the input.
fn reference_for(sample_dir: &Path, position: Position, cfg: &RunConfig) -> Result<(HdrImage, Vec<f64>)> {
    let meta = read_meta(sample_dir)?;
    let idx = position.index(meta.exposures.len());
    let f = f64::exp2(meta.exposures[idx]);
    let hdr = read_pfm(sample_dir.join("hdr.pfm"))?.map(|v| (f64::from(v) * f) as f32)?;
    let ldr = read_ppm(sample_dir.join(format!("exp_{idx}.ppm")))?;
    let (_, _, m) = blend_masks(&ldr, &cfg.infer.blend)?;
    Ok((hdr, m))
}

fn summarize(reports: &[MetricReport], f: impl Fn(&MetricReport) -> Option<f64>) -> Value {
    let vals: Vec<f64> = reports.iter().filter_map(f).collect();
    if vals.is_empty() {
        return Value::Null;
    }
    let (m, sd) = mean_sd(&vals);
    json!({ "mean": m, "sd": if sd.is_finite() { sd } else { 0.0 }, "n": vals.len() })
}

/// Score every result under `recon` against the dataset samples in
/// `reference` (matched by name).
pub fn cmd_eval(cfg: &RunConfig, recon: &Path, reference: Option<&Path>) -> Result<Value> {
    let ref_root = reference.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_dir("test"));
    let mut dirs: Vec<PathBuf> = fs::read_dir(recon)
        .map_err(|e| Error::io(recon, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("result.pfm").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!("no results under {}", recon.display())));
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for dir in &dirs {
        let name = stem(dir);
        let meta_path = dir.join("meta.json");
        let meta: Value = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)
            .map_err(|source| Error::Json { path: meta_path.clone(), source })?;
        let position: Position = serde_json::from_value(meta.get("position").cloned().unwrap_or(json!("highest")))
            .map_err(|source| Error::Json { path: meta_path.clone(), source })?;
        let (reference, mask) = reference_for(&ref_root.join(&name), position, cfg)?;
        let report = metric_report(&read_pfm(dir.join("result.pfm"))?, &reference, Some(&mask), cfg.eval.peak)?;
        report.write_json(&dir.join("report.json"))?;
        rows.push(json!({ "name": name, "report": report }));
        reports.push(report);
    }
    let summary = json!({
        "recon": recon.display().to_string(),
        "count": reports.len(),
        "log_rmse": summarize(&reports, |r| Some(r.log_rmse)),
        "pq_psnr": summarize(&reports, |r| Some(r.pq_psnr)),
        "dr_stops": summarize(&reports, |r| Some(r.dr_stops)),
        "ref_dr_stops": summarize(&reports, |r| Some(r.ref_dr_stops)),
        "clipped_log_rmse": summarize(&reports, |r| r.clipped.map(|c| c.log_rmse)),
        "unclipped_log_rmse": summarize(&reports, |r| r.unclipped.map(|c| c.log_rmse)),
        "clipped_pq_psnr": summarize(&reports, |r| r.clipped.map(|c| c.pq_psnr)),
        "samples": rows,
    });
    write_json(&recon.join("eval.json"), &summary)?;
    Ok(summary)
}

/// `mean ± sd` table of an eval summary.
pub fn format_eval_table(summary: &Value) -> String {
    let mut out = String::from("metric               mean ± sd\n");
    for key in ["log_rmse", "clipped_log_rmse", "unclipped_log_rmse", "pq_psnr", "clipped_pq_psnr", "dr_stops", "ref_dr_stops"] {
        let cell = match (&summary[key]["mean"], &summary[key]["sd"]) {
            (Value::Number(m), Value::Number(s)) => {
                format!("{:.3} ± {:.3}", m.as_f64().unwrap_or(f64::NAN), s.as_f64().unwrap_or(f64::NAN))
            }
            _ => "undefined".into(),
        };
        out.push_str(&format!("{key:<20} {cell}\n"));
    }
    out
}

fn scanline_of(path: &Path, row: usize) -> Result<Scanline> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => extract_scanline(&read_pfm(path)?, row),
        Some("ppm") => extract_scanline(&read_ppm(path)?, row),
        _ => Err(Error::Unsupported(format!("{}: expected .pfm or .ppm", path.display()))),
    }
}

const PLOT_COLOURS: [[u8; 3]; 4] = [[200, 30, 30], [30, 30, 200], [30, 150, 30], [150, 100, 0]];

/// Scanline CSV of `image`, plus an optional log-luminance plot overlaying
/// the same row of `compare` images.
pub fn cmd_scanline(image: &Path, row: usize, compare: &[PathBuf], out: Option<&Path>, plot: Option<&Path>) -> Result<Value> {
    let line = scanline_of(image, row)?;
    let csv = out.map(Path::to_path_buf).unwrap_or_else(|| image.with_extension(format!("row{row}.csv")));
    write_text(&csv, &line.to_csv())?;
    if let Some(plot) = plot {
        let others: Vec<Scanline> = compare.iter().map(|p| scanline_of(p, row)).collect::<Result<_>>()?;
        let mut lines = vec![(&line, PLOT_COLOURS[0])];
        lines.extend(others.iter().zip(PLOT_COLOURS.iter().cycle().skip(1)).map(|(l, &c)| (l, c)));
        let img = plot_scanlines(&lines, 512, 256)?;
        if let Some(dir) = plot.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_ppm(&img, plot)?;
    }
    let max = line.luminance.iter().copied().fold(0.0, f64::max);
    Ok(json!({ "csv": csv.display().to_string(), "row": row, "width": line.luminance.len(), "max_luminance": max }))
}
