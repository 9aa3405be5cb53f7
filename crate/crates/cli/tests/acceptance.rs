//! End-to-end acceptance run at desk scale. Prints one PASS/FAIL line per
//! criterion, then one line per additional measured property of the trained
//! models, and exits non-zero if any line failed.
//!
//! Widths and step counts are reduced so the whole run fits a single CPU
//! core in well under an hour.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hdrfuse_cli::commands::{self, InferArgs};
use hdrfuse_cli::config::RunConfig;
use hdrfuse_core::bracket::CrfParams;
use hdrfuse_core::dataset::{list_samples, load_dataset, read_sample};
use hdrfuse_core::diffusion::{shift_pairs, train_denoiser, validation_loss, DenoiserTrainConfig, Direction};
use hdrfuse_core::finetune::{cache_samples, evaluate_log_l1, finetune_hdr_decoder, DecoderTrainConfig};
use hdrfuse_core::fusion::{Fusion, FusionConfig};
use hdrfuse_core::imgio::{luma, read_pfm, read_ppm, LdrImage, RgbSource};
use hdrfuse_core::models::{load_denoiser, load_hdr_model, load_vae};
use hdrfuse_core::pipeline::{blend_masks, blend_unclipped, Ablation, BlendConfig};
use hdrfuse_core::tonemap::extract_scanline;
use hdrfuse_core::train::{window_means, EarlyStop};
use hdrfuse_core::vae::{Decoder, VaeConfig};
use hdrfuse_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;
const MONOTONE_WINDOW: usize = 500;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Report {
    lines: Vec<(String, Outcome)>,
}

impl Report {
    fn finish(&self, total: Instant) -> ExitCode {
        let failed = self.lines.iter().filter(|(_, o)| !o.pass).count();
        println!(
            "acceptance finished in {:.1} min: {} passed, {failed} failed",
            total.elapsed().as_secs_f64() / 60.0,
            self.lines.len() - failed
        );
        if failed == 0 {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }
    }

    fn record(&mut self, label: &str, elapsed: Duration, o: Outcome) {
        println!("{} {label} ({:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64(), o.detail);
        self.lines.push((label.to_string(), o));
    }

    fn run(&mut self, label: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let mut o = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                o.pass = false;
                o.detail += &format!("; exceeded {:.0}s budget", limit.as_secs_f64());
            }
        }
        self.record(label, elapsed, o);
    }
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------- criterion 1

fn crf_oracle(v: f64, beta: f64, gamma: f64) -> f64 {
    let p = v.powf(gamma);
    (1.0 + beta) * p / (beta + p)
}

fn crf_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bounds_ok = true;
    let mut monotone_ok = true;
    for _ in 0..10_000 {
        let crf = CrfParams::new(rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)).unwrap();
        bounds_ok &= crf.apply(0.0) == 0.0 && (crf.apply(1.0) - 1.0).abs() < 1e-12;
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        monotone_ok &= crf.apply(lo) <= crf.apply(hi);
    }
    let got = CrfParams::new(0.6, 0.9).unwrap().apply(0.5);
    let oracle = crf_oracle(0.5, 0.6, 0.9);
    let case_ok = (got - 0.75484).abs() < 1e-4 && (got - oracle).abs() < 1e-12;
    outcome(
        bounds_ok && monotone_ok && case_ok,
        format!("0->0 and 1->1: {bounds_ok}; monotone over 10^4 draws: {monotone_ok}; f(0.5; 0.6, 0.9) = {got:.6} (oracle {oracle:.6})"),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Per-element depthwise-convolution logits, softmax over the bracket and
/// weighted sum, computed without the tensor library.
fn fusion_oracle(latents: &[Tensor<f32>], w: &Tensor<f32>, b: &Tensor<f32>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (_, c, h, wd) = latents[0].dims4();
    let k = w.shape()[2];
    let r = (k / 2) as isize;
    let n = c * h * wd;
    let logits: Vec<Vec<f64>> = latents
        .iter()
        .map(|l| {
            (0..n)
                .map(|i| {
                    let (ch, y, x) = (i / (h * wd), (i / wd) % h, i % wd);
                    let mut s = f64::from(b.data()[ch]);
                    for dy in 0..k {
                        for dx in 0..k {
                            let (yy, xx) = (y as isize + dy as isize - r, x as isize + dx as isize - r);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                let v = l.data()[ch * h * wd + yy as usize * wd + xx as usize];
                                s += f64::from(w.data()[ch * k * k + dy * k + dx]) * f64::from(v);
                            }
                        }
                    }
                    s
                })
                .collect()
        })
        .collect();
    let mut merged = vec![0.0; n];
    let mut weights = vec![vec![0.0; n]; latents.len()];
    for i in 0..n {
        let m = logits.iter().map(|l| l[i]).fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l[i] - m).exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            weights[j][i] = (l[i] - m).exp() / z;
            merged[i] += weights[j][i] * f64::from(latents[j].data()[i]);
        }
    }
    (merged, weights)
}

fn fusion_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut max_sum_err = 0.0f64;
    let mut envelope_ok = true;
    let mut max_identity_err = 0.0f64;
    let mut max_oracle_err = 0.0f64;
    for trial in 0..200 {
        let k = 2 + trial % 3;
        let mut fusion = Fusion::<f32>::new(2, &FusionConfig::default(), &mut rng).unwrap();
        let w = Tensor::<f32>::randn(vec![2, 1, 3, 3], &mut rng);
        let b = Tensor::<f32>::randn(vec![2], &mut rng);
        fusion.set_kernel(w.clone(), b.clone());
        let latents: Vec<Tensor<f32>> = (0..k).map(|_| Tensor::randn(vec![1, 2, 4, 4], &mut rng)).collect();
        let (merged, weights) = fusion.fuse(&latents).unwrap();
        for i in 0..merged.numel() {
            let s: f64 = weights.iter().map(|w| f64::from(w.data()[i])).sum();
            max_sum_err = max_sum_err.max((s - 1.0).abs());
            let lo = latents.iter().map(|l| l.data()[i]).fold(f32::MAX, f32::min);
            let hi = latents.iter().map(|l| l.data()[i]).fold(f32::MIN, f32::max);
            let tol = 1e-5 * (1.0 + lo.abs().max(hi.abs()));
            envelope_ok &= merged.data()[i] >= lo - tol && merged.data()[i] <= hi + tol;
        }
        if k == 2 {
            let (oracle, _) = fusion_oracle(&latents, &w, &b);
            for (a, o) in merged.data().iter().zip(&oracle) {
                max_oracle_err = max_oracle_err.max((f64::from(*a) - o).abs());
            }
        }
        let same = vec![latents[0].clone(); k];
        let (m, _) = fusion.fuse(&same).unwrap();
        for (a, o) in m.data().iter().zip(latents[0].data()) {
            max_identity_err = max_identity_err.max(f64::from((a - o).abs() / (1.0 + o.abs())));
        }
    }
    let pass = max_sum_err < 1e-5 && envelope_ok && max_identity_err < 1e-6 && max_oracle_err < 1e-6;
    outcome(
        pass,
        format!(
            "max |sum w - 1| {max_sum_err:.1e}; convex envelope {envelope_ok}; identity rel err {max_identity_err:.1e}; oracle err {max_oracle_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Largest relative error between backprop and central differences over
/// the listed `(param, element)` pairs of `store`.
fn gradcheck(
    store: &ParamStore<f64>,
    picks: &[(hdrfuse_tensor::ParamId, usize)],
    loss: impl for<'g> Fn(&'g Graph<f64>, &ParamStore<f64>, bool) -> (f64, Option<Vec<Option<Tensor<f64>>>>),
) -> f64 {
    let (_, grads) = loss(&Graph::new(), store, true);
    let grads = grads.expect("gradients requested");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &(id, i) in picks {
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[i] += h;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[i] -= h;
        let numeric = (loss(&Graph::new(), &plus, false).0 - loss(&Graph::new(), &minus, false).0) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-9 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let fusion = Fusion::<f64>::new(4, &FusionConfig::default(), &mut rng).unwrap();
    let latents: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(vec![1, 4, 4, 4], &mut rng)).collect();
    let target = Tensor::<f64>::randn(vec![1, 4, 4, 4], &mut rng);
    let picks: Vec<_> = fusion.params.iter().flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i))).collect();
    let fusion_err = gradcheck(&fusion.params, &picks, |g, store, want| {
        let p = store.bind(g, want);
        let vars: Vec<_> = latents.iter().map(|l| g.constant(l.clone())).collect();
        let (merged, _) = fusion.forward(&p, &vars);
        let loss = merged.mul(g.constant(target.clone())).sum_all();
        let v = loss.value().data()[0];
        let grads = want.then(|| {
            let mut gr = g.backward(loss);
            p.grads(&mut gr)
        });
        (v, grads)
    });

    let cfg = VaeConfig { channels: [4, 4, 8], latent_channels: 4 };
    let decoder = Decoder::<f64>::new(&cfg, &mut rng);
    let z = Tensor::<f64>::randn(vec![1, 4, 2, 2], &mut rng);
    let out_target = Tensor::<f64>::randn(vec![1, 3, 16, 16], &mut rng);
    let dec_loss = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let p = store.bind(&g, false);
        decoder.forward(&p, g.constant(z.clone())).mul(g.constant(out_target.clone())).sum_all().value().data()[0]
    };
    // Biases that feed a normalization have an exactly zero gradient, so
    // elements are drawn until the finite-difference slope is non-trivial.
    let ids: Vec<_> = decoder.params.ids().collect();
    let mut dec_picks = Vec::new();
    for id in ids.iter().cycle().step_by(3).take(ids.len()) {
        if dec_picks.len() == 10 {
            break;
        }
        let n = decoder.params.get(*id).numel();
        for _ in 0..8 {
            let i = rng.random_range(0..n);
            let mut plus = decoder.params.clone();
            plus.get_mut(*id).data_mut()[i] += 1e-3;
            if (dec_loss(&plus) - dec_loss(&decoder.params)).abs() > 1e-5 {
                dec_picks.push((*id, i));
                break;
            }
        }
    }
    let decoder_err = gradcheck(&decoder.params, &dec_picks, |g, store, want| {
        let p = store.bind(g, want);
        let y = decoder.forward(&p, g.constant(z.clone()));
        let loss = y.mul(g.constant(out_target.clone())).sum_all();
        let v = loss.value().data()[0];
        let grads = want.then(|| {
            let mut gr = g.backward(loss);
            p.grads(&mut gr)
        });
        (v, grads)
    });
    let names: Vec<&str> = dec_picks.iter().map(|(id, _)| decoder.params.name(*id)).collect();
    outcome(
        fusion_err < 1e-3 && decoder_err < 1e-3 && dec_picks.len() == 10,
        format!(
            "fusion kernel ({} params) max rel err {fusion_err:.2e}; decoder subset [{}] max rel err {decoder_err:.2e}",
            picks.len(),
            names.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- fixture

fn fixture_config(root: &Path) -> RunConfig {
    let sets: Vec<String> = [
        format!("data_root={}", serde_json::to_string(root.to_str().unwrap()).unwrap()),
        "k=3".into(),
        "scenes.train=60".into(),
        "scenes.test=5".into(),
        "scenes.size=64".into(),
        "vae.channels=[16,32,64]".into(),
        r#"vae_train={"steps":1500,"batch_size":8,"crop":32,"lr":0.002}"#.into(),
        r#"decoder_train={"steps":1500,"batch_size":4,"lr":0.001}"#.into(),
        r#"unet={"channels":[16,32,64],"blocks_per_level":1,"latent_channels":4}"#.into(),
        r#"denoiser_train={"steps":3000,"batch_size":16,"lr":0.001}"#.into(),
    ]
    .into_iter()
    .collect();
    RunConfig::load(None, &sets, Some(SEED)).expect("acceptance config is valid")
}

fn timed<T>(what: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    println!("  [{what}: {:.1}s]", start.elapsed().as_secs_f64());
    out
}

/// Scenes, dataset, checkpoints and all inference variants under `root`.
fn build_fixture(cfg: &RunConfig) -> hdrfuse_core::Result<()> {
    timed("scenes", || commands::cmd_gen_scenes(cfg))?;
    timed("brackets", || commands::cmd_synth(cfg, None, None))?;
    let vae = timed("vae pretraining", || commands::cmd_pretrain_vae(cfg))?;
    println!("  vae: {}", vae["training"]);
    let dec = timed("hdr decoder fine-tuning", || commands::cmd_finetune_decoder(cfg))?;
    println!("  hdr decoder: train log-L1 {}", dec["train_log_l1"]);
    let hl = timed("highlight denoiser", || commands::cmd_train_denoiser(cfg, Direction::Highlight))?;
    println!("  highlight denoiser: {}", hl["training"]);
    for ablation in [Ablation::Full, Ablation::WoDecoder, Ablation::WoDenoiser] {
        let args = InferArgs { ablation: Some(ablation), ..Default::default() };
        timed(&format!("infer {}", commands::variant_name(ablation, true)), || commands::cmd_infer(cfg, &args))?;
    }
    Ok(())
}

struct SceneMetrics {
    name: String,
    dr: f64,
    clipped_log_rmse: Option<f64>,
}

fn eval_variant(cfg: &RunConfig, variant: &str) -> hdrfuse_core::Result<Vec<SceneMetrics>> {
    let summary = commands::cmd_eval(cfg, &cfg.results_dir().join(variant), None)?;
    println!("  {variant}:\n{}", indent(&commands::format_eval_table(&summary)));
    Ok(summary["samples"]
        .as_array()
        .expect("samples array")
        .iter()
        .map(|s| SceneMetrics {
            name: s["name"].as_str().unwrap_or_default().to_string(),
            dr: s["report"]["dr_stops"].as_f64().unwrap_or(f64::NAN),
            clipped_log_rmse: s["report"]["clipped"]["log_rmse"].as_f64(),
        })
        .collect())
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
}

fn mean_clipped(m: &[SceneMetrics]) -> f64 {
    let v: Vec<f64> = m.iter().filter_map(|s| s.clipped_log_rmse).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 4

fn overfit_sanity(cfg: &RunConfig) -> Outcome {
    let vae = load_vae(&cfg.checkpoint("vae")).unwrap();
    let samples: Vec<_> = load_dataset(&cfg.dataset_dir("train")).unwrap().into_iter().take(10).collect();
    let cache = cache_samples(&vae, &samples).unwrap();

    let tc = DecoderTrainConfig {
        steps: 5000,
        batch_size: 4,
        lr: 1e-3,
        early_stop: Some(EarlyStop { window: 100, threshold: 0.04 }),
        ..Default::default()
    };
    let (model, log) = timed("overfit decoder", || finetune_hdr_decoder(&vae, &cache, &tc, 21)).unwrap();
    let dec_l1 = evaluate_log_l1(&model, &cache).unwrap();
    let dec_windows = window_means(&log.tracked, MONOTONE_WINDOW);
    let dec_ok = dec_l1 < 0.05 && log.len() <= 5000 && non_increasing(&dec_windows);
    let mut detail =
        format!("decoder log-L1 {dec_l1:.4} after {} steps, 500-step means [{}]", log.len(), fmt_list(&dec_windows));
    let mut pass = dec_ok;

    let brackets: Vec<_> = cache.iter().map(|c| c.latents.clone()).collect();
    let dtc = DenoiserTrainConfig { steps: 2000, batch_size: 16, lr: 1e-3, ..Default::default() };
    for (i, direction) in [Direction::Highlight, Direction::Shadow, Direction::Unconditional].into_iter().enumerate() {
        let pairs = match direction {
            Direction::Unconditional => brackets.iter().map(|b| (b[2].clone(), b[2].clone())).collect(),
            d => shift_pairs(&brackets, d).unwrap(),
        };
        let (_, log) = timed(&format!("overfit {} denoiser", direction.name()), || {
            train_denoiser(direction, &pairs, &cfg.unet, &cfg.schedule, &dtc, 22 + i as u64)
        })
        .unwrap();
        let w = window_means(&log.tracked, MONOTONE_WINDOW);
        let ok = *w.last().unwrap() < 0.1 && non_increasing(&w);
        pass &= ok;
        detail += &format!("; {} loss 500-step means [{}]", direction.name(), fmt_list(&w));
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------- criterion 7

fn blending_exactness(cfg: &RunConfig) -> Outcome {
    let blend = BlendConfig::default();
    let mut exact = true;
    let mut checked = 0usize;
    for dir in list_samples(&cfg.dataset_dir("test")).unwrap() {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let input = read_ppm(dir.join("exp_2.ppm")).unwrap();
        let result = read_pfm(cfg.results_dir().join("full").join(&name).join("result.pfm")).unwrap();
        let (_, _, m) = blend_masks(&input, &blend).unwrap();
        let lin = input.linearize(blend.gamma);
        for p in (0..m.len()).filter(|&p| m[p] == 0.0) {
            checked += 1;
            for c in 0..3 {
                exact &= result.data()[3 * p + c].to_bits() == lin.data()[3 * p + c].to_bits();
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = LdrImage::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random_range(5..250u8)).collect()).unwrap();
    let gen = input.linearize(blend.gamma).map(|v| 2.0 * v).unwrap();
    let (_, s) = blend_unclipped(&gen, &input, &blend).unwrap();
    let s_ok = (s - 0.5).abs() < 1e-6;
    outcome(
        exact && checked > 0 && s_ok,
        format!("{checked} mask-0 pixels of the full results equal the linearized input bitwise: {exact}; gen = 2x input gives s = {s:.9}"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn pfm_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(pfm_files(&p));
        } else if p.extension().is_some_and(|x| x == "pfm") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(cfg: &RunConfig, config_path: &Path) -> Outcome {
    let runs: Vec<PathBuf> = ["determinism_a", "determinism_b"].iter().map(|d| cfg.root().join(d)).collect();
    for out in &runs {
        let status = Command::new(env!("CARGO_BIN_EXE_hdrfuse"))
            .args(["infer", "--config"])
            .arg(config_path)
            .arg("--out")
            .arg(out)
            .args(["--seed", &SEED.to_string()])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("hdrfuse infer failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
    }
    let (a, b) = (pfm_files(&runs[0]), pfm_files(&runs[1]));
    let same_names = a.iter().map(|p| p.strip_prefix(&runs[0]).unwrap()).eq(b.iter().map(|p| p.strip_prefix(&runs[1]).unwrap()));
    let identical = same_names && a.iter().zip(&b).all(|(x, y)| fs::read(x).unwrap() == fs::read(y).unwrap());
    outcome(identical && !a.is_empty(), format!("{} PFM files compared across two runs, byte-identical: {identical}", a.len()))
}

// ---------------------------------------------------------------- extra checks

fn mean_luma(img: &LdrImage) -> f64 {
    (0..img.width() * img.height()).map(|p| luma(img.rgb(p))).sum::<f64>() / (img.width() * img.height()) as f64
}

fn psnr(a: &LdrImage, b: &LdrImage) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| ((f64::from(x) - f64::from(y)) / 255.0).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn extra_checks(cfg: &RunConfig, report: &mut Report, full: &[SceneMetrics], wo_denoiser: &[SceneMetrics]) {
    let vae = load_vae(&cfg.checkpoint("vae")).unwrap();
    let hdr = load_hdr_model(&cfg.checkpoint("hdr_decoder")).unwrap();
    let hl = load_denoiser(&cfg.checkpoint("denoiser_highlight")).unwrap();
    let test: Vec<_> = list_samples(&cfg.dataset_dir("test")).unwrap().iter().map(|d| read_sample(d).unwrap()).collect();

    report.run("check: held-out autoencoder PSNR > 28 dB", None, || {
        let ps: Vec<f64> = test
            .iter()
            .flat_map(|s| s.ldr_images.iter())
            .map(|i| psnr(i, &vae.decode_ldr(&vae.encode(i).unwrap()).unwrap()))
            .collect();
        let mean = ps.iter().sum::<f64>() / ps.len() as f64;
        outcome(mean > 28.0, format!("mean {mean:.2} dB over {} test exposures", ps.len()))
    });

    report.run("check: decoded bracket of a 12-stop scene exceeds 4.0", None, || {
        let maxes: Vec<f64> = test
            .iter()
            .map(|s| {
                let lat: Vec<_> = s.ldr_images.iter().map(|i| vae.encode(i).unwrap()).collect();
                f64::from(hdr.reconstruct(&lat).unwrap().0.max_value())
            })
            .collect();
        outcome(maxes.iter().all(|&m| m > 4.0), format!("max decoded values [{}]", fmt_list(&maxes)))
    });

    let brackets: Vec<Vec<_>> =
        test.iter().map(|s| s.ldr_images.iter().map(|i| vae.encode(i).unwrap()).collect()).collect();
    let pairs = shift_pairs(&brackets, Direction::Highlight).unwrap();
    report.run("check: shuffled conditions raise highlight validation loss", None, || {
        let (own, shuffled) = (validation_loss(&hl, &pairs, 5, false), validation_loss(&hl, &pairs, 5, true));
        outcome(shuffled > own, format!("own {own:.4} vs shuffled {shuffled:.4}"))
    });

    report.run("check: highlight shift darkens the decoded image", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pairs_lum = Vec::new();
        for b in &brackets {
            let out = hl.sample_shifted(&b[2], &cfg.sampler, &mut rng).unwrap();
            pairs_lum.push((mean_luma(&vae.decode_ldr(&out).unwrap()), mean_luma(&vae.decode_ldr(&b[2]).unwrap())));
        }
        let ok = pairs_lum.iter().all(|(s, c)| s < c);
        let txt: Vec<String> = pairs_lum.iter().map(|(s, c)| format!("{s:.3}<{c:.3}")).collect();
        outcome(ok, format!("sample vs condition mean luminance [{}]", txt.join(", ")))
    });

    report.run("check: wo-decoder output stays within [0, 1]", None, || {
        let maxes: Vec<f64> = pfm_files(&cfg.results_dir().join("wo-decoder"))
            .iter()
            .filter(|p| p.ends_with("result.pfm"))
            .map(|p| f64::from(read_pfm(p).unwrap().max_value()))
            .collect();
        outcome(!maxes.is_empty() && maxes.iter().all(|&m| m <= 1.0), format!("max values [{}]", fmt_list(&maxes)))
    });

    report.run("check: wo-denoiser dynamic range <= full", None, || {
        let ok = full.iter().zip(wo_denoiser).all(|(f, w)| f.name == w.name && w.dr <= f.dr);
        let txt: Vec<String> = full.iter().zip(wo_denoiser).map(|(f, w)| format!("{:.2}<={:.2}", w.dr, f.dr)).collect();
        outcome(ok, format!("[{}]", txt.join(", ")))
    });

    report.run("check: clipped LDR scanline <= 1 while the reconstruction exceeds 1", None, || {
        let mut found = 0;
        let mut ok = true;
        for dir in list_samples(&cfg.dataset_dir("test")).unwrap() {
            let name = dir.file_name().unwrap().to_string_lossy().to_string();
            let ldr = read_ppm(dir.join("exp_2.ppm")).unwrap();
            let rec = read_pfm(cfg.results_dir().join("full").join(&name).join("result.pfm")).unwrap();
            let (hl_mask, _, _) = blend_masks(&ldr, &BlendConfig::default()).unwrap();
            let w = ldr.width();
            let Some(row) = (0..ldr.height()).max_by_key(|&y| (0..w).filter(|&x| hl_mask.data[y * w + x] >= 1.0).count())
            else {
                continue;
            };
            let l = extract_scanline(&ldr, row).unwrap();
            let r = extract_scanline(&rec, row).unwrap();
            let clipped: Vec<usize> = (0..w).filter(|&x| hl_mask.data[row * w + x] >= 1.0).collect();
            if clipped.is_empty() {
                continue;
            }
            found += 1;
            ok &= l.luminance.iter().all(|&v| v <= 1.0) && clipped.iter().any(|&x| r.luminance[x] > 1.0);
        }
        outcome(ok && found > 0, format!("{found} scenes with fully clipped pixels on their most clipped row"))
    });
}

// ---------------------------------------------------------------- main

fn main() -> ExitCode {
    let total = Instant::now();
    let mut report = Report { lines: Vec::new() };
    report.run("criterion 1: CRF suite", Some(Duration::from_secs(1)), crf_suite);
    report.run("criterion 2: fusion algebra", Some(Duration::from_secs(10)), fusion_suite);
    report.run("criterion 3: gradient checks", Some(Duration::from_secs(120)), gradient_checks);
    if std::env::args().any(|a| a == "--quick") {
        println!("--quick: criteria 4-8 skipped");
        return report.finish(total);
    }

    let tmp = tempfile::tempdir().expect("temporary directory");
    let cfg = fixture_config(tmp.path());
    let config_path = tmp.path().join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    println!("building fixture under {}", tmp.path().display());
    if let Err(e) = build_fixture(&cfg) {
        println!("FAIL fixture: {e}");
        return ExitCode::FAILURE;
    }

    report.run("criterion 4: overfit sanity", None, || overfit_sanity(&cfg));

    let metrics = ["full", "wo-decoder", "wo-denoiser"].map(|v| eval_variant(&cfg, v).expect("evaluation"));
    let [full, wo_decoder, wo_denoiser] = &metrics;
    report.run("criterion 5: dynamic-range extension", None, || {
        let ok = full.len() == 5
            && full.iter().zip(wo_decoder).all(|(f, w)| f.name == w.name && f.dr >= 10.0 && w.dr <= 8.0);
        let txt: Vec<String> = full.iter().zip(wo_decoder).map(|(f, w)| format!("{} {:.2}/{:.2}", f.name, f.dr, w.dr)).collect();
        outcome(ok, format!("full/wo-decoder stops: {}", txt.join(", ")))
    });
    report.run("criterion 6: ablation ordering", None, || {
        let (f, d, n) = (mean_clipped(full), mean_clipped(wo_decoder), mean_clipped(wo_denoiser));
        outcome(f < d && f < n, format!("mean clipped log_rmse full {f:.4}, wo-decoder {d:.4}, wo-denoiser {n:.4}"))
    });
    report.run("criterion 7: blending exactness", None, || blending_exactness(&cfg));
    report.run("criterion 8: determinism", None, || determinism(&cfg, &config_path));
    extra_checks(&cfg, &mut report, full, wo_denoiser);
    report.finish(total)
}
