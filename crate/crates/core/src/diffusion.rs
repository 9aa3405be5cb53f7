//! Exposure-shifting latent denoisers.
//!
//! A denoiser predicts the noise in `x_t = sqrt(ab_t) c + sqrt(1 - ab_t) eps`
//! given the noisy latent concatenated channel-wise with a condition
//! latent. The highlight denoiser is trained to produce the next darker
//! bracket latent from a brighter one, the shadow denoiser the reverse.
//! Sampling uses DDIM; `eta = 0` is deterministic given the initial noise.

use hdrfuse_tensor::{Adam, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Attention, Conv, GroupNorm, Linear, ResBlock};
use crate::train::{EarlyStop, LossLog, Trainer};
use crate::vae::LatentTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear variance schedule; timesteps run `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.timesteps;
        if t < 2 || !(0.0 < config.beta_start && config.beta_start < config.beta_end && config.beta_end < 1.0) {
            return Err(Error::Config(format!("invalid diffusion schedule {config:?}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Ok(Self { config, betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `1 - beta` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", self.timesteps())));
        }
        Ok(())
    }

    /// Forward corruption of a clean latent.
    pub fn corrupt(&self, c: &LatentTensor, t: usize, noise: &LatentTensor) -> Result<LatentTensor> {
        self.check_t(t)?;
        if c.shape() != noise.shape() {
            return Err(Error::Shape(format!("noise {:?} vs latent {:?}", noise.shape(), c.shape())));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(c.zip_map(noise, |x, n| (a * f64::from(x) + b * f64::from(n)) as f32))
    }

    /// Evenly spaced descending sampling timesteps, starting at `T`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps() {
            return Err(Error::InvalidArgument(format!("sampling steps must be in [1, {}]", self.timesteps())));
        }
        let t = self.timesteps() as f64;
        let mut ts: Vec<usize> = (0..steps).map(|i| (t - i as f64 * t / steps as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Shifts a latent one level darker.
    Highlight,
    /// Shifts a latent one level brighter.
    Shadow,
    /// Unconditional base model.
    Unconditional,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Highlight => "highlight",
            Direction::Shadow => "shadow",
            Direction::Unconditional => "unconditional",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highlight" | "minus" | "-" => Ok(Direction::Highlight),
            "shadow" | "plus" | "+" => Ok(Direction::Shadow),
            "unconditional" | "base" => Ok(Direction::Unconditional),
            _ => Err(Error::InvalidArgument(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Widths at the three resolutions, finest first.
    pub channels: [usize; 3],
    pub blocks_per_level: usize,
    pub latent_channels: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { channels: [64, 128, 256], blocks_per_level: 2, latent_channels: 4 }
    }
}

#[derive(Clone, Debug)]
pub struct Unet<T: Scalar> {
    pub params: ParamStore<T>,
    pub config: UnetConfig,
    pub cond_channels: usize,
    emb1: Linear,
    emb2: Linear,
    conv_in: Conv,
    down: Vec<(Vec<ResBlock>, Option<Conv>)>,
    attn: Attention,
    mid: ResBlock,
    up: Vec<(Conv, Vec<ResBlock>)>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl<T: Scalar> Unet<T> {
    pub fn new<R: Rng + ?Sized>(config: &UnetConfig, cond_channels: usize, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        let [c1, c2, c3] = config.channels;
        let e = 4 * c1;
        let emb1 = Linear::new(&mut p, "temb.l1", c1, e, rng);
        let emb2 = Linear::new(&mut p, "temb.l2", e, e, rng);
        let conv_in = Conv::new(&mut p, "conv_in", config.latent_channels + cond_channels, c1, 3, 1, rng);
        let nb = config.blocks_per_level.max(1);
        let mut down = Vec::new();
        let mut prev = c1;
        for (i, &c) in config.channels.iter().enumerate() {
            let blocks = (0..nb)
                .map(|b| {
                    let cin = if b == 0 { prev } else { c };
                    ResBlock::new(&mut p, &format!("down{i}.res{b}"), cin, c, Some(e), rng)
                })
                .collect();
            let ds = (i < 2).then(|| Conv::new(&mut p, &format!("down{i}.down"), c, c, 3, 2, rng));
            down.push((blocks, ds));
            prev = c;
        }
        let attn = Attention::new(&mut p, "mid.attn", c3, rng);
        let mid = ResBlock::new(&mut p, "mid.res", c3, c3, Some(e), rng);
        let mut up = Vec::new();
        for (i, (&c, &from)) in [c2, c1].iter().zip(&[c3, c2]).enumerate() {
            let conv = Conv::new(&mut p, &format!("up{i}.conv"), from, c, 3, 1, rng);
            let blocks = (0..nb)
                .map(|b| {
                    let cin = if b == 0 { 2 * c } else { c };
                    ResBlock::new(&mut p, &format!("up{i}.res{b}"), cin, c, Some(e), rng)
                })
                .collect();
            up.push((conv, blocks));
        }
        let norm_out = GroupNorm::new(&mut p, "norm_out", c1);
        let conv_out = Conv::new(&mut p, "conv_out", c1, config.latent_channels, 3, 1, rng).zero_init(&mut p);
        Self { params: p, config: config.clone(), cond_channels, emb1, emb2, conv_in, down, attn, mid, up, norm_out, conv_out }
    }

    /// Predicted noise for `x` `[n, c, h, w]` at timesteps `t` (one per item).
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, cond: Option<Var<'g, T>>, t: &[f64]) -> Var<'g, T> {
        let g = x.graph();
        let temb = g.constant(timestep_embedding(t, self.config.channels[0]));
        let emb = self.emb2.forward(p, self.emb1.forward(p, temb).silu()).silu();
        let input = match cond {
            Some(c) => g.concat_channels(&[x, c]),
            None => x,
        };
        let mut h = self.conv_in.forward(p, input);
        let mut skips = Vec::new();
        for (blocks, ds) in &self.down {
            for b in blocks {
                h = b.forward(p, h, Some(emb));
            }
            if let Some(ds) = ds {
                skips.push(h);
                h = ds.forward(p, h);
            }
        }
        h = self.mid.forward(p, self.attn.forward(p, h), Some(emb));
        for (conv, blocks) in &self.up {
            h = conv.forward(p, h.upsample2x());
            h = g.concat_channels(&[h, skips.pop().expect("one skip per level")]);
            for b in blocks {
                h = b.forward(p, h, Some(emb));
            }
        }
        self.conv_out.forward(p, self.norm_out.forward(p, h).silu())
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub direction: Direction,
    pub unet: Unet<f32>,
    pub schedule: DiffusionSchedule,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 0 gives deterministic DDIM; 1 matches ancestral sampling variance.
    /// Noise is drawn from the caller's seeded generator either way.
    pub eta: f64,
    /// Clamp on the predicted clean latent at every step.
    pub x0_clip: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 1.0, x0_clip: Some(4.0) }
    }
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        direction: Direction,
        config: &UnetConfig,
        schedule: DiffusionSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if config.channels.contains(&0) || config.latent_channels == 0 {
            return Err(Error::Config("UNet widths must be positive".into()));
        }
        let cond = if direction == Direction::Unconditional { 0 } else { config.latent_channels };
        Ok(Self { direction, unet: Unet::new(config, cond, rng), schedule })
    }

    pub fn is_conditional(&self) -> bool {
        self.unet.cond_channels > 0
    }

    pub fn predict_noise(&self, x: &LatentTensor, cond: Option<&LatentTensor>, t: &[f64]) -> LatentTensor {
        let g = Graph::new();
        let p = self.unet.params.bind(&g, false);
        let c = cond.map(|c| g.constant(c.clone()));
        self.unet.forward(&p, g.constant(x.clone()), c, t).value().as_ref().clone()
    }

    fn check_cond(&self, cond: Option<&LatentTensor>) -> Result<()> {
        match (self.is_conditional(), cond) {
            (true, None) => Err(Error::InvalidArgument(format!("{} denoiser needs a condition", self.direction.name()))),
            (false, Some(_)) => Err(Error::InvalidArgument("unconditional denoiser takes no condition".into())),
            (true, Some(c)) => {
                let s = c.shape();
                let lc = self.unet.config.latent_channels;
                if s.len() != 4 || s[1] != lc || s[2] % 4 != 0 || s[3] % 4 != 0 {
                    return Err(Error::Shape(format!("condition {s:?} must be [n, {lc}, 4a, 4b]")));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Sample a latent shaped `shape` (or the condition's shape).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        cond: Option<&LatentTensor>,
        shape: &[usize],
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<LatentTensor> {
        self.check_cond(cond)?;
        if let Some(c) = cond {
            if c.shape() != shape {
                return Err(Error::Shape(format!("condition {:?} vs requested {shape:?}", c.shape())));
            }
        }
        let ts = self.schedule.sampling_timesteps(sampler.steps)?;
        let mut x = Tensor::<f32>::randn(shape.to_vec(), rng);
        let n = shape[0];
        for (i, &t) in ts.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| self.schedule.alpha_bar(tp));
            let eps = self.predict_noise(&x, cond, &vec![t as f64; n]);
            let sigma = sampler.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
            let noise = (sigma > 0.0).then(|| Tensor::<f32>::randn(shape.to_vec(), rng));
            let data = x
                .data()
                .iter()
                .zip(eps.data())
                .enumerate()
                .map(|(j, (&xv, &ev))| {
                    let (xv, ev) = (f64::from(xv), f64::from(ev));
                    let mut x0 = (xv - (1.0 - ab).sqrt() * ev) / ab.sqrt();
                    if let Some(c) = sampler.x0_clip {
                        x0 = x0.clamp(-c, c);
                    }
                    let e = if sampler.x0_clip.is_some() { (xv - ab.sqrt() * x0) / (1.0 - ab).sqrt() } else { ev };
                    let z = noise.as_ref().map_or(0.0, |nz| f64::from(nz.data()[j]));
                    (ab_prev.sqrt() * x0 + dir * e + sigma * z) as f32
                })
                .collect();
            x = Tensor::from_vec(shape.to_vec(), data);
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("{} sampler produced non-finite latents", self.direction.name())));
        }
        Ok(x)
    }

    /// One-level exposure shift of `cond`.
    pub fn sample_shifted<R: Rng + ?Sized>(
        &self,
        cond: &LatentTensor,
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<LatentTensor> {
        if self.direction == Direction::Unconditional {
            return Err(Error::InvalidArgument("the unconditional model does not shift exposures".into()));
        }
        self.sample(Some(cond), cond.shape(), sampler, rng)
    }
}

/// Where the input latent sits in the bracket to be generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Lowest,
    Middle,
    Highest,
}

impl std::str::FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lowest" => Ok(Position::Lowest),
            "middle" => Ok(Position::Middle),
            "highest" => Ok(Position::Highest),
            _ => Err(Error::InvalidArgument(format!("unknown bracket position `{s}`"))),
        }
    }
}

impl Position {
    /// Index of the input in a `k`-element bracket.
    pub fn index(self, k: usize) -> usize {
        match self {
            Position::Lowest => 0,
            Position::Middle => k / 2,
            Position::Highest => k - 1,
        }
    }
}

/// Complete a `k`-level bracket around `c_in` by chaining one-level shifts.
/// The result is ordered darkest first with `c_in` (unchanged) at its
/// position.
pub fn generate_bracket_from_latent<R: Rng + ?Sized>(
    c_in: &LatentTensor,
    position: Position,
    k: usize,
    highlight: Option<&Denoiser>,
    shadow: Option<&Denoiser>,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<LatentTensor>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("bracket needs at least 2 levels, got {k}")));
    }
    if position == Position::Middle && k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("no middle position in a {k}-level bracket")));
    }
    let idx = position.index(k);
    let need = |d: Option<&Denoiser>, dir: Direction, count: usize| -> Result<()> {
        if count > 0 && d.is_none() {
            return Err(Error::MissingCheckpoint(format!("{} denoiser required for position {position:?}", dir.name())));
        }
        Ok(())
    };
    need(highlight, Direction::Highlight, idx)?;
    need(shadow, Direction::Shadow, k - 1 - idx)?;
    let mut out = vec![c_in.clone(); k];
    for i in (0..idx).rev() {
        out[i] = highlight.unwrap().sample_shifted(&out[i + 1], sampler, rng)?;
    }
    for i in idx + 1..k {
        out[i] = shadow.unwrap().sample_shifted(&out[i - 1], sampler, rng)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch_size: 16, lr: 1e-3, clip_norm: 1.0, early_stop: None }
    }
}

/// `(condition, target)` latent pairs of one shift direction from cached
/// brackets (each `[1, c, h, w]`, darkest first). Every adjacent pair of
/// levels contributes one pair.
pub fn shift_pairs(brackets: &[Vec<LatentTensor>], direction: Direction) -> Result<Vec<(LatentTensor, LatentTensor)>> {
    let mut out = Vec::new();
    for b in brackets {
        for i in 0..b.len().saturating_sub(1) {
            match direction {
                Direction::Highlight => out.push((b[i + 1].clone(), b[i].clone())),
                Direction::Shadow => out.push((b[i].clone(), b[i + 1].clone())),
                Direction::Unconditional => {
                    return Err(Error::InvalidArgument("unconditional training has no pairs".into()))
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    Ok(out)
}

/// Noise-prediction loss on a batch; `cond` is `None` for the base model.
fn denoise_loss<'g>(
    unet: &Unet<f32>,
    p: &Bound<'g, f32>,
    g: &'g Graph<f32>,
    schedule: &DiffusionSchedule,
    targets: Tensor<f32>,
    conds: Option<Tensor<f32>>,
    ts: &[usize],
    noise: Tensor<f32>,
) -> Var<'g, f32> {
    let per = targets.numel() / ts.len();
    let mut noisy = targets.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let rng = i * per..(i + 1) * per;
        for (x, &n) in noisy.data_mut()[rng.clone()].iter_mut().zip(&noise.data()[rng]) {
            *x = a * *x + b * n;
        }
    }
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = unet.forward(p, g.constant(noisy), conds.map(|c| g.constant(c)), &tf);
    pred.sub(g.constant(noise)).sqr().mean_all()
}

/// Train a conditional shift model, or the unconditional base model when
/// `direction` is `Unconditional` (then only the targets of `pairs` are
/// used and conditions are ignored).
pub fn train_denoiser(
    direction: Direction,
    pairs: &[(LatentTensor, LatentTensor)],
    config: &UnetConfig,
    schedule: &ScheduleConfig,
    tc: &DenoiserTrainConfig,
    seed: u64,
) -> Result<(Denoiser, LossLog)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let shape = pairs[0].1.shape().to_vec();
    if pairs.iter().any(|(c, t)| c.shape() != shape || t.shape() != shape) {
        return Err(Error::Shape("training latents must share one shape".into()));
    }
    if !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
        return Err(Error::Shape(format!("latent {shape:?} must have spatial dims divisible by 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = DiffusionSchedule::new(schedule.clone())?;
    let mut model = Denoiser::new(direction, config, sched.clone(), &mut rng)?;
    let mut store = model.unet.params.clone();
    let mut trainer =
        Trainer::new(Adam::new(tc.lr).with_clip_norm(tc.clip_norm), seed).with_early_stop(tc.early_stop);
    let t_max = sched.timesteps();
    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| rng.random_range(0..pairs.len())).collect();
        let ts: Vec<usize> = (0..tc.batch_size)
            .map(|i| {
                let lo = i * t_max / tc.batch_size;
                let hi = ((i + 1) * t_max / tc.batch_size).max(lo + 1);
                1 + rng.random_range(lo..hi)
            })
            .collect();
        let targets = Tensor::stack_batch(&idx.iter().map(|&i| pairs[i].1.clone()).collect::<Vec<_>>());
        let conds = model
            .is_conditional()
            .then(|| Tensor::stack_batch(&idx.iter().map(|&i| pairs[i].0.clone()).collect::<Vec<_>>()));
        let noise = Tensor::randn(targets.shape().to_vec(), &mut rng);
        let g = Graph::new();
        let p = store.bind(&g, true);
        let loss = denoise_loss(&model.unet, &p, &g, &sched, targets, conds, &ts, noise);
        if trainer.step(step, &g, loss, loss, &p, &mut store)? {
            info!("{}: early stop at step {step}", direction.name());
            break;
        }
    }
    model.unet.params = store;
    Ok((model, trainer.into_log()))
}

/// Mean noise-prediction loss over `pairs` with fixed timesteps and noise
/// drawn from `seed`. With `shuffle_conditions` the conditions are rotated
/// by one position so no pair sees its own condition.
pub fn validation_loss(model: &Denoiser, pairs: &[(LatentTensor, LatentTensor)], seed: u64, shuffle_conditions: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = model.schedule.timesteps();
    let n = pairs.len();
    let mut total = 0.0;
    let draws = 8;
    for d in 0..draws {
        for i in 0..n {
            let t = 1 + (d * t_max / draws + rng.random_range(0..t_max / draws)).min(t_max - 1);
            let target = &pairs[i].1;
            let cond = if shuffle_conditions { &pairs[(i + 1) % n].0 } else { &pairs[i].0 };
            let noise = Tensor::from_vec(
                target.shape().to_vec(),
                (0..target.numel()).map(|_| StandardNormal.sample(&mut rng)).collect(),
            );
            let noisy = model.schedule.corrupt(target, t, &noise).expect("valid timestep");
            let pred = model.predict_noise(&noisy, model.is_conditional().then_some(cond), &[t as f64]);
            total += pred.zip_map(&noise, |a, b| (a - b) * (a - b)).data().iter().map(|&v| f64::from(v)).sum::<f64>()
                / target.numel() as f64;
        }
    }
    total / (draws * n) as f64
}
