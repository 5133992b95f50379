//! DDPM noising, target-only loss, Adam training and ancestral sampling.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assembly::PromptTokens;
use crate::codec::{Frame, LatentVideo, PatchCodec, PixelVideo};
use crate::denoiser::{
    self, AttentionPath, DenoiseInput, DenoiserParams, ParamGroup, ParamVars, ReferenceInput,
};
use crate::error::{Error, Result};
use crate::icmask::{FlowTable, MaskMode};
use crate::parallel::Exec;
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor};

pub const TIMESTEPS: usize = 1000;

/// Linear beta schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TIMESTEPS, 1e-4, 2e-2)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1).max(1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t >= self.len() {
            return Err(Error::OutOfRange(format!("timestep {t} outside [1, {})", self.len())));
        }
        Ok(())
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`
    pub fn add_noise(&self, z0: &LatentVideo, t: usize, eps: &LatentVideo) -> Result<LatentVideo> {
        self.check(t)?;
        if z0.grid() != eps.grid() || z0.dim != eps.dim {
            return Err(Error::Extent("noise and latent extents differ".into()));
        }
        let a = self.alpha_bar(t).sqrt();
        let s = (1.0 - self.alpha_bar(t)).sqrt();
        let mut out = z0.clone();
        for (o, e) in out.data.iter_mut().zip(&eps.data) {
            *o = a * *o + s * e;
        }
        Ok(out)
    }

    /// Descending timesteps `T-1, T-1-k, ...` for a strided sampler.
    pub fn strided(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps >= self.len() {
            return Err(Error::Config(format!("sampler steps {steps} outside [1, {})", self.len())));
        }
        let stride = self.len() / steps;
        Ok((0..steps).map(|i| self.len() - 1 - i * stride).collect())
    }
}

/// Unit-normal latent with the given extents.
pub fn gaussian_latent<R: rand::Rng + ?Sized>(grid: [usize; 3], dim: usize, r: &mut R) -> LatentVideo {
    let mut z = LatentVideo::zeros(grid[0], grid[1], grid[2], dim);
    for v in z.data.iter_mut() {
        *v = r.sample(StandardNormal);
    }
    z
}

/// One prompt-video example with its latent and first-frame condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub prompt: PromptTokens,
    pub latent: LatentVideo,
    pub first_frame: LatentVideo,
}

impl Clip {
    pub fn new(prompt: PromptTokens, video: &PixelVideo, codec: &PatchCodec) -> Result<Self> {
        Ok(Clip {
            prompt,
            latent: codec.encode(video)?,
            first_frame: codec.first_frame_condition(&video.frame(0), video.frames)?,
        })
    }

    pub fn as_reference(&self) -> ReferenceInput<'_> {
        ReferenceInput {
            prompt: &self.prompt,
            latent: &self.latent,
            first_frame: &self.first_frame,
        }
    }
}

/// Reference and target sharing an effect.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub reference: Clip,
    pub target: Clip,
}

impl TrainPair {
    /// Borrowed pair, optionally with roles exchanged.
    pub fn view(&self, swap: bool) -> PairView<'_> {
        if swap {
            PairView { reference: &self.target, target: &self.reference }
        } else {
            PairView { reference: &self.reference, target: &self.target }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairView<'a> {
    pub reference: &'a Clip,
    pub target: &'a Clip,
}

/// Which sequence the loss is computed on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// `[g_tgt, z_tgt]` only, every network weight trainable.
    Backbone,
    /// In-context sequence, attention projections trainable.
    #[default]
    InContext,
    /// In-context sequence with concept tokens, only those trainable.
    Concept,
}

impl Phase {
    pub fn trainable(self) -> &'static [ParamGroup] {
        match self {
            Phase::Backbone => &[ParamGroup::Attention, ParamGroup::Backbone],
            Phase::InContext => &[ParamGroup::Attention],
            Phase::Concept => &[ParamGroup::Concept],
        }
    }
}

/// Loss and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct StepResult<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Everything that fixes the noise draw of one training example.
#[derive(Clone, Copy, Debug)]
pub struct NoiseDraw {
    pub seed: u64,
}

impl NoiseDraw {
    pub fn sample(&self, grid: [usize; 3], dim: usize) -> (usize, LatentVideo) {
        let mut r = rng::rng(self.seed);
        let t = r.random_range(1..TIMESTEPS);
        (t, gaussian_latent(grid, dim, &mut r))
    }
}

/// Per-example target-only diffusion loss on a fresh tape.
pub fn example_loss<T: Scalar>(
    params: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
    pair: PairView<'_>,
    phase: Phase,
    table: &FlowTable,
    path: AttentionPath,
    draw: NoiseDraw,
) -> Result<StepResult<T>> {
    let (t, eps) = draw.sample(pair.target.latent.grid(), pair.target.latent.dim);
    let noisy = schedule.add_noise(&pair.target.latent, t, &eps)?;
    let input = DenoiseInput {
        prompt: &pair.target.prompt,
        noisy: &noisy,
        first_frame: &pair.target.first_frame,
        reference: (phase != Phase::Backbone).then(|| pair.reference.as_reference()),
        timestep: t,
        use_concept: phase == Phase::Concept,
    };
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, phase.trainable());
    let f = denoiser::forward(&mut tape, params, &vars, &input, table, path)?;
    let target = tape.constant(eps.to_tensor());
    let loss = tape.mse(f.prediction, target)?;
    let value = tape.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "diffusion loss" });
    }
    let mut grads = tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        grads: vars.gradients(&mut grads),
    })
}

/// Mean loss and gradients over a batch; examples run through `exec` and
/// are reduced in index order.
#[allow(clippy::too_many_arguments)]
pub fn loss_step<T: Scalar>(
    params: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
    batch: &[PairView<'_>],
    draws: &[NoiseDraw],
    phase: Phase,
    table: &FlowTable,
    path: AttentionPath,
    exec: Exec,
) -> Result<StepResult<T>> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::Precondition("batch and noise draws must be non-empty and equal length".into()));
    }
    let results = exec.map(batch.len(), |i| {
        example_loss(params, schedule, batch[i], phase, table, path, draws[i])
    });
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for r in results {
        let r = r?;
        loss += r.loss * inv;
        for (name, g) in r.grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let s = T::of(inv);
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
    Ok(StepResult { loss, grads })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Update every tensor of `groups` that has a gradient.
    pub fn apply(
        &mut self,
        params: &mut DenoiserParams<T>,
        groups: &[ParamGroup],
        grads: &BTreeMap<String, Tensor<T>>,
    ) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let moments = &mut self.moments;
        params.update(groups, |name, t| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); t.len()], vec![T::zero(); t.len()]));
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = g.f64();
                let mf = b1 * m.f64() + (1.0 - b1) * gf;
                let vf = b2 * v.f64() + (1.0 - b2) * gf * gf;
                *m = T::of(mf);
                *v = T::of(vf);
                let upd = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *p = T::of(p.f64() - upd);
            }
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub path: AttentionPath,
    /// Linear learning-rate ramp over this many steps.
    pub warmup: usize,
    /// Decay of the weight average written back after training; 0 keeps
    /// the raw weights.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::InContext,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            mask_mode: MaskMode::Canonical,
            path: AttentionPath::Decomposed,
            warmup: 0,
            ema: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config(format!("ema decay {} must lie in [0, 1)", self.ema)));
        }
        Ok(())
    }
}

/// Per-step mean loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub losses: Vec<f64>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:.8}\n"));
        }
        s
    }

    /// Mean over consecutive windows of `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Batch indices and noise draws for one step; a pure function of
/// `(seed, step)` and the dataset size.
pub fn step_plan(seed: u64, step: usize, pairs: usize, batch: usize) -> Vec<(usize, bool, NoiseDraw)> {
    let mut r = rng::derived(seed, step as u64);
    (0..batch)
        .map(|i| {
            let idx = r.random_range(0..pairs);
            let swap = r.random_bool(0.5);
            (idx, swap, NoiseDraw { seed: rng::derive(rng::derive(seed, step as u64), i as u64 + 1) })
        })
        .collect()
}

/// Run `config.steps` optimiser steps over `pairs`. Reference and target
/// roles within a pair are swapped at random.
pub fn train<T: Scalar>(
    params: &mut DenoiserParams<T>,
    pairs: &[TrainPair],
    config: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LossLog> {
    config.validate()?;
    if pairs.is_empty() && config.steps > 0 {
        return Err(Error::Precondition("training needs at least one pair".into()));
    }
    let schedule = NoiseSchedule::default();
    let table = config.mask_mode.table();
    let groups = config.phase.trainable();
    let mut adam = Adam::new(config.lr, config.beta1, config.beta2);
    let mut log = LossLog::default();
    let mut average = (config.ema > 0.0).then(|| WeightAverage::new(params, groups));
    for step in 0..config.steps {
        if config.warmup > 0 {
            adam.lr = config.lr * ((step + 1) as f64 / config.warmup as f64).min(1.0);
        }
        let plan = step_plan(config.seed, step, pairs.len(), config.batch_size);
        let batch: Vec<PairView<'_>> = plan.iter().map(|&(i, s, _)| pairs[i].view(s)).collect();
        let draws: Vec<NoiseDraw> = plan.iter().map(|p| p.2).collect();
        let r = loss_step(params, &schedule, &batch, &draws, config.phase, &table, config.path, exec)?;
        adam.apply(params, groups, &r.grads);
        if let Some(a) = average.as_mut() {
            a.update(params, (config.ema).min((1 + step) as f64 / (10 + step) as f64));
        }
        log.losses.push(r.loss);
        on_step(step, r.loss);
    }
    if let Some(a) = average {
        a.write(params, groups);
    }
    Ok(log)
}

/// Exponential moving average of the trainable tensors.
struct WeightAverage {
    tensors: BTreeMap<String, Vec<f64>>,
}

impl WeightAverage {
    fn new<T: Scalar>(params: &DenoiserParams<T>, groups: &[ParamGroup]) -> Self {
        let tensors = params
            .iter()
            .filter(|(name, _)| groups.contains(&DenoiserParams::<T>::group(name)))
            .map(|(name, t)| (name.to_string(), t.data().iter().map(|v| v.f64()).collect()))
            .collect();
        WeightAverage { tensors }
    }

    fn update<T: Scalar>(&mut self, params: &DenoiserParams<T>, decay: f64) {
        for (name, avg) in &mut self.tensors {
            let Some(t) = params.get(name) else { continue };
            for (a, v) in avg.iter_mut().zip(t.data()) {
                *a = decay * *a + (1.0 - decay) * v.f64();
            }
        }
    }

    fn write<T: Scalar>(&self, params: &mut DenoiserParams<T>, groups: &[ParamGroup]) {
        params.update(groups, |name, t| {
            if let Some(avg) = self.tensors.get(name) {
                for (p, &a) in t.data_mut().iter_mut().zip(avg) {
                    *p = T::of(a);
                }
            }
        });
    }
}

/// Sampler settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub seed: u64,
    /// Clamp the predicted clean video to `[-1, 1]` at every step.
    pub clip: bool,
    pub use_concept: bool,
    pub mask_mode: MaskMode,
    pub path: AttentionPath,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 50,
            seed: 0,
            clip: true,
            use_concept: false,
            mask_mode: MaskMode::Canonical,
            path: AttentionPath::Decomposed,
        }
    }
}

/// Generate a video for `prompt` starting from `first`, with an optional
/// clean reference clip as context.
pub fn sample<T: Scalar>(
    params: &DenoiserParams<T>,
    reference: Option<&Clip>,
    prompt: &PromptTokens,
    first: &Frame,
    frames: usize,
    config: &SampleConfig,
) -> Result<PixelVideo> {
    let codec = PatchCodec::new(first.channels);
    let schedule = NoiseSchedule::default();
    let cond = codec.first_frame_condition(first, frames)?;
    if let Some(r) = reference {
        if r.latent.grid() != cond.grid() {
            return Err(Error::Extent(format!(
                "reference grid {:?} does not match target grid {:?}",
                r.latent.grid(),
                cond.grid()
            )));
        }
    }
    let table = config.mask_mode.table();
    let mut r = rng::rng(config.seed);
    let mut z = gaussian_latent(cond.grid(), codec.dim(), &mut r);
    let taus = schedule.strided(config.steps)?;
    for (i, &t) in taus.iter().enumerate() {
        let input = DenoiseInput {
            prompt,
            noisy: &z,
            first_frame: &cond,
            reference: reference.map(Clip::as_reference),
            timestep: t,
            use_concept: config.use_concept,
        };
        let eps = denoiser::denoise(params, &input, &table, config.path)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = taus.get(i + 1).map(|&p| schedule.alpha_bar(p)).unwrap_or(1.0);
        let mut x0 = z.clone();
        for (x, (zt, e)) in x0.data.iter_mut().zip(z.data.iter().zip(&eps.data)) {
            *x = (zt - (1.0 - ab).sqrt() * e) / ab.sqrt();
        }
        if config.clip {
            let mut px = codec.decode(&x0)?;
            px.clamp();
            x0 = codec.encode(&px)?;
        }
        if i + 1 == taus.len() {
            z = x0;
            break;
        }
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for (zt, x) in z.data.iter_mut().zip(&x0.data) {
            let n: f64 = r.sample(StandardNormal);
            *zt = c0 * x + ct * *zt + sigma * n;
        }
    }
    let mut out = codec.decode(&z)?;
    out.clamp();
    Ok(out)
}
