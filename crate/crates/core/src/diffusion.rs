//! Forward noising, the ε-prediction training loop and DDIM sampling with
//! classifier-free guidance.

use std::time::Instant;

use ndarray::{Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSample, MotionSequence};
use crate::editing::{self, EditDirective};
use crate::model::{Denoiser, MotionModel};
use crate::network::{AttentionHook, AttentionRecord, AttentionRecorder, NoHooks, Params, PassContext, Site};
use crate::persistence::OptimizerState;
use crate::text::PromptTokens;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub sample_steps: usize,
    pub cfg_weight: f64,
    pub cond_mask_prob: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            sample_steps: 10,
            cfg_weight: 2.5,
            cond_mask_prob: 0.1,
            beta_start: 1e-4,
            beta_end: 2e-2,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps < 2 {
            return Err(Error::invalid("train_steps must be at least 2"));
        }
        if self.sample_steps < 1 || self.sample_steps > self.train_steps {
            return Err(Error::range(format!(
                "sample_steps {} outside 1..={}",
                self.sample_steps, self.train_steps
            )));
        }
        if !(self.cfg_weight.is_finite() && self.cfg_weight >= 0.0) {
            return Err(Error::range(format!(
                "cfg weight {} must be finite and ≥ 0",
                self.cfg_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.cond_mask_prob) {
            return Err(Error::range("cond_mask_prob outside [0, 1]"));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::range("beta schedule must satisfy 0 < start ≤ end < 1"));
        }
        Ok(())
    }
}

/// Linear β schedule and its cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let n = config.train_steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn q_sample(&self, x0: &Array2<f32>, t: usize, eps: &Array2<f32>) -> Result<Array2<f32>> {
        if t >= self.len() {
            return Err(Error::range(format!("timestep {t} outside [0, {})", self.len())));
        }
        if x0.dim() != eps.dim() {
            return Err(Error::invalid("x0 and eps shapes differ"));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
    }

    /// Uniform-stride DDIM timesteps, noisiest first, ending at 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        let stride = self.len() / steps;
        (0..steps).rev().map(|i| i * stride).collect()
    }
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_loss(pred: &Array2<f32>, eps: &Array2<f32>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(eps)
        .map(|(&p, &e)| ((p - e) as f64).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 2e-4,
            lr_decay: 0.9,
            lr_decay_every: 5000,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        let every = self.lr_decay_every.max(1);
        self.lr * self.lr_decay.powi((step / every) as i32)
    }
}

/// AdamW with decoupled weight decay applied to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(params: &Denoiser<f32>) -> Self {
        Self {
            state: OptimizerState {
                first_moment: params.zeros_like(),
                second_moment: params.zeros_like(),
            },
        }
    }

    /// `t` is the 1-based update count used for bias correction.
    pub fn update(&mut self, params: &mut Denoiser<f32>, grad: &Denoiser<f32>, cfg: &TrainConfig, lr: f64, t: u64) {
        let mut grads: Vec<ArrayD<f32>> = Vec::new();
        grad.visit("", &mut |_, a| grads.push(a.to_owned()));
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for g in &mut grads {
                    g.mapv_inplace(|v| v * s);
                }
            }
        }
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let mut i = 0;
        self.state.first_moment.visit_mut("", &mut |_, mut m| {
            m.zip_mut_with(&grads[i], |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            i += 1;
        });
        i = 0;
        self.state.second_moment.visit_mut("", &mut |_, mut v| {
            v.zip_mut_with(&grads[i], |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            i += 1;
        });
        let mut ms = Vec::new();
        self.state.first_moment.visit("", &mut |_, a| ms.push(a.to_owned()));
        let mut vs = Vec::new();
        self.state.second_moment.visit("", &mut |_, a| vs.push(a.to_owned()));
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = cfg.adam_eps as f32;
        let decay = (lr * cfg.weight_decay) as f32;
        i = 0;
        params.visit_mut("", &mut |_, mut p| {
            let wd = if p.ndim() >= 2 { decay } else { 0.0 };
            ndarray::Zip::from(&mut p)
                .and(&ms[i])
                .and(&vs[i])
                .for_each(|p, &m, &v| {
                    *p -= step * m / (v.sqrt() / c2s + eps) + wd * *p;
                });
            i += 1;
        });
    }
}

/// One JSON-lines progress entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainSummary {
    /// Mean of the first and last `window` recorded losses.
    pub fn window_means(&self, window: usize) -> (f64, f64) {
        let n = self.losses.len();
        let w = window.min(n).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..w.min(n)]),
            mean(&self.losses[n.saturating_sub(w)..]),
        )
    }
}

struct TrainItem {
    tokens: PromptTokens,
    x0: Array2<f32>,
}

/// Single-threaded trainer over a normalized corpus of equal-length clips.
pub struct Trainer {
    pub model: MotionModel,
    pub config: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub step: u64,
    schedule: NoiseSchedule,
    items: Vec<TrainItem>,
    frames: usize,
    optimizer: AdamW,
    grad: Denoiser<f32>,
    rng: ChaCha8Rng,
    null: PromptTokens,
}

impl Trainer {
    /// `corpus` must already be normalized with `model.stats`.
    pub fn new(
        model: MotionModel,
        corpus: &[CorpusSample],
        config: TrainConfig,
        diffusion: DiffusionConfig,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::data("training corpus is empty"));
        }
        if config.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let frames = corpus[0].motion.frames();
        let mut items = Vec::with_capacity(corpus.len());
        for s in corpus {
            if s.motion.frames() != frames {
                return Err(Error::data("training clips must share one frame count"));
            }
            s.motion.validate()?;
            items.push(TrainItem {
                tokens: model.vocab.tokenize(&s.prompt)?,
                x0: s.motion.features.clone(),
            });
        }
        let schedule = NoiseSchedule::new(&diffusion)?;
        Ok(Self {
            optimizer: AdamW::new(&model.denoiser),
            grad: model.denoiser.zeros_like(),
            null: model.vocab.null_tokens(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            diffusion,
            step: 0,
            schedule,
            items,
            frames,
        })
    }

    /// Continues from a saved step count and optimizer moments.
    pub fn resume(&mut self, step: u64, optimizer: Option<OptimizerState>) {
        self.step = step;
        if let Some(state) = optimizer {
            self.optimizer.state = state;
        }
        // Distinct noise stream per resumed segment.
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.optimizer.state
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn train_step(&mut self) -> Result<f64> {
        let b = self.config.batch_size;
        let f = self.frames;
        let d = self.model.config.unet.motion_dim;
        let mut x = Array2::<f32>::zeros((b * f, d));
        let mut eps = Array2::<f32>::zeros((b * f, d));
        let mut timesteps = Vec::with_capacity(b);
        let mut picks = Vec::with_capacity(b);
        for i in 0..b {
            let item = self.rng.random_range(0..self.items.len());
            let t = self.rng.random_range(0..self.schedule.len());
            let drop = self.rng.random::<f64>() < self.diffusion.cond_mask_prob;
            let noise = Array2::from_shape_simple_fn((f, d), || self.rng.sample::<f32, _>(StandardNormal));
            let xt = self.schedule.q_sample(&self.items[item].x0, t, &noise)?;
            x.slice_mut(ndarray::s![i * f..(i + 1) * f, ..]).assign(&xt);
            eps.slice_mut(ndarray::s![i * f..(i + 1) * f, ..]).assign(&noise);
            timesteps.push(t);
            picks.push((item, drop));
        }
        let tokens: Vec<&PromptTokens> = picks
            .iter()
            .map(|&(i, drop)| if drop { &self.null } else { &self.items[i].tokens })
            .collect();
        let (pred, cache) = self.model.denoiser.forward(&x, f, &timesteps, &tokens, &mut NoHooks)?;
        let loss = epsilon_loss(&pred, &eps);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at step {} (lr {:.3e})",
                self.step + 1,
                self.config.lr_at(self.step)
            )));
        }
        let scale = 2.0 / pred.len() as f32;
        let gy = (&pred - &eps) * scale;
        self.grad.fill_zero();
        self.model.denoiser.backward(&cache, &tokens, &gy, &mut self.grad);
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        self.optimizer
            .update(&mut self.model.denoiser, &self.grad, &self.config, lr, self.step);
        Ok(loss)
    }

    /// Runs `steps` updates, reporting every `log_every` steps (and the last).
    pub fn run(&mut self, steps: u64, mut on_event: impl FnMut(&TrainEvent)) -> Result<TrainSummary> {
        let start = Instant::now();
        let mut losses = Vec::with_capacity(steps as usize);
        for i in 0..steps {
            let loss = self.train_step()?;
            losses.push(loss);
            let every = self.config.log_every.max(1);
            if (i + 1) % every == 0 || i + 1 == steps {
                on_event(&TrainEvent {
                    step: self.step,
                    loss,
                    lr: self.config.lr_at(self.step - 1),
                    elapsed_ms: start.elapsed().as_millis() as u64,
                });
            }
        }
        Ok(TrainSummary {
            steps,
            losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Output of one sampled batch slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt: String,
    pub tokens: PromptTokens,
    pub seed: u64,
    pub frames: usize,
    pub cfg_weight: f64,
    pub directives: Vec<EditDirective>,
    /// Denormalized motion features.
    #[serde(skip, default = "empty_motion")]
    pub motion: MotionSequence,
    /// Conditional-pass maps of every attention layer, step and head.
    #[serde(skip)]
    pub records: Vec<AttentionRecord>,
}

fn empty_motion() -> MotionSequence {
    MotionSequence {
        fps: crate::corpus::FPS,
        features: Array2::zeros((0, crate::corpus::FEATURE_DIM)),
    }
}

impl GenerationResult {
    pub fn record(
        &self,
        kind: crate::network::AttnKind,
        layer: usize,
        step: usize,
        head: usize,
    ) -> Option<&AttentionRecord> {
        self.records
            .iter()
            .find(|r| r.kind == kind && r.layer_index == layer && r.denoise_step == step && r.head == head)
    }
}

/// Per-pass composition of the edit hooks and the slot's recorder: the
/// recorder sees each map before and after the edits.
struct PassHook<'a> {
    edits: &'a mut dyn AttentionHook<f32>,
    recorder: Option<&'a mut AttentionRecorder>,
}

impl AttentionHook<f32> for PassHook<'_> {
    fn is_active(&self) -> bool {
        self.recorder.is_some() || self.edits.is_active()
    }

    fn qkv(&mut self, site: Site, q: &mut Array2<f32>, k: &mut Array2<f32>, v: &mut Array2<f32>) {
        self.edits.qkv(site, q, k, v);
    }

    fn map(&mut self, site: Site, head: usize, map: &mut Array2<f32>) {
        if let Some(r) = self.recorder.as_deref_mut() {
            r.capture(site, head, map);
        }
        self.edits.map(site, head, map);
        if let Some(r) = self.recorder.as_deref_mut() {
            r.capture_edit(map);
        }
    }
}

/// Normalized-space samples and records for each batch slot.
pub struct SlotOutput {
    pub normalized: Array2<f32>,
    pub records: Vec<AttentionRecord>,
}

/// DDIM (η = 0) with classifier-free guidance over `prompts.len()` slots that
/// share one initial noise. Per step the passes run in the order: all
/// conditional slots, then all null slots, so hooks in later slots can read
/// what slot 0 cached during the same step and pass kind.
pub fn sample_slots(
    model: &MotionModel,
    prompts: &[PromptTokens],
    frames: usize,
    seed: u64,
    config: &DiffusionConfig,
    hook: &mut dyn AttentionHook<f32>,
    record: bool,
) -> Result<Vec<SlotOutput>> {
    if prompts.is_empty() {
        return Err(Error::invalid("at least one batch slot required"));
    }
    if !(crate::network::MIN_FRAMES..=crate::corpus::MAX_FRAMES).contains(&frames) {
        return Err(Error::range(format!(
            "frame count {frames} outside {}..={}",
            crate::network::MIN_FRAMES,
            crate::corpus::MAX_FRAMES
        )));
    }
    let schedule = NoiseSchedule::new(config)?;
    let d = model.config.unet.motion_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_simple_fn((frames, d), || rng.sample::<f32, _>(StandardNormal));
    let mut xs = vec![noise; prompts.len()];
    let mut recorders: Vec<AttentionRecorder> = prompts.iter().map(|_| AttentionRecorder::new()).collect();
    let null = model.vocab.null_tokens();
    let padded = crate::network::padded_frames(frames);
    let w = config.cfg_weight as f32;
    let timesteps = schedule.ddim_timesteps(config.sample_steps);
    for (i, &t) in timesteps.iter().enumerate() {
        let step = i + 1;
        let mut eps_cond = Vec::with_capacity(xs.len());
        for (b, x) in xs.iter().enumerate() {
            hook.begin_pass(&PassContext {
                step,
                sample: b,
                conditional: true,
                frames: padded,
            });
            recorders[b].set_pass(step, record);
            let mut pass = PassHook {
                edits: &mut *hook,
                recorder: record.then_some(&mut recorders[b]),
            };
            eps_cond.push(model.denoiser.predict(x, t, &prompts[b], &mut pass)?);
        }
        for b in 0..xs.len() {
            hook.begin_pass(&PassContext {
                step,
                sample: b,
                conditional: false,
                frames: padded,
            });
            let mut pass = PassHook {
                edits: &mut *hook,
                recorder: None,
            };
            let eps_null = model.denoiser.predict(&xs[b], t, &null, &mut pass)?;
            let eps = if w == 0.0 {
                eps_null
            } else {
                ndarray::Zip::from(&eps_null)
                    .and(&eps_cond[b])
                    .map_collect(|&n, &c| n + w * (c - n))
            };
            let ab = schedule.alpha_bar(t);
            let ab_prev = timesteps.get(i + 1).map(|&tp| schedule.alpha_bar(tp)).unwrap_or(1.0);
            let x = &xs[b];
            let (sa, s1a) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let (sp, s1p) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
            let next = ndarray::Zip::from(x).and(&eps).map_collect(|&x, &e| {
                let x0 = (x - s1a * e) / sa;
                sp * x0 + s1p * e
            });
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sampler diverged at step {step}")));
            }
            xs[b] = next;
        }
    }
    Ok(xs
        .into_iter()
        .zip(recorders)
        .map(|(normalized, r)| SlotOutput {
            normalized,
            records: r.into_records(),
        })
        .collect())
}

/// Everything a generation needs besides the directives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: String,
    pub frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub config: DiffusionConfig,
}

impl SampleRequest {
    pub fn new(prompt: impl Into<String>, frames: usize, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            frames,
            seed,
            config: DiffusionConfig::default(),
        }
    }

    pub fn with_cfg_weight(mut self, w: f64) -> Self {
        self.config.cfg_weight = w;
        self
    }
}

/// Samples `batch` slots with the directives' hooks installed. Slot 0 is the
/// reference; the remaining slots are edited.
pub fn ddim_sample(
    model: &MotionModel,
    request: &SampleRequest,
    directives: &[EditDirective],
    batch: usize,
) -> Result<Vec<GenerationResult>> {
    let plan = editing::plan(model, request, directives, batch)?;
    let mut hook = plan.hook;
    let outputs = sample_slots(
        model,
        &plan.tokens,
        request.frames,
        request.seed,
        &request.config,
        &mut hook,
        true,
    )?;
    outputs
        .into_iter()
        .zip(plan.tokens)
        .zip(plan.prompts)
        .enumerate()
        .map(|(b, ((out, tokens), prompt))| {
            let motion = MotionSequence::new(model.stats.denormalize(&out.normalized))?;
            Ok(GenerationResult {
                prompt,
                tokens,
                seed: request.seed,
                frames: request.frames,
                cfg_weight: request.config.cfg_weight,
                directives: if b == 0 { Vec::new() } else { directives.to_vec() },
                motion,
                records: out.records,
            })
        })
        .collect()
}

/// Plain single-prompt generation.
pub fn generate(model: &MotionModel, request: &SampleRequest) -> Result<GenerationResult> {
    let mut out = ddim_sample(model, request, &[], 1)?;
    Ok(out.remove(0))
}

/// Stacks per-head records of one (kind, layer, step) into `H × N × M`.
pub fn stack_heads(records: &[&AttentionRecord]) -> Result<ArrayD<f32>> {
    let views: Vec<_> = records.iter().map(|r| r.effective().view()).collect();
    ndarray::stack(Axis(0), &views)
        .map(|a| a.into_dyn())
        .map_err(|e| Error::invalid(e.to_string()))
}
