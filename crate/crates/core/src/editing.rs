//! Training-free edits expressed as attention hooks.
//!
//! Sampling runs a batch whose slot 0 is the reference and whose other slots
//! are edited. Cross-attention edits rewrite post-softmax maps of the edited
//! slots during the conditional pass; self-attention edits rewrite the edited
//! slots' queries/keys/values from the reference's, in both guidance passes.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, GenerationResult, SampleRequest};
use crate::model::MotionModel;
use crate::network::{AttentionHook, AttnKind, PassContext, Site};
use crate::text::PromptTokens;
use crate::{Error, Result, Scalar};

pub const DEFAULT_ERASE_FACTOR: f64 = 0.1;
pub const DEFAULT_STEPS_END: usize = 5;
pub const DEFAULT_CHUNK_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReweightMode {
    #[default]
    Additive,
    Multiplicative,
}

fn erase_factor() -> f64 {
    DEFAULT_ERASE_FACTOR
}
fn steps_end() -> usize {
    DEFAULT_STEPS_END
}
fn one() -> usize {
    1
}
fn chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}
fn seed_bar() -> u64 {
    1
}

/// One attention manipulation and its schedule. `word_index` counts words
/// without the leading BOS token, so it addresses map column `1 + word_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum EditDirective {
    Emphasize {
        word_index: usize,
        weight: f64,
        #[serde(default)]
        mode: ReweightMode,
    },
    Erase {
        word_index: usize,
        #[serde(default = "erase_factor")]
        factor: f64,
    },
    /// Copies the reference's cross maps into the edited run, whose prompt is
    /// `edited_prompt` (the base prompt when absent).
    Replace {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edited_prompt: Option<String>,
        #[serde(default = "steps_end")]
        steps_end: usize,
        #[serde(default = "one")]
        layer_begin: usize,
        /// Last attention layer, inclusive; defaults to the deepest one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layer_end: Option<usize>,
    },
    Shift {
        ratio: f64,
        #[serde(default = "steps_end")]
        steps_end: usize,
    },
    Example {
        #[serde(default = "chunk_size")]
        chunk_size: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "seed_bar")]
        seed_bar: u64,
        #[serde(default = "steps_end")]
        trigger_step: usize,
        /// Number of generated variants.
        #[serde(default = "one")]
        samples: usize,
    },
    /// The base prompt is the style run; `content_prompt` (the base prompt
    /// when absent) is the content run that gets edited.
    Style {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content_prompt: Option<String>,
        #[serde(default = "steps_end")]
        steps_end: usize,
    },
    /// Additive `frames × tokens` weights on the cross maps.
    Ground { mask: Vec<Vec<f64>> },
}

impl EditDirective {
    pub fn op(&self) -> &'static str {
        match self {
            EditDirective::Emphasize { .. } => "emphasize",
            EditDirective::Erase { .. } => "erase",
            EditDirective::Replace { .. } => "replace",
            EditDirective::Shift { .. } => "shift",
            EditDirective::Example { .. } => "example",
            EditDirective::Style { .. } => "style",
            EditDirective::Ground { .. } => "ground",
        }
    }

    /// Whether the directive reads another slot and so needs a reference run.
    pub fn needs_reference(&self) -> bool {
        matches!(
            self,
            EditDirective::Replace { .. }
                | EditDirective::Shift { .. }
                | EditDirective::Example { .. }
                | EditDirective::Style { .. }
        )
    }

    /// Batch size `run_edit` uses for this directive.
    pub fn batch_size(&self) -> usize {
        match self {
            EditDirective::Example { samples, .. } => 1 + samples,
            _ => 2,
        }
    }

    fn slot_prompt(&self) -> Option<&str> {
        match self {
            EditDirective::Replace { edited_prompt, .. } => edited_prompt.as_deref(),
            EditDirective::Style { content_prompt, .. } => content_prompt.as_deref(),
            _ => None,
        }
    }

    /// Range checks against the prompt the directive edits and the sampler
    /// geometry.
    pub fn validate(&self, tokens: &PromptTokens, frames: usize, sample_steps: usize, layers: usize) -> Result<()> {
        let column = |w: usize| -> Result<()> {
            if 1 + w >= tokens.len() {
                return Err(Error::range(format!(
                    "word index {w} outside prompt of {} words",
                    tokens.len() - 1
                )));
            }
            Ok(())
        };
        let steps = |s: usize, what: &str| -> Result<()> {
            if s > sample_steps {
                return Err(Error::range(format!(
                    "{what} {s} exceeds {sample_steps} sampling steps"
                )));
            }
            Ok(())
        };
        match self {
            EditDirective::Emphasize { word_index, weight, .. } => {
                column(*word_index)?;
                if !(-1.0..=1.0).contains(weight) {
                    return Err(Error::range(format!("emphasis weight {weight} outside [-1, 1]")));
                }
            }
            EditDirective::Erase { word_index, factor } => {
                column(*word_index)?;
                if !(factor.is_finite() && *factor >= 0.0) {
                    return Err(Error::range(format!("erase factor {factor} must be finite and ≥ 0")));
                }
            }
            EditDirective::Replace {
                steps_end,
                layer_begin,
                layer_end,
                ..
            } => {
                steps(*steps_end, "steps_end")?;
                let end = layer_end.unwrap_or(layers);
                if *layer_begin < 1 || *layer_begin > layers + 1 || end > layers {
                    return Err(Error::range(format!(
                        "layer range {layer_begin}..={end} outside 1..={layers}"
                    )));
                }
            }
            EditDirective::Shift { ratio, steps_end } => {
                steps(*steps_end, "steps_end")?;
                if !(0.0..=1.0).contains(ratio) {
                    return Err(Error::range(format!("shift ratio {ratio} outside [0, 1]")));
                }
            }
            EditDirective::Example {
                chunk_size,
                trigger_step,
                samples,
                ..
            } => {
                if *chunk_size < 1 || *chunk_size > frames {
                    return Err(Error::range(format!("chunk size {chunk_size} outside 1..={frames}")));
                }
                if *trigger_step < 1 {
                    return Err(Error::range("trigger_step is 1-based"));
                }
                steps(*trigger_step, "trigger_step")?;
                if *samples < 1 || *samples > 16 {
                    return Err(Error::range(format!("samples {samples} outside 1..=16")));
                }
            }
            EditDirective::Style { steps_end, .. } => steps(*steps_end, "steps_end")?,
            EditDirective::Ground { mask } => {
                if mask.len() != frames || mask.iter().any(|r| r.len() != tokens.len()) {
                    return Err(Error::range(format!(
                        "ground mask must be {frames}×{} (frames × tokens)",
                        tokens.len()
                    )));
                }
                if mask.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::range("ground mask entries must be finite and non-negative"));
                }
            }
        }
        Ok(())
    }
}

fn column_of<T: Scalar>(map: &Array2<T>, word_index: usize) -> Result<usize> {
    let c = 1 + word_index;
    if c >= map.ncols() {
        return Err(Error::range(format!(
            "column {c} outside map with {} columns",
            map.ncols()
        )));
    }
    Ok(c)
}

/// Adds `weight` to (or scales by it) the word's column; rows are not
/// renormalized.
pub fn reweight_cross<T: Scalar>(
    map: &Array2<T>,
    word_index: usize,
    weight: T,
    mode: ReweightMode,
) -> Result<Array2<T>> {
    let mut out = map.clone();
    reweight_in_place(&mut out, word_index, weight, mode)?;
    Ok(out)
}

fn reweight_in_place<T: Scalar>(map: &mut Array2<T>, word_index: usize, weight: T, mode: ReweightMode) -> Result<()> {
    let c = column_of(map, word_index)?;
    let mut col = map.column_mut(c);
    match mode {
        ReweightMode::Additive => col.mapv_inplace(|v| v + weight),
        ReweightMode::Multiplicative => col.mapv_inplace(|v| v * weight),
    }
    Ok(())
}

pub fn erase<T: Scalar>(map: &Array2<T>, word_index: usize, factor: T) -> Result<Array2<T>> {
    reweight_cross(map, word_index, factor, ReweightMode::Multiplicative)
}

/// The edited map becomes the reference map.
pub fn replace_cross_map<T: Scalar>(reference: &Array2<T>, edited: &Array2<T>) -> Result<Array2<T>> {
    if reference.dim() != edited.dim() {
        return Err(Error::range(format!(
            "reference map {:?} and edited map {:?} differ in shape",
            reference.dim(),
            edited.dim()
        )));
    }
    Ok(reference.clone())
}

/// Length of the trailing segment that moves to the front.
pub fn shift_back_len(rows: usize, ratio: f64) -> usize {
    (((rows as f64) * (1.0 - ratio)) + 1e-9).floor().min(rows as f64) as usize
}

/// `concat(x[T−b..], x[..T−b])` with `b = ⌊T·(1−ratio)⌋`.
pub fn shift_rows<T: Scalar>(x: &Array2<T>, ratio: f64) -> Array2<T> {
    let t = x.nrows();
    let back = shift_back_len(t, ratio);
    if back == 0 || back == t {
        return x.clone();
    }
    concatenate(Axis(0), &[x.slice(s![t - back.., ..]), x.slice(s![..t - back, ..])]).expect("row split")
}

/// Shift applied to a (Q, K, V) triple.
pub fn shift_qkv<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    ratio: f64,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    (shift_rows(q, ratio), shift_rows(k, ratio), shift_rows(v, ratio))
}

/// Deterministic chunk order for edited sample `sample` (1-based among the
/// generated variants).
pub fn chunk_permutation(chunks: usize, seed: u64, seed_bar: u64, sample: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..chunks).collect();
    let s = seed.wrapping_add((sample as u64).wrapping_mul(seed_bar));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

/// Splits rows into `⌈T/chunk⌉` chunks and reorders them.
pub fn shuffle_query_chunks<T: Scalar>(
    q: &Array2<T>,
    chunk: usize,
    seed: u64,
    seed_bar: u64,
    sample: usize,
) -> Result<Array2<T>> {
    let t = q.nrows();
    if chunk < 1 || chunk > t {
        return Err(Error::range(format!("chunk size {chunk} outside 1..={t}")));
    }
    let n = t.div_ceil(chunk);
    if n == 1 {
        return Ok(q.clone());
    }
    let order = chunk_permutation(n, seed, seed_bar, sample);
    let parts: Vec<_> = order
        .iter()
        .map(|&c| q.slice(s![c * chunk..((c + 1) * chunk).min(t), ..]))
        .collect();
    concatenate(Axis(0), &parts).map_err(|e| Error::invalid(e.to_string()))
}

/// The content run's queries become the style run's.
pub fn style_transfer_queries<T: Scalar>(style_q: &Array2<T>, content_q: &Array2<T>) -> Result<Array2<T>> {
    replace_cross_map(style_q, content_q)
}

/// Adds a non-negative per-frame word weight mask.
pub fn ground<T: Scalar>(map: &Array2<T>, mask: &Array2<T>) -> Result<Array2<T>> {
    if map.dim() != mask.dim() {
        return Err(Error::range(format!(
            "mask {:?} does not match map {:?}",
            mask.dim(),
            map.dim()
        )));
    }
    if mask.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
        return Err(Error::range("mask entries must be finite and non-negative"));
    }
    Ok(map + mask)
}

/// Ground mask resampled to a layer's row count: zero rows for frame
/// padding, pairwise averages at half resolution.
fn mask_for_rows(mask: &Array2<f32>, rows: usize, full: usize) -> Array2<f32> {
    let mut padded = Array2::<f32>::zeros((full, mask.ncols()));
    let n = mask.nrows().min(full);
    padded.slice_mut(s![..n, ..]).assign(&mask.slice(s![..n, ..]));
    let mut cur = padded;
    while cur.nrows() > rows && cur.nrows().is_multiple_of(2) {
        let half = cur.nrows() / 2;
        cur = Array2::from_shape_fn((half, cur.ncols()), |(i, j)| {
            (cur[[2 * i, j]] + cur[[2 * i + 1, j]]) * 0.5
        });
    }
    cur
}

/// Reference `(Q, K, V)` of one self-attention layer.
type Qkv = (Array2<f32>, Array2<f32>, Array2<f32>);

/// Hook realizing a list of directives over a sampled batch.
pub struct EditHook {
    directives: Vec<EditDirective>,
    masks: Vec<Option<Array2<f32>>>,
    frames: usize,
    batch: usize,
    layers: usize,
    ctx: Option<PassContext>,
    self_cache: HashMap<(bool, usize), Qkv>,
    cross_cache: HashMap<(bool, usize, usize), Array2<f32>>,
}

impl EditHook {
    pub fn new(directives: Vec<EditDirective>, frames: usize, batch: usize, layers: usize) -> Self {
        let masks = directives
            .iter()
            .map(|d| match d {
                EditDirective::Ground { mask } => Some(Array2::from_shape_fn((mask.len(), mask[0].len()), |(i, j)| {
                    mask[i][j] as f32
                })),
                _ => None,
            })
            .collect();
        Self {
            directives,
            masks,
            frames,
            batch,
            layers,
            ctx: None,
            self_cache: HashMap::new(),
            cross_cache: HashMap::new(),
        }
    }

    fn step(&self) -> usize {
        self.ctx.map(|c| c.step).unwrap_or(0)
    }

    fn is_target(&self, sample: usize) -> bool {
        if self.batch == 1 {
            sample == 0
        } else {
            sample >= 1
        }
    }

    fn replace_active(&self, layer: usize) -> bool {
        let step = self.step();
        self.directives.iter().any(|d| match d {
            EditDirective::Replace {
                steps_end,
                layer_begin,
                layer_end,
                ..
            } => step <= *steps_end && layer >= *layer_begin && layer <= layer_end.unwrap_or(self.layers),
            _ => false,
        })
    }

    fn self_edit_active(&self) -> bool {
        let step = self.step();
        self.directives.iter().any(|d| match d {
            EditDirective::Shift { steps_end, .. } | EditDirective::Style { steps_end, .. } => step <= *steps_end,
            EditDirective::Example { trigger_step, .. } => step == *trigger_step,
            _ => false,
        })
    }
}

impl AttentionHook<f32> for EditHook {
    fn is_active(&self) -> bool {
        !self.directives.is_empty()
    }

    fn begin_pass(&mut self, ctx: &PassContext) {
        if ctx.sample == 0 {
            let cond = ctx.conditional;
            self.self_cache.retain(|k, _| k.0 != cond);
            self.cross_cache.retain(|k, _| k.0 != cond);
        }
        self.ctx = Some(*ctx);
    }

    fn qkv(&mut self, site: Site, q: &mut Array2<f32>, k: &mut Array2<f32>, v: &mut Array2<f32>) {
        let Some(ctx) = self.ctx else { return };
        if site.kind != AttnKind::SelfAttn || !self.self_edit_active() {
            return;
        }
        let key = (ctx.conditional, site.layer);
        if ctx.sample == 0 {
            self.self_cache.insert(key, (q.clone(), k.clone(), v.clone()));
            return;
        }
        let Some((rq, rk, rv)) = self.self_cache.get(&key) else {
            return;
        };
        let step = ctx.step;
        for d in &self.directives {
            match d {
                EditDirective::Shift { ratio, steps_end } if step <= *steps_end => {
                    *q = shift_rows(rq, *ratio);
                    *k = shift_rows(rk, *ratio);
                    *v = shift_rows(rv, *ratio);
                }
                EditDirective::Style { steps_end, .. } if step <= *steps_end => {
                    *q = rq.clone();
                }
                EditDirective::Example {
                    chunk_size,
                    seed,
                    seed_bar,
                    trigger_step,
                    ..
                } if step == *trigger_step => {
                    let rows = rq.nrows();
                    let level_chunk = (chunk_size * rows).div_ceil(self.frames).clamp(1, rows);
                    if let Ok(shuffled) = shuffle_query_chunks(rq, level_chunk, *seed, *seed_bar, ctx.sample) {
                        *q = shuffled;
                    }
                }
                _ => {}
            }
        }
    }

    fn map(&mut self, site: Site, head: usize, map: &mut Array2<f32>) {
        let Some(ctx) = self.ctx else { return };
        if site.kind != AttnKind::Cross || !ctx.conditional {
            return;
        }
        let replace = self.replace_active(site.layer);
        if ctx.sample == 0 && replace && self.batch > 1 {
            self.cross_cache.insert((true, site.layer, head), map.clone());
        }
        if !self.is_target(ctx.sample) {
            return;
        }
        for (d, mask) in self.directives.iter().zip(&self.masks) {
            match d {
                EditDirective::Emphasize {
                    word_index,
                    weight,
                    mode,
                } => {
                    let _ = reweight_in_place(map, *word_index, *weight as f32, *mode);
                }
                EditDirective::Erase { word_index, factor } => {
                    let _ = reweight_in_place(map, *word_index, *factor as f32, ReweightMode::Multiplicative);
                }
                EditDirective::Replace { .. } if replace => {
                    if let Some(r) = self.cross_cache.get(&(true, site.layer, head)) {
                        if r.dim() == map.dim() {
                            map.assign(r);
                        }
                    }
                }
                EditDirective::Ground { .. } => {
                    if let Some(m) = mask {
                        let m = mask_for_rows(m, map.nrows(), ctx.frames);
                        if m.dim() == map.dim() {
                            *map += &m;
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

/// Batch layout and hook derived from a directive list.
pub struct EditPlan {
    pub prompts: Vec<String>,
    pub tokens: Vec<PromptTokens>,
    pub hook: EditHook,
}

/// Validates directives against the request and lays out the batch.
pub fn plan(
    model: &MotionModel,
    request: &SampleRequest,
    directives: &[EditDirective],
    batch: usize,
) -> Result<EditPlan> {
    request.config.validate()?;
    if batch < 1 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    if batch > 17 {
        return Err(Error::range("batch larger than 17 slots"));
    }
    let layers = model.attention_layers();
    let mut edited_prompt: Option<&str> = None;
    for d in directives {
        if d.needs_reference() && batch < 2 {
            return Err(Error::invalid(format!("{} needs a reference run (batch ≥ 2)", d.op())));
        }
        if matches!(d, EditDirective::Replace { .. } | EditDirective::Style { .. }) && batch != 2 {
            return Err(Error::invalid(format!("{} runs with a batch of exactly 2", d.op())));
        }
        if let Some(p) = d.slot_prompt() {
            match edited_prompt {
                Some(prev) if prev != p => return Err(Error::invalid("directives disagree on the edited prompt")),
                _ => edited_prompt = Some(p),
            }
        }
    }
    let base = model.tokenize(&request.prompt)?;
    let edited_text = edited_prompt.unwrap_or(&request.prompt).to_string();
    let edited = model.tokenize(&edited_text)?;
    for d in directives {
        if matches!(d, EditDirective::Replace { .. }) && edited.len() != base.len() {
            return Err(Error::range(format!(
                "replacement prompt has {} tokens, reference has {}",
                edited.len(),
                base.len()
            )));
        }
        let target = if batch == 1 { &base } else { &edited };
        d.validate(target, request.frames, request.config.sample_steps, layers)?;
    }
    let mut prompts = vec![request.prompt.clone()];
    let mut tokens = vec![base];
    for _ in 1..batch {
        prompts.push(edited_text.clone());
        tokens.push(edited.clone());
    }
    Ok(EditPlan {
        prompts,
        tokens,
        hook: EditHook::new(directives.to_vec(), request.frames, batch, layers),
    })
}

/// Per-frame and per-column differences between edited and reference runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    /// L2 norm of the feature difference per frame.
    pub frame_deltas: Vec<f64>,
    pub max_abs_feature_delta: f64,
    /// Mean cross-attention mass per column (edited − reference), averaged
    /// over every recorded layer, step, head and frame.
    pub column_mass_deltas: Vec<f64>,
}

impl DiffReport {
    pub fn is_zero(&self) -> bool {
        self.max_abs_feature_delta == 0.0 && self.column_mass_deltas.iter().all(|d| *d == 0.0)
    }
}

/// Mean mass per column over all recorded cross maps (effective maps).
pub fn column_mass(result: &GenerationResult) -> Vec<f64> {
    let cross: Vec<_> = result.records.iter().filter(|r| r.kind == AttnKind::Cross).collect();
    let Some(first) = cross.first() else { return Vec::new() };
    let cols = first.map.ncols();
    let mut acc = vec![0.0f64; cols];
    let mut rows = 0usize;
    for r in &cross {
        let m = r.effective();
        for row in m.rows() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += *v as f64;
            }
        }
        rows += m.nrows();
    }
    acc.iter().map(|a| a / rows.max(1) as f64).collect()
}

pub fn diff_report(reference: &GenerationResult, edited: &GenerationResult) -> DiffReport {
    let (a, b) = (&reference.motion.features, &edited.motion.features);
    let frame_deltas: Vec<f64> = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| ((q - p) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max_abs_feature_delta = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| ((q - p) as f64).abs())
        .fold(0.0, f64::max);
    let (ma, mb) = (column_mass(reference), column_mass(edited));
    let column_mass_deltas = ma.iter().zip(&mb).map(|(x, y)| y - x).collect();
    DiffReport {
        frame_deltas,
        max_abs_feature_delta,
        column_mass_deltas,
    }
}

/// Reference and edited runs of one directive.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub directive: EditDirective,
    pub reference: GenerationResult,
    pub edited: GenerationResult,
    /// Further generated variants (example-based generation with more than
    /// one sample).
    pub variants: Vec<GenerationResult>,
    pub diff: DiffReport,
}

pub fn run_edit(model: &MotionModel, request: &SampleRequest, directive: &EditDirective) -> Result<EditSession> {
    let mut results = ddim_sample(model, request, std::slice::from_ref(directive), directive.batch_size())?.into_iter();
    let reference = results.next().expect("reference slot");
    let edited = results.next().expect("edited slot");
    let diff = diff_report(&reference, &edited);
    Ok(EditSession {
        directive: directive.clone(),
        reference,
        edited,
        variants: results.collect(),
        diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_map() -> Array2<f32> {
        Array2::from_shape_fn((6, 4), |(i, j)| ((i * 4 + j) as f32 * 0.37).sin().abs() * 0.25)
    }

    #[test]
    fn additive_reweight_is_exact() {
        let m = sample_map();
        for w in [-0.5f32, -0.3, 0.0, 0.3, 0.5] {
            let e = reweight_cross(&m, 1, w, ReweightMode::Additive).unwrap();
            for i in 0..6 {
                assert_eq!(e[[i, 2]], m[[i, 2]] + w);
                for j in [0, 1, 3] {
                    assert_eq!(e[[i, j]], m[[i, j]]);
                }
            }
        }
        assert_eq!(reweight_cross(&m, 0, 0.0, ReweightMode::Additive).unwrap(), m);
    }

    #[test]
    fn erase_scales_column() {
        let m = sample_map();
        assert_eq!(erase(&m, 2, 1.0).unwrap(), m);
        let z = erase(&m, 2, 0.0).unwrap();
        assert!(z.column(3).iter().all(|v| *v == 0.0));
        let t = erase(&m, 2, 0.1).unwrap();
        for i in 0..6 {
            assert_eq!(t[[i, 3]], m[[i, 3]] * 0.1);
        }
        assert!(erase(&m, 3, 0.1).is_err());
    }

    #[test]
    fn ground_reduces_to_additive_reweight() {
        let m = sample_map();
        let mut mask = Array2::zeros(m.dim());
        mask.column_mut(2).fill(0.3f32);
        assert_eq!(
            ground(&m, &mask).unwrap(),
            reweight_cross(&m, 1, 0.3, ReweightMode::Additive).unwrap()
        );
        assert_eq!(ground(&m, &Array2::zeros(m.dim())).unwrap(), m);
        assert!(ground(&m, &Array2::zeros((2, 2))).is_err());
        assert!(ground(&m, &(-mask)).is_err());
    }

    #[test]
    fn shift_matches_segment_definition() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * 10 + j) as f64);
        assert_eq!(shift_rows(&x, 0.0), x);
        assert_eq!(shift_rows(&x, 1.0), x);
        // back segment ⌊10·0.7⌋ = 7 rows moves to the front.
        let y = shift_rows(&x, 0.3);
        assert_eq!(y[[0, 0]], 30.0);
        assert_eq!(y[[7, 0]], 0.0);
        // ⌊10·(1−0.25)⌋ = 7: the remainder frame stays with the front segment.
        assert_eq!(shift_back_len(10, 0.25), 7);
        assert_eq!(shift_back_len(10, 0.5), 5);
    }

    #[test]
    fn single_chunk_is_identity() {
        let q = Array2::from_shape_fn((12, 3), |(i, j)| (i * 3 + j) as f32);
        assert_eq!(shuffle_query_chunks(&q, 12, 9, 0, 1).unwrap(), q);
        assert!(shuffle_query_chunks(&q, 13, 9, 0, 1).is_err());
        let a = shuffle_query_chunks(&q, 4, 9, 0, 1).unwrap();
        let b = shuffle_query_chunks(&q, 4, 9, 0, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn directive_json_round_trip_and_defaults() {
        let d: EditDirective = serde_json::from_str(r#"{"op":"erase","word_index":2}"#).unwrap();
        assert_eq!(
            d,
            EditDirective::Erase {
                word_index: 2,
                factor: 0.1
            }
        );
        let d: EditDirective = serde_json::from_str(r#"{"op":"replace","edited_prompt":"a man walks."}"#).unwrap();
        assert_eq!(
            d,
            EditDirective::Replace {
                edited_prompt: Some("a man walks.".into()),
                steps_end: 5,
                layer_begin: 1,
                layer_end: None
            }
        );
        let all = vec![
            EditDirective::Emphasize {
                word_index: 1,
                weight: 0.3,
                mode: ReweightMode::Multiplicative,
            },
            d,
            EditDirective::Shift {
                ratio: 0.5,
                steps_end: 10,
            },
            EditDirective::Example {
                chunk_size: 20,
                seed: 1,
                seed_bar: 3,
                trigger_step: 5,
                samples: 2,
            },
            EditDirective::Style {
                content_prompt: Some("a man walks.".into()),
                steps_end: 5,
            },
            EditDirective::Ground {
                mask: vec![vec![0.0, 0.5]; 3],
            },
        ];
        for d in all {
            let s = serde_json::to_string(&d).unwrap();
            let back: EditDirective = serde_json::from_str(&s).unwrap();
            assert_eq!(back, d);
            assert_eq!(serde_json::to_string(&back).unwrap(), s);
        }
        assert!(serde_json::from_str::<EditDirective>(r#"{"op":"erase","word_index":1,"bogus":1}"#).is_err());
        assert!(serde_json::from_str::<EditDirective>(r#"{"op":"teleport"}"#).is_err());
    }

    #[test]
    fn mask_resampling_pools_pairs_and_pads() {
        let mask = Array2::from_shape_fn((6, 2), |(i, j)| (i + j) as f32);
        let full = mask_for_rows(&mask, 8, 8);
        assert_eq!(full.nrows(), 8);
        assert_eq!(full[[6, 0]], 0.0);
        let half = mask_for_rows(&mask, 4, 8);
        assert_eq!(half[[0, 0]], 0.5);
        assert_eq!(half[[3, 1]], 0.0);
    }

    proptest! {
        #[test]
        fn shift_is_a_row_permutation(t in 1usize..40, r in 0.0f64..=1.0) {
            let x = Array2::from_shape_fn((t, 2), |(i, j)| (i * 2 + j) as f64);
            let y = shift_rows(&x, r);
            let mut a: Vec<u64> = x.column(0).iter().map(|v| *v as u64).collect();
            let mut b: Vec<u64> = y.column(0).iter().map(|v| *v as u64).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn shift_then_complement_restores(t in 1usize..40, num in 0usize..40) {
            // Exact inverse whenever the split point lands on a frame.
            let front = num % (t + 1);
            let r = front as f64 / t as f64;
            let x = Array2::from_shape_fn((t, 3), |(i, j)| (i * 3 + j) as f32);
            let (q, k, v) = shift_qkv(&x, &x, &x, r);
            let (q2, k2, v2) = shift_qkv(&q, &k, &v, 1.0 - r);
            prop_assert_eq!(&q2, &x);
            prop_assert_eq!(&k2, &x);
            prop_assert_eq!(&v2, &x);
        }

        #[test]
        fn chunk_shuffle_is_a_permutation(t in 1usize..50, c in 1usize..50, seed in 0u64..1000, i in 1usize..8) {
            let c = c.min(t);
            let q = Array2::from_shape_fn((t, 1), |(r, _)| r as f32);
            let y = shuffle_query_chunks(&q, c, seed, 7, i).unwrap();
            let mut v: Vec<u32> = y.iter().map(|v| *v as u32).collect();
            v.sort_unstable();
            prop_assert_eq!(v, (0..t as u32).collect::<Vec<_>>());
        }

        #[test]
        fn additive_edit_difference_equals_weight(w in -1.0f32..=1.0, seed in 0u64..100) {
            let m = Array2::from_shape_fn((5, 4), |(i, j)| (((i * 4 + j) as u64 + seed) as f32 * 0.713).sin().abs());
            let e = reweight_cross(&m, 2, w, ReweightMode::Additive).unwrap();
            for i in 0..5 {
                prop_assert_eq!(e[[i, 3]], m[[i, 3]] + w);
            }
        }
    }
}
