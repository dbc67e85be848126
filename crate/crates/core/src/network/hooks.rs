use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Which attention sublayer a record or hook call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    #[serde(rename = "cross")]
    Cross,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::Cross => "cross",
        }
    }
}

impl std::str::FromStr for AttnKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "self" => Ok(AttnKind::SelfAttn),
            "cross" => Ok(AttnKind::Cross),
            other => Err(crate::Error::invalid(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Location of an attention sublayer inside the network. `layer` is 1-based
/// over all attention sublayers in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    pub layer: usize,
    pub kind: AttnKind,
}

/// Announced by the sampler before every denoiser forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassContext {
    /// 1-based denoising step; step 1 is the noisiest.
    pub step: usize,
    /// Batch slot; slot 0 is the reference run.
    pub sample: usize,
    /// `false` for the null-condition pass of classifier-free guidance.
    pub conditional: bool,
    /// Padded full-resolution frame count of this pass.
    pub frames: usize,
}

/// Callbacks fired inside every attention sublayer.
///
/// `qkv` sees the projected queries, keys and values of one sample before the
/// similarity is formed (keys/values are text rows for cross-attention); `map`
/// sees one head's attention map right after the softmax and may rewrite it.
pub trait AttentionHook<T: Scalar> {
    /// Inactive hooks let the network skip per-sample copies entirely.
    fn is_active(&self) -> bool {
        true
    }

    fn begin_pass(&mut self, _ctx: &PassContext) {}

    fn qkv(&mut self, _site: Site, _q: &mut Array2<T>, _k: &mut Array2<T>, _v: &mut Array2<T>) {}

    fn map(&mut self, _site: Site, _head: usize, _map: &mut Array2<T>) {}
}

/// Hook that does nothing; used for training and plain forward passes.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHooks;

impl<T: Scalar> AttentionHook<T> for NoHooks {
    fn is_active(&self) -> bool {
        false
    }
}

/// Ordered list of hooks, each invoked in turn.
#[derive(Default)]
pub struct HookSet<'a, T: Scalar> {
    hooks: Vec<Box<dyn AttentionHook<T> + 'a>>,
}

impl<'a, T: Scalar> HookSet<'a, T> {
    pub fn new() -> Self {
        Self { hooks: Vec::new() }
    }

    pub fn push(&mut self, hook: impl AttentionHook<T> + 'a) {
        self.hooks.push(Box::new(hook));
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }
}

impl<T: Scalar> AttentionHook<T> for HookSet<'_, T> {
    fn is_active(&self) -> bool {
        self.hooks.iter().any(|h| h.is_active())
    }

    fn begin_pass(&mut self, ctx: &PassContext) {
        for h in &mut self.hooks {
            h.begin_pass(ctx);
        }
    }

    fn qkv(&mut self, site: Site, q: &mut Array2<T>, k: &mut Array2<T>, v: &mut Array2<T>) {
        for h in &mut self.hooks {
            h.qkv(site, q, k, v);
        }
    }

    fn map(&mut self, site: Site, head: usize, map: &mut Array2<T>) {
        for h in &mut self.hooks {
            h.map(site, head, map);
        }
    }
}

/// One captured attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub kind: AttnKind,
    pub layer_index: usize,
    pub denoise_step: usize,
    pub head: usize,
    /// Post-softmax map before any edit (row-stochastic).
    pub map: Array2<f32>,
    /// The map after edits, when an edit changed it.
    pub edited: Option<Array2<f32>>,
}

impl AttentionRecord {
    /// The map the network actually multiplied with the values.
    pub fn effective(&self) -> &Array2<f32> {
        self.edited.as_ref().unwrap_or(&self.map)
    }
}

/// Captures maps of the conditional pass of a single sample.
#[derive(Debug, Default, Clone)]
pub struct AttentionRecorder {
    pub records: Vec<AttentionRecord>,
    step: usize,
    recording: bool,
}

impl AttentionRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_pass(&mut self, step: usize, recording: bool) {
        self.step = step;
        self.recording = recording;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn capture<T: Scalar>(&mut self, site: Site, head: usize, map: &Array2<T>) {
        if !self.recording {
            return;
        }
        self.records.push(AttentionRecord {
            kind: site.kind,
            layer_index: site.layer,
            denoise_step: self.step,
            head,
            map: map.mapv(|v| v.as_f64() as f32),
            edited: None,
        });
    }

    /// Attaches the post-edit map to the record captured last, if it differs.
    pub fn capture_edit<T: Scalar>(&mut self, map: &Array2<T>) {
        if !self.recording {
            return;
        }
        if let Some(last) = self.records.last_mut() {
            let edited = map.mapv(|v| v.as_f64() as f32);
            if edited != last.map {
                last.edited = Some(edited);
            }
        }
    }

    pub fn into_records(self) -> Vec<AttentionRecord> {
        self.records
    }
}

impl<T: Scalar> AttentionHook<T> for AttentionRecorder {
    fn begin_pass(&mut self, ctx: &PassContext) {
        self.set_pass(ctx.step, ctx.conditional);
    }

    fn map(&mut self, site: Site, head: usize, map: &mut Array2<T>) {
        self.capture(site, head, map);
    }
}
