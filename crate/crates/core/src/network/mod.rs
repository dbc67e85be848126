//! CLR blocks and the temporal U-Net denoiser.
//!
//! Every layer keeps an explicit forward cache and a hand-written backward
//! pass. Tensors are row-stacked batches: `B` samples of `F` frames form a
//! `(B·F) × d` matrix, and per-sample operations (convolution, attention,
//! pooling) walk the blocks of `F` rows.

pub mod attention;
pub mod clr;
pub mod hooks;
pub mod layers;
pub mod linalg;
pub mod params;
pub mod unet;

pub use attention::{attention, softmax_rows, MultiHeadAttention, TextContext};
pub use clr::{ClrBlock, ClrShape};
pub use hooks::{AttentionHook, AttentionRecord, AttentionRecorder, AttnKind, HookSet, NoHooks, PassContext, Site};
pub use layers::{DepthwiseConv, FeedForward, LayerNorm, Linear, TimestepInject};
pub use params::Params;
pub use unet::{padded_frames, LayerInfo, Level, UNet, UNetConfig, MIN_FRAMES};

/// Finite-difference gradient checking for any parameter container.
pub mod gradcheck {
    use super::Params;

    fn nudge<M: Params<f64>>(m: &mut M, index: usize, delta: f64) {
        let mut seen = 0;
        m.visit_mut("", &mut |_, mut a| {
            if index >= seen && index < seen + a.len() {
                let slot = a.iter_mut().nth(index - seen).expect("in range");
                *slot += delta;
            }
            seen += a.len();
        });
    }

    pub fn flat<M: Params<f64>>(m: &M) -> Vec<f64> {
        let mut out = Vec::new();
        m.visit("", &mut |_, a| out.extend(a.iter().copied()));
        out
    }

    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
    /// every parameter, with central differences of step `h`.
    pub fn max_relative_error<M: Params<f64> + Clone>(model: &M, grad: &M, loss: impl Fn(&M) -> f64, h: f64) -> f64 {
        let analytic = flat(grad);
        let mut m = model.clone();
        let mut worst = 0.0f64;
        for (i, a) in analytic.iter().enumerate() {
            nudge(&mut m, i, h);
            let up = loss(&m);
            nudge(&mut m, i, -2.0 * h);
            let down = loss(&m);
            nudge(&mut m, i, h);
            let numeric = (up - down) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }
}
