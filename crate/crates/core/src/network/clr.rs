use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention, TextContext};
use super::hooks::AttentionHook;
use super::layers::{FeedForward, FeedForwardCache, TimestepInject, TimestepInjectCache};
use super::params::{join, Params};
use crate::Scalar;

/// Widths and head count of one CLR block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClrShape {
    pub dim: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

/// Convolution (timestep injection) → self-attention → cross-attention →
/// feed-forward, each a pre-norm residual sublayer.
#[derive(Debug, Clone)]
pub struct ClrBlock<T: Scalar> {
    pub conv: TimestepInject<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone)]
pub struct ClrCache<T: Scalar> {
    conv: TimestepInjectCache<T>,
    self_attn: AttentionCache<T>,
    cross_attn: AttentionCache<T>,
    ffn: FeedForwardCache<T>,
}

// Residual branch outputs start small so that a fresh network is close to an
// identity map per block.
const OUT_STD: f64 = 0.5;

impl<T: Scalar> ClrBlock<T> {
    /// `first_layer` is the global attention index of the self-attention
    /// sublayer; the cross-attention sublayer gets the next index.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, shape: ClrShape, first_layer: usize) -> Self {
        Self {
            conv: TimestepInject::new(rng, shape.dim, shape.time_dim, OUT_STD),
            self_attn: MultiHeadAttention::new_self(rng, first_layer, shape.dim, shape.heads, OUT_STD),
            cross_attn: MultiHeadAttention::new_cross(
                rng,
                first_layer + 1,
                shape.dim,
                shape.text_dim,
                shape.heads,
                OUT_STD,
            ),
            ffn: FeedForward::new(rng, shape.dim, shape.ffn_mult, OUT_STD),
        }
    }

    /// Zeroes every projection that writes into the residual stream, turning
    /// the block into the identity.
    pub fn zero_outputs(&mut self) {
        self.conv.conv.weight.fill(T::zero());
        self.conv.conv.bias.fill(T::zero());
        self.conv.time_proj.weight.fill(T::zero());
        self.conv.time_proj.bias.fill(T::zero());
        for attn in [&mut self.self_attn, &mut self.cross_attn] {
            attn.wo.weight.fill(T::zero());
            attn.wo.bias.fill(T::zero());
        }
        self.ffn.fc2.weight.fill(T::zero());
        self.ffn.fc2.bias.fill(T::zero());
    }

    pub fn forward(
        &self,
        x: &Array2<T>,
        frames: usize,
        t_emb: &Array2<T>,
        ctx: &TextContext<T>,
        hook: &mut dyn AttentionHook<T>,
    ) -> (Array2<T>, ClrCache<T>) {
        let (c, conv) = self.conv.forward(x, frames, t_emb);
        let h1 = x + &c;
        let (sa, self_attn) = self.self_attn.forward(&h1, frames, None, hook);
        let h2 = &h1 + &sa;
        let (ca, cross_attn) = self.cross_attn.forward(&h2, frames, Some(ctx), hook);
        let h3 = &h2 + &ca;
        let (ff, ffn) = self.ffn.forward(&h3);
        let y = &h3 + &ff;
        (
            y,
            ClrCache {
                conv,
                self_attn,
                cross_attn,
                ffn,
            },
        )
    }

    /// Returns `(dL/dx, dL/dt_emb, dL/dtext)`.
    pub fn backward(
        &self,
        cache: &ClrCache<T>,
        frames: usize,
        t_emb: &Array2<T>,
        ctx: &TextContext<T>,
        gy: &Array2<T>,
        grad: &mut ClrBlock<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let mut g = gy.clone();
        g += &self.ffn.backward(&cache.ffn, gy, &mut grad.ffn);
        let (g_ca, g_ctx) = self
            .cross_attn
            .backward(&cache.cross_attn, frames, Some(ctx), &g, &mut grad.cross_attn);
        g += &g_ca;
        let (g_sa, _) = self
            .self_attn
            .backward(&cache.self_attn, frames, None, &g, &mut grad.self_attn);
        g += &g_sa;
        let (g_conv, g_temb) = self.conv.backward(&cache.conv, frames, t_emb, &g, &mut grad.conv);
        g += &g_conv;
        (g, g_temb, g_ctx.expect("cross-attention yields a text gradient"))
    }
}

impl<T: Scalar> Params<T> for ClrBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::gradcheck::max_relative_error;
    use crate::network::hooks::NoHooks;
    use crate::network::layers::randn;
    use crate::network::unet::timestep_features;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> ClrShape {
        ClrShape {
            dim: 6,
            text_dim: 4,
            time_dim: 4,
            heads: 2,
            ffn_mult: 2,
        }
    }

    fn ctx(r: &mut ChaCha8Rng) -> TextContext<f64> {
        TextContext {
            emb: randn(r, (5, 4), 1.0),
            offsets: vec![0, 3, 5],
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut block = ClrBlock::<f64>::new(&mut r, shape(), 1);
        block.zero_outputs();
        let x = randn(&mut r, (8, 6), 1.0);
        let t = timestep_features(&[3, 500], 4);
        let (y, _) = block.forward(&x, 4, &t, &ctx(&mut r), &mut NoHooks);
        assert_eq!(y, x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let block = ClrBlock::<f64>::new(&mut r, shape(), 1);
        let c = ctx(&mut r);
        let x = randn(&mut r, (10, 6), 1.0);
        let w = randn(&mut r, (10, 6), 1.0);
        let t = timestep_features(&[3, 500], 4);
        let (_, cache) = block.forward(&x, 5, &t, &c, &mut NoHooks);
        let mut g = block.zeros_like();
        block.backward(&cache, 5, &t, &c, &w, &mut g);
        let loss = |b: &ClrBlock<f64>| (&b.forward(&x, 5, &t, &c, &mut NoHooks).0 * &w).sum();
        assert!(max_relative_error(&block, &g, loss, 1e-4) < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let make = || {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let block = ClrBlock::<f32>::new(&mut r, shape(), 1);
            let c = TextContext {
                emb: randn(&mut r, (3, 4), 1.0),
                offsets: vec![0, 3],
            };
            let x = randn(&mut r, (6, 6), 1.0);
            block.forward(&x, 6, &timestep_features(&[10], 4), &c, &mut NoHooks).0
        };
        assert_eq!(make(), make());
    }
}
