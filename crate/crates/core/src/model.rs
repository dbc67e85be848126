//! The text-conditioned denoiser and the bundle a checkpoint restores.

use ndarray::{concatenate, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{NormStats, FEATURE_DIM};
use crate::network::params::{join, Params};
use crate::network::unet::UNetCache;
use crate::network::{AttentionHook, TextContext, UNet, UNetConfig};
use crate::text::{PromptTokens, TextEmbedder, Vocabulary};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub vocab_size: usize,
    /// Frame count of the training corpus; the default generation length.
    pub frames: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, frames: usize) -> Self {
        Self {
            unet: UNetConfig::default(),
            vocab_size,
            frames,
        }
    }
}

/// Word embeddings plus the U-Net, trained jointly.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Scalar> {
    pub text: TextEmbedder<T>,
    pub unet: UNet<T>,
}

pub struct DenoiserCache<T: Scalar> {
    unet: UNetCache<T>,
    ctx: TextContext<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextEmbedder::new(&mut rng, config.vocab_size, config.unet.text_dim);
        let unet = UNet::new(&mut rng, config.unet);
        Self { text, unet }
    }

    pub fn context(&self, tokens: &[&PromptTokens]) -> Result<TextContext<T>> {
        let mut rows = Vec::with_capacity(tokens.len());
        let mut offsets = vec![0];
        for t in tokens {
            let e = self.text.embed(t)?;
            offsets.push(offsets.last().copied().unwrap_or(0) + e.nrows());
            rows.push(e);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let emb = concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(TextContext { emb, offsets })
    }

    /// Noise prediction for a row-stacked batch; `timesteps` and `tokens`
    /// hold one entry per sample.
    pub fn forward(
        &self,
        x: &Array2<T>,
        frames: usize,
        timesteps: &[usize],
        tokens: &[&PromptTokens],
        hook: &mut dyn AttentionHook<T>,
    ) -> Result<(Array2<T>, DenoiserCache<T>)> {
        if tokens.len() != timesteps.len() {
            return Err(Error::invalid("one prompt per sample required"));
        }
        let ctx = self.context(tokens)?;
        let (y, unet) = self.unet.forward(x, frames, timesteps, &ctx, hook)?;
        Ok((y, DenoiserCache { unet, ctx }))
    }

    pub fn predict(
        &self,
        x: &Array2<T>,
        timestep: usize,
        tokens: &PromptTokens,
        hook: &mut dyn AttentionHook<T>,
    ) -> Result<Array2<T>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser input".into()));
        }
        let (y, _) = self.forward(x, x.nrows(), &[timestep], &[tokens], hook)?;
        Ok(y)
    }

    pub fn backward(&self, cache: &DenoiserCache<T>, tokens: &[&PromptTokens], gy: &Array2<T>, grad: &mut Denoiser<T>) {
        let g_ctx = self.unet.backward(&cache.unet, &cache.ctx, gy, &mut grad.unet);
        self.text.backward(tokens, &g_ctx, &mut grad.text);
    }
}

impl<T: Scalar> Params<T> for Denoiser<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.text.visit(&join(prefix, "text"), f);
        self.unet.visit(&join(prefix, "unet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.unet.visit_mut(&join(prefix, "unet"), f);
    }
}

/// Everything needed to generate: architecture, vocabulary, feature
/// statistics and weights.
#[derive(Debug, Clone)]
pub struct MotionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub stats: NormStats,
    pub denoiser: Denoiser<f32>,
}

impl MotionModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, stats: NormStats, seed: u64) -> Result<Self> {
        if vocab.len() != config.vocab_size {
            return Err(Error::invalid("vocabulary size does not match model config"));
        }
        if stats.mean.len() != FEATURE_DIM || config.unet.motion_dim != FEATURE_DIM {
            return Err(Error::invalid("feature statistics do not match the motion layout"));
        }
        Ok(Self {
            denoiser: Denoiser::new(&config, seed),
            config,
            vocab,
            stats,
        })
    }

    /// Untrained model with identity statistics, for tests and smoke runs.
    pub fn untrained(frames: usize, seed: u64) -> Self {
        let vocab = Vocabulary::default();
        let config = ModelConfig::new(vocab.len(), frames);
        Self::new(config, vocab, NormStats::identity(FEATURE_DIM), seed).expect("consistent defaults")
    }

    pub fn tokenize(&self, prompt: &str) -> Result<PromptTokens> {
        self.vocab.tokenize(prompt)
    }

    pub fn attention_layers(&self) -> usize {
        self.denoiser.unet.attention_layer_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::gradcheck::max_relative_error;
    use crate::network::layers::randn;
    use crate::network::NoHooks;
    use rand::SeedableRng;

    /// Full architecture (three levels, two CLR blocks each) at toy widths.
    fn tiny() -> ModelConfig {
        ModelConfig {
            unet: UNetConfig {
                motion_dim: 3,
                base_width: 4,
                mid_width: 8,
                text_dim: 4,
                time_dim: 4,
                heads: 2,
                ffn_mult: 2,
                blocks_per_level: 2,
            },
            vocab_size: Vocabulary::default().len(),
            frames: 18,
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let cfg = tiny();
        let net = Denoiser::<f64>::new(&cfg, 7);
        assert!(net.num_params() <= 5000, "{}", net.num_params());
        let vocab = Vocabulary::default();
        let a = vocab.tokenize("a man jumps twice.").unwrap();
        let b = vocab.tokenize("someone waves").unwrap();
        let tokens = [&a, &b];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Array2<f64> = randn(&mut rng, (36, 3), 1.0);
        let w: Array2<f64> = randn(&mut rng, (36, 3), 1.0);
        let steps = [12, 740];
        let (_, cache) = net.forward(&x, 18, &steps, &tokens, &mut NoHooks).unwrap();
        let mut grad = net.zeros_like();
        net.backward(&cache, &tokens, &w, &mut grad);
        let loss = |m: &Denoiser<f64>| (&m.forward(&x, 18, &steps, &tokens, &mut NoHooks).unwrap().0 * &w).sum();
        let err = max_relative_error(&net, &grad, loss, 1e-6);
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let cfg = tiny();
        let net = Denoiser::<f64>::new(&cfg, 9);
        let vocab = Vocabulary::default();
        let a = vocab.tokenize("a man jumps.").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Array2<f64> = randn(&mut rng, (16, 3), 1.0);
        let (y, cache) = net.forward(&x, 16, &[300], &[&a], &mut NoHooks).unwrap();
        let mut grad = net.zeros_like();
        net.backward(&cache, &[&a], &y, &mut grad);
        for (id, row) in grad.text.table.rows().into_iter().enumerate() {
            if a.ids.contains(&id) {
                assert!(row.iter().any(|v| *v != 0.0));
            } else {
                assert!(row.iter().all(|v| *v == 0.0), "row {id}");
            }
        }
    }

    #[test]
    fn untrained_model_reports_twelve_layers() {
        let m = MotionModel::untrained(48, 0);
        assert_eq!(m.attention_layers(), 12);
        assert_eq!(m.config.unet.motion_dim, FEATURE_DIM);
    }
}
