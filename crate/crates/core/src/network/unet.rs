use ndarray::{concatenate, s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::TextContext;
use super::clr::{ClrBlock, ClrCache, ClrShape};
use super::hooks::{AttentionHook, AttnKind};
use super::layers::{silu, silu_grad, LayerNorm, LayerNormCache, Linear};
use super::params::{join, Params};
use crate::{Error, Result, Scalar};

/// Shortest sequence the denoiser accepts.
pub const MIN_FRAMES: usize = 16;

/// Frame counts are padded up to a multiple of this.
pub const FRAME_MULTIPLE: usize = 4;

/// Architecture hyperparameters of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub motion_dim: usize,
    /// Width of the encoder and decoder levels.
    pub base_width: usize,
    /// Width of the bottleneck level.
    pub mid_width: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// CLR blocks per level.
    pub blocks_per_level: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            motion_dim: 21,
            base_width: 64,
            mid_width: 128,
            text_dim: 64,
            time_dim: 64,
            heads: 4,
            ffn_mult: 4,
            blocks_per_level: 2,
        }
    }
}

impl UNetConfig {
    /// Three levels, two attention sublayers per block.
    pub fn attention_layers(&self) -> usize {
        3 * self.blocks_per_level * 2
    }

    /// Describes every attention sublayer in forward order.
    pub fn layer_table(&self) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        let mut index = 1;
        for (level, width, scale) in [
            (Level::Encoder, self.base_width, 1),
            (Level::Bottleneck, self.mid_width, 2),
            (Level::Decoder, self.base_width, 1),
        ] {
            for block in 0..self.blocks_per_level {
                for kind in [AttnKind::SelfAttn, AttnKind::Cross] {
                    out.push(LayerInfo {
                        index,
                        kind,
                        level,
                        block,
                        width,
                        time_downsample: scale,
                    });
                    index += 1;
                }
            }
        }
        out
    }

    pub fn layer_info(&self, index: usize) -> Option<LayerInfo> {
        self.layer_table().into_iter().find(|l| l.index == index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Encoder,
    Bottleneck,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub kind: AttnKind,
    pub level: Level,
    pub block: usize,
    pub width: usize,
    /// Temporal down-sampling factor of the level relative to the input.
    pub time_downsample: usize,
}

pub fn padded_frames(frames: usize) -> usize {
    frames.div_ceil(FRAME_MULTIPLE) * FRAME_MULTIPLE
}

/// Sinusoidal features of integer diffusion timesteps, `[sin | cos]`.
pub fn timestep_features<T: Scalar>(timesteps: &[usize], dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((timesteps.len(), dim));
    for (b, &t) in timesteps.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[b, i]] = T::of(arg.sin());
            out[[b, half + i]] = T::of(arg.cos());
        }
    }
    out
}

/// Two-layer SiLU MLP over sinusoidal timestep features.
#[derive(Debug, Clone)]
pub struct TimeEmbedding<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct TimeEmbeddingCache<T: Scalar> {
    feats: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> TimeEmbedding<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self {
            fc1: Linear::new(rng, dim, dim),
            fc2: Linear::new(rng, dim, dim),
        }
    }

    pub fn forward(&self, timesteps: &[usize]) -> (Array2<T>, TimeEmbeddingCache<T>) {
        let feats = timestep_features(timesteps, self.fc1.input_dim());
        let pre = self.fc1.forward(&feats);
        let act = pre.mapv(silu);
        let out = self.fc2.forward(&act);
        (out, TimeEmbeddingCache { feats, pre, act })
    }

    pub fn backward(&self, cache: &TimeEmbeddingCache<T>, gy: &Array2<T>, grad: &mut TimeEmbedding<T>) {
        let mut g = self.fc2.backward(&cache.act, gy, &mut grad.fc2);
        g.zip_mut_with(&cache.pre, |gv, &p| *gv *= silu_grad(p));
        self.fc1.backward(&cache.feats, &g, &mut grad.fc1);
    }
}

impl<T: Scalar> Params<T> for TimeEmbedding<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Mean of each consecutive pair of frames, per sample.
fn avg_pool2<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let half = T::of(0.5);
    let mut out = Array2::zeros((x.nrows() / 2, x.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&((&x.row(2 * i) + &x.row(2 * i + 1)) * half));
    }
    out
}

fn avg_pool2_backward<T: Scalar>(g: &Array2<T>) -> Array2<T> {
    let half = T::of(0.5);
    let mut out = Array2::zeros((g.nrows() * 2, g.ncols()));
    for (i, row) in g.rows().into_iter().enumerate() {
        let v = &row * half;
        out.row_mut(2 * i).assign(&v);
        out.row_mut(2 * i + 1).assign(&v);
    }
    out
}

fn upsample2<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros((x.nrows() * 2, x.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        out.row_mut(2 * i).assign(&row);
        out.row_mut(2 * i + 1).assign(&row);
    }
    out
}

fn upsample2_backward<T: Scalar>(g: &Array2<T>) -> Array2<T> {
    let mut out = Array2::zeros((g.nrows() / 2, g.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&(&g.row(2 * i) + &g.row(2 * i + 1)));
    }
    out
}

/// Temporal U-Net of CLR blocks: encoder level, ×2 average-pool down-sampling
/// into a wider bottleneck level, nearest-neighbour up-sampling with skip
/// concatenation, and a decoder level.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    pub config: UNetConfig,
    pub in_proj: Linear<T>,
    pub time: TimeEmbedding<T>,
    pub encoder: Vec<ClrBlock<T>>,
    pub down: Linear<T>,
    pub bottleneck: Vec<ClrBlock<T>>,
    pub up: Linear<T>,
    pub decoder: Vec<ClrBlock<T>>,
    pub out_norm: LayerNorm<T>,
    pub out_proj: Linear<T>,
}

pub struct UNetCache<T: Scalar> {
    frames: usize,
    padded: usize,
    x_pad: Array2<T>,
    time: TimeEmbeddingCache<T>,
    t_emb: Array2<T>,
    enc: Vec<ClrCache<T>>,
    pooled: Array2<T>,
    mid: Vec<ClrCache<T>>,
    cat: Array2<T>,
    dec: Vec<ClrCache<T>>,
    out_ln: LayerNormCache<T>,
    h_ln: Array2<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: UNetConfig) -> Self {
        let shape = |dim| ClrShape {
            dim,
            text_dim: config.text_dim,
            time_dim: config.time_dim,
            heads: config.heads,
            ffn_mult: config.ffn_mult,
        };
        let mut layer = 1;
        let mut level = |rng: &mut R, dim: usize| -> Vec<ClrBlock<T>> {
            (0..config.blocks_per_level)
                .map(|_| {
                    let block = ClrBlock::new(rng, shape(dim), layer);
                    layer += 2;
                    block
                })
                .collect()
        };
        let in_proj = Linear::new(rng, config.motion_dim, config.base_width);
        let time = TimeEmbedding::new(rng, config.time_dim);
        let encoder = level(rng, config.base_width);
        let down = Linear::new(rng, config.base_width, config.mid_width);
        let bottleneck = level(rng, config.mid_width);
        let up = Linear::new(rng, config.mid_width + config.base_width, config.base_width);
        let decoder = level(rng, config.base_width);
        Self {
            config,
            in_proj,
            time,
            encoder,
            down,
            bottleneck,
            up,
            decoder,
            out_norm: LayerNorm::new(config.base_width),
            out_proj: Linear::with_std(rng, config.base_width, config.motion_dim, 0.1),
        }
    }

    pub fn attention_layer_count(&self) -> usize {
        2 * (self.encoder.len() + self.bottleneck.len() + self.decoder.len())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ClrBlock<T>> {
        self.encoder.iter().chain(&self.bottleneck).chain(&self.decoder)
    }

    /// Predicts the noise for `x.nrows() / frames` row-stacked samples.
    ///
    /// Sequences are zero-padded to a multiple of four frames internally and
    /// the prediction is cropped back to `frames`.
    pub fn forward(
        &self,
        x: &Array2<T>,
        frames: usize,
        timesteps: &[usize],
        ctx: &TextContext<T>,
        hook: &mut dyn AttentionHook<T>,
    ) -> Result<(Array2<T>, UNetCache<T>)> {
        if frames < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "{frames} frames is below the minimum of {MIN_FRAMES}"
            )));
        }
        let batch = timesteps.len();
        if x.nrows() != batch * frames || x.ncols() != self.config.motion_dim {
            return Err(Error::invalid(format!(
                "input is {:?}, expected ({}, {})",
                x.dim(),
                batch * frames,
                self.config.motion_dim
            )));
        }
        if ctx.batch_len() != batch {
            return Err(Error::invalid("text batch does not match motion batch"));
        }
        let padded = padded_frames(frames);
        let x_pad = if padded == frames {
            x.clone()
        } else {
            let mut p = Array2::zeros((batch * padded, x.ncols()));
            for b in 0..batch {
                p.slice_mut(s![b * padded..b * padded + frames, ..])
                    .assign(&x.slice(s![b * frames..(b + 1) * frames, ..]));
            }
            p
        };

        let (t_emb, time) = self.time.forward(timesteps);
        let mut h = self.in_proj.forward(&x_pad);

        let run = |blocks: &[ClrBlock<T>], mut h: Array2<T>, f: usize, hook: &mut dyn AttentionHook<T>| {
            let mut caches = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (y, c) = block.forward(&h, f, &t_emb, ctx, hook);
                h = y;
                caches.push(c);
            }
            (h, caches)
        };

        let (skip, enc) = run(&self.encoder, h, padded, hook);
        let pooled = avg_pool2(&skip);
        h = self.down.forward(&pooled);
        let (mid_out, mid) = run(&self.bottleneck, h, padded / 2, hook);
        let cat = concatenate(Axis(1), &[upsample2(&mid_out).view(), skip.view()]).expect("equal rows");
        h = self.up.forward(&cat);
        let (dec_out, dec) = run(&self.decoder, h, padded, hook);
        let (h_ln, out_ln) = self.out_norm.forward(&dec_out);
        let out_pad = self.out_proj.forward(&h_ln);

        let out = if padded == frames {
            out_pad
        } else {
            let mut o = Array2::zeros((batch * frames, out_pad.ncols()));
            for b in 0..batch {
                o.slice_mut(s![b * frames..(b + 1) * frames, ..])
                    .assign(&out_pad.slice(s![b * padded..b * padded + frames, ..]));
            }
            o
        };
        Ok((
            out,
            UNetCache {
                frames,
                padded,
                x_pad,
                time,
                t_emb,
                enc,
                pooled,
                mid,
                cat,
                dec,
                out_ln,
                h_ln,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the stacked text rows.
    pub fn backward(
        &self,
        cache: &UNetCache<T>,
        ctx: &TextContext<T>,
        gy: &Array2<T>,
        grad: &mut UNet<T>,
    ) -> Array2<T> {
        let (frames, padded) = (cache.frames, cache.padded);
        let batch = gy.nrows() / frames;
        let g_out = if padded == frames {
            gy.clone()
        } else {
            let mut g = Array2::zeros((batch * padded, gy.ncols()));
            for b in 0..batch {
                g.slice_mut(s![b * padded..b * padded + frames, ..])
                    .assign(&gy.slice(s![b * frames..(b + 1) * frames, ..]));
            }
            g
        };
        let mut g_temb = Array2::zeros(cache.t_emb.raw_dim());
        let mut g_ctx = Array2::zeros(ctx.emb.raw_dim());

        let mut back =
            |blocks: &[ClrBlock<T>], grads: &mut [ClrBlock<T>], caches: &[ClrCache<T>], mut g: Array2<T>, f: usize| {
                for i in (0..blocks.len()).rev() {
                    let (gx, gt, gc) = blocks[i].backward(&caches[i], f, &cache.t_emb, ctx, &g, &mut grads[i]);
                    g_temb += &gt;
                    g_ctx += &gc;
                    g = gx;
                }
                g
            };

        let g_hln = self.out_proj.backward(&cache.h_ln, &g_out, &mut grad.out_proj);
        let g_dec_out = self.out_norm.backward(&cache.out_ln, &g_hln, &mut grad.out_norm);
        let g_up_out = back(&self.decoder, &mut grad.decoder, &cache.dec, g_dec_out, padded);
        let g_cat = self.up.backward(&cache.cat, &g_up_out, &mut grad.up);
        let mid_width = self.config.mid_width;
        let g_mid_out = upsample2_backward(&g_cat.slice(s![.., ..mid_width]).to_owned());
        let mut g_skip = g_cat.slice(s![.., mid_width..]).to_owned();
        let g_down_out = back(
            &self.bottleneck,
            &mut grad.bottleneck,
            &cache.mid,
            g_mid_out,
            padded / 2,
        );
        let g_pooled = self.down.backward(&cache.pooled, &g_down_out, &mut grad.down);
        g_skip += &avg_pool2_backward(&g_pooled);
        let g_in = back(&self.encoder, &mut grad.encoder, &cache.enc, g_skip, padded);
        self.in_proj.backward(&cache.x_pad, &g_in, &mut grad.in_proj);
        self.time.backward(&cache.time, &g_temb, &mut grad.time);
        g_ctx
    }
}

impl<T: Scalar> Params<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        self.time.visit(&join(prefix, "time"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.down.visit(&join(prefix, "down"), f);
        for (i, b) in self.bottleneck.iter().enumerate() {
            b.visit(&join(prefix, &format!("bottleneck.{i}")), f);
        }
        self.up.visit(&join(prefix, "up"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.in_proj.visit_mut(&join(prefix, "in_proj"), f);
        self.time.visit_mut(&join(prefix, "time"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.down.visit_mut(&join(prefix, "down"), f);
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("bottleneck.{i}")), f);
        }
        self.up.visit_mut(&join(prefix, "up"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.{i}")), f);
        }
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}
