use ndarray::{s, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::hooks::{AttentionHook, AttnKind, Site};
use super::layers::{LayerNorm, LayerNormCache, Linear};
use super::linalg::{matmul, matmul_into};
use super::params::{join, Params};
use crate::{Error, Result, Scalar};

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        match row.as_slice_mut() {
            Some(r) => softmax_slice(r),
            None => {
                let mut r = row.to_vec();
                softmax_slice(&mut r);
                row.assign(&ndarray::ArrayView1::from(&r));
            }
        }
    }
}

/// Eight independent lanes for the max and the sum keep the reductions off
/// one long dependency chain.
fn softmax_slice<T: Scalar>(r: &mut [T]) {
    const L: usize = 8;
    let mut mx = [T::neg_infinity(); L];
    let mut chunks = r.chunks_exact(L);
    for c in &mut chunks {
        for (m, &v) in mx.iter_mut().zip(c) {
            *m = m.max(v);
        }
    }
    let max = chunks
        .remainder()
        .iter()
        .chain(mx.iter())
        .fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut acc = [T::zero(); L];
    let mut chunks = r.chunks_exact_mut(L);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c.iter_mut()) {
            *v = (*v - max).exp_fast();
            *a += *v;
        }
    }
    let mut sum = T::zero();
    for v in chunks.into_remainder() {
        *v = (*v - max).exp_fast();
        sum += *v;
    }
    let sum = acc.iter().fold(sum, |s, &a| s + a);
    for v in r.iter_mut() {
        *v /= sum;
    }
}

/// Single-head scaled dot-product attention, `softmax(Q Kᵀ / √d) V`.
///
/// Returns the output rows and the attention map.
pub fn attention<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    if q.ncols() != k.ncols() {
        return Err(Error::invalid(format!(
            "query width {} does not match key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::invalid(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    if k.nrows() == 0 {
        return Err(Error::invalid("attention over an empty key set"));
    }
    if q.iter().chain(k.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    let scale = T::one() / T::of(q.ncols() as f64).sqrt();
    let mut map = q.dot(&k.t()) * scale;
    softmax_rows(&mut map);
    let out = map.dot(&v);
    Ok((out, map))
}

/// Text rows for cross-attention: all prompts of a batch stacked, with
/// `offsets[b]..offsets[b + 1]` selecting the tokens of sample `b`.
#[derive(Debug, Clone)]
pub struct TextContext<T: Scalar> {
    pub emb: Array2<T>,
    pub offsets: Vec<usize>,
}

impl<T: Scalar> TextContext<T> {
    pub fn single(emb: Array2<T>) -> Self {
        let n = emb.nrows();
        Self {
            emb,
            offsets: vec![0, n],
        }
    }

    pub fn batch_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }
}

/// Multi-head attention sublayer with pre-layer-norm.
///
/// Self-attention projects queries, keys and values from the motion rows;
/// cross-attention projects keys and values from the (separately normalized)
/// text rows. No positional signal is added inside, so self-attention is
/// equivariant under circular shifts of the frames.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub kind: AttnKind,
    pub layer: usize,
    pub heads: usize,
    pub norm: LayerNorm<T>,
    pub ctx_norm: Option<LayerNorm<T>>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T: Scalar> {
    ln: LayerNormCache<T>,
    x_ln: Array2<T>,
    ctx_ln: Option<(LayerNormCache<T>, Array2<T>)>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Per sample, per head: index `b * heads + h`.
    maps: Vec<Array2<T>>,
    o: Array2<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new_self<R: Rng + ?Sized>(rng: &mut R, layer: usize, dim: usize, heads: usize, out_std: f64) -> Self {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            kind: AttnKind::SelfAttn,
            layer,
            heads,
            norm: LayerNorm::new(dim),
            ctx_norm: None,
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::with_std(rng, dim, dim, out_std / (dim as f64).sqrt()),
        }
    }

    pub fn new_cross<R: Rng + ?Sized>(
        rng: &mut R,
        layer: usize,
        dim: usize,
        text_dim: usize,
        heads: usize,
        out_std: f64,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Self {
            kind: AttnKind::Cross,
            layer,
            heads,
            norm: LayerNorm::new(dim),
            ctx_norm: Some(LayerNorm::new(text_dim)),
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, text_dim, dim),
            wv: Linear::new(rng, text_dim, dim),
            wo: Linear::with_std(rng, dim, dim, out_std / (dim as f64).sqrt()),
        }
    }

    pub fn site(&self) -> Site {
        Site {
            layer: self.layer,
            kind: self.kind,
        }
    }

    fn key_range(&self, b: usize, frames: usize, ctx: Option<&TextContext<T>>) -> std::ops::Range<usize> {
        match self.kind {
            AttnKind::SelfAttn => b * frames..(b + 1) * frames,
            AttnKind::Cross => ctx.expect("cross-attention needs text").range(b),
        }
    }

    /// Sublayer output (without the residual) for `x.nrows() / frames`
    /// row-stacked samples.
    pub fn forward(
        &self,
        x: &Array2<T>,
        frames: usize,
        ctx: Option<&TextContext<T>>,
        hook: &mut dyn AttentionHook<T>,
    ) -> (Array2<T>, AttentionCache<T>) {
        let site = self.site();
        let (x_ln, ln) = self.norm.forward(x);
        let ctx_ln = match self.kind {
            AttnKind::SelfAttn => None,
            AttnKind::Cross => {
                let c = ctx.expect("cross-attention needs text");
                let norm = self.ctx_norm.as_ref().expect("cross-attention has a text norm");
                let (c_ln, cache) = norm.forward(&c.emb);
                Some((cache, c_ln))
            }
        };
        let kv_src = ctx_ln.as_ref().map(|(_, c)| c).unwrap_or(&x_ln);
        let mut q = self.wq.forward(&x_ln);
        let mut k = self.wk.forward(kv_src);
        let mut v = self.wv.forward(kv_src);

        let batch = x.nrows() / frames;
        let active = hook.is_active();
        if active {
            for b in 0..batch {
                let qr = b * frames..(b + 1) * frames;
                let kr = self.key_range(b, frames, ctx);
                let mut qb = q.slice(s![qr.clone(), ..]).to_owned();
                let mut kb = k.slice(s![kr.clone(), ..]).to_owned();
                let mut vb = v.slice(s![kr.clone(), ..]).to_owned();
                hook.qkv(site, &mut qb, &mut kb, &mut vb);
                q.slice_mut(s![qr, ..]).assign(&qb);
                k.slice_mut(s![kr.clone(), ..]).assign(&kb);
                v.slice_mut(s![kr, ..]).assign(&vb);
            }
        }

        let dim = q.ncols();
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut o = Array2::zeros((x.nrows(), dim));
        let mut maps = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let qr = b * frames..(b + 1) * frames;
            let kr = self.key_range(b, frames, ctx);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![qr.clone(), cols.clone()]);
                let kh = k.slice(s![kr.clone(), cols.clone()]);
                let vh = v.slice(s![kr.clone(), cols.clone()]);
                let mut map = matmul(&qh, &kh.t());
                map.mapv_inplace(|s| s * scale);
                softmax_rows(&mut map);
                if active {
                    hook.map(site, h, &mut map);
                }
                matmul_into(&mut o.slice_mut(s![qr.clone(), cols]), &map, &vh, false);
                maps.push(map);
            }
        }
        let y = self.wo.forward(&o);
        (
            y,
            AttentionCache {
                ln,
                x_ln,
                ctx_ln,
                q,
                k,
                v,
                maps,
                o,
            },
        )
    }

    /// Returns `(dL/dx, dL/dtext)`; the text gradient is `None` for
    /// self-attention.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        frames: usize,
        ctx: Option<&TextContext<T>>,
        gy: &Array2<T>,
        grad: &mut MultiHeadAttention<T>,
    ) -> (Array2<T>, Option<Array2<T>>) {
        let g_o = self.wo.backward(&cache.o, gy, &mut grad.wo);
        let mut gq = Array2::zeros(cache.q.raw_dim());
        let mut gk = Array2::zeros(cache.k.raw_dim());
        let mut gv = Array2::zeros(cache.v.raw_dim());
        let dim = cache.q.ncols();
        let dh = dim / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let batch = cache.q.nrows() / frames;
        for b in 0..batch {
            let qr = b * frames..(b + 1) * frames;
            let kr = self.key_range(b, frames, ctx);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &cache.maps[b * self.heads + h];
                let g_oh = g_o.slice(s![qr.clone(), cols.clone()]);
                let qh = cache.q.slice(s![qr.clone(), cols.clone()]);
                let kh = cache.k.slice(s![kr.clone(), cols.clone()]);
                let vh = cache.v.slice(s![kr.clone(), cols.clone()]);
                let mut g_s = matmul(&g_oh, &vh.t());
                {
                    let mut gvh = gv.slice_mut(s![kr.clone(), cols.clone()]);
                    matmul_into(&mut gvh, &p.t(), &g_oh, true);
                }
                for (mut gr, pr) in g_s.rows_mut().into_iter().zip(p.rows()) {
                    let dot = gr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                    gr.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                {
                    let mut gqh = gq.slice_mut(s![qr.clone(), cols.clone()]);
                    matmul_into(&mut gqh, &g_s, &kh, true);
                }
                let mut gkh = gk.slice_mut(s![kr.clone(), cols]);
                matmul_into(&mut gkh, &g_s.t(), &qh, true);
            }
        }
        let mut g_xln = self.wq.backward(&cache.x_ln, &gq, &mut grad.wq);
        let g_ctx = match &cache.ctx_ln {
            None => {
                g_xln += &self.wk.backward(&cache.x_ln, &gk, &mut grad.wk);
                g_xln += &self.wv.backward(&cache.x_ln, &gv, &mut grad.wv);
                None
            }
            Some((c_cache, c_ln)) => {
                let mut g_cln = self.wk.backward(c_ln, &gk, &mut grad.wk);
                g_cln += &self.wv.backward(c_ln, &gv, &mut grad.wv);
                let norm = self.ctx_norm.as_ref().expect("cross-attention has a text norm");
                let g_norm = grad.ctx_norm.as_mut().expect("gradient mirrors parameters");
                Some(norm.backward(c_cache, &g_cln, g_norm))
            }
        };
        let gx = self.norm.backward(&cache.ln, &g_xln, &mut grad.norm);
        (gx, g_ctx)
    }
}

impl<T: Scalar> Params<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        if let Some(n) = &self.ctx_norm {
            n.visit(&join(prefix, "text_norm"), f);
        }
        self.wq.visit(&join(prefix, "query"), f);
        self.wk.visit(&join(prefix, "key"), f);
        self.wv.visit(&join(prefix, "value"), f);
        self.wo.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        if let Some(n) = &mut self.ctx_norm {
            n.visit_mut(&join(prefix, "text_norm"), f);
        }
        self.wq.visit_mut(&join(prefix, "query"), f);
        self.wk.visit_mut(&join(prefix, "key"), f);
        self.wv.visit_mut(&join(prefix, "value"), f);
        self.wo.visit_mut(&join(prefix, "out"), f);
    }
}
