//! Action counting from self-attention maps and from the root trajectory.
//!
//! Repeated actions show up in a self-attention map as a grid of highlighted
//! blocks; each row crosses one block per repetition. The counter smooths the
//! map, pools it, rescales to [0, 1], counts peaks per row and averages over
//! the rows that have any.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::GenerationResult;
use crate::network::AttnKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountingConfig {
    pub sigma: f64,
    pub downsample_factor: usize,
    /// Peak height threshold as a multiple of the normalized map's mean.
    pub height_multiplier: f64,
    pub distance: usize,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            downsample_factor: 4,
            height_multiplier: 3.0,
            distance: 1,
        }
    }
}

impl CountingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::range(format!("sigma {} must be finite and ≥ 0", self.sigma)));
        }
        if self.downsample_factor < 1 {
            return Err(Error::range("downsample factor must be ≥ 1"));
        }
        if !self.height_multiplier.is_finite() {
            return Err(Error::range("height multiplier must be finite"));
        }
        Ok(())
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ⌈4σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (4.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn gaussian_filter1d(x: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || x.is_empty() {
        return x.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    (0..x.len())
        .map(|i| {
            k.iter()
                .enumerate()
                .map(|(j, w)| w * x[reflect(i as isize + j as isize - r, x.len())])
                .sum()
        })
        .collect()
}

/// Separable Gaussian smoothing along both axes.
pub fn gaussian_filter2d(m: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 || m.is_empty() {
        return m.clone();
    }
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let s = gaussian_filter1d(&row.to_vec(), sigma);
        row.iter_mut().zip(s).for_each(|(a, b)| *a = b);
    }
    for mut col in out.columns_mut() {
        let s = gaussian_filter1d(&col.to_vec(), sigma);
        col.iter_mut().zip(s).for_each(|(a, b)| *a = b);
    }
    out
}

/// Non-overlapping `factor × factor` block means; trailing partial blocks are
/// averaged over the cells they contain.
pub fn downsample(m: &Array2<f64>, factor: usize) -> Array2<f64> {
    let f = factor.max(1);
    if f == 1 {
        return m.clone();
    }
    let (r, c) = m.dim();
    Array2::from_shape_fn((r.div_ceil(f), c.div_ceil(f)), |(i, j)| {
        let block = m.slice(ndarray::s![i * f..((i + 1) * f).min(r), j * f..((j + 1) * f).min(c)]);
        block.sum() / block.len() as f64
    })
}

/// `(x − min)/(max − min)`; constant input maps to zeros.
pub fn normalize01(m: &Array2<f64>) -> Array2<f64> {
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !span.is_finite() || span <= 0.0 {
        return Array2::zeros(m.dim());
    }
    m.mapv(|v| (v - lo) / span)
}

fn normalize01_slice(x: &[f64]) -> Vec<f64> {
    let m = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
    normalize01(&m).into_raw_vec_and_offset().0
}

/// Strict local maxima (plateaus report their left edge) at least `height`
/// high, thinned greedily from the tallest so accepted peaks are at least
/// `distance` apart.
pub fn detect_peaks(row: &[f64], height: f64, distance: usize) -> Vec<usize> {
    let n = row.len();
    let mut candidates = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if row[i] > row[i - 1] {
            let mut j = i;
            while j + 1 < n && row[j + 1] == row[i] {
                j += 1;
            }
            if j + 1 < n && row[j + 1] < row[i] {
                candidates.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    candidates.retain(|&p| row[p] >= height);
    if distance <= 1 || candidates.len() < 2 {
        return candidates;
    }
    let mut order = candidates.clone();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    for p in order {
        if accepted.iter().all(|&q| p.abs_diff(q) >= distance) {
            accepted.push(p);
        }
    }
    accepted.sort_unstable();
    accepted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub count: f64,
    pub per_row_peaks: Vec<usize>,
    pub config: CountingConfig,
}

/// Average peaks per row of a processed self-attention map.
pub fn count_actions(map: &Array2<f64>, config: &CountingConfig) -> Result<CountResult> {
    config.validate()?;
    if map.is_empty() {
        return Err(Error::invalid("attention map is empty"));
    }
    if map.nrows() != map.ncols() {
        return Err(Error::invalid(format!(
            "self-attention map must be square, got {:?}",
            map.dim()
        )));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attention map contains non-finite values".into()));
    }
    let processed = normalize01(&downsample(
        &gaussian_filter2d(map, config.sigma),
        config.downsample_factor,
    ));
    let height = processed.mean().unwrap_or(0.0) * config.height_multiplier;
    let per_row_peaks: Vec<usize> = processed
        .rows()
        .into_iter()
        .map(|r| detect_peaks(&r.to_vec(), height, config.distance).len())
        .collect();
    let rows = per_row_peaks.iter().filter(|&&p| p > 0).count();
    let total: usize = per_row_peaks.iter().sum();
    let count = if rows == 0 { 0.0 } else { total as f64 / rows as f64 };
    Ok(CountResult {
        count,
        per_row_peaks,
        config: *config,
    })
}

/// Peaks of the smoothed, normalized root-height curve.
pub fn count_from_trajectory(root_height: &[f64], sigma: f64) -> f64 {
    trajectory_peaks(root_height, sigma, &CountingConfig::default()).len() as f64
}

pub fn trajectory_peaks(root_height: &[f64], sigma: f64, config: &CountingConfig) -> Vec<usize> {
    if root_height.len() < 3 {
        return Vec::new();
    }
    let curve = normalize01_slice(&gaussian_filter1d(root_height, sigma));
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    detect_peaks(&curve, mean * config.height_multiplier, config.distance)
}

/// Self-attention-like map of `k` repetitions: a `k × k` grid of Gaussian
/// blobs on a weak noisy background, so every row crossing a blob band
/// crosses exactly `k` blobs of equal height.
///
/// The period, blob width, margins, per-band gain and noise are random. Blob
/// centres sit at the centre of a `factor`-frame pooling block so that the
/// pooled blobs of one row stay equal; unaligned centres would make pooling
/// itself change the count. Left unnormalized (the counter is
/// scale-invariant).
pub fn synthetic_repetition_map<R: Rng + ?Sized>(rng: &mut R, k: usize, factor: usize) -> Array2<f64> {
    let f = factor.max(1);
    let period = 2 * f * rng.random_range(2..=5usize);
    let lead = f * rng.random_range(0..=2usize);
    let tail = f * rng.random_range(0..=2usize);
    let frames = lead + k * period + tail;
    let offset = (f as f64 - 1.0) / 2.0;
    let centres: Vec<f64> = (0..k)
        .map(|m| (lead + m * period + period / 2) as f64 + offset)
        .collect();
    let width = period as f64 * rng.random_range(0.12..0.2);
    let gains: Vec<f64> = (0..k).map(|_| rng.random_range(0.8..1.2)).collect();
    let mut m = Array2::from_shape_fn((frames, frames), |_| rng.random_range(0.0..0.01));
    for (a, ca) in centres.iter().enumerate() {
        for i in 0..frames {
            let di = (i as f64 - ca) / width;
            if di.abs() > 6.0 {
                continue;
            }
            let ri = gains[a] * (-di * di / 2.0).exp();
            for cb in &centres {
                for j in 0..frames {
                    let dj = (j as f64 - cb) / width;
                    m[[i, j]] += ri * (-dj * dj / 2.0).exp();
                }
            }
        }
    }
    m
}

/// One labeled generation for counting evaluation.
#[derive(Debug, Clone)]
pub struct CountingCase {
    pub truth: f64,
    /// Counting unit; gait repetitions count half per detected peak.
    pub unit: f64,
    pub attention: Option<Array2<f64>>,
    pub root_height: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingRow {
    pub method: String,
    pub sigma: f64,
    pub mae: f64,
    pub exact_rate: f64,
    pub error_rate: f64,
    pub cases: usize,
}

fn score(method: &str, sigma: f64, preds: &[(f64, f64, f64)]) -> CountingRow {
    let n = preds.len().max(1) as f64;
    let mae = preds.iter().map(|(p, t, _)| (p - t).abs()).sum::<f64>() / n;
    let exact = preds.iter().filter(|(p, t, u)| ((p - t) / u).abs() < 0.5).count() as f64 / n;
    CountingRow {
        method: method.to_string(),
        sigma,
        mae,
        exact_rate: exact,
        error_rate: 1.0 - exact,
        cases: preds.len(),
    }
}

/// Mean absolute error and exact-match rate of the attention and trajectory
/// counters for each smoothing width.
pub fn eval_counting(cases: &[CountingCase], sigmas: &[f64], base: &CountingConfig) -> Result<Vec<CountingRow>> {
    let mut rows = Vec::new();
    for &sigma in sigmas {
        let cfg = CountingConfig { sigma, ..*base };
        let mut attn = Vec::new();
        let mut traj = Vec::new();
        for c in cases {
            if let Some(m) = &c.attention {
                attn.push((count_actions(m, &cfg)?.count * c.unit, c.truth, c.unit));
            }
            let peaks = trajectory_peaks(&c.root_height, sigma, &cfg).len() as f64;
            traj.push((peaks * c.unit, c.truth, c.unit));
        }
        if !attn.is_empty() {
            rows.push(score("attention", sigma, &attn));
        }
        rows.push(score("trajectory", sigma, &traj));
    }
    Ok(rows)
}

/// Head-averaged self-attention map of a generation, cropped to its frames.
///
/// With `layer` unset, every full-resolution self-attention layer is averaged
/// too. `step` defaults to the last denoising step.
pub fn self_attention_map(result: &GenerationResult, layer: Option<usize>, step: Option<usize>) -> Result<Array2<f64>> {
    let last = result.records.iter().map(|r| r.denoise_step).max().unwrap_or(0);
    let step = step.unwrap_or(last);
    let padded = crate::network::padded_frames(result.frames);
    let picked: Vec<_> = result
        .records
        .iter()
        .filter(|r| r.kind == AttnKind::SelfAttn && r.denoise_step == step)
        .filter(|r| match layer {
            Some(l) => r.layer_index == l,
            None => r.map.nrows() == padded,
        })
        .collect();
    let Some(first) = picked.first() else {
        return Err(Error::range(format!(
            "no self-attention record for layer {layer:?} at step {step}"
        )));
    };
    let n = first.map.nrows();
    let mut acc = Array2::<f64>::zeros((n, n));
    for r in &picked {
        if r.map.dim() != (n, n) {
            return Err(Error::invalid("self-attention records of mixed resolution"));
        }
        acc.zip_mut_with(r.effective(), |a, &v| *a += v as f64);
    }
    acc /= picked.len() as f64;
    let keep = if n == padded { result.frames } else { n };
    Ok(acc.slice(ndarray::s![..keep, ..keep]).to_owned())
}
