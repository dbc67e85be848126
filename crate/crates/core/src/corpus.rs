//! Procedural (prompt, motion) pairs on a 6-joint toy skeleton.
//!
//! Feature layout per frame (`D = 21`): root height above rest in meters,
//! root planar velocity (x, z) in meters per frame, then the offsets of the
//! six joints relative to the root (x lateral, y up, z forward).

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use base64::Engine as _;
use ndarray::{Array1, Array2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::persistence::{decode_tensor, encode_tensor};
use crate::text::Vocabulary;
use crate::{Error, Result};

pub const FPS: u32 = 20;
pub const JOINTS: usize = 6;
pub const FEATURE_DIM: usize = 3 + 3 * JOINTS;
pub const MAX_FRAMES: usize = 200;
pub const MIN_FRAMES: usize = 16;
/// Frames of linear cross-fade at each segment boundary.
pub const BLEND_FRAMES: usize = 4;
/// Shortest repetition the generator will lay out.
pub const MIN_FRAMES_PER_REP: usize = 6;
/// Peak jump height per unit amplitude, meters.
pub const JUMP_HEIGHT: f64 = 0.3;
/// Lateral hand swing per unit amplitude while waving, meters.
pub const WAVE_SWING: f64 = 0.15;
/// Standing pelvis height used by forward kinematics.
pub const REST_ROOT_HEIGHT: f64 = 0.9;

pub const ROOT_HEIGHT: usize = 0;
pub const ROOT_VEL_X: usize = 1;
pub const ROOT_VEL_Z: usize = 2;

/// Column of coordinate `axis` (0 = x, 1 = y, 2 = z) of joint `joint`.
pub const fn joint_col(joint: usize, axis: usize) -> usize {
    3 + 3 * joint + axis
}

pub const HEAD: usize = 1;
pub const LEFT_HAND: usize = 2;
pub const RIGHT_HAND: usize = 3;
pub const LEFT_FOOT: usize = 4;
pub const RIGHT_FOOT: usize = 5;

const REST_OFFSETS: [[f64; 3]; JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.65, 0.0],
    [-0.25, -0.05, 0.0],
    [0.25, -0.05, 0.0],
    [-0.12, -0.9, 0.0],
    [0.12, -0.9, 0.0],
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    /// `-1` marks the root.
    pub parent_index: Vec<i32>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self {
            joint_names: ["root", "head", "left_hand", "right_hand", "left_foot", "right_foot"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            parent_index: vec![-1, 0, 0, 0, 0, 0],
        }
    }
}

impl Skeleton {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    /// Tree rooted at joint 0 with parents preceding children.
    pub fn is_valid_tree(&self) -> bool {
        self.parent_index.len() == self.joint_names.len()
            && self.parent_index.first() == Some(&-1)
            && self
                .parent_index
                .iter()
                .enumerate()
                .skip(1)
                .all(|(i, &p)| p >= 0 && (p as usize) < i)
    }
}

/// `F × 21` feature matrix at 20 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub features: Array2<f32>,
}

impl MotionSequence {
    pub fn new(features: Array2<f32>) -> Result<Self> {
        let m = Self { fps: FPS, features };
        m.validate()?;
        Ok(m)
    }

    pub fn frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::default()
    }

    pub fn root_height(&self) -> Vec<f64> {
        self.features.column(ROOT_HEIGHT).iter().map(|&v| v as f64).collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.features.column(col).iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.ncols() != FEATURE_DIM {
            return Err(Error::data(format!(
                "motion has {} features, expected {FEATURE_DIM}",
                self.features.ncols()
            )));
        }
        let f = self.frames();
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&f) {
            return Err(Error::data(format!(
                "motion has {f} frames, allowed {MIN_FRAMES}..={MAX_FRAMES}"
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("motion contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Walk,
    Run,
    Jump,
    Wave,
    Squat,
    Sit,
    Stand,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Walk,
        Action::Run,
        Action::Jump,
        Action::Wave,
        Action::Squat,
        Action::Sit,
        Action::Stand,
    ];

    pub fn verb(self) -> &'static str {
        match self {
            Action::Walk => "walks",
            Action::Run => "runs",
            Action::Jump => "jumps",
            Action::Wave => "waves",
            Action::Squat => "squats",
            Action::Sit => "sits",
            Action::Stand => "stands",
        }
    }

    pub fn from_verb(verb: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.verb() == verb)
    }

    /// Repetitions count in half units for gait actions (one per leg).
    pub fn counting_unit(self) -> f64 {
        match self {
            Action::Walk | Action::Run => 0.5,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub action: Action,
    pub count: u32,
    pub amplitude: f64,
}

impl ActionSpec {
    pub fn new(action: Action, count: u32) -> Self {
        Self {
            action,
            count,
            amplitude: 1.0,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.count) {
            return Err(Error::invalid(format!("repetition count {} outside 1..=6", self.count)));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 2.0) {
            return Err(Error::invalid(format!("amplitude {} outside (0, 2]", self.amplitude)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Pose {
    height: f64,
    vel: [f64; 2],
    offsets: [[f64; 3]; JOINTS],
}

impl Pose {
    fn rest() -> Self {
        Self {
            height: 0.0,
            vel: [0.0; 2],
            offsets: REST_OFFSETS,
        }
    }

    fn lerp(&self, other: &Pose, a: f64) -> Pose {
        let mut out = *self;
        out.height = self.height * (1.0 - a) + other.height * a;
        for i in 0..2 {
            out.vel[i] = self.vel[i] * (1.0 - a) + other.vel[i] * a;
        }
        for j in 0..JOINTS {
            for k in 0..3 {
                out.offsets[j][k] = self.offsets[j][k] * (1.0 - a) + other.offsets[j][k] * a;
            }
        }
        out
    }

    fn write(&self, row: &mut [f32]) {
        row[ROOT_HEIGHT] = self.height as f32;
        row[ROOT_VEL_X] = self.vel[0] as f32;
        row[ROOT_VEL_Z] = self.vel[1] as f32;
        for j in 0..JOINTS {
            for k in 0..3 {
                row[joint_col(j, k)] = self.offsets[j][k] as f32;
            }
        }
    }
}

/// Random per-sample style drawn from the seed.
struct Style {
    heading: f64,
    hand_jitter: f64,
}

fn raised_cosine(v: f64) -> f64 {
    if (0.0..=1.0).contains(&v) {
        0.5 * (1.0 - (TAU * v).cos())
    } else {
        0.0
    }
}

/// Pose of `spec` at frame `i` of a segment of `n` frames. `i` may run past
/// the segment end for cross-fades.
fn action_pose(spec: &ActionSpec, i: usize, n: usize, style: &Style) -> Pose {
    let k = spec.count as f64;
    let a = spec.amplitude;
    // The quarter-frame offset keeps sampled curves free of exact ties.
    let u = (i as f64 + 0.25) / n as f64 * k;
    let p = u.fract();
    let mut pose = Pose::rest();
    pose.offsets[RIGHT_HAND][0] += style.hand_jitter;
    pose.offsets[LEFT_HAND][0] -= style.hand_jitter;
    let (hx, hz) = (style.heading.cos(), style.heading.sin());
    match spec.action {
        Action::Stand => {}
        Action::Walk | Action::Run => {
            let (speed, swing, lift, arm) = if spec.action == Action::Walk {
                (0.05, 0.2, 0.08, 0.1)
            } else {
                (0.12, 0.3, 0.15, 0.2)
            };
            let s = (TAU * u).sin();
            pose.vel = [speed * a * hx, speed * a * hz];
            pose.offsets[LEFT_FOOT][2] += swing * a * s;
            pose.offsets[RIGHT_FOOT][2] -= swing * a * s;
            pose.offsets[LEFT_FOOT][1] += lift * a * s.max(0.0);
            pose.offsets[RIGHT_FOOT][1] += lift * a * (-s).max(0.0);
            pose.offsets[LEFT_HAND][2] -= arm * a * s;
            pose.offsets[RIGHT_HAND][2] += arm * a * s;
            if spec.action == Action::Run {
                pose.offsets[LEFT_HAND][1] += 0.2;
                pose.offsets[RIGHT_HAND][1] += 0.2;
            }
        }
        Action::Jump => {
            let h = if u < k {
                JUMP_HEIGHT * a * raised_cosine((p - 0.35) / 0.3)
            } else {
                0.0
            };
            pose.height = h;
            pose.offsets[LEFT_HAND][1] += 1.2 * h;
            pose.offsets[RIGHT_HAND][1] += 1.2 * h;
            pose.offsets[LEFT_FOOT][1] += 0.3 * h;
            pose.offsets[RIGHT_FOOT][1] += 0.3 * h;
        }
        Action::Wave => {
            pose.offsets[RIGHT_HAND][1] += 0.6;
            pose.offsets[RIGHT_HAND][0] += WAVE_SWING * a * (TAU * u).sin();
        }
        Action::Squat => {
            let d = 0.25 * a * raised_cosine(p);
            pose.offsets[HEAD][1] -= d;
            pose.offsets[LEFT_HAND][1] -= d;
            pose.offsets[RIGHT_HAND][1] -= d;
            pose.offsets[LEFT_HAND][2] += d;
            pose.offsets[RIGHT_HAND][2] += d;
            pose.offsets[LEFT_FOOT][1] += d;
            pose.offsets[RIGHT_FOOT][1] += d;
        }
        Action::Sit => {
            let s = (2.0 * raised_cosine(p)).min(1.0) * 0.4 * a;
            pose.offsets[HEAD][1] -= s;
            pose.offsets[LEFT_HAND][1] -= 0.5 * s;
            pose.offsets[RIGHT_HAND][1] -= 0.5 * s;
            for foot in [LEFT_FOOT, RIGHT_FOOT] {
                pose.offsets[foot][1] += 0.6 * s;
                pose.offsets[foot][2] += 0.6 * s;
            }
        }
    }
    pose
}

/// Lays the actions out contiguously over `frames` frames with 4-frame
/// linear cross-fades between consecutive segments.
pub fn synth_motion(specs: &[ActionSpec], frames: usize, seed: u64) -> Result<MotionSequence> {
    if specs.is_empty() {
        return Err(Error::invalid("no actions requested"));
    }
    if !(MIN_FRAMES..=MAX_FRAMES).contains(&frames) {
        return Err(Error::invalid(format!(
            "{frames} frames requested, allowed {MIN_FRAMES}..={MAX_FRAMES}"
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let base = frames / specs.len();
    let mut bounds = Vec::with_capacity(specs.len());
    let mut start = 0;
    for (i, s) in specs.iter().enumerate() {
        let len = if i + 1 == specs.len() { frames - start } else { base };
        if len < MIN_FRAMES_PER_REP * s.count as usize {
            return Err(Error::invalid(format!(
                "{len} frames cannot hold {} repetitions of {:?} (need {} per repetition)",
                s.count, s.action, MIN_FRAMES_PER_REP
            )));
        }
        bounds.push((start, len));
        start += len;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style {
        heading: rng.random_range(0.0..TAU),
        hand_jitter: rng.random_range(-0.02..0.02),
    };

    let mut features = Array2::<f32>::zeros((frames, FEATURE_DIM));
    for (si, (spec, &(start, len))) in specs.iter().zip(&bounds).enumerate() {
        for i in 0..len {
            let mut pose = action_pose(spec, i, len, &style);
            if si > 0 && i < BLEND_FRAMES {
                let (_, prev_len) = bounds[si - 1];
                let prev = action_pose(&specs[si - 1], prev_len + i, prev_len, &style);
                let alpha = (i + 1) as f64 / (BLEND_FRAMES + 1) as f64;
                pose = prev.lerp(&pose, alpha);
            }
            let mut row = features.row_mut(start + i);
            pose.write(row.as_slice_mut().expect("rows are contiguous"));
        }
    }
    MotionSequence::new(features)
}

/// One labeled corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub prompt: String,
    pub verb_indices: Vec<usize>,
    pub actions: Vec<ActionSpec>,
    pub motion: MotionSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub frames: usize,
    /// Largest explicit repetition count used in prompts.
    pub max_count: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frames: 48,
            max_count: 4,
        }
    }
}

const SUBJECTS: &[&str] = &["a man", "a person", "a woman", "someone"];
const COUNT_WORDS: &[&str] = &["once", "twice", "three times", "four times", "five times", "six times"];

fn count_phrase(count: u32) -> &'static str {
    COUNT_WORDS[count as usize - 1]
}

fn single_action_sample(rng: &mut ChaCha8Rng, cfg: &CorpusConfig) -> (String, Vec<ActionSpec>) {
    let action = *Action::ALL.choose(rng).expect("non-empty");
    let subject = *SUBJECTS.choose(rng).expect("non-empty");
    let countable = matches!(action, Action::Jump | Action::Wave | Action::Squat);
    let explicit = countable && rng.random_bool(0.6);
    let count = match action {
        _ if explicit => rng.random_range(1..=cfg.max_count),
        Action::Jump | Action::Wave | Action::Squat => rng.random_range(1..=3),
        Action::Walk => 2,
        Action::Run => 3,
        Action::Sit | Action::Stand => 1,
    };
    let (modifier, amplitude) = match rng.random_range(0..5) {
        0 if action == Action::Jump => (" high", 1.6),
        1 if action != Action::Stand => (" happily", 1.5),
        2 if action != Action::Stand => (" slowly", 0.6),
        _ => ("", rng.random_range(0.9..1.1)),
    };
    let object = match action {
        Action::Wave => *[" his hand", " her hand", ""].choose(rng).expect("non-empty"),
        Action::Walk => *[" forward", ""].choose(rng).expect("non-empty"),
        Action::Sit => " down",
        Action::Stand => *[" still", " in place"].choose(rng).expect("non-empty"),
        Action::Jump => *[" up", " in place", ""].choose(rng).expect("non-empty"),
        _ => "",
    };
    let mut prompt = format!("{subject} {}{object}{modifier}", action.verb());
    if explicit {
        prompt.push(' ');
        prompt.push_str(count_phrase(count));
    }
    prompt.push('.');
    (prompt, vec![ActionSpec::new(action, count).with_amplitude(amplitude)])
}

fn two_action_sample(rng: &mut ChaCha8Rng) -> (String, Vec<ActionSpec>) {
    let subject = *SUBJECTS.choose(rng).expect("non-empty");
    let first = *Action::ALL.choose(rng).expect("non-empty");
    let second = loop {
        let a = *Action::ALL.choose(rng).expect("non-empty");
        if a != first {
            break a;
        }
    };
    let count = |a: Action, rng: &mut ChaCha8Rng| match a {
        Action::Walk | Action::Run => 1,
        Action::Sit | Action::Stand => 1,
        _ => rng.random_range(1..=2),
    };
    let specs = vec![
        ActionSpec::new(first, count(first, rng)),
        ActionSpec::new(second, count(second, rng)),
    ];
    (format!("{subject} {} then {}.", first.verb(), second.verb()), specs)
}

/// Deterministic corpus of `size` samples at the default frame count.
pub fn make_corpus(size: usize, seed: u64) -> Result<Vec<CorpusSample>> {
    make_corpus_with(size, seed, &CorpusConfig::default())
}

pub fn make_corpus_with(size: usize, seed: u64, cfg: &CorpusConfig) -> Result<Vec<CorpusSample>> {
    if size == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    let vocab = Vocabulary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let (prompt, actions) = if rng.random_bool(0.7) {
                single_action_sample(&mut rng, cfg)
            } else {
                two_action_sample(&mut rng)
            };
            let motion = synth_motion(&actions, cfg.frames, rng.random())?;
            let tokens = vocab.tokenize(&prompt)?;
            Ok(CorpusSample {
                prompt,
                verb_indices: tokens.verb_indices,
                actions,
                motion,
            })
        })
        .collect()
}

/// Per-feature mean and standard deviation used for z-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = Array1::<f64>::zeros(FEATURE_DIM);
        let mut sq = Array1::<f64>::zeros(FEATURE_DIM);
        let motions: Vec<_> = motions.into_iter().collect();
        for m in &motions {
            let f = m.features.mapv(|v| v as f64);
            sum += &f.sum_axis(Axis(0));
            n += f.nrows();
        }
        if n == 0 {
            return Err(Error::invalid("cannot normalize an empty corpus"));
        }
        let mean = sum / n as f64;
        for m in &motions {
            let f = m.features.mapv(|v| v as f64);
            sq += &(&f - &mean).mapv(|v| v * v).sum_axis(Axis(0));
        }
        let std = (sq / n as f64).mapv(|v| v.sqrt().max(STD_FLOOR));
        Ok(Self {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: std.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn normalize(&self, features: &Array2<f32>) -> Array2<f32> {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j] as f64) / self.std[j] as f64) as f32;
            }
        }
        out
    }

    pub fn denormalize(&self, features: &Array2<f32>) -> Array2<f32> {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v as f64 * self.std[j] as f64 + self.mean[j] as f64) as f32;
            }
        }
        out
    }
}

/// Z-normalizes every motion of the corpus with statistics fitted on it.
pub fn normalize(corpus: &[CorpusSample]) -> Result<(Vec<CorpusSample>, NormStats)> {
    let stats = NormStats::fit(corpus.iter().map(|s| &s.motion))?;
    let normalized = corpus
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.motion.features = stats.normalize(&s.motion.features);
            s
        })
        .collect();
    Ok((normalized, stats))
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    prompt: String,
    verb_indices: Vec<usize>,
    fps: u32,
    frames: usize,
    features: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    actions: Vec<ActionSpec>,
}

/// One JSON object per line; features are a base64 tensor file.
pub fn write_jsonl<W: Write>(mut w: W, corpus: &[CorpusSample]) -> Result<()> {
    for s in corpus {
        let line = CorpusLine {
            prompt: s.prompt.clone(),
            verb_indices: s.verb_indices.clone(),
            fps: s.motion.fps,
            frames: s.motion.frames(),
            features: base64::engine::general_purpose::STANDARD
                .encode(encode_tensor(&s.motion.features.view().into_dyn())),
            actions: s.actions.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CorpusSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("corpus line {}: {e}", n + 1)))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(parsed.features.as_bytes())
            .map_err(|e| Error::data(format!("corpus line {}: bad base64: {e}", n + 1)))?;
        let tensor = decode_tensor(&bytes)?;
        let features = tensor
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::data(format!("corpus line {}: features must be 2-D", n + 1)))?;
        if features.nrows() != parsed.frames {
            return Err(Error::data(format!("corpus line {}: frame count mismatch", n + 1)));
        }
        let mut motion = MotionSequence::new(features)?;
        motion.fps = parsed.fps;
        out.push(CorpusSample {
            prompt: parsed.prompt,
            verb_indices: parsed.verb_indices,
            actions: parsed.actions,
            motion,
        });
    }
    if out.is_empty() {
        return Err(Error::data("corpus is empty"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Strict local maxima above `threshold`, scanned independently of the
    /// counting module.
    fn strict_maxima(curve: &[f64], threshold: f64) -> usize {
        (1..curve.len().saturating_sub(1))
            .filter(|&i| curve[i] > curve[i - 1] && curve[i] > curve[i + 1] && curve[i] > threshold)
            .count()
    }

    #[test]
    fn skeleton_is_a_rooted_tree() {
        let s = Skeleton::default();
        assert_eq!(s.joints(), 6);
        assert!(s.is_valid_tree());
    }

    #[test]
    fn single_jump_has_one_maximum() {
        let m = synth_motion(&[ActionSpec::new(Action::Jump, 1)], 60, 0).unwrap();
        assert_eq!(strict_maxima(&m.root_height(), 0.1), 1);
        let peak = m.root_height().into_iter().fold(0.0, f64::max);
        assert!((peak - JUMP_HEIGHT).abs() < 1e-3, "peak {peak}");
    }

    #[test]
    fn standing_is_flat() {
        let m = synth_motion(&[ActionSpec::new(Action::Stand, 1)], 60, 0).unwrap();
        assert!(m.root_height().iter().all(|&h| h == 0.0));
        assert_eq!(strict_maxima(&m.root_height(), 0.0), 0);
    }

    #[test]
    fn jump_and_wave_counts_match_spec() {
        for k in 1..=6u32 {
            for amp in [0.5, 1.0, 2.0] {
                let jump = synth_motion(&[ActionSpec::new(Action::Jump, k).with_amplitude(amp)], 120, 7).unwrap();
                assert_eq!(strict_maxima(&jump.root_height(), 0.5 * JUMP_HEIGHT * amp), k as usize);
                let wave = synth_motion(&[ActionSpec::new(Action::Wave, k).with_amplitude(amp)], 120, 7).unwrap();
                let rest = wave.column(joint_col(RIGHT_HAND, 0)).iter().sum::<f64>() / 120.0;
                let swing: Vec<f64> = wave.column(joint_col(RIGHT_HAND, 0)).iter().map(|v| v - rest).collect();
                assert_eq!(
                    strict_maxima(&swing, 0.5 * WAVE_SWING * amp),
                    k as usize,
                    "wave k={k} amp={amp}"
                );
            }
        }
    }

    #[test]
    fn walking_feet_move_in_antiphase() {
        let m = synth_motion(&[ActionSpec::new(Action::Walk, 3)], 60, 1).unwrap();
        let l = m.column(joint_col(LEFT_FOOT, 2));
        let r = m.column(joint_col(RIGHT_FOOT, 2));
        let corr: f64 = l.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!(corr < 0.0);
        assert!(l.iter().cloned().fold(f64::MIN, f64::max) > 0.1);
        assert!(m
            .column(ROOT_VEL_X)
            .iter()
            .chain(m.column(ROOT_VEL_Z).iter())
            .any(|v| v.abs() > 0.01));
    }

    #[test]
    fn segments_blend_without_jumps_in_values() {
        let specs = [ActionSpec::new(Action::Walk, 1), ActionSpec::new(Action::Wave, 2)];
        let m = synth_motion(&specs, 48, 2).unwrap();
        let hand_y = m.column(joint_col(RIGHT_HAND, 1));
        let max_step = hand_y.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_step < 0.2, "step {max_step}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let specs = [ActionSpec::new(Action::Run, 2), ActionSpec::new(Action::Jump, 2)];
        assert_eq!(
            synth_motion(&specs, 64, 9).unwrap(),
            synth_motion(&specs, 64, 9).unwrap()
        );
        assert_ne!(
            synth_motion(&specs, 64, 9).unwrap(),
            synth_motion(&specs, 64, 10).unwrap()
        );
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(synth_motion(&[], 60, 0).is_err());
        assert!(synth_motion(&[ActionSpec::new(Action::Jump, 1)], 8, 0).is_err());
        assert!(synth_motion(&[ActionSpec::new(Action::Jump, 6)], 20, 0).is_err());
        assert!(synth_motion(&[ActionSpec::new(Action::Jump, 0)], 60, 0).is_err());
        assert!(synth_motion(&[ActionSpec::new(Action::Jump, 1).with_amplitude(2.5)], 60, 0).is_err());
    }

    #[test]
    fn corpus_invariants() {
        let corpus = make_corpus(500, 1).unwrap();
        assert_eq!(corpus.len(), 500);
        let vocab = Vocabulary::default();
        for s in &corpus {
            s.motion.validate().unwrap();
            assert!(s.motion.root_height().iter().all(|&h| h >= -0.01));
            let t = vocab.tokenize(&s.prompt).unwrap();
            assert_eq!(t.unknown_count(), 0, "{}", s.prompt);
            assert_eq!(t.verb_indices, s.verb_indices);
            assert_eq!(t.verb_indices.len(), s.actions.len(), "{}", s.prompt);
        }
        assert_eq!(corpus, make_corpus(500, 1).unwrap());
    }

    #[test]
    fn single_sample_tokenizes_cleanly() {
        let corpus = make_corpus(1, 0).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(
            Vocabulary::default()
                .tokenize(&corpus[0].prompt)
                .unwrap()
                .unknown_count(),
            0
        );
        assert!(make_corpus(0, 0).is_err());
    }

    #[test]
    fn normalization_properties() {
        let corpus = make_corpus(50, 4).unwrap();
        let (norm, stats) = normalize(&corpus).unwrap();
        let all: Vec<_> = norm.iter().map(|s| s.motion.features.mapv(|v| v as f64)).collect();
        let views: Vec<_> = all.iter().map(|a| a.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).unwrap();
        for (j, col) in stacked.columns().into_iter().enumerate() {
            assert!(col.mean().unwrap().abs() < 1e-6, "column {j}");
        }
        // The root joint offset never moves: its columns are constant.
        for axis in 0..3 {
            assert!(stacked.column(joint_col(0, axis)).iter().all(|&v| v == 0.0));
        }
        for (a, b) in corpus.iter().zip(&norm) {
            let back = stats.denormalize(&b.motion.features);
            let err = (&back - &a.motion.features)
                .mapv(f32::abs)
                .fold(0.0f32, |m, &v| m.max(v));
            assert!(err < 1e-5, "round trip error {err}");
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let corpus = make_corpus(5, 3).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &corpus).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 5);
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, corpus);
        assert!(read_jsonl(&b"{\"prompt\": 1}\n"[..]).is_err());
    }
}
