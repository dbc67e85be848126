//! Metric suites over a trained checkpoint.

use mclr::corpus::Action;
use mclr::counting::{self, CountingCase, CountingRow};
use mclr::diffusion::{self, GenerationResult};
use mclr::editing::{self, EditDirective, ReweightMode};
use mclr::model::MotionModel;
use serde::{Deserialize, Serialize};

use crate::{sample_request, CliError, Settings};

/// Smoothing widths of the counting sweep.
pub const SIGMAS: &[f64] = &[0.0, 0.4, 0.8, 1.2, 1.6, 2.0, 3.0];
/// Emphasis weights of the sweep.
pub const WEIGHTS: &[f64] = &[-0.5, -0.3, 0.0, 0.3, 0.5];

const COUNT_PHRASES: &[&str] = &["once", "twice", "three times", "four times", "five times"];

pub fn jump_prompt(k: usize) -> String {
    format!("a man jumps {}.", COUNT_PHRASES[k - 1])
}

/// Trajectory peaks of a generated motion with default counting settings.
pub fn trajectory_count(result: &GenerationResult, sigma: f64) -> usize {
    let cfg = counting::CountingConfig::default();
    counting::trajectory_peaks(&result.motion.root_height(), sigma, &cfg).len()
}

/// Highest root height of a motion relative to its first frame.
pub fn peak_height(result: &GenerationResult) -> f64 {
    let h = result.motion.root_height();
    let base = h.first().copied().unwrap_or(0.0);
    h.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v - base))
}

pub struct Table<R: Serialize>(pub Vec<R>);

impl<R: Serialize> Table<R> {
    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.0 {
            w.serialize(row).map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.into_inner().map_err(|e| CliError::Data(e.to_string()))
    }
}

/// Jump prompts with one to five repetitions, `settings.seeds` samples each,
/// scored by both counters over [`SIGMAS`].
pub fn counting_suite(model: &MotionModel, settings: &Settings) -> Result<Table<CountingRow>, CliError> {
    let mut cases = Vec::new();
    for k in 1..=COUNT_PHRASES.len() {
        for seed in 0..settings.seeds {
            let request = sample_request(
                &jump_prompt(k),
                &Settings {
                    seed,
                    ..settings.clone()
                },
            );
            let result = diffusion::generate(model, &request)?;
            cases.push(CountingCase {
                truth: k as f64,
                unit: Action::Jump.counting_unit(),
                attention: Some(counting::self_attention_map(&result, None, None)?),
                root_height: result.motion.root_height(),
            });
        }
    }
    Ok(Table(counting::eval_counting(&cases, SIGMAS, &settings.counting())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weight: f64,
    pub seed: u64,
    /// Mean effective cross-attention mass on the emphasized word.
    pub target_mass: f64,
    pub mass_delta: f64,
    pub peak_height: f64,
    pub peaks: usize,
}

/// Emphasis on the verb of `prompt` for every weight and seed.
pub fn sweep(
    model: &MotionModel,
    settings: &Settings,
    prompt: &str,
    weights: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    let tokens = model.tokenize(prompt)?;
    let word_index = *tokens
        .verb_indices
        .first()
        .ok_or_else(|| CliError::Usage(format!("prompt {prompt:?} has no action verb")))?;
    let mut rows = Vec::new();
    for seed in 0..settings.seeds {
        let request = sample_request(
            prompt,
            &Settings {
                seed,
                ..settings.clone()
            },
        );
        for &weight in weights {
            let directive = EditDirective::Emphasize {
                word_index,
                weight,
                mode: ReweightMode::Additive,
            };
            let s = editing::run_edit(model, &request, &directive)?;
            let column = 1 + word_index;
            rows.push(SweepRow {
                weight,
                seed,
                target_mass: editing::column_mass(&s.edited)[column],
                mass_delta: s.diff.column_mass_deltas[column],
                peak_height: peak_height(&s.edited),
                peaks: trajectory_count(&s.edited, settings.sigma),
            });
        }
    }
    Ok(rows)
}

pub fn emphasis_sweep(model: &MotionModel, settings: &Settings) -> Result<Table<SweepRow>, CliError> {
    Ok(Table(sweep(model, settings, "a man jumps.", WEIGHTS)?))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}
