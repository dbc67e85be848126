//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! (written straight to stderr so it shows up without `--nocapture`); the
//! test fails if any criterion fails.
//!
//! Everything runs inside one test function so the timed training run does
//! not share the CPU with other tests of this binary.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mclr::corpus::{self, Action, ActionSpec};
use mclr::counting::{self, CountingConfig};
use mclr::diffusion::{self, DiffusionConfig, SampleRequest, TrainConfig, Trainer};
use mclr::editing::{self, EditDirective, ReweightMode};
use mclr::model::{Denoiser, ModelConfig, MotionModel};
use mclr::network::{gradcheck, AttentionRecorder, AttnKind, MultiHeadAttention, NoHooks, Params, UNetConfig};
use mclr::text::Vocabulary;
use mclr_cli::eval::{self, median, trajectory_count};
use mclr_cli::{sample_request, Settings};
use ndarray::{arr2, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<Outcome>, name: &'static str, pass: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    results.push(Outcome { name, pass, detail });
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || (rng.sample::<f64, _>(StandardNormal) * std) as f32)
}

fn attention_math() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    let mut maps = 0usize;
    for i in 0..1000 {
        let heads = [1, 2, 4][i % 3];
        let dim = heads * rng.random_range(1..=8usize);
        let frames = rng.random_range(1..=24usize);
        let batch = rng.random_range(1..=2usize);
        let x = randn(&mut rng, batch * frames, dim, 3.0);
        let mut rec = AttentionRecorder::new();
        rec.set_pass(1, true);
        if i % 2 == 0 {
            let attn = MultiHeadAttention::<f32>::new_self(&mut rng, 1, dim, heads, 1.0);
            attn.forward(&x, frames, None, &mut rec);
        } else {
            let text_dim = rng.random_range(1..=8usize);
            let lens: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=6usize)).collect();
            let mut offsets = vec![0];
            for l in &lens {
                offsets.push(offsets.last().unwrap() + l);
            }
            let ctx = mclr::network::TextContext {
                emb: randn(&mut rng, offsets[batch], text_dim, 3.0),
                offsets,
            };
            let attn = MultiHeadAttention::<f32>::new_cross(&mut rng, 2, dim, text_dim, heads, 1.0);
            attn.forward(&x, frames, Some(&ctx), &mut rec);
        }
        for r in &rec.records {
            maps += 1;
            for row in r.map.rows() {
                let sum: f64 = row.iter().map(|&p| p as f64).sum();
                if row.iter().any(|&p| p < 0.0) {
                    worst = f64::INFINITY;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    // Hand example: q = e1, keys e1 and e2 at d = 2.
    let q = arr2(&[[1.0f64, 0.0]]);
    let k = arr2(&[[1.0f64, 0.0], [0.0, 1.0]]);
    let (_, map) = mclr::network::attention(q.view(), k.view(), k.view()).unwrap();
    let s = 1.0f64 / 2f64.sqrt();
    let oracle = [s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0)];
    let hand = (map[[0, 0]] - oracle[0]).abs().max((map[[0, 1]] - oracle[1]).abs());
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-5 && hand <= 1e-6 && secs < 5.0,
        format!(
            "{maps} recorded maps from 1000 instances, max |row sum − 1| = {worst:.2e} (≤ 1e-5); \
             d=2 example error {hand:.2e} (≤ 1e-6); {secs:.2}s (< 5s)"
        ),
    )
}

fn equivariance() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3usize)];
        let dim = heads * rng.random_range(1..=8usize);
        let frames = rng.random_range(2..=32usize);
        let shift = rng.random_range(1..frames);
        let attn = MultiHeadAttention::<f32>::new_self(&mut rng, 1, dim, heads, 1.0);
        let x = randn(&mut rng, frames, dim, 1.0);
        let rolled = Array2::from_shape_fn((frames, dim), |(i, j)| x[[(i + frames - shift) % frames, j]]);
        let (y, _) = attn.forward(&x, frames, None, &mut NoHooks);
        let (yr, _) = attn.forward(&rolled, frames, None, &mut NoHooks);
        for i in 0..frames {
            for j in 0..dim {
                worst = worst.max((yr[[i, j]] - y[[(i + frames - shift) % frames, j]]).abs());
            }
        }
    }
    (
        worst <= 1e-5,
        format!("100 instances, max |attn(roll x) − roll attn(x)| = {worst:.2e} (≤ 1e-5)"),
    )
}

fn gradient_check() -> (bool, String) {
    let start = Instant::now();
    let vocab = Vocabulary::default();
    // Full architecture (three levels, two CLR blocks each, 12 attention
    // layers) at toy widths; 16 frames need no internal padding.
    let cfg = ModelConfig {
        unet: UNetConfig {
            motion_dim: 3,
            base_width: 6,
            mid_width: 8,
            text_dim: 4,
            time_dim: 4,
            heads: 2,
            ffn_mult: 2,
            blocks_per_level: 2,
        },
        vocab_size: vocab.len(),
        frames: 16,
    };
    let a = vocab.tokenize("a man jumps twice.").unwrap();
    let b = vocab.tokenize("someone waves").unwrap();
    let tokens = [&a, &b];
    let steps = [12, 740];
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in [7u64, 8, 9] {
        let net = Denoiser::<f64>::new(&cfg, seed);
        params = net.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Array2::from_shape_simple_fn((32, 3), || rng.sample::<f64, _>(StandardNormal));
        let w = Array2::from_shape_simple_fn((32, 3), || rng.sample::<f64, _>(StandardNormal));
        let (_, cache) = net.forward(&x, 16, &steps, &tokens, &mut NoHooks).unwrap();
        let mut grad = net.zeros_like();
        net.backward(&cache, &tokens, &w, &mut grad);
        let loss = |m: &Denoiser<f64>| (&m.forward(&x, 16, &steps, &tokens, &mut NoHooks).unwrap().0 * &w).sum();
        worst = worst.max(gradcheck::max_relative_error(&net, &grad, loss, 1e-4));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        params <= 5000 && worst < 1e-3 && secs < 60.0,
        format!(
            "{params} parameters (≤ 5000), 3 seeds, central differences h=1e-4, \
             max relative error {worst:.2e} (< 1e-3); {secs:.1}s (< 60s)"
        ),
    )
}

fn noop_closure(model: &MotionModel) -> (bool, String) {
    let start = Instant::now();
    let prompt = "a man jumps twice.";
    let frames = model.config.frames;
    let request = SampleRequest::new(prompt, frames, 21);
    let tokens = model.tokenize(prompt).unwrap();
    let directives = vec![
        EditDirective::Emphasize {
            word_index: 2,
            weight: 0.0,
            mode: ReweightMode::Additive,
        },
        EditDirective::Erase {
            word_index: 2,
            factor: 1.0,
        },
        EditDirective::Replace {
            edited_prompt: None,
            steps_end: 10,
            layer_begin: 1,
            layer_end: None,
        },
        EditDirective::Shift {
            ratio: 0.0,
            steps_end: 10,
        },
        EditDirective::Example {
            chunk_size: frames,
            seed: 4,
            seed_bar: 0,
            trigger_step: 3,
            samples: 1,
        },
        EditDirective::Style {
            content_prompt: None,
            steps_end: 10,
        },
        EditDirective::Ground {
            mask: vec![vec![0.0; tokens.len()]; frames],
        },
    ];
    let plain = diffusion::generate(model, &request).unwrap();
    let mut failed = Vec::new();
    for d in &directives {
        let s = editing::run_edit(model, &request, d).unwrap();
        let same = s.edited.motion.features == plain.motion.features
            && s.reference.motion.features == plain.motion.features
            && s.diff.is_zero();
        if !same {
            failed.push(d.op());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        failed.is_empty() && secs < 30.0,
        format!(
            "{} no-op directives ({}) bitwise equal to plain sampling, failures {failed:?}; {secs:.1}s (< 30s)",
            directives.len(),
            directives.iter().map(|d| d.op()).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn additive_exactness(model: &MotionModel) -> (bool, String) {
    let request = SampleRequest::new("a man jumps twice.", model.config.frames, 2);
    let column = 3;
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for w in [-0.5, -0.3, 0.3, 0.5] {
        let d = EditDirective::Emphasize {
            word_index: column - 1,
            weight: w,
            mode: ReweightMode::Additive,
        };
        let s = editing::run_edit(model, &request, &d).unwrap();
        for rec in s.edited.records.iter().filter(|r| r.kind == AttnKind::Cross) {
            let Some(e) = rec.edited.as_ref() else {
                mismatches += 1;
                continue;
            };
            for ((i, j), &orig) in rec.map.indexed_iter() {
                let want = if j == column { orig + w as f32 } else { orig };
                checked += 1;
                if e[[i, j]] != want {
                    mismatches += 1;
                }
            }
        }
    }
    (
        checked > 0 && mismatches == 0,
        format!(
            "w ∈ {{−0.5, −0.3, 0.3, 0.5}}: {checked} recorded cross entries, edited − original = w on the \
             target column and 0 elsewhere, {mismatches} mismatches"
        ),
    )
}

fn counting_oracle() -> (bool, String) {
    let start = Instant::now();
    let cfg = CountingConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut exact = 0;
    for i in 0..50 {
        let k = 1 + i % 5;
        let m = counting::synthetic_repetition_map(&mut rng, k, cfg.downsample_factor);
        if counting::count_actions(&m, &cfg).unwrap().count == k as f64 {
            exact += 1;
        }
    }
    let mut curves = 0;
    let mut curve_misses = Vec::new();
    for k in 1..=5u32 {
        for (frames, seed) in [(48, 0u64), (48, 1), (80, 2), (120, 3)] {
            let h = corpus::synth_motion(&[ActionSpec::new(Action::Jump, k)], frames, seed)
                .unwrap()
                .root_height();
            curves += 1;
            let c = counting::count_from_trajectory(&h, cfg.sigma);
            if c != k as f64 {
                curve_misses.push((k, frames, c));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        exact as f64 / 50.0 >= 0.95 && curve_misses.is_empty() && secs < 10.0,
        format!(
            "synthetic maps exact {exact}/50 (≥ 95%); trajectory exact on {}/{curves} generator jump curves \
             (all required), misses {curve_misses:?}; {secs:.2}s (< 10s)",
            curves - curve_misses.len()
        ),
    )
}

struct Training {
    model: MotionModel,
    step: u64,
    elapsed: Duration,
    first: f64,
    last: f64,
}

fn toy_training() -> Training {
    let start = Instant::now();
    let raw = corpus::make_corpus(500, 1).unwrap();
    let (normalized, stats) = corpus::normalize(&raw).unwrap();
    let vocab = Vocabulary::default();
    let config = ModelConfig::new(vocab.len(), raw[0].motion.frames());
    let model = MotionModel::new(config, vocab, stats, 0).unwrap();
    let train = TrainConfig {
        steps: 2000,
        batch_size: 64,
        lr: 2e-4,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, &normalized, train, DiffusionConfig::default()).unwrap();
    let summary = trainer.run(train.steps, |_| {}).unwrap();
    let (first, last) = summary.window_means(100);
    Training {
        step: trainer.step,
        model: trainer.model,
        elapsed: start.elapsed(),
        first,
        last,
    }
}

fn trained_behavior(model: &MotionModel) -> (bool, String) {
    let settings = Settings::default();
    let seeds = 20u64;
    let mut with_jump = 0;
    for seed in 0..seeds {
        let r = diffusion::generate(
            model,
            &sample_request(
                "a man jumps.",
                &Settings {
                    seed,
                    ..settings.clone()
                },
            ),
        )
        .unwrap();
        if trajectory_count(&r, settings.sigma) >= 1 {
            with_jump += 1;
        }
    }
    let weights = [-0.5, 0.0, 0.5];
    let rows = eval::sweep(
        model,
        &Settings {
            seeds,
            ..settings.clone()
        },
        "a man jumps.",
        &weights,
    )
    .unwrap();
    let at = |w: f64| rows.iter().filter(move |r| r.weight == w);
    let masses: Vec<f64> = weights
        .iter()
        .map(|&w| at(w).map(|r| r.target_mass).sum::<f64>() / seeds as f64)
        .collect();
    let heights: Vec<f64> = weights
        .iter()
        .map(|&w| median(&mut at(w).map(|r| r.peak_height).collect::<Vec<_>>()))
        .collect();
    let mut ordered = 0;
    let mut pairs = 0;
    for seed in 0..seeds {
        let h = |w: f64| at(w).find(|r| r.seed == seed).unwrap().peak_height;
        for (lo, hi) in [(-0.5, 0.0), (0.0, 0.5)] {
            pairs += 1;
            if h(hi) >= h(lo) {
                ordered += 1;
            }
        }
    }
    let mut fewer = 0;
    for seed in 0..seeds {
        let request = sample_request(
            "a man jumps.",
            &Settings {
                seed,
                ..settings.clone()
            },
        );
        let d = EditDirective::Replace {
            edited_prompt: Some("a man walks.".into()),
            steps_end: editing::DEFAULT_STEPS_END,
            layer_begin: 1,
            layer_end: None,
        };
        let s = editing::run_edit(model, &request, &d).unwrap();
        if trajectory_count(&s.edited, settings.sigma) < trajectory_count(&s.reference, settings.sigma) {
            fewer += 1;
        }
    }
    let jump_rate = with_jump as f64 / seeds as f64;
    let mass_monotone = masses.windows(2).all(|p| p[1] > p[0]);
    let heights_monotone = heights.windows(2).all(|p| p[1] >= p[0]);
    let order_rate = ordered as f64 / pairs as f64;
    let fewer_rate = fewer as f64 / seeds as f64;
    (
        jump_rate >= 0.8 && mass_monotone && heights_monotone && order_rate >= 0.6 && fewer_rate >= 0.6,
        format!(
            "\"a man jumps.\" ≥1 jump in {with_jump}/{seeds} seeds (≥ 80%); emphasis w ∈ {{−0.5, 0, 0.5}}: \
             mean target mass {:.4} / {:.4} / {:.4} (monotone: {mass_monotone}), median peak height \
             {:.3} / {:.3} / {:.3} (non-decreasing: {heights_monotone}), ordered seed pairs {ordered}/{pairs} \
             (≥ 60%); jumps→walks fewer peaks in {fewer}/{seeds} seeds (≥ 60%)",
            masses[0], masses[1], masses[2], heights[0], heights[1], heights[2]
        ),
    )
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.push((rel, std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn cli_determinism(ckpt: &Path) -> (bool, String) {
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<(String, Vec<u8>)> {
        let dir = root.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_mclr"))
            .args(["gen", "--ckpt"])
            .arg(ckpt)
            .args([
                "--prompt",
                "a man jumps twice.",
                "--seed",
                "3",
                "--cfg-weight",
                "2.5",
                "--out",
            ])
            .arg(dir.join("motion.json"))
            .arg("--dump-attn")
            .arg(dir.join("attn"))
            .env_clear()
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        files_in(&dir)
    };
    let a = run("first");
    let b = run("second");
    let tensors = a.iter().filter(|(n, _)| n.starts_with("attn")).count();
    (
        a == b && tensors == 120 && a.iter().any(|(n, _)| n == "motion.json"),
        format!(
            "two `mclr gen` runs: {} files each, byte-identical: {}; {tensors} attention tensors (12 layers × 10 steps)",
            a.len(),
            a == b
        ),
    )
}

fn no_ui() -> (bool, String) {
    let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let ui_files: Vec<_> = walk(&workspace.join("crates"))
        .into_iter()
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name == "package.json" || name.ends_with(".ts") || name.ends_with(".tsx")
        })
        .collect();
    let app = mclr_service::router(
        std::sync::Arc::new(mclr_service::AppState::new(MotionModel::untrained(48, 0), "none")),
        None,
    );
    drop(app);
    (
        ui_files.is_empty(),
        format!(
            "suite built from Rust crates only; API router constructed without a UI bundle; UI sources in crates: {}",
            ui_files.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let (p, d) = attention_math();
    report(&mut results, "attention math", p, d);
    let (p, d) = equivariance();
    report(&mut results, "self-attention shift equivariance", p, d);
    let (p, d) = gradient_check();
    report(&mut results, "gradient check", p, d);
    let (p, d) = counting_oracle();
    report(&mut results, "counting oracle", p, d);

    let t = toy_training();
    let ratio = t.last / t.first;
    report(
        &mut results,
        "toy training",
        t.step == 2000 && t.elapsed < Duration::from_secs(600) && ratio <= 0.5,
        format!(
            "2000 steps, batch 64, lr 2e-4, 500 samples in {:.1}s (< 600s); first/last 100-step mean loss \
             {:.4} → {:.4}, ratio {ratio:.3} (≤ 0.5)",
            t.elapsed.as_secs_f64(),
            t.first,
            t.last
        ),
    );
    let (p, d) = noop_closure(&t.model);
    report(&mut results, "no-op edit closure", p, d);
    let (p, d) = additive_exactness(&t.model);
    report(&mut results, "additive reweight exactness", p, d);
    let (p, d) = trained_behavior(&t.model);
    report(&mut results, "trained-model behavior", p, d);

    let ckpt = tempfile::tempdir().unwrap();
    mclr::persistence::save_checkpoint(ckpt.path(), &t.model, t.step, None).unwrap();
    let (p, d) = cli_determinism(ckpt.path());
    report(&mut results, "cli determinism", p, d);
    let (p, d) = no_ui();
    report(&mut results, "no UI component", p, d);

    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| (r.name, &r.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
