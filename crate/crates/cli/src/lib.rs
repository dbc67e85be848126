//! The `mclr` command line: corpus synthesis, training, generation, editing,
//! counting, evaluation and serving.

pub mod config;
pub mod eval;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mclr::corpus::{self, CorpusConfig, CorpusSample};
use mclr::diffusion::{self, GenerationResult, SampleRequest, Trainer};
use mclr::editing::{self, EditDirective};
use mclr::model::{ModelConfig, MotionModel};
use mclr::network::AttnKind;
use mclr::persistence::{self, MotionExport};
use mclr::text::Vocabulary;
use mclr::ErrorClass;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use config::{Flags, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<mclr::Error> for CliError {
    fn from(e: mclr::Error) -> Self {
        match e.class() {
            ErrorClass::Usage | ErrorClass::Range => CliError::Usage(e.to_string()),
            ErrorClass::Data => CliError::Data(e.to_string()),
            ErrorClass::Numeric => CliError::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "mclr",
    version,
    about = "Text-to-motion diffusion with attention-level editing"
)]
pub struct Cli {
    /// JSON settings file (overridden by flags, overrides MCLR_* variables).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic training corpus as JSON lines.
    Corpus(CorpusArgs),
    /// Train a denoiser and save a checkpoint.
    Train(TrainArgs),
    /// Sample one motion.
    Gen(GenArgs),
    /// Run a reference/edited pair under one directive.
    Edit(EditArgs),
    /// Count actions in an attention dump or an exported motion.
    Count(CountArgs),
    /// Produce metric tables from a checkpoint.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cfg_weight: Option<f64>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
}

impl SamplingArgs {
    fn flags(&self, f: &mut Flags) {
        f.set("frames", self.frames)
            .set("seed", self.seed)
            .set("cfg_weight", self.cfg_weight)
            .set("sample_steps", self.sample_steps);
    }
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus JSON lines; a synthetic corpus is generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint (step count and optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Motion JSON output.
    #[arg(long, default_value = "motion.json")]
    pub out: PathBuf,
    /// Directory for per-(kind, layer, step) attention tensor files.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub base_prompt: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Directive JSON, or `@path` to read it from a file.
    #[arg(long)]
    pub directive: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[group(skip)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["attn", "motion"])))]
pub struct CountArgs {
    /// Self-attention tensor file (`N × N`, or `H × N × N` averaged over heads).
    #[arg(long)]
    pub attn: Option<PathBuf>,
    /// Exported motion JSON; counts root-height peaks.
    #[arg(long)]
    pub motion: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub height_multiplier: Option<f64>,
    #[arg(long)]
    pub distance: Option<usize>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Counting,
    EmphasisSweep,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<u64>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Corpus(_) => "corpus",
            Command::Train(_) => "train",
            Command::Gen(_) => "gen",
            Command::Edit(_) => "edit",
            Command::Count(_) => "count",
            Command::Eval(_) => "eval",
            Command::Serve(_) => "serve",
        }
    }

    fn flags(&self) -> Flags {
        let mut f = Flags::default();
        match self {
            Command::Corpus(a) => {
                f.set("corpus_size", a.size).set("seed", a.seed).set("frames", a.frames);
            }
            Command::Train(a) => {
                f.set("steps", a.steps)
                    .set("seed", a.seed)
                    .set("batch_size", a.batch_size)
                    .set("lr", a.lr)
                    .set("grad_clip", a.grad_clip)
                    .set("log_every", a.log_every)
                    .set("corpus_size", a.corpus_size);
            }
            Command::Gen(a) => a.sampling.flags(&mut f),
            Command::Edit(a) => a.sampling.flags(&mut f),
            Command::Count(a) => {
                f.set("sigma", a.sigma)
                    .set("factor", a.factor)
                    .set("height_multiplier", a.height_multiplier)
                    .set("distance", a.distance);
            }
            Command::Eval(a) => {
                a.sampling.flags(&mut f);
                f.set("seeds", a.seeds);
            }
            Command::Serve(a) => {
                f.set("host", a.host.clone()).set("port", a.port);
            }
        }
        f
    }

    /// Path arguments, echoed in the effective-config line.
    fn paths(&self) -> serde_json::Value {
        match self {
            Command::Corpus(a) => json!({ "out": a.out }),
            Command::Train(a) => json!({ "corpus": a.corpus, "out": a.out, "resume": a.resume }),
            Command::Gen(a) => json!({ "ckpt": a.ckpt, "prompt": a.prompt, "out": a.out, "dump_attn": a.dump_attn }),
            Command::Edit(a) => json!({
                "ckpt": a.ckpt, "base_prompt": a.base_prompt, "directive": a.directive, "out_dir": a.out_dir
            }),
            Command::Count(a) => json!({ "attn": a.attn, "motion": a.motion, "out": a.out }),
            Command::Eval(a) => json!({ "ckpt": a.ckpt, "suite": a.suite, "out": a.out }),
            Command::Serve(a) => json!({ "ckpt": a.ckpt, "static_dir": a.static_dir }),
        }
    }
}

/// Resolves settings, prints the effective-config line to stderr and runs
/// the command.
pub fn run(cli: Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let settings = Settings::resolve(cli.command.flags().0, cli.config.as_deref(), env)?;
    eprintln!(
        "effective-config {}",
        json!({ "command": cli.command.name(), "args": cli.command.paths(), "settings": settings })
    );
    match &cli.command {
        Command::Corpus(a) => cmd_corpus(a, &settings),
        Command::Train(a) => cmd_train(a, &settings),
        Command::Gen(a) => cmd_gen(a, &settings),
        Command::Edit(a) => cmd_edit(a, &settings),
        Command::Count(a) => cmd_count(a, &settings),
        Command::Eval(a) => cmd_eval(a, &settings),
        Command::Serve(a) => cmd_serve(a, &settings),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    persistence::write_atomic(path, &bytes)?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusSample>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let corpus = corpus::read_jsonl(BufReader::new(file))?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{}: corpus is empty", path.display())));
    }
    Ok(corpus)
}

fn cmd_corpus(a: &CorpusArgs, s: &Settings) -> Result<(), CliError> {
    let cfg = CorpusConfig {
        frames: s.frames,
        ..Default::default()
    };
    let samples = corpus::make_corpus_with(s.corpus_size, s.seed, &cfg)?;
    let mut bytes = Vec::new();
    corpus::write_jsonl(&mut bytes, &samples)?;
    persistence::write_atomic(&a.out, &bytes)?;
    print_json(&json!({ "out": a.out, "samples": samples.len(), "frames": s.frames }));
    Ok(())
}

/// Trains (or resumes) and saves a checkpoint with optimizer state. Writes
/// the per-step losses next to it.
pub fn cmd_train(a: &TrainArgs, s: &Settings) -> Result<(), CliError> {
    let raw = match &a.corpus {
        Some(path) => load_corpus(path)?,
        None => corpus::make_corpus_with(
            s.corpus_size,
            s.seed,
            &CorpusConfig {
                frames: s.frames,
                ..Default::default()
            },
        )?,
    };
    let (model, start, optimizer) = match &a.resume {
        Some(dir) => {
            let ck = persistence::load_checkpoint(dir)?;
            (ck.model, ck.step, ck.optimizer)
        }
        None => {
            let (_, stats) = corpus::normalize(&raw)?;
            let vocab = Vocabulary::default();
            let config = ModelConfig::new(vocab.len(), raw[0].motion.frames());
            (MotionModel::new(config, vocab, stats, s.seed)?, 0, None)
        }
    };
    let frames = raw[0].motion.frames();
    if frames != model.config.frames {
        return Err(CliError::Data(format!(
            "corpus clips have {frames} frames, the checkpoint expects {}",
            model.config.frames
        )));
    }
    let normalized: Vec<CorpusSample> = raw
        .into_iter()
        .map(|mut c| {
            c.motion.features = model.stats.normalize(&c.motion.features);
            c
        })
        .collect();
    let mut trainer = Trainer::new(model, &normalized, s.train(), s.diffusion())?;
    if a.resume.is_some() {
        trainer.resume(start, optimizer);
    }
    let summary = trainer.run(s.steps, |e| {
        eprintln!(
            "step {} loss {:.5} lr {:.3e} elapsed {:.1}s",
            e.step,
            e.loss,
            e.lr,
            e.elapsed_ms as f64 / 1e3
        );
    })?;
    persistence::save_checkpoint(&a.out, &trainer.model, trainer.step, Some(trainer.optimizer_state()))?;
    let (first, last) = summary.window_means(100);
    write_json(
        &a.out.join("train_log.json"),
        &json!({ "start_step": start, "losses": summary.losses, "seconds": summary.seconds }),
    )?;
    print_json(&json!({
        "out": a.out,
        "step": trainer.step,
        "seconds": summary.seconds,
        "first_window_loss": first,
        "last_window_loss": last,
    }));
    Ok(())
}

fn load_model(dir: &Path) -> Result<MotionModel, CliError> {
    Ok(persistence::load_checkpoint(dir)?.model)
}

pub fn sample_request(prompt: &str, s: &Settings) -> SampleRequest {
    SampleRequest {
        prompt: prompt.to_string(),
        frames: s.frames,
        seed: s.seed,
        config: s.diffusion(),
    }
}

/// File name of one dumped attention tensor.
pub fn attention_file_name(kind: AttnKind, layer: usize, step: usize) -> String {
    format!("{}_l{layer:02}_s{step:02}.mclr", kind.as_str())
}

/// Writes one `H × N × M` tensor per (layer, step); each attention layer is
/// either a self or a cross layer, so this is layers × steps files.
pub fn dump_attention(result: &GenerationResult, dir: &Path) -> Result<usize, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut keys: Vec<(usize, usize, AttnKind)> = result
        .records
        .iter()
        .map(|r| (r.layer_index, r.denoise_step, r.kind))
        .collect();
    keys.sort_by_key(|&(l, s, _)| (l, s));
    keys.dedup();
    for &(layer, step, kind) in &keys {
        let mut heads: Vec<_> = result
            .records
            .iter()
            .filter(|r| r.layer_index == layer && r.denoise_step == step)
            .collect();
        heads.sort_by_key(|r| r.head);
        let stacked = diffusion::stack_heads(&heads)?;
        persistence::write_tensor(&dir.join(attention_file_name(kind, layer, step)), &stacked.view())?;
    }
    Ok(keys.len())
}

fn cmd_gen(a: &GenArgs, s: &Settings) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let request = sample_request(&a.prompt, s);
    request.config.validate()?;
    let result = diffusion::generate(&model, &request)?;
    write_json(&a.out, &persistence::export_motion(&result.motion))?;
    let files = match &a.dump_attn {
        Some(dir) => dump_attention(&result, dir)?,
        None => 0,
    };
    print_json(&json!({
        "out": a.out,
        "frames": result.frames,
        "tokens": result.tokens.words,
        "attention_files": files,
    }));
    Ok(())
}

pub fn parse_directive(arg: &str) -> Result<EditDirective, CliError> {
    let text = match arg.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(io_err(Path::new(path)))?,
        None => arg.to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("directive: {e}")))
}

fn cmd_edit(a: &EditArgs, s: &Settings) -> Result<(), CliError> {
    let directive = parse_directive(&a.directive)?;
    let model = load_model(&a.ckpt)?;
    let request = sample_request(&a.base_prompt, s);
    request.config.validate()?;
    let session = editing::run_edit(&model, &request, &directive)?;
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    write_json(
        &a.out_dir.join("reference.json"),
        &persistence::export_motion(&session.reference.motion),
    )?;
    write_json(
        &a.out_dir.join("edited.json"),
        &persistence::export_motion(&session.edited.motion),
    )?;
    for (i, v) in session.variants.iter().enumerate() {
        write_json(
            &a.out_dir.join(format!("variant_{:02}.json", i + 2)),
            &persistence::export_motion(&v.motion),
        )?;
    }
    write_json(&a.out_dir.join("directive.json"), &directive)?;
    write_json(&a.out_dir.join("diff.json"), &session.diff)?;
    print_json(&json!({
        "out_dir": a.out_dir,
        "op": directive.op(),
        "reference_prompt": session.reference.prompt,
        "edited_prompt": session.edited.prompt,
        "zero_diff": session.diff.is_zero(),
        "max_abs_feature_delta": session.diff.max_abs_feature_delta,
        "column_mass_deltas": session.diff.column_mass_deltas,
    }));
    Ok(())
}

/// Head-averaged square map from a tensor file.
pub fn read_attention_map(path: &Path) -> Result<ndarray::Array2<f64>, CliError> {
    let t = persistence::read_tensor(path)?.mapv(|v| v as f64);
    let map = match t.ndim() {
        2 => t.into_dimensionality::<ndarray::Ix2>().expect("rank checked"),
        3 => t
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty head axis")
            .into_dimensionality()
            .expect("rank checked"),
        n => {
            return Err(CliError::Data(format!(
                "{}: expected a rank 2 or 3 tensor, got rank {n}",
                path.display()
            )))
        }
    };
    Ok(map)
}

pub fn read_motion(path: &Path) -> Result<MotionExport, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_count(a: &CountArgs, s: &Settings) -> Result<(), CliError> {
    let config = s.counting();
    config.validate()?;
    let out = if let Some(path) = &a.attn {
        let r = mclr::counting::count_actions(&read_attention_map(path)?, &config)?;
        json!({ "source": "attention", "count": r.count, "per_row_peaks": r.per_row_peaks, "config": r.config })
    } else {
        let path = a.motion.as_ref().expect("clap enforces one source");
        let motion = read_motion(path)?;
        let root: Vec<f64> = motion.positions.iter().map(|p| p[0][1] as f64).collect();
        let peaks = mclr::counting::trajectory_peaks(&root, config.sigma, &config);
        json!({ "source": "trajectory", "count": peaks.len() as f64, "peaks": peaks, "config": config })
    };
    match &a.out {
        Some(path) => write_json(path, &out)?,
        None => print_json(&out),
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, s: &Settings) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let rows = match a.suite {
        Suite::Counting => eval::counting_suite(&model, s)?.to_csv()?,
        Suite::EmphasisSweep => eval::emphasis_sweep(&model, s)?.to_csv()?,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    persistence::write_atomic(&a.out, &rows)?;
    print_json(&json!({ "out": a.out, "suite": a.suite }));
    Ok(())
}

fn cmd_serve(a: &ServeArgs, s: &Settings) -> Result<(), CliError> {
    let state = mclr_service::AppState::from_checkpoint(&a.ckpt)?;
    let addr: std::net::SocketAddr = format!("{}:{}", s.host, s.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    runtime
        .block_on(mclr_service::serve(
            std::sync::Arc::new(state),
            addr,
            a.static_dir.clone(),
        ))
        .map_err(|e| CliError::Data(format!("server: {e}")))
}
