//! Command-line front end: render, score, benchmark and build weight files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use s4drc_core::bench::{self, BenchConfig, BenchError, SleepStub};
use s4drc_core::drc::{self, DrcParams};
use s4drc_core::metrics::{self, MetricError};
use s4drc_core::model::{make_passthrough_weights, ControlVector, ModelConfig, ModelError, ModelWeights};
use s4drc_core::ssm::{EngineRegistry, SsmEngine, DEFAULT_ENGINE};
use s4drc_core::stream::{BufferProcessor, StreamProcessor};
use s4drc_core::wav::{self, WavError};
use s4drc_core::weights::{self, WeightsError};

/// Scale of the hardware's peak-reduction knob.
pub const PANEL_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid input files.
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn input_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{context}: {e}"))
}

impl From<WavError> for CliError {
    fn from(e: WavError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidControl(_) | ModelError::InvalidConfig(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Stream(_) => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "s4drc", version, about = "State-space compressor emulation: render, score, benchmark")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a mono WAV through a model.
    Process(ProcessArgs),
    /// Compare a render against a reference.
    Metrics(MetricsArgs),
    /// Measure real-time factor per buffer size.
    Bench(BenchArgs),
    /// Write a random or passthrough weight file.
    Init(InitArgs),
    /// Write an input/target pair made with the reference compressor.
    Synth(SynthArgs),
    /// Print a weight file's configuration and parameter count.
    Inspect(InspectArgs),
    /// List SSM engines.
    Engines,
}

#[derive(Debug, Args)]
pub struct Controls {
    /// Peak reduction in [0, 1], or [0, 100] with --panel.
    #[arg(long, default_value_t = 0.5)]
    pub peak_reduction: f64,
    /// Compress/limit switch: 0 or 1.
    #[arg(long, default_value_t = 0)]
    pub limit: u8,
    /// Read --peak-reduction on the 0-100 front-panel scale.
    #[arg(long)]
    pub panel: bool,
}

impl Controls {
    pub fn to_vector(&self) -> Result<ControlVector, CliError> {
        let peak = if self.panel { self.peak_reduction / PANEL_SCALE } else { self.peak_reduction };
        Ok(ControlVector::new(peak, self.limit as f64)?)
    }
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub controls: Controls,
    /// Samples per streamed buffer.
    #[arg(long, default_value_t = 4096)]
    pub buffer: usize,
    /// Run the direct recurrence one sample at a time.
    #[arg(long, conflicts_with = "buffer")]
    pub per_sample: bool,
    #[arg(long, default_value = DEFAULT_ENGINE)]
    pub engine: String,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub render: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Required unless --stub-sleep-ms is given.
    #[arg(long, required_unless_present = "stub_sleep_ms")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_BUFFER_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 60.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
    #[arg(long)]
    pub no_pin: bool,
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value = DEFAULT_ENGINE)]
    pub engine: String,
    #[command(flatten)]
    pub controls: Controls,
    /// Replace the model with a processor that sleeps this long per buffer.
    #[arg(long, conflicts_with = "weights")]
    pub stub_sleep_ms: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// `channels,order[,blocks]`.
    #[arg(long, default_value = "32,4,4")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit weights whose output is tanh(input).
    #[arg(long)]
    pub passthrough: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long, default_value_t = 4.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 10.0)]
    pub attack_ms: f64,
    #[arg(long, default_value_t = 300.0)]
    pub release_ms: f64,
    #[arg(long, default_value_t = 6.0)]
    pub knee: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub makeup: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub json: bool,
}

pub fn parse_config(spec: &str) -> Result<ModelConfig, CliError> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(CliError::Input(format!("--config expects channels,order[,blocks], got {spec:?}")));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| CliError::Input(format!("--config {spec:?}: {e}")))
    };
    let mut cfg = ModelConfig::new(num(parts[0])?, num(parts[1])?);
    if let Some(b) = parts.get(2) {
        cfg.num_blocks = num(b)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, CliError> {
    let bytes = fs::read(path).map_err(|e| input_err(path.display(), e))?;
    weights::load(&bytes).map_err(|e: WeightsError| input_err(path.display(), e))
}

fn engine(name: &str) -> Result<Arc<dyn SsmEngine>, CliError> {
    let registry = EngineRegistry::builtin();
    registry.get(name).ok_or_else(|| {
        let names: Vec<&str> = registry.names().collect();
        CliError::Input(format!("unknown engine {name:?}; available: {}", names.join(", ")))
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| input_err(path.display(), e))
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    writeln!(out, "{s}").map_err(|e| CliError::Internal(e.to_string()))
}

fn print(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<(), CliError> {
    write!(out, "{text}").map_err(|e| CliError::Internal(e.to_string()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Process(a) => process(a, out),
        Command::Metrics(a) => metrics_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::Init(a) => init(a, out),
        Command::Synth(a) => synth(a, out),
        Command::Inspect(a) => inspect(a, out),
        Command::Engines => {
            for e in EngineRegistry::builtin().iter() {
                let default = if e.name() == DEFAULT_ENGINE { " (default)" } else { "" };
                print(out, format!("{:<10} {}{default}\n", e.name(), e.summary()))?;
            }
            Ok(())
        }
    }
}

fn process(a: ProcessArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ctrl = a.controls.to_vector()?;
    let w = Arc::new(load_weights(&a.weights)?);
    let input = wav::read_wav_file(&a.input)?;
    if a.buffer == 0 {
        return Err(CliError::Input("--buffer must be at least 1".into()));
    }
    let mut sp = StreamProcessor::with_engine(w, &ctrl, engine(&a.engine)?.as_ref()).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut rendered = vec![0.0f32; input.samples.len()];
    let result = if a.per_sample {
        input
            .samples
            .iter()
            .zip(rendered.iter_mut())
            .try_for_each(|(&x, y)| sp.process_sample(x).map(|v| *y = v))
    } else {
        input
            .samples
            .chunks(a.buffer)
            .zip(rendered.chunks_mut(a.buffer))
            .try_for_each(|(x, y)| sp.process_buffer(x, y))
    };
    result.map_err(|e| CliError::Internal(e.to_string()))?;
    wav::write_wav_file(&a.output, &rendered, input.sample_rate)?;
    let mode = if a.per_sample { "per-sample".to_string() } else { format!("buffer {}", a.buffer) };
    print(
        out,
        format!(
            "rendered {} samples ({:.2} s) with {} [{}, {mode}] -> {}\n",
            rendered.len(),
            rendered.len() as f64 / input.sample_rate as f64,
            sp.weights().config.name(),
            sp.engine(),
            a.output.display()
        ),
    )
}

fn metrics_cmd(a: MetricsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let y = wav::read_wav_file(&a.reference)?;
    let y_hat = wav::read_wav_file(&a.render)?;
    if y.sample_rate != y_hat.sample_rate {
        return Err(CliError::Input(format!(
            "sample rates differ: {} vs {}",
            y.sample_rate, y_hat.sample_rate
        )));
    }
    let report = metrics::compare(&y.samples, &y_hat.samples, y.sample_rate)?;
    if a.json {
        return print_json(out, &report);
    }
    let lufs = |v: Option<f64>| v.map_or("gated".to_string(), |v| format!("{v:.3}"));
    print(
        out,
        format!(
            "mae         {:.6e}\nmse         {:.6e}\nesr_dc      {:.6e}\nmulti_stft  {:.6}\nlufs_target {}\nlufs_render {}\nlufs_diff   {}\n",
            report.mae,
            report.mse,
            report.esr_dc,
            report.multi_stft,
            lufs(report.lufs_target),
            lufs(report.lufs_render),
            lufs(report.lufs_diff)
        ),
    )
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = BenchConfig {
        buffer_sizes: a.sizes.clone(),
        audio_seconds: a.seconds,
        sample_rate: a.sample_rate,
        runs: a.runs,
        seed: a.seed,
        pin_core: !a.no_pin,
    };
    let report = match (a.stub_sleep_ms, &a.weights) {
        (Some(ms), _) => {
            if !(ms.is_finite() && ms >= 0.0) {
                return Err(CliError::Input(format!("--stub-sleep-ms {ms}")));
            }
            let per_buffer = Duration::from_secs_f64(ms / 1000.0);
            bench::run_bench_with(&config, &format!("sleep stub ({ms} ms)"), |_| {
                Ok(Box::new(SleepStub { per_buffer }) as Box<dyn BufferProcessor>)
            })?
        }
        (None, Some(path)) => {
            let w = Arc::new(load_weights(path)?);
            let ctrl = a.controls.to_vector()?;
            bench::run_bench(w, &ctrl, engine(&a.engine)?.as_ref(), &config)?
        }
        (None, None) => return Err(CliError::Input("--weights is required".into())),
    };
    if a.json {
        print_json(out, &report)
    } else {
        print(out, report)
    }
}

fn init(a: InitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = parse_config(&a.config)?;
    let w = if a.passthrough {
        make_passthrough_weights(&cfg)?
    } else {
        ModelWeights::random(&cfg, a.seed)?
    };
    write_file(&a.out, &weights::save(&w))?;
    let kind = if a.passthrough { "passthrough".to_string() } else { format!("random seed {}", a.seed) };
    print(
        out,
        format!(
            "wrote {} ({kind}, {} parameters) -> {}\n",
            cfg.name(),
            weights::count_params(&w),
            a.out.display()
        ),
    )
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    samples: usize,
    sample_rate: u32,
    seed: u64,
    params: DrcParams,
    lufs_input: Option<f64>,
    lufs_target: Option<f64>,
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let params = DrcParams {
        threshold_db: a.threshold,
        ratio: a.ratio,
        attack_ms: a.attack_ms,
        release_ms: a.release_ms,
        knee_db: a.knee,
        makeup_db: a.makeup,
    };
    params.validate().map_err(|e| CliError::Input(e.to_string()))?;
    if !(a.seconds.is_finite() && a.seconds > 0.0) || a.sample_rate == 0 {
        return Err(CliError::Input("--seconds and --sample-rate must be positive".into()));
    }
    let len = (a.seconds * a.sample_rate as f64).round() as usize;
    let input = drc::synth_program(len, a.sample_rate, a.seed);
    let target = drc::compress(&input, &params, a.sample_rate).map_err(|e| CliError::Input(e.to_string()))?;
    fs::create_dir_all(&a.out_dir).map_err(|e| input_err(a.out_dir.display(), e))?;
    wav::write_wav_file(a.out_dir.join("input.wav"), &input, a.sample_rate)?;
    wav::write_wav_file(a.out_dir.join("target.wav"), &target, a.sample_rate)?;
    let summary = SynthSummary {
        samples: len,
        sample_rate: a.sample_rate,
        seed: a.seed,
        params,
        lufs_input: metrics::lufs(&input, a.sample_rate).ok(),
        lufs_target: metrics::lufs(&target, a.sample_rate).ok(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    write_file(&a.out_dir.join("synth.json"), &json)?;
    let lufs = |v: Option<f64>| v.map_or("gated".to_string(), |v| format!("{v:.2} LUFS"));
    print(
        out,
        format!(
            "wrote input.wav ({}) and target.wav ({}) to {}\n",
            lufs(summary.lufs_input),
            lufs(summary.lufs_target),
            a.out_dir.display()
        ),
    )
}

#[derive(Debug, Serialize)]
struct Inspection<'a> {
    name: String,
    config: &'a ModelConfig,
    params: usize,
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let w = load_weights(&a.weights)?;
    let info = Inspection {
        name: w.config.name(),
        config: &w.config,
        params: weights::count_params(&w),
    };
    if a.json {
        return print_json(out, &info);
    }
    let c = info.config;
    print(
        out,
        format!(
            "model        {}\nblocks       {}\nchannels     {}\nssm_order    {}\ncontrol_mlp  {} -> {:?} -> {}\nsample_rate  {}\nparameters   {}\n",
            info.name,
            c.num_blocks,
            c.channels,
            c.ssm_order,
            c.control_dim,
            c.control_hidden,
            c.control_embedding_dim,
            c.sample_rate,
            info.params
        ),
    )
}
