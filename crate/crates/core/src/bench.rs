//! Real-time factor measurement: stream buffers through a fresh processor and
//! divide audio duration by the time spent inside `process_buffer`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlVector, ModelWeights};
use crate::ssm::SsmEngine;
use crate::stream::{BufferProcessor, StreamError, StreamProcessor};

pub const DEFAULT_BUFFER_SIZES: [usize; 6] = [128, 256, 512, 1024, 2048, 4096];
/// Buffers processed before timing starts.
pub const WARMUP_BUFFERS: usize = 8;
pub const MIN_AUDIO_SECONDS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("audio_seconds {0} is below the minimum of {MIN_AUDIO_SECONDS}")]
    TooShort(f64),
    #[error("invalid bench configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub buffer_sizes: Vec<usize>,
    pub audio_seconds: f64,
    pub sample_rate: u32,
    /// Repetitions per size; the run with the median wall time is reported.
    pub runs: usize,
    pub seed: u64,
    /// Pin the timing thread to the core it starts on, where supported.
    pub pin_core: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            buffer_sizes: DEFAULT_BUFFER_SIZES.to_vec(),
            audio_seconds: 60.0,
            sample_rate: 44_100,
            runs: 3,
            seed: 0,
            pin_core: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.audio_seconds.is_nan() || self.audio_seconds < MIN_AUDIO_SECONDS {
            return Err(BenchError::TooShort(self.audio_seconds));
        }
        if self.buffer_sizes.is_empty() {
            return Err(BenchError::Invalid("no buffer sizes".into()));
        }
        if self.buffer_sizes.contains(&0) {
            return Err(BenchError::Invalid("buffer size 0".into()));
        }
        if self.runs == 0 {
            return Err(BenchError::Invalid("runs must be at least 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(BenchError::Invalid("sample rate 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub buffer_size: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    /// `audio_seconds / wall_seconds`; above 1 is faster than real time.
    pub speed_ratio: f64,
    pub per_buffer_p50: f64,
    pub per_buffer_p99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: String,
    pub sample_rate: u32,
    pub runs: usize,
    pub pinned_core: Option<usize>,
    pub rows: Vec<BenchRow>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let core = self.pinned_core.map_or("unpinned".to_string(), |c| format!("core {c}"));
        writeln!(f, "{} @ {} Hz, median of {} run(s), {}", self.label, self.sample_rate, self.runs, core)?;
        writeln!(
            f,
            "{:>8} {:>10} {:>10} {:>10} {:>12} {:>12}",
            "buffer", "audio_s", "wall_s", "ratio", "p50_ms", "p99_ms"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} {:>10.3} {:>10.4} {:>10.2} {:>12.4} {:>12.4}",
                r.buffer_size,
                r.audio_seconds,
                r.wall_seconds,
                r.speed_ratio,
                r.per_buffer_p50 * 1e3,
                r.per_buffer_p99 * 1e3
            )?;
        }
        Ok(())
    }
}

/// Copies input to output and waits a fixed time per buffer. Stands in for a
/// model to check the timing arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct SleepStub {
    pub per_buffer: Duration,
}

/// OS sleeps overshoot by tens of microseconds; the tail is spun instead.
const SPIN_MARGIN: Duration = Duration::from_micros(300);

/// Waits `d` on the monotonic clock.
pub fn precise_sleep(d: Duration) {
    let start = Instant::now();
    if d > SPIN_MARGIN {
        std::thread::sleep(d - SPIN_MARGIN);
    }
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

impl BufferProcessor for SleepStub {
    fn process_buffer(&mut self, input: &[f32], output: &mut [f32]) -> Result<(), StreamError> {
        output.copy_from_slice(input);
        precise_sleep(self.per_buffer);
        Ok(())
    }
}

/// Seeded sum of 24 sines with a 1/f power slope, peak-normalized to 0.5.
pub fn synthetic_input(len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let top = (0.45 * fs).min(12_000.0);
    let partials: Vec<(f64, f64, f64)> = (0..24)
        .map(|_| {
            let f = 40.0 * (top / 40.0).powf(rng.random::<f64>());
            (2.0 * PI * f / fs, 1.0 / f.sqrt(), rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let mut x: Vec<f64> = (0..len)
        .map(|n| partials.iter().map(|&(w, a, p)| a * (w * n as f64 + p).sin()).sum())
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    x.into_iter().map(|v| v as f32).collect()
}

/// Nearest-rank percentile of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

#[cfg(target_os = "linux")]
mod affinity {
    /// Pins the calling thread to its current core; dropping restores the mask.
    pub struct Pin {
        previous: libc::cpu_set_t,
        pub core: usize,
    }

    impl Pin {
        pub fn current() -> Option<Pin> {
            // SAFETY: cpu_set_t is plain data; the calls only read or write the
            // sets passed by pointer with the matching size.
            unsafe {
                let core = libc::sched_getcpu();
                if core < 0 {
                    return None;
                }
                let mut previous: libc::cpu_set_t = std::mem::zeroed();
                let size = std::mem::size_of::<libc::cpu_set_t>();
                if libc::sched_getaffinity(0, size, &mut previous) != 0 {
                    return None;
                }
                let mut only: libc::cpu_set_t = std::mem::zeroed();
                libc::CPU_SET(core as usize, &mut only);
                if libc::sched_setaffinity(0, size, &only) != 0 {
                    return None;
                }
                Some(Pin {
                    previous,
                    core: core as usize,
                })
            }
        }
    }

    impl Drop for Pin {
        fn drop(&mut self) {
            // SAFETY: restores the mask read in `current`.
            unsafe {
                libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &self.previous);
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod affinity {
    pub struct Pin {
        pub core: usize,
    }

    impl Pin {
        pub fn current() -> Option<Pin> {
            None
        }
    }
}

struct Run {
    wall: f64,
    buffer_times: Vec<f64>,
}

fn time_run(
    processor: &mut dyn BufferProcessor,
    input: &[f32],
    size: usize,
    buffers: usize,
) -> Result<Run, BenchError> {
    let mut output = vec![0.0f32; size];
    let (warm, timed) = input.split_at(WARMUP_BUFFERS * size);
    for chunk in warm.chunks_exact(size) {
        processor.process_buffer(chunk, &mut output)?;
    }
    let mut buffer_times = Vec::with_capacity(buffers);
    for chunk in timed.chunks_exact(size).take(buffers) {
        let start = Instant::now();
        processor.process_buffer(chunk, &mut output)?;
        buffer_times.push(start.elapsed().as_secs_f64());
    }
    Ok(Run {
        wall: buffer_times.iter().sum(),
        buffer_times,
    })
}

/// Benchmarks processors built by `factory`, one fresh processor per run.
pub fn run_bench_with<F>(config: &BenchConfig, label: &str, mut factory: F) -> Result<BenchReport, BenchError>
where
    F: FnMut(usize) -> Result<Box<dyn BufferProcessor>, BenchError>,
{
    config.validate()?;
    let mut sizes = config.buffer_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let fs = config.sample_rate as f64;
    let target = (config.audio_seconds * fs).ceil() as usize;
    let longest = sizes
        .iter()
        .map(|&s| (WARMUP_BUFFERS + target.div_ceil(s)) * s)
        .max()
        .unwrap_or(0);
    let input = synthetic_input(longest, config.sample_rate, config.seed);

    let pin = if config.pin_core { affinity::Pin::current() } else { None };
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let buffers = target.div_ceil(size);
        let mut runs = Vec::with_capacity(config.runs);
        for _ in 0..config.runs {
            let mut processor = factory(size)?;
            runs.push(time_run(processor.as_mut(), &input, size, buffers)?);
        }
        runs.sort_by(|a, b| a.wall.total_cmp(&b.wall));
        let median = &runs[runs.len() / 2];
        let audio_seconds = (buffers * size) as f64 / fs;
        rows.push(BenchRow {
            buffer_size: size,
            audio_seconds,
            wall_seconds: median.wall,
            speed_ratio: audio_seconds / median.wall,
            per_buffer_p50: percentile(&median.buffer_times, 50.0),
            per_buffer_p99: percentile(&median.buffer_times, 99.0),
        });
        log::info!("buffer {size}: ratio {:.2}", audio_seconds / median.wall);
    }
    Ok(BenchReport {
        label: label.to_string(),
        sample_rate: config.sample_rate,
        runs: config.runs,
        pinned_core: pin.as_ref().map(|p| p.core),
        rows,
    })
}

/// Benchmarks the model on `engine` with fixed controls.
pub fn run_bench(
    weights: Arc<ModelWeights>,
    ctrl: &ControlVector,
    engine: &dyn SsmEngine,
    config: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    let label = format!("{} ({})", weights.config.name(), engine.name());
    run_bench_with(config, &label, |_| {
        let sp = StreamProcessor::with_engine(weights.clone(), ctrl, engine)?;
        Ok(Box::new(sp) as Box<dyn BufferProcessor>)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ssm::EngineRegistry;

    fn quick(sizes: Vec<usize>) -> BenchConfig {
        BenchConfig {
            buffer_sizes: sizes,
            audio_seconds: 10.0,
            runs: 1,
            pin_core: false,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
    }

    #[test]
    fn synthetic_input_is_seeded_and_bounded() {
        let a = synthetic_input(10_000, 44_100, 1);
        assert_eq!(a, synthetic_input(10_000, 44_100, 1));
        assert_ne!(a, synthetic_input(10_000, 44_100, 2));
        let peak = a.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn config_is_validated() {
        assert!(matches!(quick(vec![128]).validate(), Ok(())));
        let short = BenchConfig { audio_seconds: 5.0, ..quick(vec![128]) };
        assert!(matches!(short.validate(), Err(BenchError::TooShort(_))));
        assert!(matches!(quick(vec![]).validate(), Err(BenchError::Invalid(_))));
        assert!(matches!(quick(vec![0]).validate(), Err(BenchError::Invalid(_))));
        assert_eq!(BenchConfig::default().buffer_sizes, DEFAULT_BUFFER_SIZES);
    }

    #[test]
    fn stub_ratio_follows_definition() {
        let report = run_bench_with(&quick(vec![4096]), "stub", |_| {
            Ok(Box::new(SleepStub { per_buffer: Duration::from_millis(1) }))
        })
        .unwrap();
        let row = &report.rows[0];
        assert_eq!(row.audio_seconds, (108 * 4096) as f64 / 44_100.0);
        assert!((row.speed_ratio - row.audio_seconds / row.wall_seconds).abs() < 1e-12);
        let expected = 4096.0 / 44_100.0 / 1e-3;
        assert!((row.speed_ratio / expected - 1.0).abs() <= 0.1, "{}", row.speed_ratio);
        assert!(row.per_buffer_p50 >= 1e-3);
    }

    #[test]
    fn rows_sorted_one_per_size() {
        let cfg = ModelConfig::new(4, 4);
        let w = Arc::new(ModelWeights::random(&cfg, 1).unwrap());
        let registry = EngineRegistry::builtin();
        let ctrl = ControlVector::new(0.5, 0.0).unwrap();
        let report = run_bench(w, &ctrl, registry.default_engine().as_ref(), &quick(vec![4096, 1024, 2048])).unwrap();
        let sizes: Vec<usize> = report.rows.iter().map(|r| r.buffer_size).collect();
        assert_eq!(sizes, vec![1024, 2048, 4096]);
        assert!(report.rows.iter().all(|r| r.speed_ratio > 0.0 && r.audio_seconds >= 10.0));
        assert!(report.to_string().lines().count() == 5);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    }
}
