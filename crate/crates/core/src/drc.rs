//! A plain feedforward compressor used to synthesize input/target pairs.
//!
//! Signal path: rectified peak detector (instant rise, one-pole fall) →
//! static gain curve in dB → one-pole gain smoothing with separate attack and
//! release → gain and makeup applied to the input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fall time of the level detector. Short enough to follow program level,
/// long enough that the ripple on a 100 Hz sine stays well under 0.1 dB after
/// gain smoothing.
pub const DETECTOR_RELEASE_MS: f64 = 50.0;
const LEVEL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DrcError {
    #[error("invalid compressor parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrcParams {
    pub threshold_db: f64,
    pub ratio: f64,
    pub attack_ms: f64,
    pub release_ms: f64,
    pub knee_db: f64,
    pub makeup_db: f64,
}

impl Default for DrcParams {
    fn default() -> Self {
        DrcParams {
            threshold_db: -20.0,
            ratio: 4.0,
            attack_ms: 10.0,
            release_ms: 300.0,
            knee_db: 6.0,
            makeup_db: 0.0,
        }
    }
}

impl DrcParams {
    pub fn validate(&self) -> Result<(), DrcError> {
        let fields = [
            self.threshold_db,
            self.ratio,
            self.attack_ms,
            self.release_ms,
            self.knee_db,
            self.makeup_db,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(DrcError::Invalid("non-finite value".into()));
        }
        if self.ratio < 1.0 {
            return Err(DrcError::Invalid(format!("ratio {} < 1", self.ratio)));
        }
        if self.attack_ms <= 0.0 || self.release_ms <= 0.0 {
            return Err(DrcError::Invalid("attack and release must be > 0 ms".into()));
        }
        if self.knee_db < 0.0 {
            return Err(DrcError::Invalid(format!("knee {} dB < 0", self.knee_db)));
        }
        Ok(())
    }
}

/// Gain in dB the compressor applies to a steady level, before makeup.
pub fn static_gain_db(level_db: f64, p: &DrcParams) -> f64 {
    let over = level_db - p.threshold_db;
    let slope = 1.0 / p.ratio - 1.0;
    if 2.0 * over < -p.knee_db {
        0.0
    } else if 2.0 * over <= p.knee_db && p.knee_db > 0.0 {
        let x = over + p.knee_db / 2.0;
        slope * x * x / (2.0 * p.knee_db)
    } else {
        slope * over
    }
}

/// One-pole coefficient for a time constant in milliseconds.
pub fn time_coeff(ms: f64, sample_rate: f64) -> f64 {
    (-1.0 / (ms * sample_rate / 1000.0)).exp()
}

fn db_to_gain(db: f64) -> f64 {
    if db == 0.0 {
        1.0
    } else {
        10f64.powf(db / 20.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DrcState {
    pub envelope: f64,
    pub gain_db: f64,
}

#[derive(Debug, Clone)]
pub struct Compressor {
    params: DrcParams,
    detector: f64,
    attack: f64,
    release: f64,
    makeup: f64,
    state: DrcState,
}

impl Compressor {
    pub fn new(params: DrcParams, sample_rate: u32) -> Result<Self, DrcError> {
        params.validate()?;
        if sample_rate == 0 {
            return Err(DrcError::Invalid("sample rate 0".into()));
        }
        let fs = sample_rate as f64;
        Ok(Compressor {
            params,
            detector: time_coeff(DETECTOR_RELEASE_MS, fs),
            attack: time_coeff(params.attack_ms, fs),
            release: time_coeff(params.release_ms, fs),
            makeup: db_to_gain(params.makeup_db),
            state: DrcState::default(),
        })
    }

    pub fn params(&self) -> &DrcParams {
        &self.params
    }

    pub fn state(&self) -> DrcState {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = DrcState::default();
    }

    /// Advances one sample; returns `(output, smoothed gain in dB)`.
    pub fn tick(&mut self, x: f32) -> (f32, f64) {
        let s = &mut self.state;
        let rect = (x as f64).abs();
        s.envelope = if rect > s.envelope {
            rect
        } else {
            self.detector * s.envelope + (1.0 - self.detector) * rect
        };
        let level_db = 20.0 * s.envelope.max(LEVEL_FLOOR).log10();
        let target = static_gain_db(level_db, &self.params);
        let a = if target < s.gain_db { self.attack } else { self.release };
        s.gain_db = a * s.gain_db + (1.0 - a) * target;
        let y = x as f64 * db_to_gain(s.gain_db) * self.makeup;
        (y as f32, s.gain_db)
    }

    pub fn process(&mut self, input: &[f32], output: &mut [f32]) {
        for (y, &x) in output.iter_mut().zip(input) {
            *y = self.tick(x).0;
        }
    }

    /// Like [`process`](Self::process) and also records the gain trace.
    pub fn process_with_gain(&mut self, input: &[f32]) -> (Vec<f32>, Vec<f64>) {
        input.iter().map(|&x| self.tick(x)).unzip()
    }
}

/// One-shot compression from rest.
pub fn compress(x: &[f32], p: &DrcParams, sample_rate: u32) -> Result<Vec<f32>, DrcError> {
    let mut c = Compressor::new(*p, sample_rate)?;
    let mut y = vec![0.0; x.len()];
    c.process(x, &mut y);
    Ok(y)
}

/// Length of each constant-level segment in [`synth_program`].
pub const SEGMENT_MS: f64 = 250.0;
const RAMP_MS: f64 = 5.0;

/// Seeded test material: sum-of-sines content under a stepped envelope whose
/// segment levels are drawn uniformly from −30 to 0 dB (peak 0.9 at 0 dB).
pub fn synth_program(len: usize, sample_rate: u32, seed: u64) -> Vec<f32> {
    use rand::{Rng, SeedableRng};
    let fs = sample_rate as f64;
    let carrier = crate::bench::synthetic_input(len, sample_rate, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let seg = ((SEGMENT_MS * fs / 1000.0) as usize).max(1);
    let ramp = ((RAMP_MS * fs / 1000.0) as usize).clamp(1, seg);
    let levels: Vec<f64> = (0..len.div_ceil(seg) + 1)
        .map(|_| 1.8 * 10f64.powf(rng.random_range(-30.0..0.0) / 20.0))
        .collect();
    carrier
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            let (k, pos) = (n / seg, n % seg);
            // Linear crossfade from the previous level over the first `ramp` samples.
            let g = if k > 0 && pos < ramp {
                let t = pos as f64 / ramp as f64;
                levels[k - 1] * (1.0 - t) + levels[k] * t
            } else {
                levels[k]
            };
            (c as f64 * g) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const FS: u32 = 44_100;

    fn sine(freq: f64, amp: f64, len: usize) -> Vec<f32> {
        (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / FS as f64).sin()) as f32)
            .collect()
    }

    fn rms_db(x: &[f32]) -> f64 {
        let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64;
        10.0 * ms.log10()
    }

    #[test]
    fn static_curve_examples() {
        let hard = DrcParams { knee_db: 0.0, ..DrcParams::default() };
        assert_eq!(static_gain_db(-40.0, &hard), 0.0);
        assert_eq!(static_gain_db(-10.0, &hard), -7.5);
        assert_eq!(static_gain_db(-10.0, &DrcParams::default()), -7.5);
        let unity = DrcParams { ratio: 1.0, ..DrcParams::default() };
        for l in [-60.0, -20.0, -19.0, 0.0, 6.0] {
            assert_eq!(static_gain_db(l, &unity), 0.0);
        }
    }

    #[test]
    fn knee_is_continuous_and_quadratic() {
        let p = DrcParams::default();
        let eps = 1e-9;
        for edge in [p.threshold_db - 3.0, p.threshold_db + 3.0] {
            let lo = static_gain_db(edge - eps, &p);
            let hi = static_gain_db(edge + eps, &p);
            assert!((lo - hi).abs() < 1e-8);
        }
        // Knee midpoint: (1/4 - 1) * 3^2 / 12.
        assert!((static_gain_db(-20.0, &p) - (-0.5625)).abs() < 1e-12);
    }

    #[test]
    fn params_are_validated() {
        assert!(DrcParams { ratio: 0.5, ..DrcParams::default() }.validate().is_err());
        assert!(DrcParams { attack_ms: 0.0, ..DrcParams::default() }.validate().is_err());
        assert!(DrcParams { knee_db: -1.0, ..DrcParams::default() }.validate().is_err());
        assert!(DrcParams { threshold_db: f64::NAN, ..DrcParams::default() }.validate().is_err());
        assert!(Compressor::new(DrcParams::default(), 0).is_err());
    }

    #[test]
    fn below_threshold_is_exact_makeup() {
        let x = sine(440.0, 0.01, 10_000);
        assert_eq!(compress(&x, &DrcParams::default(), FS).unwrap(), x);
        let p = DrcParams { makeup_db: 6.0, ..DrcParams::default() };
        let m = 10f64.powf(0.3);
        let y = compress(&x, &p, FS).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert_eq!(*a, (*b as f64 * m) as f32);
        }
    }

    #[test]
    fn steady_sine_settles_on_static_curve() {
        let p = DrcParams::default();
        for (freq, amp) in [(100.0, 0.5), (1000.0, 1.0), (440.0, 0.2)] {
            let x = sine(freq, amp, 3 * FS as usize);
            let mut c = Compressor::new(p, FS).unwrap();
            let (_, gain) = c.process_with_gain(&x);
            let tail = &gain[gain.len() - FS as usize / 2..];
            let want = static_gain_db(20.0 * f64::log10(amp), &p);
            for g in tail {
                assert!((g - want).abs() <= 0.1, "{freq} Hz: {g} vs {want}");
            }
        }
    }

    #[test]
    fn attack_step_reaches_63_percent_at_tau() {
        let p = DrcParams { knee_db: 0.0, ..DrcParams::default() };
        let quiet = 0.01f32;
        let loud = 1.0f32;
        let mut x = vec![quiet; 1000];
        x.extend(vec![loud; FS as usize]);
        let mut c = Compressor::new(p, FS).unwrap();
        let (_, gain) = c.process_with_gain(&x);
        let target = static_gain_db(0.0, &p);
        let tau = (p.attack_ms * FS as f64 / 1000.0).round() as usize;
        // gain[999 + n] = target (1 - a^n) for a step landing on sample 1000.
        let frac = gain[999 + tau] / target;
        assert!((frac - (1.0 - (-1f64).exp())).abs() < 0.01, "{frac}");
    }

    #[test]
    fn higher_ratio_never_louder() {
        let x: Vec<f32> = sine(220.0, 0.8, FS as usize)
            .iter()
            .zip(sine(3.0, 1.0, FS as usize))
            .map(|(a, b)| a * (0.5 + 0.5 * b.abs()))
            .collect();
        let mut prev = f64::INFINITY;
        for ratio in [1.0, 2.0, 4.0, 8.0, 20.0] {
            let y = compress(&x, &DrcParams { ratio, ..DrcParams::default() }, FS).unwrap();
            let level = rms_db(&y);
            assert!(level <= prev + 1e-9);
            prev = level;
        }
    }

    #[test]
    fn higher_ratio_never_louder_per_block() {
        let x = sine(330.0, 0.9, FS as usize);
        let low = compress(&x, &DrcParams { ratio: 2.0, ..DrcParams::default() }, FS).unwrap();
        let high = compress(&x, &DrcParams { ratio: 10.0, ..DrcParams::default() }, FS).unwrap();
        for (a, b) in low.chunks(4410).zip(high.chunks(4410)) {
            assert!(rms_db(b) <= rms_db(a) + 1e-9);
        }
    }

    #[test]
    fn chunking_is_invariant() {
        let x = sine(500.0, 0.7, 20_000);
        let whole = compress(&x, &DrcParams::default(), FS).unwrap();
        let mut c = Compressor::new(DrcParams::default(), FS).unwrap();
        let mut out = vec![0.0; x.len()];
        let mut start = 0;
        for len in [1, 7, 128, 4096, 1000].iter().cycle() {
            if start >= x.len() {
                break;
            }
            let end = (start + len).min(x.len());
            c.process(&x[start..end], &mut out[start..end]);
            start = end;
        }
        assert_eq!(out, whole);
        c.reset();
        assert_eq!(c.state(), DrcState::default());
    }

    #[test]
    fn program_is_seeded_and_dynamic() {
        let x = synth_program(FS as usize * 4, FS, 3);
        assert_eq!(x, synth_program(FS as usize * 4, FS, 3));
        assert!(x.iter().all(|v| v.abs() <= 0.9 + 1e-6));
        let seg = FS as usize / 4;
        let levels: Vec<f64> = x.chunks(seg).map(rms_db).collect();
        let spread = levels.iter().cloned().fold(f64::MIN, f64::max) - levels.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 6.0, "{spread}");
        let y = compress(&x, &DrcParams::default(), FS).unwrap();
        assert!(rms_db(&y) < rms_db(&x));
    }

    #[test]
    fn causal() {
        let x = sine(500.0, 0.7, 5000);
        let mut cut = x.clone();
        cut[3000..].iter_mut().for_each(|v| *v = 0.0);
        let a = compress(&x, &DrcParams::default(), FS).unwrap();
        let b = compress(&cut, &DrcParams::default(), FS).unwrap();
        assert_eq!(a[..3000], b[..3000]);
    }
}
