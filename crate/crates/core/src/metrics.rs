//! Objective comparison of a rendered signal against a reference.
//!
//! Arguments are always `(reference, render)`. Error-to-signal and spectral
//! terms are normalized by the reference and are therefore not symmetric.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PRE_EMPHASIS_COEFF: f64 = 0.85;
/// Floor applied to STFT magnitudes before taking the log.
pub const LOG_MAG_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("signals differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty signal")]
    Empty,
    #[error("reference signal is silent")]
    SilentReference,
    #[error("signal too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("every loudness block is below the absolute gate")]
    AllGated,
}

fn check_pair(y: &[f32], y_hat: &[f32]) -> Result<usize, MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(y.len())
}

pub fn mae(y: &[f32], y_hat: &[f32]) -> Result<f64, MetricError> {
    let n = check_pair(y, y_hat)?;
    let sum: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(sum / n as f64)
}

pub fn mse(y: &[f32], y_hat: &[f32]) -> Result<f64, MetricError> {
    let n = check_pair(y, y_hat)?;
    let sum: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / n as f64)
}

/// First-order high-pass `H(z) = 1 − 0.85 z⁻¹`, starting from rest.
pub fn pre_emphasis(x: &[f32]) -> Vec<f64> {
    let mut prev = 0.0;
    x.iter()
        .map(|&v| {
            let v = v as f64;
            let out = v - PRE_EMPHASIS_COEFF * prev;
            prev = v;
            out
        })
        .collect()
}

/// Error-to-signal ratio on pre-emphasized signals plus a DC term:
///
/// ```text
/// ESR = Σ (pe(ŷ) − pe(y))² / Σ pe(y)²
/// DC  = mean(y − ŷ)² / mean(y²)
/// ```
pub fn esr_dc(y: &[f32], y_hat: &[f32]) -> Result<f64, MetricError> {
    let n = check_pair(y, y_hat)? as f64;
    let pe_y = pre_emphasis(y);
    let pe_hat = pre_emphasis(y_hat);
    let energy: f64 = pe_y.iter().map(|v| v * v).sum();
    let power = y.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
    if energy == 0.0 || power == 0.0 {
        return Err(MetricError::SilentReference);
    }
    let err: f64 = pe_y.iter().zip(&pe_hat).map(|(a, b)| (b - a).powi(2)).sum();
    let mean_diff = y.iter().zip(y_hat).map(|(&a, &b)| a as f64 - b as f64).sum::<f64>() / n;
    Ok(err / energy + mean_diff * mean_diff / power)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
}

/// auraloss `MultiResolutionSTFTLoss` defaults.
pub const DEFAULT_RESOLUTIONS: [StftResolution; 3] = [
    StftResolution { fft_size: 1024, hop: 120, win_length: 600 },
    StftResolution { fft_size: 2048, hop: 240, win_length: 1200 },
    StftResolution { fft_size: 512, hop: 50, win_length: 240 },
];

/// Periodic Hann window, as `torch.hann_window(n)`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reflect-pads by `fft_size / 2` on both sides, as a centred STFT does.
pub fn reflect_pad(x: &[f32], pad: usize) -> Result<Vec<f64>, MetricError> {
    if x.len() <= pad {
        return Err(MetricError::TooShort { len: x.len(), need: pad + 1 });
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i] as f64));
    out.extend(x.iter().map(|&v| v as f64));
    out.extend((1..=pad).map(|i| x[n - 1 - i] as f64));
    Ok(out)
}

/// Magnitude spectrogram, `frames × (fft_size/2 + 1)`, row-major.
///
/// Frames are centred (reflect padding of `fft_size/2`), the window is a
/// periodic Hann of `win_length` zero-padded to `fft_size` at the centre.
pub fn stft_magnitude(x: &[f32], res: &StftResolution) -> Result<(usize, Vec<f64>), MetricError> {
    let n_fft = res.fft_size;
    let padded = reflect_pad(x, n_fft / 2)?;
    let frames = 1 + (padded.len() - n_fft) / res.hop;
    let bins = n_fft / 2 + 1;
    let mut window = vec![0.0; n_fft];
    let left = (n_fft - res.win_length) / 2;
    window[left..left + res.win_length].copy_from_slice(&hann(res.win_length));

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut mags = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * res.hop;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        mags.extend(buf[..bins].iter().map(|z| z.norm()));
    }
    Ok((frames, mags))
}

/// Spectral convergence and mean absolute log-magnitude distance at one
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftTerms {
    pub spectral_convergence: f64,
    pub log_magnitude: f64,
}

impl StftTerms {
    pub fn total(&self) -> f64 {
        self.spectral_convergence + self.log_magnitude
    }
}

pub fn stft_terms(y: &[f32], y_hat: &[f32], res: &StftResolution) -> Result<StftTerms, MetricError> {
    check_pair(y, y_hat)?;
    let (_, my) = stft_magnitude(y, res)?;
    let (_, mh) = stft_magnitude(y_hat, res)?;
    let ref_norm = my.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ref_norm == 0.0 {
        return Err(MetricError::SilentReference);
    }
    let diff_norm = my.iter().zip(&mh).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let log_mag = my
        .iter()
        .zip(&mh)
        .map(|(a, b)| (a.max(LOG_MAG_FLOOR).ln() - b.max(LOG_MAG_FLOOR).ln()).abs())
        .sum::<f64>()
        / my.len() as f64;
    Ok(StftTerms {
        spectral_convergence: diff_norm / ref_norm,
        log_magnitude: log_mag,
    })
}

/// Mean of `SC + LM` over [`DEFAULT_RESOLUTIONS`].
pub fn multi_stft(y: &[f32], y_hat: &[f32]) -> Result<f64, MetricError> {
    check_pair(y, y_hat)?;
    let need = DEFAULT_RESOLUTIONS.iter().map(|r| r.fft_size).max().unwrap();
    if y.len() < need {
        return Err(MetricError::TooShort { len: y.len(), need });
    }
    let mut total = 0.0;
    for res in &DEFAULT_RESOLUTIONS {
        total += stft_terms(y, y_hat, res)?.total();
    }
    Ok(total / DEFAULT_RESOLUTIONS.len() as f64)
}

/// Direct-form-I biquad with `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn filter(&self, x: &[f32]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let x0 = v as f64;
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }

    fn filter_f64(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }

    /// Squared magnitude response at `freq_hz`.
    pub fn power_response(&self, freq_hz: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / sample_rate;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        (num / den).norm_sqr()
    }
}

/// K-weighting stage 1 (high shelf), from its analog prototype at `sample_rate`.
pub fn k_shelf(sample_rate: f64) -> Biquad {
    let f0 = 1681.974450955533;
    let gain_db = 3.999843853973347;
    let q = 0.7071752369554196;
    let k = (PI * f0 / sample_rate).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.4996667741545416);
    let a0 = 1.0 + k / q + k * k;
    Biquad {
        b: [
            (vh + vb * k / q + k * k) / a0,
            2.0 * (k * k - vh) / a0,
            (vh - vb * k / q + k * k) / a0,
        ],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    }
}

/// K-weighting stage 2 (RLB high-pass).
pub fn k_highpass(sample_rate: f64) -> Biquad {
    let f0 = 38.13547087602444;
    let q = 0.5003270373238773;
    let k = (PI * f0 / sample_rate).tan();
    let a0 = 1.0 + k / q + k * k;
    Biquad {
        b: [1.0, -2.0, 1.0],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    }
}

const ABSOLUTE_GATE_LUFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;

fn block_loudness(mean_square: f64) -> f64 {
    -0.691 + 10.0 * mean_square.log10()
}

/// Integrated loudness of a mono signal in LUFS: K-weighting, 400 ms blocks
/// with 75 % overlap, absolute gate at −70 LUFS, relative gate at −10 LU.
pub fn lufs(x: &[f32], sample_rate: u32) -> Result<f64, MetricError> {
    let fs = sample_rate as f64;
    let block = (0.4 * fs).round() as usize;
    let step = (0.1 * fs).round() as usize;
    if block == 0 || x.len() < block {
        return Err(MetricError::TooShort { len: x.len(), need: block.max(1) });
    }
    let mut weighted = k_shelf(fs).filter(x);
    k_highpass(fs).filter_f64(&mut weighted);

    // Prefix sums of squares make every block O(1).
    let mut prefix = Vec::with_capacity(weighted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in &weighted {
        acc += v * v;
        prefix.push(acc);
    }
    let count = (x.len() - block) / step + 1;
    let powers: Vec<f64> = (0..count)
        .map(|j| (prefix[j * step + block] - prefix[j * step]) / block as f64)
        .collect();

    let above_abs: Vec<f64> = powers
        .iter()
        .copied()
        .filter(|&z| z > 0.0 && block_loudness(z) > ABSOLUTE_GATE_LUFS)
        .collect();
    if above_abs.is_empty() {
        return Err(MetricError::AllGated);
    }
    let relative_gate =
        block_loudness(above_abs.iter().sum::<f64>() / above_abs.len() as f64) + RELATIVE_GATE_LU;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&z| block_loudness(z) > relative_gate)
        .collect();
    if gated.is_empty() {
        return Err(MetricError::AllGated);
    }
    Ok(block_loudness(gated.iter().sum::<f64>() / gated.len() as f64))
}

/// Every metric for one reference/render pair.
///
/// Loudness fields are `None` (JSON `null`) when a signal is gated out
/// entirely; `lufs_diff` is then `None` as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub mse: f64,
    pub esr_dc: f64,
    pub multi_stft: f64,
    pub lufs_target: Option<f64>,
    pub lufs_render: Option<f64>,
    pub lufs_diff: Option<f64>,
}

fn gated(r: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::AllGated) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn compare(y: &[f32], y_hat: &[f32], sample_rate: u32) -> Result<MetricReport, MetricError> {
    check_pair(y, y_hat)?;
    let lufs_target = gated(lufs(y, sample_rate))?;
    let lufs_render = gated(lufs(y_hat, sample_rate))?;
    Ok(MetricReport {
        mae: mae(y, y_hat)?,
        mse: mse(y, y_hat)?,
        esr_dc: esr_dc(y, y_hat)?,
        multi_stft: multi_stft(y, y_hat)?,
        lufs_target,
        lufs_render,
        lufs_diff: lufs_target.zip(lufs_render).map(|(a, b)| (a - b).abs()),
    })
}
