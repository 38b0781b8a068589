//! Diagonal state-space layers.
//!
//! Every channel `h` owns `N` independent complex modes. A discrete layer
//! evolves as
//!
//! ```text
//! x[t] = Ā ⊙ x[t-1] + B̄ · u[t]
//! y[t] = 2·Re(Σ_n c_n · x_n[t]) + d · u[t]
//! ```
//!
//! Only one member of each conjugate pair is stored, hence the factor 2 on the
//! real part. All recurrences run in `f64`.
//!
//! Block data is laid out channel-major: a `H×L` block is a flat slice where
//! channel `h` occupies `[h*L, (h+1)*L)`.

mod engine;
mod fft;
mod recurrent;

pub use engine::{EngineRegistry, LayerProcessor, SsmEngine, DEFAULT_ENGINE};
pub use fft::{FftEngine, FftProcessor};
pub use recurrent::{RecurrentEngine, RecurrentProcessor};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Below this magnitude the ZOH input gain uses its `dt·B` limit.
pub const ZOH_LIMIT_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unstable mode: |Ā| = {magnitude} at channel {channel}, mode {mode}")]
    Unstable {
        channel: usize,
        mode: usize,
        magnitude: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid SSM order {0}")]
    InvalidOrder(usize),
    #[error("invalid SSM coefficients: {0}")]
    Invalid(String),
}

/// Continuous-time diagonal SSM parameters for `channels` independent channels.
///
/// All per-mode arrays are `channels × order`, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmCoefficients {
    pub order: usize,
    pub channels: usize,
    pub lambda: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub d: Vec<f64>,
    /// Step size relative to one sample period.
    pub dt: Vec<f64>,
}

impl SsmCoefficients {
    pub fn validate(&self) -> Result<(), SsmError> {
        if self.order == 0 {
            return Err(SsmError::InvalidOrder(0));
        }
        if self.channels == 0 {
            return Err(SsmError::DimensionMismatch("zero channels".into()));
        }
        let modes = self.order * self.channels;
        for (name, len, want) in [
            ("lambda", self.lambda.len(), modes),
            ("b", self.b.len(), modes),
            ("c", self.c.len(), modes),
            ("d", self.d.len(), self.channels),
            ("dt", self.dt.len(), self.channels),
        ] {
            if len != want {
                return Err(SsmError::DimensionMismatch(format!(
                    "{name} has {len} entries, expected {want}"
                )));
            }
        }
        let all_finite = self
            .lambda
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .all(|z| z.is_finite())
            && self.d.iter().chain(&self.dt).all(|v| v.is_finite());
        if !all_finite {
            return Err(SsmError::NonFinite("SSM coefficients"));
        }
        if let Some(pos) = self.lambda.iter().position(|l| l.re >= 0.0) {
            return Err(SsmError::Invalid(format!(
                "Re(lambda) = {} >= 0 at channel {}, mode {}",
                self.lambda[pos].re,
                pos / self.order,
                pos % self.order
            )));
        }
        if let Some(h) = self.dt.iter().position(|&dt| dt <= 0.0) {
            return Err(SsmError::Invalid(format!(
                "dt = {} <= 0 at channel {h}",
                self.dt[h]
            )));
        }
        Ok(())
    }
}

/// A zero-order-hold discretized layer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub order: usize,
    pub channels: usize,
    pub abar: Vec<Complex64>,
    pub bbar: Vec<Complex64>,
    pub c: Vec<Complex64>,
    pub d: Vec<f64>,
}

impl DiscreteSsm {
    #[inline]
    pub(crate) fn channel(&self, h: usize) -> std::ops::Range<usize> {
        h * self.order..(h + 1) * self.order
    }
}

/// Per-channel complex state carried across blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub order: usize,
    pub channels: usize,
    pub x: Vec<Complex64>,
    /// Number of samples consumed since the stream started.
    pub position: u64,
}

impl SsmState {
    pub fn zeros(channels: usize, order: usize) -> Self {
        SsmState {
            order,
            channels,
            x: vec![Complex64::new(0.0, 0.0); channels * order],
            position: 0,
        }
    }

    pub fn for_ssm(ssm: &DiscreteSsm) -> Self {
        Self::zeros(ssm.channels, ssm.order)
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|x| *x = Complex64::new(0.0, 0.0));
        self.position = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.position == 0 && self.x.iter().all(|x| x.re == 0.0 && x.im == 0.0)
    }

    pub(crate) fn check(&self, ssm: &DiscreteSsm) -> Result<(), SsmError> {
        if self.channels != ssm.channels
            || self.order != ssm.order
            || self.x.len() != ssm.channels * ssm.order
        {
            return Err(SsmError::DimensionMismatch(format!(
                "state is {}x{}, layer is {}x{}",
                self.channels, self.order, ssm.channels, ssm.order
            )));
        }
        Ok(())
    }
}

/// Zero-order-hold discretization: `Ā = exp(dt·λ)`, `B̄ = (Ā − 1)/λ · B`.
pub fn discretize(coeffs: &SsmCoefficients) -> Result<DiscreteSsm, SsmError> {
    coeffs.validate()?;
    let n = coeffs.order;
    let mut abar = Vec::with_capacity(coeffs.lambda.len());
    let mut bbar = Vec::with_capacity(coeffs.lambda.len());
    for (i, (&lambda, &b)) in coeffs.lambda.iter().zip(&coeffs.b).enumerate() {
        let dt = coeffs.dt[i / n];
        let a = (lambda * dt).exp();
        let gain = if lambda.norm() < ZOH_LIMIT_THRESHOLD {
            Complex64::new(dt, 0.0)
        } else {
            (a - 1.0) / lambda
        };
        let bb = gain * b;
        if !a.is_finite() || !bb.is_finite() {
            return Err(SsmError::NonFinite("discretized coefficients"));
        }
        let magnitude = a.norm();
        if magnitude >= 1.0 {
            return Err(SsmError::Unstable {
                channel: i / n,
                mode: i % n,
                magnitude,
            });
        }
        abar.push(a);
        bbar.push(bb);
    }
    Ok(DiscreteSsm {
        order: n,
        channels: coeffs.channels,
        abar,
        bbar,
        c: coeffs.c.clone(),
        d: coeffs.d.clone(),
    })
}

/// Impulse response of every channel, excluding the feedthrough `d`.
///
/// Returns an `H×L` channel-major block with
/// `K[h][t] = 2·Re(Σ_n c·B̄·Ā^t)`.
pub fn kernel(ssm: &DiscreteSsm, length: usize) -> Result<Vec<f64>, SsmError> {
    let mut out = vec![0.0; ssm.channels * length];
    for h in 0..ssm.channels {
        kernel_channel(ssm, h, &mut out[h * length..(h + 1) * length]);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SsmError::NonFinite("kernel"));
    }
    Ok(out)
}

/// Fills `out` with the kernel of channel `h`, one geometric sequence per mode.
pub(crate) fn kernel_channel(ssm: &DiscreteSsm, h: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in ssm.channel(h) {
        let a = ssm.abar[i];
        let mut w = ssm.c[i] * ssm.bbar[i];
        for k in out.iter_mut() {
            *k += 2.0 * w.re;
            w *= a;
        }
    }
}

/// Advances every channel by one sample, in place. `frame` holds the input
/// on entry and the output on return.
pub fn step_in_place(
    ssm: &DiscreteSsm,
    state: &mut SsmState,
    frame: &mut [f64],
) -> Result<(), SsmError> {
    state.check(ssm)?;
    if frame.len() != ssm.channels {
        return Err(SsmError::DimensionMismatch(format!(
            "frame has {} channels, layer has {}",
            frame.len(),
            ssm.channels
        )));
    }
    for (h, y) in frame.iter_mut().enumerate() {
        let u = *y;
        let mut acc = 0.0;
        for i in ssm.channel(h) {
            let x = ssm.abar[i] * state.x[i] + ssm.bbar[i] * u;
            state.x[i] = x;
            acc += ssm.c[i].re * x.re - ssm.c[i].im * x.im;
        }
        *y = 2.0 * acc + ssm.d[h] * u;
    }
    state.position += 1;
    Ok(())
}

/// One recurrent step: returns the output frame and the successor state.
pub fn step(
    ssm: &DiscreteSsm,
    state: SsmState,
    u: &[f64],
) -> Result<(Vec<f64>, SsmState), SsmError> {
    let mut state = state;
    let mut y = u.to_vec();
    step_in_place(ssm, &mut state, &mut y)?;
    Ok((y, state))
}

fn block_len(ssm: &DiscreteSsm, u: &[f64]) -> Result<usize, SsmError> {
    if u.is_empty() || !u.len().is_multiple_of(ssm.channels) {
        return Err(SsmError::DimensionMismatch(format!(
            "block of {} samples does not split into {} non-empty channels",
            u.len(),
            ssm.channels
        )));
    }
    Ok(u.len() / ssm.channels)
}

fn run_processor(
    mut processor: Box<dyn LayerProcessor>,
    state: SsmState,
    u: &[f64],
) -> Result<(Vec<f64>, SsmState), SsmError> {
    let len = block_len(processor.ssm(), u)?;
    let mut state = state;
    let mut y = u.to_vec();
    processor.process(&mut state, &mut y, len)?;
    Ok((y, state))
}

/// Processes an `H×L` block by iterating the recurrence `L` times.
pub fn process_block_recurrent(
    ssm: &DiscreteSsm,
    state: SsmState,
    u: &[f64],
) -> Result<(Vec<f64>, SsmState), SsmError> {
    run_processor(Box::new(RecurrentProcessor::new(ssm.clone())), state, u)
}

/// Processes an `H×L` block by FFT convolution with the layer kernel, plus the
/// ring-down of the incoming state. The outgoing state is exact.
pub fn process_block_fft(
    ssm: &DiscreteSsm,
    state: SsmState,
    u: &[f64],
) -> Result<(Vec<f64>, SsmState), SsmError> {
    run_processor(Box::new(FftProcessor::new(ssm.clone())), state, u)
}

/// S4D-Lin initialization: `λ_n = −1/2 + iπn`, `B = 1`, `c` standard complex
/// normal, `dt` log-uniform in `[1e-3, 1e-1]`, `d = 0`.
pub fn init_s4d(order: usize, channels: usize, seed: u64) -> Result<SsmCoefficients, SsmError> {
    if order < 1 {
        return Err(SsmError::InvalidOrder(order));
    }
    if channels < 1 {
        return Err(SsmError::DimensionMismatch("zero channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes = order * channels;
    let lambda = (0..modes)
        .map(|i| Complex64::new(-0.5, std::f64::consts::PI * (i % order) as f64))
        .collect();
    let b = vec![Complex64::new(1.0, 0.0); modes];
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let c = (0..modes)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    let dt = (0..channels)
        .map(|_| (lo + rng.random::<f64>() * (hi - lo)).exp())
        .collect();
    Ok(SsmCoefficients {
        order,
        channels,
        lambda,
        b,
        c,
        d: vec![0.0; channels],
        dt,
    })
}
