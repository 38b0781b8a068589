use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::engine::check_block;
use super::{kernel_channel, DiscreteSsm, LayerProcessor, SsmEngine, SsmError, SsmState};

/// Block convolution with the layer's impulse response via zero-padded FFT.
///
/// The transform length is the next power of two ≥ 2L, so the convolution is
/// linear. The incoming state contributes its ring-down and the outgoing
/// state is advanced by the per-mode recurrence, so consecutive blocks join
/// without discontinuities.
#[derive(Debug, Clone, Copy, Default)]
pub struct FftEngine;

impl SsmEngine for FftEngine {
    fn name(&self) -> &'static str {
        "fft"
    }

    fn summary(&self) -> &'static str {
        "FFT convolution with the layer kernel, exact state hand-off"
    }

    fn build(&self, ssm: DiscreteSsm) -> Box<dyn LayerProcessor> {
        Box::new(FftProcessor::new(ssm))
    }
}

struct Plan {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Kernel spectrum per channel, `H × fft_len`.
    spectra: Vec<Complex64>,
    work: Vec<Complex64>,
    mixed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

pub struct FftProcessor {
    ssm: DiscreteSsm,
    planner: FftPlanner<f64>,
    plan: Option<Plan>,
    ring: Vec<Complex64>,
    carry: Vec<Complex64>,
}

impl FftProcessor {
    pub fn new(ssm: DiscreteSsm) -> Self {
        let order = ssm.order;
        FftProcessor {
            ssm,
            planner: FftPlanner::new(),
            plan: None,
            ring: vec![Complex64::new(0.0, 0.0); order],
            carry: vec![Complex64::new(0.0, 0.0); order],
        }
    }

    /// Builds transforms and kernel spectra for blocks of `len` samples.
    /// Reuses the current plan when the length is unchanged.
    fn prepare(&mut self, len: usize) {
        if self.plan.as_ref().is_some_and(|p| p.len == len) {
            return;
        }
        let fft_len = (2 * len).next_power_of_two();
        let forward = self.planner.plan_fft_forward(fft_len);
        let inverse = self.planner.plan_fft_inverse(fft_len);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];

        let channels = self.ssm.channels;
        let mut spectra = vec![Complex64::new(0.0, 0.0); channels * fft_len];
        let mut taps = vec![0.0; len];
        for (h, spectrum) in spectra.chunks_exact_mut(fft_len).enumerate() {
            kernel_channel(&self.ssm, h, &mut taps);
            for (s, &k) in spectrum.iter_mut().zip(&taps) {
                *s = Complex64::new(k, 0.0);
            }
            forward.process_with_scratch(spectrum, &mut scratch);
        }

        self.plan = Some(Plan {
            len,
            fft_len,
            forward,
            inverse,
            spectra,
            work: vec![Complex64::new(0.0, 0.0); fft_len],
            mixed: vec![Complex64::new(0.0, 0.0); fft_len],
            scratch,
        });
    }
}

impl LayerProcessor for FftProcessor {
    fn ssm(&self) -> &DiscreteSsm {
        &self.ssm
    }

    fn process(
        &mut self,
        state: &mut SsmState,
        block: &mut [f64],
        len: usize,
    ) -> Result<(), SsmError> {
        check_block(&self.ssm, state, block, len)?;
        self.prepare(len);
        let plan = self.plan.as_mut().expect("plan prepared above");
        let n = plan.fft_len;
        let inv_n = 1.0 / n as f64;
        let channels = self.ssm.channels;
        let half = Complex64::new(0.5, 0.0);
        let minus_half_i = Complex64::new(0.0, -0.5);
        let i = Complex64::new(0.0, 1.0);

        // Two real channels share one complex transform: channel `h0` in the
        // real part, `h1` in the imaginary part.
        let mut h0 = 0;
        while h0 < channels {
            let h1 = (h0 + 1 < channels).then_some(h0 + 1);

            for t in 0..len {
                let re = block[h0 * len + t];
                let im = h1.map_or(0.0, |h| block[h * len + t]);
                plan.work[t] = Complex64::new(re, im);
            }
            plan.work[len..].iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            plan.forward.process_with_scratch(&mut plan.work, &mut plan.scratch);

            let k0 = &plan.spectra[h0 * n..(h0 + 1) * n];
            #[allow(clippy::needless_range_loop)]
            for k in 0..n {
                let z = plan.work[k];
                let zc = plan.work[(n - k) % n].conj();
                let a = (z + zc) * half;
                let mut w = a * k0[k];
                if let Some(h) = h1 {
                    let b = (z - zc) * minus_half_i;
                    w += i * b * plan.spectra[h * n + k];
                }
                plan.mixed[k] = w;
            }
            plan.inverse.process_with_scratch(&mut plan.mixed, &mut plan.scratch);

            for (h, part) in [(Some(h0), 0usize), (h1, 1)] {
                let Some(h) = h else { continue };
                let modes = self.ssm.channel(h);
                let abar = &self.ssm.abar[modes.clone()];
                let bbar = &self.ssm.bbar[modes.clone()];
                let c = &self.ssm.c[modes.clone()];
                let d = self.ssm.d[h];
                let x = &mut state.x[modes];
                self.ring.copy_from_slice(x);
                self.carry.copy_from_slice(x);
                let channel = &mut block[h * len..(h + 1) * len];
                for (t, y) in channel.iter_mut().enumerate() {
                    let u = *y;
                    let mut ring = 0.0;
                    for m in 0..abar.len() {
                        // ring[m] = Ā^(t+1)·x, carry[m] = state after sample t.
                        self.ring[m] *= abar[m];
                        ring += c[m].re * self.ring[m].re - c[m].im * self.ring[m].im;
                        self.carry[m] = abar[m] * self.carry[m] + bbar[m] * u;
                    }
                    let conv = if part == 0 {
                        plan.mixed[t].re
                    } else {
                        plan.mixed[t].im
                    };
                    *y = conv * inv_n + d * u + 2.0 * ring;
                }
                x.copy_from_slice(&self.carry);
            }
            h0 += 2;
        }

        if block.iter().any(|v| !v.is_finite()) {
            return Err(SsmError::NonFinite("fft block output"));
        }
        state.position += len as u64;
        Ok(())
    }
}
