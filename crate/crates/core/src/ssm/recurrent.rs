use super::engine::check_block;
use super::{DiscreteSsm, LayerProcessor, SsmEngine, SsmError, SsmState};

/// Sample-by-sample recurrence. O(H·N) per sample, no scratch.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecurrentEngine;

impl SsmEngine for RecurrentEngine {
    fn name(&self) -> &'static str {
        "recurrent"
    }

    fn summary(&self) -> &'static str {
        "direct state recurrence, one sample at a time"
    }

    fn build(&self, ssm: DiscreteSsm) -> Box<dyn LayerProcessor> {
        Box::new(RecurrentProcessor::new(ssm))
    }
}

pub struct RecurrentProcessor {
    ssm: DiscreteSsm,
}

impl RecurrentProcessor {
    pub fn new(ssm: DiscreteSsm) -> Self {
        RecurrentProcessor { ssm }
    }
}

impl LayerProcessor for RecurrentProcessor {
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
        let ssm = &self.ssm;
        for (h, channel) in block.chunks_exact_mut(len).enumerate() {
            let modes = ssm.channel(h);
            let abar = &ssm.abar[modes.clone()];
            let bbar = &ssm.bbar[modes.clone()];
            let c = &ssm.c[modes.clone()];
            let x = &mut state.x[modes];
            let d = ssm.d[h];
            for y in channel.iter_mut() {
                let u = *y;
                let mut acc = 0.0;
                for n in 0..x.len() {
                    let xn = abar[n] * x[n] + bbar[n] * u;
                    x[n] = xn;
                    acc += c[n].re * xn.re - c[n].im * xn.im;
                }
                *y = 2.0 * acc + d * u;
            }
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(SsmError::NonFinite("recurrent block output"));
        }
        state.position += len as u64;
        Ok(())
    }
}
