use std::sync::Arc;

use super::{
    embed_controls, film_in_place, film_params, prelu_in_place, BlockWeights, ControlVector,
    ModelError, ModelState, ModelWeights,
};
use crate::ssm::{self, LayerProcessor, SsmEngine, SsmError};

struct PreparedBlock {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    layer: Box<dyn LayerProcessor>,
}

/// Forward pass with fixed controls and reusable scratch.
///
/// Controls are embedded and FiLM parameters computed once at construction.
/// Scratch grows to the largest block seen; after that, rendering a block no
/// longer than any previous one performs no allocation (the engine's own
/// plan is rebuilt when the block length changes).
pub struct Renderer {
    weights: Arc<ModelWeights>,
    engine: &'static str,
    blocks: Vec<PreparedBlock>,
    x: Vec<f64>,
    h: Vec<f64>,
    warned_range: bool,
}

impl Renderer {
    pub fn new(
        weights: Arc<ModelWeights>,
        ctrl: &ControlVector,
        engine: &dyn SsmEngine,
    ) -> Result<Self, ModelError> {
        weights.validate()?;
        let embedding = embed_controls(&weights, ctrl)?;
        let blocks = weights
            .blocks
            .iter()
            .map(|bw| {
                let (gamma, beta) = film_params(bw, &embedding)?;
                let layer = engine.build(ssm::discretize(&bw.ssm)?);
                Ok(PreparedBlock { gamma, beta, layer })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Renderer {
            weights,
            engine: engine.name(),
            blocks,
            x: Vec::new(),
            h: Vec::new(),
            warned_range: false,
        })
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        &self.weights
    }

    pub fn engine(&self) -> &'static str {
        self.engine
    }

    /// Renders `input` into `output` with the configured engine.
    pub fn render(
        &mut self,
        state: &mut ModelState,
        input: &[f32],
        output: &mut [f32],
    ) -> Result<(), ModelError> {
        self.run(state, input, output, false)
    }

    /// Renders one sample by direct recurrence, bypassing the engine.
    pub fn render_sample(&mut self, state: &mut ModelState, input: f32) -> Result<f32, ModelError> {
        let mut out = [0.0f32];
        self.run(state, &[input], &mut out, true)?;
        Ok(out[0])
    }

    fn run(
        &mut self,
        state: &mut ModelState,
        input: &[f32],
        output: &mut [f32],
        per_sample: bool,
    ) -> Result<(), ModelError> {
        let weights = &*self.weights;
        state.check(&weights.config)?;
        if input.len() != output.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "input has {} samples, output has {}",
                input.len(),
                output.len()
            )));
        }
        let len = input.len();
        if len == 0 {
            return Ok(());
        }
        if !self.warned_range && input.iter().any(|v| v.abs() > 1.0) {
            log::warn!("input exceeds [-1, 1]; processing unclamped");
            self.warned_range = true;
        }

        let c = weights.config.channels;
        if self.x.len() < c * len {
            self.x.resize(c * len, 0.0);
            self.h.resize(c * len, 0.0);
        }
        let x = &mut self.x[..c * len];
        let h = &mut self.h[..c * len];

        for (ch, dst) in x.chunks_exact_mut(len).enumerate() {
            let (w, b) = (weights.expand.weight[ch], weights.expand.bias[ch]);
            dst.iter_mut().zip(input).for_each(|(d, &u)| *d = w * u as f64 + b);
        }

        for ((bw, pb), st) in weights.blocks.iter().zip(&mut self.blocks).zip(&mut state.blocks) {
            let PreparedBlock { gamma, beta, layer } = pb;
            if per_sample {
                block_in_place(bw, gamma, beta, x, h, len, |buf| {
                    ssm::step_in_place(layer.ssm(), st, buf)
                })?;
            } else {
                block_in_place(bw, gamma, beta, x, h, len, |buf| layer.process(st, buf, len))?;
            }
        }

        let contract = &weights.contract;
        let mut non_finite = false;
        for (t, y) in output.iter_mut().enumerate() {
            let mut acc = contract.bias[0];
            for ch in 0..c {
                acc += contract.weight[ch] * x[ch * len + t];
            }
            let v = acc.tanh();
            non_finite |= !v.is_finite();
            *y = v as f32;
        }
        if non_finite {
            return Err(ModelError::NonFinite("model output"));
        }
        Ok(())
    }
}

/// Applies one block to `x` in place. `h` is scratch of the same size and
/// `ssm_stage` runs the state-space layer on it.
pub(crate) fn block_in_place(
    bw: &BlockWeights,
    gamma: &[f64],
    beta: &[f64],
    x: &mut [f64],
    h: &mut [f64],
    len: usize,
    mut ssm_stage: impl FnMut(&mut [f64]) -> Result<(), SsmError>,
) -> Result<(), ModelError> {
    bw.mix.apply_block(x, h, len);
    prelu_in_place(&bw.prelu1, h, len);
    ssm_stage(h)?;
    for ((chan, &s), &b) in h.chunks_exact_mut(len).zip(&bw.norm_scale).zip(&bw.norm_shift) {
        chan.iter_mut().for_each(|v| *v = s * *v + b);
    }
    film_in_place(gamma, beta, h, len);
    prelu_in_place(&bw.prelu2, h, len);
    x.iter_mut().zip(h.iter()).for_each(|(r, v)| *r += v);
    Ok(())
}
