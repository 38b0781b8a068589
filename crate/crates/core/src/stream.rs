//! Incremental rendering with state hand-off between buffers.
//!
//! A [`StreamProcessor`] renders a stream whose controls are fixed for its
//! lifetime. To change controls, open a new stream. Buffer sizes may vary
//! from call to call; the output is the same as rendering the concatenated
//! input in one pass.
//!
//! Once a buffer of a given size has been processed, further buffers of that
//! size are processed without heap allocation, locks or I/O.

use std::sync::Arc;

use thiserror::Error;

use crate::model::{ControlVector, ModelError, ModelState, ModelWeights, Renderer};
use crate::ssm::{EngineRegistry, SsmEngine, SsmError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stream poisoned by a non-finite value; call reset()")]
    Poisoned,
}

impl StreamError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            StreamError::Model(ModelError::NonFinite(_))
                | StreamError::Model(ModelError::Ssm(SsmError::NonFinite(_)))
        )
    }
}

/// Anything that turns input buffers into output buffers of the same length.
pub trait BufferProcessor {
    fn process_buffer(&mut self, input: &[f32], output: &mut [f32]) -> Result<(), StreamError>;
}

pub struct StreamProcessor {
    renderer: Renderer,
    state: ModelState,
    poisoned: bool,
}

/// Opens a stream on the default engine.
pub fn open_stream(
    weights: Arc<ModelWeights>,
    ctrl: &ControlVector,
) -> Result<StreamProcessor, StreamError> {
    let engine = EngineRegistry::builtin().default_engine();
    StreamProcessor::with_engine(weights, ctrl, engine.as_ref())
}

impl StreamProcessor {
    pub fn with_engine(
        weights: Arc<ModelWeights>,
        ctrl: &ControlVector,
        engine: &dyn SsmEngine,
    ) -> Result<Self, StreamError> {
        let state = ModelState::new(&weights.config);
        let renderer = Renderer::new(weights, ctrl, engine)?;
        Ok(StreamProcessor {
            renderer,
            state,
            poisoned: false,
        })
    }

    /// Sizes scratch and engine plans for `buffer_size` by rendering one
    /// silent buffer, then resets.
    pub fn prepare(&mut self, buffer_size: usize) -> Result<(), StreamError> {
        if buffer_size > 0 {
            let silence = vec![0.0; buffer_size];
            let mut out = vec![0.0; buffer_size];
            self.process_buffer(&silence, &mut out)?;
        }
        self.reset();
        Ok(())
    }

    pub fn weights(&self) -> &Arc<ModelWeights> {
        self.renderer.weights()
    }

    pub fn engine(&self) -> &'static str {
        self.renderer.engine()
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Samples consumed since open or the last reset.
    pub fn position(&self) -> u64 {
        self.state.blocks.first().map_or(0, |s| s.position)
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn process_buffer(&mut self, input: &[f32], output: &mut [f32]) -> Result<(), StreamError> {
        if self.poisoned {
            output.iter_mut().for_each(|y| *y = 0.0);
            return Err(StreamError::Poisoned);
        }
        let result = self
            .renderer
            .render(&mut self.state, input, output)
            .map_err(StreamError::from);
        self.check(result, output)
    }

    /// Convenience wrapper that allocates the output.
    pub fn process(&mut self, input: &[f32]) -> Result<Vec<f32>, StreamError> {
        let mut out = vec![0.0; input.len()];
        self.process_buffer(input, &mut out)?;
        Ok(out)
    }

    /// One sample through the direct recurrence of every layer.
    pub fn process_sample(&mut self, input: f32) -> Result<f32, StreamError> {
        if self.poisoned {
            return Err(StreamError::Poisoned);
        }
        let mut out = [0.0f32];
        let result = self
            .renderer
            .render_sample(&mut self.state, input)
            .map(|y| out[0] = y)
            .map_err(StreamError::from);
        self.check(result, &mut out)?;
        Ok(out[0])
    }

    pub fn reset(&mut self) {
        self.state.reset();
        self.poisoned = false;
    }

    fn check(&mut self, result: Result<(), StreamError>, output: &mut [f32]) -> Result<(), StreamError> {
        if let Err(e) = &result {
            if e.is_non_finite() {
                self.poisoned = true;
                output.iter_mut().for_each(|y| *y = 0.0);
            }
        }
        result
    }
}

impl BufferProcessor for StreamProcessor {
    fn process_buffer(&mut self, input: &[f32], output: &mut [f32]) -> Result<(), StreamError> {
        StreamProcessor::process_buffer(self, input, output)
    }
}
