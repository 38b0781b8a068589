use std::collections::BTreeMap;
use std::sync::Arc;

use super::{DiscreteSsm, FftEngine, RecurrentEngine, SsmError, SsmState};

/// Name of the engine used when none is requested.
pub const DEFAULT_ENGINE: &str = "fft";

/// A block-processing strategy for diagonal SSM layers.
///
/// Engines are stateless factories. Each layer of a model gets its own
/// [`LayerProcessor`], which owns whatever scratch the strategy needs.
pub trait SsmEngine: Send + Sync {
    fn name(&self) -> &'static str;

    fn summary(&self) -> &'static str;

    fn build(&self, ssm: DiscreteSsm) -> Box<dyn LayerProcessor>;
}

/// Processes blocks of one layer while carrying its state.
///
/// After the first call for a given block length, `process` must not
/// allocate.
pub trait LayerProcessor: Send {
    fn ssm(&self) -> &DiscreteSsm;

    /// `block` is `H×len` channel-major: input on entry, output on return.
    /// `state` is advanced by `len` samples.
    fn process(
        &mut self,
        state: &mut SsmState,
        block: &mut [f64],
        len: usize,
    ) -> Result<(), SsmError>;
}

/// Named lookup of the available engines.
#[derive(Clone)]
pub struct EngineRegistry {
    engines: BTreeMap<&'static str, Arc<dyn SsmEngine>>,
}

impl EngineRegistry {
    pub fn empty() -> Self {
        EngineRegistry {
            engines: BTreeMap::new(),
        }
    }

    /// The registry with every built-in engine.
    pub fn builtin() -> Self {
        let mut registry = Self::empty();
        registry.register(Arc::new(FftEngine));
        registry.register(Arc::new(RecurrentEngine));
        registry
    }

    /// Adds an engine, replacing any previous one with the same name.
    pub fn register(&mut self, engine: Arc<dyn SsmEngine>) {
        self.engines.insert(engine.name(), engine);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn SsmEngine>> {
        self.engines.get(name).cloned()
    }

    pub fn default_engine(&self) -> Arc<dyn SsmEngine> {
        self.get(DEFAULT_ENGINE)
            .unwrap_or_else(|| Arc::new(FftEngine))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.engines.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<dyn SsmEngine>> {
        self.engines.values()
    }
}

impl Default for EngineRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

pub(crate) fn check_block(
    ssm: &DiscreteSsm,
    state: &SsmState,
    block: &[f64],
    len: usize,
) -> Result<(), SsmError> {
    state.check(ssm)?;
    if len == 0 || block.len() != ssm.channels * len {
        return Err(SsmError::DimensionMismatch(format!(
            "block of {} samples is not {} channels x {len}",
            block.len(),
            ssm.channels
        )));
    }
    Ok(())
}
