//! The compressor network: input expansion, a stack of SSM blocks conditioned
//! by FiLM, output contraction and a final `tanh`.
//!
//! Each block computes
//!
//! ```text
//! h = prelu1(mix · x + bias)
//! h = ssm(h)
//! h = norm_scale ⊙ h + norm_shift
//! h = prelu2(γ ⊙ h + β)
//! out = x + h
//! ```
//!
//! where `(γ, β)` come from a per-block linear map of the control embedding.

mod render;

pub use render::Renderer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ssm::{self, EngineRegistry, SsmCoefficients, SsmError, SsmState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid control vector: {0}")]
    InvalidControl(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("state does not match model: {0}")]
    StateMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub ssm_order: usize,
    pub control_dim: usize,
    pub control_embedding_dim: usize,
    /// Hidden widths of the control MLP.
    #[serde(default = "default_control_hidden")]
    pub control_hidden: Vec<usize>,
    pub sample_rate: u32,
}

fn default_control_hidden() -> Vec<usize> {
    vec![16, 16]
}

impl ModelConfig {
    /// Four blocks, two controls, a 2→16→16→32 control MLP at 44.1 kHz.
    pub fn new(channels: usize, ssm_order: usize) -> Self {
        ModelConfig {
            num_blocks: 4,
            channels,
            ssm_order,
            control_dim: 2,
            control_embedding_dim: 32,
            control_hidden: default_control_hidden(),
            sample_rate: 44_100,
        }
    }

    /// `ssm-c{channels}-f{order}`.
    pub fn name(&self) -> String {
        format!("ssm-c{}-f{}", self.channels, self.ssm_order)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("channels", self.channels),
            ("ssm_order", self.ssm_order),
            ("control_embedding_dim", self.control_embedding_dim),
            ("sample_rate", self.sample_rate as usize),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.control_dim != 2 {
            return Err(ModelError::InvalidConfig(format!(
                "control_dim is {}, the compressor takes exactly 2 controls",
                self.control_dim
            )));
        }
        if self.control_hidden.contains(&0) {
            return Err(ModelError::InvalidConfig("zero-width control layer".into()));
        }
        Ok(())
    }
}

/// Front-panel controls, normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    /// Peak reduction in `[0, 1]` (front-panel 0–100 scaled by 0.01).
    pub peak_reduction: f64,
    /// 0 = compress, 1 = limit.
    pub limit_switch: f64,
}

impl ControlVector {
    pub fn new(peak_reduction: f64, limit_switch: f64) -> Result<Self, ModelError> {
        let ctrl = ControlVector {
            peak_reduction,
            limit_switch,
        };
        ctrl.validate()?;
        Ok(ctrl)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.peak_reduction) {
            return Err(ModelError::InvalidControl(format!(
                "peak_reduction {} outside [0, 1]",
                self.peak_reduction
            )));
        }
        if self.limit_switch != 0.0 && self.limit_switch != 1.0 {
            return Err(ModelError::InvalidControl(format!(
                "limit_switch {} is not 0 or 1",
                self.limit_switch
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.peak_reduction, self.limit_switch]
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut lin = Self::zeros(dim, dim);
        for i in 0..dim {
            lin.weight[i * dim + i] = 1.0;
        }
        lin
    }

    /// PyTorch-style uniform init in `±1/sqrt(in_dim)`.
    fn random(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || snap(rng.random_range(-bound..bound));
        Linear {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| draw()).collect(),
            bias: (0..out_dim).map(|_| draw()).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *y = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Mixes an `in_dim × len` channel-major block into `out_dim × len`.
    pub(crate) fn apply_block(&self, x: &[f64], out: &mut [f64], len: usize) {
        for (o, dst) in out.chunks_exact_mut(len).enumerate() {
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for (i, src) in x.chunks_exact(len).enumerate() {
                let w = self.weight[o * self.in_dim + i];
                if w != 0.0 {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                }
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, in_dim: usize, out_dim: usize, what: &'static str) -> Result<(), ModelError> {
        if self.in_dim != in_dim
            || self.out_dim != out_dim
            || self.weight.len() != in_dim * out_dim
            || self.bias.len() != out_dim
        {
            return Err(ModelError::DimensionMismatch(format!(
                "{what} is {}x{}, expected {out_dim}x{in_dim}",
                self.out_dim, self.in_dim
            )));
        }
        check_finite(&self.weight, what)?;
        check_finite(&self.bias, what)
    }
}

/// Control MLP: linear layers with a per-feature PReLU between consecutive
/// layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMlp {
    pub layers: Vec<Linear>,
    /// `slopes[i]` follows `layers[i]`; one fewer than `layers`.
    pub slopes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub mix: Linear,
    pub prelu1: Vec<f64>,
    pub ssm: SsmCoefficients,
    /// Inference-mode batch norm folded to a per-channel affine.
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    /// Embedding → `[γ; β]`, `2c` outputs.
    pub film: Linear,
    pub prelu2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub expand: Linear,
    pub blocks: Vec<BlockWeights>,
    pub control_mlp: ControlMlp,
    pub contract: Linear,
}

impl ModelWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = &self.config;
        cfg.validate()?;
        let c = cfg.channels;
        let e = cfg.control_embedding_dim;
        self.expand.check(1, c, "expand")?;
        self.contract.check(c, 1, "contract")?;
        if self.blocks.len() != cfg.num_blocks {
            return Err(ModelError::DimensionMismatch(format!(
                "{} blocks, config says {}",
                self.blocks.len(),
                cfg.num_blocks
            )));
        }
        for bw in &self.blocks {
            bw.mix.check(c, c, "block mix")?;
            bw.film.check(e, 2 * c, "block film")?;
            for (name, v) in [
                ("prelu1", &bw.prelu1),
                ("prelu2", &bw.prelu2),
                ("norm_scale", &bw.norm_scale),
                ("norm_shift", &bw.norm_shift),
            ] {
                if v.len() != c {
                    return Err(ModelError::DimensionMismatch(format!(
                        "{name} has {} entries, expected {c}",
                        v.len()
                    )));
                }
                check_finite(v, name)?;
            }
            if bw.norm_scale.contains(&0.0) {
                return Err(ModelError::InvalidConfig("zero norm scale".into()));
            }
            if bw.ssm.channels != c || bw.ssm.order != cfg.ssm_order {
                return Err(ModelError::DimensionMismatch(format!(
                    "block SSM is {}x{}, expected {c}x{}",
                    bw.ssm.channels, bw.ssm.order, cfg.ssm_order
                )));
            }
            bw.ssm.validate()?;
        }
        let mlp = &self.control_mlp;
        let dims: Vec<usize> = std::iter::once(cfg.control_dim)
            .chain(cfg.control_hidden.iter().copied())
            .chain(std::iter::once(e))
            .collect();
        if mlp.layers.len() != dims.len() - 1 || mlp.slopes.len() != mlp.layers.len() - 1 {
            return Err(ModelError::DimensionMismatch(format!(
                "control MLP has {} layers, expected {}",
                mlp.layers.len(),
                dims.len() - 1
            )));
        }
        for (i, layer) in mlp.layers.iter().enumerate() {
            layer.check(dims[i], dims[i + 1], "control MLP layer")?;
        }
        for (i, slope) in mlp.slopes.iter().enumerate() {
            if slope.len() != dims[i + 1] {
                return Err(ModelError::DimensionMismatch("control MLP slope width".into()));
            }
            check_finite(slope, "control MLP slope")?;
        }
        Ok(())
    }

    /// Total scalar parameters: complex values count twice, the folded norm
    /// counts `2c` per block, and `λ`, `dt`, `B` count as trainable.
    pub fn param_count(&self) -> usize {
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                b.mix.param_count()
                    + b.prelu1.len()
                    + 2 * (b.ssm.lambda.len() + b.ssm.b.len() + b.ssm.c.len())
                    + b.ssm.d.len()
                    + b.ssm.dt.len()
                    + b.norm_scale.len()
                    + b.norm_shift.len()
                    + b.film.param_count()
                    + b.prelu2.len()
            })
            .sum();
        let mlp: usize = self.control_mlp.layers.iter().map(Linear::param_count).sum::<usize>()
            + self.control_mlp.slopes.iter().map(Vec::len).sum::<usize>();
        self.expand.param_count() + blocks + mlp + self.contract.param_count()
    }

    /// Seeded random weights. Every value is representable in `f32` so the
    /// model survives a save/load cycle unchanged.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let e = config.control_embedding_dim;

        let dims: Vec<usize> = std::iter::once(config.control_dim)
            .chain(config.control_hidden.iter().copied())
            .chain(std::iter::once(e))
            .collect();
        let layers: Vec<Linear> = dims
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], &mut rng))
            .collect();
        let slopes = dims[1..dims.len() - 1].iter().map(|&n| vec![0.25; n]).collect();

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let mix = Linear::random(c, c, &mut rng);
            let mut ssm = ssm::init_s4d(config.ssm_order, c, rng.random())?;
            for d in &mut ssm.d {
                *d = rng.sample::<f64, _>(StandardNormal);
            }
            snap_ssm(&mut ssm);
            let mut film = Linear::random(e, 2 * c, &mut rng);
            // Centre γ on 1 so FiLM starts close to the identity.
            film.bias[..c].iter_mut().for_each(|g| *g = snap(*g + 1.0));
            blocks.push(BlockWeights {
                mix,
                prelu1: vec![0.25; c],
                ssm,
                norm_scale: (0..c).map(|_| snap(rng.random_range(0.5..1.5))).collect(),
                norm_shift: (0..c).map(|_| snap(rng.random_range(-0.1..0.1))).collect(),
                film,
                prelu2: vec![0.25; c],
            });
        }

        let weights = ModelWeights {
            config: config.clone(),
            expand: Linear::random(1, c, &mut rng),
            blocks,
            control_mlp: ControlMlp { layers, slopes },
            contract: Linear::random(c, 1, &mut rng),
        };
        weights.validate()?;
        Ok(weights)
    }
}

/// Analytic passthrough: every block is `x ↦ 2x`, so `N` blocks scale by
/// `2^N`; the contraction undoes that on channel 0 and the model computes
/// `tanh(u)` for any controls.
pub fn make_passthrough_weights(config: &ModelConfig) -> Result<ModelWeights, ModelError> {
    config.validate()?;
    let c = config.channels;
    let e = config.control_embedding_dim;
    let n = config.ssm_order;

    let dims: Vec<usize> = std::iter::once(config.control_dim)
        .chain(config.control_hidden.iter().copied())
        .chain(std::iter::once(e))
        .collect();
    let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
    let slopes = dims[1..dims.len() - 1].iter().map(|&w| vec![1.0; w]).collect();

    let mut ssm = ssm::init_s4d(n, c, 0)?;
    ssm.c.iter_mut().for_each(|v| *v = num_complex::Complex64::new(0.0, 0.0));
    ssm.d = vec![1.0; c];
    ssm.dt = vec![0.015625; c];

    let mut film = Linear::zeros(e, 2 * c);
    film.bias[..c].iter_mut().for_each(|g| *g = 1.0);

    let block = BlockWeights {
        mix: Linear::identity(c),
        prelu1: vec![1.0; c],
        ssm,
        norm_scale: vec![1.0; c],
        norm_shift: vec![0.0; c],
        film,
        prelu2: vec![1.0; c],
    };

    let mut expand = Linear::zeros(1, c);
    expand.weight.iter_mut().for_each(|w| *w = 1.0);
    let mut contract = Linear::zeros(c, 1);
    contract.weight[0] = 0.5f64.powi(config.num_blocks as i32);

    let weights = ModelWeights {
        config: config.clone(),
        expand,
        blocks: vec![block; config.num_blocks],
        control_mlp: ControlMlp { layers, slopes },
        contract,
    };
    weights.validate()?;
    Ok(weights)
}

/// Per-block SSM states, threaded through the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub blocks: Vec<SsmState>,
}

impl ModelState {
    pub fn new(config: &ModelConfig) -> Self {
        ModelState {
            blocks: (0..config.num_blocks)
                .map(|_| SsmState::zeros(config.channels, config.ssm_order))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        self.blocks.iter_mut().for_each(SsmState::reset);
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(SsmState::is_zero)
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let ok = self.blocks.len() == config.num_blocks
            && self.blocks.iter().all(|s| {
                s.channels == config.channels
                    && s.order == config.ssm_order
                    && s.x.len() == config.channels * config.ssm_order
            });
        if ok {
            Ok(())
        } else {
            Err(ModelError::StateMismatch(format!(
                "state has {} blocks, model {} is {} blocks of {}x{}",
                self.blocks.len(),
                config.name(),
                config.num_blocks,
                config.channels,
                config.ssm_order
            )))
        }
    }
}

/// Runs the control MLP once. The embedding is shared by every block.
pub fn embed_controls(weights: &ModelWeights, ctrl: &ControlVector) -> Result<Vec<f64>, ModelError> {
    ctrl.validate()?;
    let mut x = ctrl.as_array().to_vec();
    let mlp = &weights.control_mlp;
    for (i, layer) in mlp.layers.iter().enumerate() {
        if x.len() != layer.in_dim {
            return Err(ModelError::DimensionMismatch("control MLP input width".into()));
        }
        let mut y = vec![0.0; layer.out_dim];
        layer.apply(&x, &mut y);
        if let Some(slope) = mlp.slopes.get(i) {
            y.iter_mut().zip(slope).for_each(|(v, &a)| *v = prelu_scalar(a, *v));
        }
        x = y;
    }
    check_finite(&x, "control embedding")?;
    Ok(x)
}

/// Splits a FiLM projection of the embedding into `(γ, β)`.
pub fn film_params(bw: &BlockWeights, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if embedding.len() != bw.film.in_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "embedding has {} entries, FiLM expects {}",
            embedding.len(),
            bw.film.in_dim
        )));
    }
    let mut out = vec![0.0; bw.film.out_dim];
    bw.film.apply(embedding, &mut out);
    let beta = out.split_off(out.len() / 2);
    Ok((out, beta))
}

/// `y[h][t] = γ[h]·x[h][t] + β[h]` on a channel-major block.
pub fn film(gamma: &[f64], beta: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let len = channel_len(gamma.len(), x.len())?;
    if beta.len() != gamma.len() {
        return Err(ModelError::DimensionMismatch("γ and β differ in length".into()));
    }
    let mut y = x.to_vec();
    film_in_place(gamma, beta, &mut y, len);
    Ok(y)
}

pub(crate) fn film_in_place(gamma: &[f64], beta: &[f64], x: &mut [f64], len: usize) {
    for ((chan, &g), &b) in x.chunks_exact_mut(len).zip(gamma).zip(beta) {
        chan.iter_mut().for_each(|v| *v = g * *v + b);
    }
}

/// Per-channel PReLU on a channel-major block.
pub fn prelu(a: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
    let len = channel_len(a.len(), x.len())?;
    let mut y = x.to_vec();
    prelu_in_place(a, &mut y, len);
    Ok(y)
}

#[inline]
fn prelu_scalar(a: f64, x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        a * x
    }
}

pub(crate) fn prelu_in_place(a: &[f64], x: &mut [f64], len: usize) {
    for (chan, &slope) in x.chunks_exact_mut(len).zip(a) {
        chan.iter_mut().for_each(|v| *v = prelu_scalar(slope, *v));
    }
}

fn channel_len(channels: usize, total: usize) -> Result<usize, ModelError> {
    if channels == 0 || !total.is_multiple_of(channels) {
        return Err(ModelError::DimensionMismatch(format!(
            "{total} samples do not split into {channels} channels"
        )));
    }
    Ok(total / channels)
}

/// One block on a `c×L` channel-major block, using the default engine.
pub fn block_forward(
    bw: &BlockWeights,
    x: &[f64],
    embedding: &[f64],
    state: SsmState,
) -> Result<(Vec<f64>, SsmState), ModelError> {
    let c = bw.mix.out_dim;
    let len = channel_len(c, x.len())?;
    if len == 0 {
        return Err(ModelError::DimensionMismatch("empty block".into()));
    }
    let (gamma, beta) = film_params(bw, embedding)?;
    let discrete = ssm::discretize(&bw.ssm)?;
    let mut layer = EngineRegistry::builtin().default_engine().build(discrete);
    let mut state = state;
    let mut out = x.to_vec();
    let mut scratch = vec![0.0; x.len()];
    render::block_in_place(bw, &gamma, &beta, &mut out, &mut scratch, len, |h| {
        layer.process(&mut state, h, len)
    })?;
    Ok((out, state))
}

/// Renders `input` with the default engine, returning the output and the
/// state after the last sample.
pub fn model_forward(
    weights: &ModelWeights,
    input: &[f32],
    ctrl: &ControlVector,
    state: ModelState,
) -> Result<(Vec<f32>, ModelState), ModelError> {
    let engine = EngineRegistry::builtin().default_engine();
    let mut renderer = Renderer::new(std::sync::Arc::new(weights.clone()), ctrl, engine.as_ref())?;
    let mut state = state;
    let mut output = vec![0.0; input.len()];
    renderer.render(&mut state, input, &mut output)?;
    Ok((output, state))
}

fn check_finite(values: &[f64], what: &'static str) -> Result<(), ModelError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what))
    }
}

fn snap(v: f64) -> f64 {
    v as f32 as f64
}

fn snap_ssm(ssm: &mut SsmCoefficients) {
    for z in ssm.lambda.iter_mut().chain(&mut ssm.b).chain(&mut ssm.c) {
        z.re = snap(z.re);
        z.im = snap(z.im);
    }
    ssm.d.iter_mut().chain(&mut ssm.dt).for_each(|v| *v = snap(*v));
}

#[cfg(test)]
mod tests;
