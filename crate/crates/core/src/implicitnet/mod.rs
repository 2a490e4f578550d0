//! The occupancy network `F(p | X)`: a multi-level graph encoder over the
//! observed cloud, a k-NN latent aggregator around each query and a residual
//! MLP decoder, in one plain and three equivariant variants.

mod network;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Tensor};
use crate::eqlayers::{self, HybridDims, LayerError, ParamMap};
use crate::geometry::GeometryError;

pub use network::{
    aggregate_latent, decode_logits, decode_occupancy, encode_cloud, encode_points, forward_encoded,
    forward_logits_on_tape, forward_on_tape, level_sizes, model_forward, model_forward_chunked, EncodedLevel, Encoding,
    EncodingValues,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

impl From<DiffError> for ModelError {
    fn from(e: DiffError) -> Self {
        ModelError::Layer(LayerError::Diff(e))
    }
}

/// Which transformations of `(p, X)` leave the output unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquivarianceMode {
    /// No guarantee; coordinates enter as plain scalars.
    Plain,
    /// Rotations and reflections about the origin.
    So3,
    /// Rotations, reflections and translations.
    Se3,
    /// Rotations, reflections, translations and uniform scaling.
    Sim,
}

impl EquivarianceMode {
    pub const ALL: [EquivarianceMode; 4] = [Self::Plain, Self::So3, Self::Se3, Self::Sim];

    pub fn is_equivariant(self) -> bool {
        self != Self::Plain
    }

    /// Plain and so3 feed absolute coordinates (cloud and query) to the network.
    pub fn uses_absolute_coordinates(self) -> bool {
        matches!(self, Self::Plain | Self::So3)
    }

    pub fn normalized_invariant(self) -> bool {
        self == Self::Sim
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::So3 => "so3",
            Self::Se3 => "se3",
            Self::Sim => "sim",
        }
    }
}

impl std::str::FromStr for EquivarianceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected plain, so3, se3 or sim)"))
    }
}

impl std::fmt::Display for EquivarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: EquivarianceMode,
    /// Neighbors per graph convolution.
    pub k: usize,
    /// Cardinality of each coarser level relative to the input cloud.
    pub fractions: Vec<f64>,
    /// Scalar channels per hidden layer (all channels in plain mode).
    pub scalar_channels: usize,
    /// Vector channels per hidden layer; zero in plain mode.
    pub vector_channels: usize,
    pub decoder_width: usize,
    pub decoder_blocks: usize,
    /// Bias on scalar outputs of equivariant layers.
    pub scalar_bias: bool,
}

impl ModelConfig {
    pub fn new(mode: EquivarianceMode) -> Self {
        let (scalar_channels, vector_channels) = if mode.is_equivariant() { (32, 8) } else { (64, 0) };
        Self {
            mode,
            k: 20,
            fractions: vec![0.2, 0.05],
            scalar_channels,
            vector_channels,
            decoder_width: 32,
            decoder_blocks: 5,
            scalar_bias: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("level fractions must lie in (0, 1]");
        }
        if self.fractions.windows(2).any(|w| w[1] > w[0]) {
            return bad("level fractions must be non-increasing");
        }
        if self.decoder_width == 0 {
            return bad("decoder width must be at least 1");
        }
        if self.mode.is_equivariant() {
            if self.vector_channels == 0 {
                return bad("equivariant modes need at least one vector channel");
            }
        } else {
            if self.vector_channels != 0 {
                return bad("plain mode has no vector channels");
            }
            if self.scalar_channels == 0 {
                return bad("plain mode needs scalar channels");
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.fractions.len() + 1
    }

    /// Width of the latent code `z_p`.
    pub fn latent_width(&self) -> usize {
        (self.scalar_channels + self.vector_channels) * self.levels()
    }
}

/// Channel layout of one layer; plain layers use scalars only.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LayerKind {
    Linear { inputs: usize, outputs: usize, bias: bool, zero: bool },
    Hybrid(HybridDims),
    VecRelu(usize),
}

pub(crate) fn edge_mlp_plan(
    cfg: &ModelConfig,
    prefix: &str,
    in_h: usize,
    in_v: usize,
    plan: &mut Vec<(String, LayerKind)>,
) {
    let (ch, cv) = (cfg.scalar_channels, cfg.vector_channels);
    if cfg.mode.is_equivariant() {
        let dims =
            [HybridDims { in_h, in_v, out_h: ch, out_v: cv }, HybridDims { in_h: ch, in_v: cv, out_h: ch, out_v: cv }];
        for (i, d) in dims.into_iter().enumerate() {
            plan.push((format!("{prefix}.fc{i}"), LayerKind::Hybrid(d)));
            plan.push((format!("{prefix}.act{i}"), LayerKind::VecRelu(cv)));
        }
    } else {
        plan.push((format!("{prefix}.fc0"), LayerKind::Linear { inputs: in_h, outputs: ch, bias: true, zero: false }));
        plan.push((format!("{prefix}.fc1"), LayerKind::Linear { inputs: ch, outputs: ch, bias: true, zero: false }));
    }
}

/// Every layer of the model in initialization order.
pub(crate) fn layer_plan(cfg: &ModelConfig) -> Vec<(String, LayerKind)> {
    let (ch, cv) = (cfg.scalar_channels, cfg.vector_channels);
    let eq = cfg.mode.is_equivariant();
    let mut plan = Vec::new();
    for l in 0..cfg.levels() {
        let (in_h, in_v) = match (l, cfg.mode) {
            (0, EquivarianceMode::Plain) => (9, 0),
            (0, EquivarianceMode::So3) => (0, 3),
            (0, _) => (0, 1),
            (_, EquivarianceMode::Plain) => (2 * ch + 3, 0),
            _ => (2 * ch, 2 * cv + 1),
        };
        edge_mlp_plan(cfg, &format!("enc.down{l}"), in_h, in_v, &mut plan);
    }
    for l in (0..cfg.levels() - 1).rev() {
        let prefix = format!("enc.up{l}");
        if eq {
            let d = HybridDims { in_h: 2 * ch, in_v: 2 * cv, out_h: ch, out_v: cv };
            plan.push((format!("{prefix}.fc"), LayerKind::Hybrid(d)));
            plan.push((format!("{prefix}.act"), LayerKind::VecRelu(cv)));
        } else {
            plan.push((
                format!("{prefix}.fc"),
                LayerKind::Linear { inputs: 2 * ch, outputs: ch, bias: true, zero: false },
            ));
        }
    }
    for l in 0..cfg.levels() {
        let (in_h, in_v) = match cfg.mode {
            EquivarianceMode::Plain => (ch + 6, 0),
            EquivarianceMode::So3 => (ch, cv + 2),
            _ => (ch, cv + 1),
        };
        edge_mlp_plan(cfg, &format!("agg{l}"), in_h, in_v, &mut plan);
    }
    let w = cfg.decoder_width;
    let z = cfg.latent_width();
    let lin = |inputs, outputs, zero| LayerKind::Linear { inputs, outputs, bias: true, zero };
    if cfg.mode == EquivarianceMode::Plain {
        plan.push(("dec.fc_p".into(), lin(3, w, false)));
    }
    for i in 0..cfg.decoder_blocks.max(1) {
        plan.push((format!("dec.fc_z{i}"), lin(z, w, false)));
    }
    for i in 0..cfg.decoder_blocks {
        plan.push((format!("dec.block{i}.fc0"), lin(w, w, false)));
        plan.push((format!("dec.block{i}.fc1"), lin(w, w, true)));
    }
    plan.push(("dec.out".into(), lin(w, 1, false)));
    plan
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamMap,
}

impl Model {
    /// Seeded initialization; weights are uniform in `±sqrt(1/fan_in)`,
    /// residual output layers of the decoder start at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for (name, kind) in layer_plan(&config) {
            match kind {
                LayerKind::Linear { inputs, outputs, bias, zero } => {
                    eqlayers::init_linear(&mut params, &name, inputs, outputs, bias, &mut rng);
                    if zero {
                        params.insert(format!("{name}.w"), Tensor::zeros(&[inputs, outputs]));
                    }
                }
                LayerKind::Hybrid(dims) => {
                    eqlayers::init_hybrid_linear(&mut params, &name, dims, config.scalar_bias, &mut rng)?
                }
                LayerKind::VecRelu(c) => eqlayers::init_vec_relu(&mut params, &name, c, &mut rng),
            }
        }
        Ok(Model { config, params })
    }

    /// Checks that `params` holds exactly the tensors the config implies.
    pub fn from_parts(config: ModelConfig, params: ParamMap) -> Result<Model, ModelError> {
        let reference = Model::init(config.clone(), 0)?;
        let expected: BTreeMap<&String, &[usize]> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let got: BTreeMap<&String, &[usize]> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != got {
            let missing = expected.keys().find(|k| !got.contains_key(*k));
            let extra = got.keys().find(|k| !expected.contains_key(*k));
            let msg = match (missing, extra) {
                (Some(m), _) => format!("missing tensor {m}"),
                (None, Some(e)) => format!("unexpected tensor {e}"),
                _ => "tensor shapes do not match the configuration".to_string(),
            };
            return Err(ModelError::Config(msg));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(ModelError::Config(format!("tensor {name} is not finite")));
        }
        Ok(Model { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every decoder weight and bias to zero, so the output is 0.5.
    pub fn zero_decoder(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("dec.") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests;
