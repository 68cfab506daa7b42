//! Forecasters built on the SRS front end: SRSNet (SRS + flatten + MLP
//! head), its ablations, and a transformer host that takes either SRS or
//! conventional patch embeddings.

mod checkpoint;
mod encoder;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT,
};
pub use encoder::MiniTransformerEncoder;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, ParamId, ParamStore, Tensor, Var};
use crate::data::instance_normalize;
use crate::nn::{ForwardCtx, Mlp};
use crate::patching::{PatchError, PatchGeometry};
use crate::scalar::Scalar;
use crate::srs::{
    ConventionalEmbedding, SelectionTrace, SrsConfig, SrsIntermediates, SrsStages, SrsState,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("unknown ablation `{0}` (expected one of: full, no_selective, no_reassembly, no_fusion, no_srs)")]
    UnknownAblation(String),
    #[error("unknown backbone `{0}` (expected one of: mlp, transformer)")]
    UnknownBackbone(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// Which parts of SRS a model keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSelective,
    NoReassembly,
    NoFusion,
    /// conventional patch embeddings only
    NoSrs,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoSelective,
        Ablation::NoReassembly,
        Ablation::NoFusion,
        Ablation::NoSrs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSelective => "no_selective",
            Ablation::NoReassembly => "no_reassembly",
            Ablation::NoFusion => "no_fusion",
            Ablation::NoSrs => "no_srs",
        }
    }

    /// SRS stages kept, `None` without SRS.
    pub fn stages(self) -> Option<SrsStages> {
        let all = SrsStages::default();
        match self {
            Ablation::Full => Some(all),
            Ablation::NoSelective => Some(SrsStages {
                selective: false,
                ..all
            }),
            Ablation::NoReassembly => Some(SrsStages {
                reassembly: false,
                ..all
            }),
            Ablation::NoFusion => Some(SrsStages {
                fusion: false,
                ..all
            }),
            Ablation::NoSrs => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownAblation(s.to_string()))
    }
}

/// What consumes the patch embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// flatten + MLP head (SRSNet)
    Mlp,
    /// transformer encoder, then flatten + linear head
    Transformer,
}

impl FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Backbone::Mlp),
            "transformer" => Ok(Backbone::Transformer),
            other => Err(ModelError::UnknownBackbone(other.to_string())),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Mlp => "mlp",
            Backbone::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub d_model: usize,
    pub scorer_layers: usize,
    pub scorer_hidden: usize,
    pub fusion_init: f64,
    /// hidden width of the MLP head; 0 gives a linear head
    pub head_hidden: usize,
    pub dropout: f64,
    pub backbone: Backbone,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            patch_size: 16,
            stride: 8,
            d_model: 128,
            scorer_layers: 2,
            scorer_hidden: 128,
            fusion_init: 0.0,
            head_hidden: 512,
            dropout: 0.1,
            backbone: Backbone::Mlp,
            encoder_layers: 2,
            encoder_heads: 4,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> Result<PatchGeometry, PatchError> {
        PatchGeometry::new(self.lookback, self.patch_size, self.stride)
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self {
            ablation,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.horizon == 0 || self.d_model == 0 {
            return Err(ModelError::Config(
                "horizon and model dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.ablation != Ablation::NoSrs && self.scorer_hidden == 0 && self.scorer_layers > 0 {
            return Err(ModelError::Config(
                "scorer hidden width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Front {
    Srs(SrsState),
    Conventional(ConventionalEmbedding),
}

/// A complete forecaster: `[B, N, T]` raw contexts to `[B, N, L]` forecasts.
///
/// Channels are folded into the batch; instance normalization is applied on
/// the way in and inverted on the way out.
#[derive(Debug, Clone)]
pub struct Forecaster<S> {
    config: ModelConfig,
    seed: u64,
    geometry: PatchGeometry,
    front: Front,
    encoder: Option<MiniTransformerEncoder>,
    head: Mlp,
    store: ParamStore<S>,
}

pub struct Forecast {
    /// `[B, N, L]`
    pub prediction: Var,
    /// `[B, N, n, d]` embeddings handed to the backbone
    pub embeddings: Var,
    pub trace: Option<SelectionTrace>,
    /// SRS stage handles, absent for conventional fronts
    pub srs: Option<SrsIntermediates>,
}

/// Builds the named variant of `config`.
pub fn ablation_variant<S: Scalar>(
    name: &str,
    config: &ModelConfig,
    seed: u64,
) -> Result<Forecaster<S>, ModelError> {
    let ablation: Ablation = name.parse()?;
    Forecaster::new(config.with_ablation(ablation), seed)
}

impl<S: Scalar> Forecaster<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let front = match config.ablation.stages() {
            Some(stages) => {
                let srs = SrsConfig {
                    geometry,
                    d_model: config.d_model,
                    scorer_layers: config.scorer_layers,
                    scorer_hidden: config.scorer_hidden,
                    fusion_init: config.fusion_init,
                    stages,
                };
                Front::Srs(SrsState::new(&mut store, srs, &mut rng)?)
            }
            None => Front::Conventional(ConventionalEmbedding::new(
                &mut store,
                geometry,
                config.d_model,
                &mut rng,
            )?),
        };
        let flat = geometry.patches * config.d_model;
        let (encoder, head_dims) = match config.backbone {
            Backbone::Transformer => {
                let enc = MiniTransformerEncoder::new(
                    &mut store,
                    config.encoder_layers,
                    config.encoder_heads,
                    config.d_model,
                    config.dropout,
                    &mut rng,
                )?;
                (Some(enc), vec![flat, config.horizon])
            }
            Backbone::Mlp if config.head_hidden > 0 => {
                (None, vec![flat, config.head_hidden, config.horizon])
            }
            Backbone::Mlp => (None, vec![flat, config.horizon]),
        };
        let head = Mlp::new(&mut store, "head", &head_dims, config.dropout, &mut rng)?;
        Ok(Self {
            config,
            seed,
            geometry,
            front,
            encoder,
            head,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn front(&self) -> &Front {
        &self.front
    }

    pub fn srs(&self) -> Option<&SrsState> {
        match &self.front {
            Front::Srs(s) => Some(s),
            Front::Conventional(_) => None,
        }
    }

    pub fn encoder(&self) -> Option<&MiniTransformerEncoder> {
        self.encoder.as_ref()
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn front_params(&self) -> Vec<ParamId> {
        match &self.front {
            Front::Srs(s) => s.params(),
            Front::Conventional(c) => c.params(),
        }
    }

    /// Runs the model on raw contexts `x` of shape `[B, N, T]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: &Tensor<S>,
        ctx: &mut ForwardCtx,
    ) -> Result<Forecast, ModelError> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.lookback {
            return Err(GraphError::ShapeMismatch {
                op: "forecaster input",
                detail: format!("{shape:?}, lookback {}", self.config.lookback),
            }
            .into());
        }
        let (b, n_ch, t) = (shape[0], shape[1], shape[2]);
        let rows = b * n_ch;
        let (xn, stats) = instance_normalize(x);
        let xn = g.constant(xn.reshape(vec![rows, t])?);
        let (emb, trace, srs) = match &self.front {
            Front::Srs(s) => {
                let out = s.forward(g, &self.store, xn, ctx)?;
                (out.embeddings, Some(out.trace), Some(out.intermediates))
            }
            Front::Conventional(c) => (c.forward(g, &self.store, xn)?, None, None),
        };
        let emb = match &self.encoder {
            Some(enc) => enc.forward(g, &self.store, emb, ctx)?,
            None => emb,
        };
        let (n, d) = (self.geometry.patches, self.config.d_model);
        let flat = g.reshape(emb, vec![rows, n * d])?;
        let y = self.head.forward(g, &self.store, flat, ctx)?;
        let scale = g.constant(Tensor::new(vec![rows], stats.scale())?);
        let mean = g.constant(Tensor::new(vec![rows], stats.mean)?);
        let y = g.mul_prefix(y, scale)?;
        let y = g.add_prefix(y, mean)?;
        let prediction = g.reshape(y, vec![b, n_ch, self.config.horizon])?;
        let embeddings = g.reshape(emb, vec![b, n_ch, n, d])?;
        Ok(Forecast {
            prediction,
            embeddings,
            trace,
            srs,
        })
    }

    /// Evaluation-mode forecast values and selection trace.
    pub fn predict(
        &self,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, Option<SelectionTrace>), ModelError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x, &mut ForwardCtx::eval())?;
        Ok((g.value(out.prediction).clone(), out.trace))
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss<S: Scalar>(
    g: &mut Graph<S>,
    prediction: Var,
    target: Var,
) -> Result<Var, GraphError> {
    if g.shape(prediction) != g.shape(target) {
        return Err(GraphError::ShapeMismatch {
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", g.shape(prediction), g.shape(target)),
        });
    }
    let diff = g.sub(prediction, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}
