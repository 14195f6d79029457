//! The complete grounding model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FrontendConfig;
use crate::cross_modal::CrossModal;
use crate::encoder::{uniform, CrnnConfig, CrnnEncoder};
use crate::graph::{GraphConfig, GraphLayerState, QueryGraph};
use crate::head::similarity;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{embed, TokenizedQuery};
use crate::{Error, Result};

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Use the word embeddings directly instead of the query graph output.
    pub no_graph: bool,
    /// Pass `U` and `S̄` through without cross-gating.
    pub no_gating: bool,
    /// Drop the positional term from the edge scores.
    pub no_pe: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.no_graph, self.no_gating, self.no_pe) {
            (false, false, false) => "full",
            (true, false, _) => "no_graph",
            (false, true, false) => "no_gating",
            (false, false, true) => "no_pe",
            (true, true, _) => "no_graph+no_gating",
            (false, true, true) => "no_gating+no_pe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared feature width of audio, word and graph features.
    pub d: usize,
    pub frontend: FrontendConfig,
    pub encoder: CrnnConfig,
    pub graph: GraphConfig,
    pub embedding_init: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            frontend: FrontendConfig::default(),
            encoder: CrnnConfig::default(),
            graph: GraphConfig::default(),
            embedding_init: 0.1,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow configuration that trains in minutes on one core.
    pub fn small() -> Self {
        Self {
            d: 32,
            encoder: CrnnConfig::with_channels(vec![8, 16, 16, 32, 32]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("feature width d={} must be even and >= 2", self.d)));
        }
        if self.encoder.n_mels != self.frontend.n_mels {
            return Err(Error::Config(format!(
                "encoder expects {} mel bands but the frontend produces {}",
                self.encoder.n_mels, self.frontend.n_mels
            )));
        }
        self.encoder.validate()?;
        self.graph.validate()
    }

    /// λ₁ as applied by the model after the ablation switches.
    pub fn effective_lambda1(&self) -> f64 {
        if self.ablation.no_pe {
            0.0
        } else {
            self.graph.lambda1
        }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    /// Similarity scores `z` (length `I`).
    pub z: Var<'t>,
    /// Word-over-snippet attention after the softmax (`L × I`).
    pub attention: Var<'t>,
    pub graph_states: Vec<GraphLayerState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qgca {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: usize,
    pub encoder: CrnnEncoder,
    pub graph: QueryGraph,
    pub cross: CrossModal,
}

impl Qgca {
    /// Fresh model with parameters drawn from a ChaCha8 stream seeded by `seed`.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::Config("vocabulary must hold at least the reserved ids".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let embedding = params.add(
            "text.embedding",
            uniform(&[vocab_size, d], config.embedding_init, &mut rng),
            true,
        )?;
        let encoder = CrnnEncoder::init(&mut params, config.encoder.clone(), d, &mut rng)?;
        let graph = QueryGraph::init(&mut params, config.graph.clone(), d, &mut rng)?;
        let cross = CrossModal::init(&mut params, d, &mut rng)?;
        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            graph,
            cross,
        })
    }

    /// Model with the layout of `config` and the given parameter values.
    /// Names, order, shapes and trainable flags must match a fresh model.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let vocab_size = params
            .by_name("text.embedding")
            .map(|p| p.tensor.shape()[0])
            .ok_or_else(|| Error::Contract("parameters lack `text.embedding`".into()))?;
        let mut model = Self::new(config, vocab_size, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "model has {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() || want.trainable != got.trainable {
                return Err(Error::Contract(format!(
                    "parameter `{}` {:?} does not fit `{}` {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(self.embedding).tensor.shape()[0]
    }

    /// Installs the frozen per-band input normalisation.
    pub fn set_input_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let inv: Vec<f64> = std.iter().map(|s| 1.0 / s.max(1e-5)).collect();
        self.params.set(self.encoder.input_mean, Tensor::vector(mean))?;
        self.params.set(self.encoder.input_inv_std, Tensor::vector(inv))?;
        Ok(())
    }

    /// Forward pass with the stored parameters bound on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape, frames: &Tensor, query: &TokenizedQuery) -> Result<Forward<'t>> {
        let params = self.params.bind(tape);
        self.forward_with(tape, &params, frames, query)
    }

    /// Forward pass with explicit parameter variables, indexed like the store.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        frames: &Tensor,
        query: &TokenizedQuery,
    ) -> Result<Forward<'t>> {
        if query.is_empty() {
            return Err(Error::Input("query has no tokens".into()));
        }
        let ab = self.config.ablation;
        let audio = self.encoder.forward(tape, frames, params)?;
        let words = embed(query, params[self.embedding])?;
        let (words, graph_states) = if ab.no_graph {
            (words, Vec::new())
        } else {
            self.graph.forward(tape, words, self.config.effective_lambda1(), params)?
        };
        let pair = self.cross.forward(tape, words, audio, !ab.no_gating, params)?;
        Ok(Forward {
            z: similarity(pair.audio, pair.query)?,
            attention: pair.attention,
            graph_states,
        })
    }

    /// Similarity scores without keeping a gradient tape around.
    pub fn scores(&self, frames: &Tensor, query: &TokenizedQuery) -> Result<Vec<f64>> {
        let tape = Tape::new();
        Ok(self.forward(&tape, frames, query)?.z.value().to_vec())
    }
}
