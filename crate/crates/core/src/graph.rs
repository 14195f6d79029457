//! Intra-modal query graph.
//!
//! Each layer scores every word pair by the inner product of the
//! position-augmented node features, normalises the scores row-wise with a
//! softmax, aggregates messages as convex combinations of node features and
//! updates the nodes with a convolutional GRU running along the word axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::uniform;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub num_layers: usize,
    /// Weight of the positional encoding in the edge scores.
    pub lambda1: f64,
    pub pe_constant: f64,
    pub kernel: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            lambda1: 1.0,
            pe_constant: 10_000.0,
            kernel: 3,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("query graph needs at least one layer".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("ConvGRU kernel width {} must be odd", self.kernel)));
        }
        if !(self.lambda1 >= 0.0) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of 0-based position `l`: component `k` is
/// `sin(l / M^(k/d))` for even `k` and `cos(l / M^(k/d))` for odd `k`.
pub fn positional_encoding(l: usize, d: usize, m: f64) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let angle = l as f64 / m.powf(k as f64 / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Encodings of positions `0..len` stacked into a `len × d` matrix.
pub fn positional_matrix(len: usize, d: usize, m: f64) -> Tensor {
    let data = (0..len).flat_map(|l| positional_encoding(l, d, m)).collect();
    Tensor::new(vec![len, d], data).expect("shape matches")
}

/// `a = (X + λ₁·PE)(X + λ₁·PE)ᵀ`, with PE taken at word positions `0..L`.
pub fn edge_weights<'t>(tape: &'t Tape, x: Var<'t>, lambda1: f64, pe_constant: f64) -> Result<Var<'t>> {
    let shape = x.shape();
    let augmented = if lambda1 == 0.0 {
        x
    } else {
        let pe = positional_matrix(shape[0], shape[1], pe_constant).map(|v| lambda1 * v);
        x.add(tape.leaf(pe))?
    };
    Ok(augmented.matmul(augmented.transpose()?)?)
}

/// Row-softmax of the edge scores and the resulting messages `α·X`.
pub fn aggregate<'t>(a: Var<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (sa, sx) = (a.shape(), x.shape());
    if sa.len() != 2 || sa[0] != sa[1] || sa[1] != sx[0] {
        return Err(crate::tensor::TensorError::Shape {
            op: "aggregate",
            lhs: sa,
            rhs: sx,
        }
        .into());
    }
    let alpha = a.softmax(1)?;
    let messages = alpha.matmul(x)?;
    Ok((alpha, messages))
}

/// Convolutional GRU over the word axis: messages are the input, the previous
/// node features are the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGru {
    pub update_kernel: usize,
    pub update_bias: usize,
    pub reset_kernel: usize,
    pub reset_bias: usize,
    pub candidate_kernel: usize,
    pub candidate_bias: usize,
}

impl ConvGru {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / ((kernel * 2 * d) as f64).sqrt();
        let mut conv = |name: &str, rng: &mut _| store.add(format!("{prefix}.{name}"), uniform(&[kernel, 2 * d, d], bound, rng), true);
        let update_kernel = conv("update_kernel", rng)?;
        let reset_kernel = conv("reset_kernel", rng)?;
        let candidate_kernel = conv("candidate_kernel", rng)?;
        Ok(Self {
            update_kernel,
            reset_kernel,
            candidate_kernel,
            update_bias: store.add(format!("{prefix}.update_bias"), Tensor::zeros(vec![d]), true)?,
            reset_bias: store.add(format!("{prefix}.reset_bias"), Tensor::zeros(vec![d]), true)?,
            candidate_bias: store.add(format!("{prefix}.candidate_bias"), Tensor::zeros(vec![d]), true)?,
        })
    }

    /// `X_new = (1 − z) ⊙ X_prev + z ⊙ tanh(conv_c([H; r ⊙ X_prev]) + b_c)` with
    /// `z, r = σ(conv([H; X_prev]) + b)`.
    pub fn update<'t>(&self, tape: &'t Tape, prev: Var<'t>, messages: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        if prev.shape() != messages.shape() {
            return Err(crate::tensor::TensorError::Shape {
                op: "convgru_update",
                lhs: prev.shape(),
                rhs: messages.shape(),
            }
            .into());
        }
        let joined = tape.concat(&[messages, prev], 1)?;
        let z = joined
            .conv1d(params[self.update_kernel])?
            .add(params[self.update_bias])?
            .sigmoid()?;
        let r = joined
            .conv1d(params[self.reset_kernel])?
            .add(params[self.reset_bias])?
            .sigmoid()?;
        let gated = tape.concat(&[messages, r.mul(prev)?], 1)?;
        let candidate = gated
            .conv1d(params[self.candidate_kernel])?
            .add(params[self.candidate_bias])?
            .tanh()?;
        Ok(z.one_minus()?.mul(prev)?.add(z.mul(candidate)?)?)
    }
}

/// Per-layer values kept for inspection and export.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayerState {
    /// Raw edge scores `a` (`L × L`).
    pub edges: Tensor,
    /// Row-normalised weights `α`.
    pub alpha: Tensor,
    /// Aggregated messages `h`.
    pub messages: Tensor,
    /// Updated node features `X^n`.
    pub nodes: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGraph {
    pub config: GraphConfig,
    pub layers: Vec<ConvGru>,
}

impl QueryGraph {
    pub fn init(store: &mut ParamStore, config: GraphConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|n| ConvGru::init(store, &format!("graph.layer{n}"), d, config.kernel, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    /// Runs all layers from `X⁰ = S`, returning `X^N` and the per-layer states.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        words: Var<'t>,
        lambda1: f64,
        params: &[Var<'t>],
    ) -> Result<(Var<'t>, Vec<GraphLayerState>)> {
        if words.shape()[0] == 0 {
            return Err(Error::Input("query graph needs at least one word".into()));
        }
        let mut x = words;
        let mut states = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = edge_weights(tape, x, lambda1, self.config.pe_constant)?;
            let (alpha, h) = aggregate(a, x)?;
            x = layer.update(tape, x, h, params)?;
            states.push(GraphLayerState {
                edges: a.value(),
                alpha: alpha.value(),
                messages: h.value(),
                nodes: x.value(),
            });
        }
        Ok((x, states))
    }
}

/// Row-major CSV with one line per row.
pub fn matrix_csv(m: &Tensor) -> String {
    let cols = m.shape().get(1).copied().unwrap_or(1).max(1);
    let mut out = String::new();
    for row in m.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Column-normalised variant of the edge scores (softmax down each column).
pub fn column_softmax(edges: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(tape.leaf(edges.clone()).softmax(0)?.value())
}
