//! Similarity scoring, the training loss, label rasterization and decoding
//! of snippet predictions into timed segments.

use serde::{Deserialize, Serialize};

use crate::tensor::{ReduceKind, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probability clamp applied before the logs of the BCE loss.
pub const EPS_BCE: f64 = 1e-7;
/// Default decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

// Overlap comparisons absorb rounding in `i * hop`.
const OVERLAP_SLACK: f64 = 1e-9;

/// A timed event in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSegment {
    pub onset: f64,
    pub offset: f64,
}

impl EventSegment {
    pub fn new(onset: f64, offset: f64) -> Result<Self> {
        let s = Self { onset, offset };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.onset >= 0.0 && self.onset < self.offset && self.offset.is_finite()) {
            return Err(Error::Input(format!(
                "segment onset {} must be >= 0 and before offset {}",
                self.onset, self.offset
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Per-snippet scores `z_i ∈ (0, 1]` with their time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub scores: Vec<f64>,
    pub hop_seconds: f64,
}

impl SimilarityVector {
    pub fn binarize(&self, beta: f64) -> Vec<u8> {
        binarize(&self.scores, beta)
    }

    pub fn segments(&self, beta: f64) -> Vec<EventSegment> {
        extract_segments(&self.binarize(beta), self.hop_seconds)
    }
}

/// `z_i = exp(−‖ũ_i − s̃_i‖₂)` for every row.
pub fn similarity<'t>(audio: Var<'t>, query: Var<'t>) -> Result<Var<'t>> {
    if audio.shape() != query.shape() {
        return Err(crate::tensor::TensorError::Shape {
            op: "similarity",
            lhs: audio.shape(),
            rhs: query.shape(),
        }
        .into());
    }
    Ok(audio.sub(query)?.reduce(ReduceKind::L2Norm, Some(1))?.neg()?.exp()?)
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    Ok(())
}

/// Mean binary cross-entropy between scores and 0/1 labels, with the scores
/// clamped to `[EPS_BCE, 1 − EPS_BCE]`.
pub fn bce_loss<'t>(tape: &'t Tape, z: Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    check_labels(labels)?;
    if z.shape() != [labels.len()] {
        return Err(Error::Contract(format!(
            "{} labels for scores of shape {:?}",
            labels.len(),
            z.shape()
        )));
    }
    let y = tape.leaf(Tensor::vector(labels.to_vec()));
    let not_y = tape.leaf(Tensor::vector(labels.iter().map(|v| 1.0 - v).collect()));
    let zc = z.clamp(EPS_BCE, 1.0 - EPS_BCE)?;
    let pos = y.mul(zc.log()?)?;
    let neg = not_y.mul(zc.one_minus()?.log()?)?;
    Ok(pos.add(neg)?.mean()?.neg()?)
}

/// Plain-number version of [`bce_loss`].
pub fn bce_value(z: &[f64], labels: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let zv = tape.leaf(Tensor::vector(z.to_vec()));
    Ok(bce_loss(&tape, zv, labels)?.value().item())
}

/// Snippet `i` is positive when its span `[i·hop, (i+1)·hop)` overlaps some
/// segment by at least half a hop.
pub fn labels_from_segments(segments: &[EventSegment], len: usize, hop_seconds: f64) -> Result<Vec<f64>> {
    for s in segments {
        s.validate()?;
    }
    let need = hop_seconds / 2.0 - OVERLAP_SLACK * hop_seconds;
    Ok((0..len)
        .map(|i| {
            let (start, end) = (i as f64 * hop_seconds, (i + 1) as f64 * hop_seconds);
            let hit = segments
                .iter()
                .any(|s| s.offset.min(end) - s.onset.max(start) >= need);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// `ŷ_i = 1` iff `z_i > β`.
pub fn binarize(z: &[f64], beta: f64) -> Vec<u8> {
    z.iter().map(|&v| u8::from(v > beta)).collect()
}

/// Maximal runs of ones, each mapped to `(i·hop, (j+1)·hop)`.
pub fn extract_segments(pred: &[u8], hop_seconds: f64) -> Vec<EventSegment> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &p) in pred.iter().chain(std::iter::once(&0)).enumerate() {
        match (p != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(EventSegment {
                    onset: s as f64 * hop_seconds,
                    offset: i as f64 * hop_seconds,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}
