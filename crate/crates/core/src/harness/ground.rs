//! Inference from a checkpoint, prediction files and their evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::dataset::DatasetRecord;
use crate::audio::{AudioClip, LogMelExtractor};
use crate::graph::{column_softmax, matrix_csv};
use crate::head::{EventSegment, SimilarityVector};
use crate::metrics::{evaluate, MatchConfig, MetricsReport, PsdsConfig, ScoredPair};
use crate::model::Qgca;
use crate::tensor::{Tape, Tensor};
use crate::text::{TokenizedQuery, Vocabulary};
use crate::{Error, Result};

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub segments: Vec<EventSegment>,
    pub scores: Vec<f64>,
    pub hop_seconds: f64,
}

impl Prediction {
    pub fn similarity(&self) -> SimilarityVector {
        SimilarityVector {
            scores: self.scores.clone(),
            hop_seconds: self.hop_seconds,
        }
    }
}

/// Attention matrices of one pair, ready for export.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    /// Row-softmaxed edge weights per graph layer (`L × L`).
    pub graph_alpha: Vec<Tensor>,
    /// Column-softmaxed edge weights per graph layer.
    pub graph_alpha_column: Vec<Tensor>,
    /// Word-over-snippet attention (`L × I`).
    pub cross_attention: Tensor,
}

impl AttentionDump {
    /// Writes one CSV per matrix plus `tokens.txt`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut files = vec![("tokens.txt".to_string(), self.tokens.join("\n") + "\n")];
        for (n, (row, col)) in self.graph_alpha.iter().zip(&self.graph_alpha_column).enumerate() {
            files.push((format!("graph_layer{n}_alpha.csv"), matrix_csv(row)));
            files.push((format!("graph_layer{n}_alpha_column.csv"), matrix_csv(col)));
        }
        files.push(("cross_attention.csv".into(), matrix_csv(&self.cross_attention)));
        files
            .into_iter()
            .map(|(name, body)| {
                let path = dir.join(name);
                std::fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                Ok(path)
            })
            .collect()
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Config(format!("threshold β={beta} must lie in (0, 1)")));
    }
    Ok(())
}

/// A trained model with the vocabulary and frontend it was trained with.
#[derive(Debug, Clone)]
pub struct Grounder {
    pub model: Qgca,
    pub vocab: Vocabulary,
    extractor: LogMelExtractor,
}

impl Grounder {
    pub fn new(model: Qgca, vocab: Vocabulary) -> Result<Self> {
        let extractor = LogMelExtractor::new(model.config.frontend)?;
        Ok(Self { model, vocab, extractor })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.model()?, ckpt.vocab.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Log-mel frames of `clip` after resampling to the model rate.
    pub fn features(&self, clip: &AudioClip) -> Result<(Tensor, f64)> {
        let clip = clip.resample(self.extractor.config().sample_rate)?;
        let feat = self.extractor.extract(&clip)?;
        Ok((feat.frames().clone(), feat.hop_seconds))
    }

    fn encode(&self, query: &str) -> Result<TokenizedQuery> {
        Ok(self.vocab.encode(query)?)
    }

    pub fn scores(&self, clip: &AudioClip, query: &str) -> Result<SimilarityVector> {
        let (frames, hop_seconds) = self.features(clip)?;
        let scores = self.model.scores(&frames, &self.encode(query)?)?;
        Ok(SimilarityVector { scores, hop_seconds })
    }

    pub fn ground(&self, clip: &AudioClip, query: &str, beta: f64) -> Result<(Vec<EventSegment>, SimilarityVector)> {
        check_beta(beta)?;
        let z = self.scores(clip, query)?;
        Ok((z.segments(beta), z))
    }

    pub fn predict(&self, record: &DatasetRecord, base_dir: &Path, beta: f64) -> Result<Prediction> {
        let clip = record.audio.load(base_dir)?;
        let (segments, z) = self
            .ground(&clip, &record.query, beta)
            .map_err(|e| Error::Input(format!("pair {}: {e}", record.pair_id)))?;
        Ok(Prediction {
            pair_id: record.pair_id.clone(),
            segments,
            scores: z.scores,
            hop_seconds: z.hop_seconds,
        })
    }

    pub fn predict_all(&self, records: &[DatasetRecord], base_dir: &Path, beta: f64) -> Result<Vec<Prediction>> {
        records.iter().map(|r| self.predict(r, base_dir, beta)).collect()
    }

    pub fn attention(&self, clip: &AudioClip, query: &str) -> Result<AttentionDump> {
        let (frames, _) = self.features(clip)?;
        let q = self.encode(query)?;
        let tape = Tape::new();
        let out = self.model.forward(&tape, &frames, &q)?;
        Ok(AttentionDump {
            tokens: q.surface_tokens.clone(),
            graph_alpha: out.graph_states.iter().map(|s| s.alpha.clone()).collect(),
            graph_alpha_column: out
                .graph_states
                .iter()
                .map(|s| column_softmax(&s.edges))
                .collect::<Result<_>>()?,
            cross_attention: out.attention.value(),
        })
    }
}

/// Joins predictions with reference records by `pair_id`. Every reference
/// needs exactly one prediction.
pub fn join_predictions(predictions: &[Prediction], references: &[DatasetRecord]) -> Result<Vec<ScoredPair>> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.pair_id.as_str(), p).is_some() {
            return Err(Error::Input(format!("duplicate prediction for pair {}", p.pair_id)));
        }
    }
    if by_id.len() != references.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} reference pairs",
            by_id.len(),
            references.len()
        )));
    }
    references
        .iter()
        .map(|r| {
            let p = by_id
                .get(r.pair_id.as_str())
                .ok_or_else(|| Error::Input(format!("no prediction for pair {}", r.pair_id)))?;
            let duration = r.duration.unwrap_or(p.scores.len() as f64 * p.hop_seconds);
            r.validate(duration)?;
            Ok(ScoredPair {
                pair_id: r.pair_id.clone(),
                scores: p.similarity(),
                references: r.segments.clone(),
                duration,
            })
        })
        .collect()
}

/// Metrics of a prediction set. Segments are re-derived from the stored
/// scores, so `beta` need not match the one used when predicting.
pub fn evaluate_predictions(
    predictions: &[Prediction],
    references: &[DatasetRecord],
    beta: f64,
    mcfg: &MatchConfig,
    pcfg: &PsdsConfig,
) -> Result<MetricsReport> {
    check_beta(beta)?;
    evaluate(&join_predictions(predictions, references)?, beta, mcfg, pcfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::FrontendConfig;
    use crate::encoder::CrnnConfig;
    use crate::harness::dataset::AudioSource;
    use crate::model::ModelConfig;

    fn grounder() -> Grounder {
        let config = ModelConfig {
            d: 8,
            encoder: CrnnConfig {
                n_mels: 16,
                ..CrnnConfig::with_channels(vec![2, 2, 2, 2, 2])
            },
            frontend: FrontendConfig {
                n_mels: 16,
                ..FrontendConfig::default()
            },
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::build(&["a low horn"], 1).unwrap();
        Grounder::new(Qgca::new(config, vocab.len(), 1).unwrap(), vocab).unwrap()
    }

    fn clip() -> AudioClip {
        AudioClip::new((0..16_000).map(|i| (i as f64 * 0.07).sin() * 0.3).collect(), 16_000).unwrap()
    }

    #[test]
    fn threshold_extremes() {
        let g = grounder();
        let (segs, z) = g.ground(&clip(), "a low horn", 0.999_999).unwrap();
        assert!(z.scores.iter().all(|&v| v < 0.999_999));
        assert!(segs.is_empty());
        let (segs, z) = g.ground(&clip(), "a low horn", 1e-12).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].onset, 0.0);
        assert!((segs[0].offset - z.scores.len() as f64 * 0.02).abs() < 1e-12);
        assert!(g.ground(&clip(), "a low horn", 1.0).is_err());
    }

    #[test]
    fn resampled_input_gives_same_frame_rate() {
        let g = grounder();
        let slow = clip().resample(8_000).unwrap();
        assert_eq!(g.scores(&slow, "horn").unwrap().scores.len(), g.scores(&clip(), "horn").unwrap().scores.len());
    }

    #[test]
    fn attention_dump_has_expected_shapes() {
        let g = grounder();
        let dump = g.attention(&clip(), "a low horn").unwrap();
        assert_eq!(dump.graph_alpha.len(), 2);
        assert_eq!(dump.graph_alpha[0].shape(), &[3, 3]);
        let cols = dump.graph_alpha_column[1].data();
        for c in 0..3 {
            assert!(((0..3).map(|r| cols[r * 3 + c]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(dump.cross_attention.shape(), &[3, 49]);
        let dir = tempfile::tempdir().unwrap();
        let files = dump.write(dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let csv = std::fs::read_to_string(dir.path().join("cross_attention.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn predictions_join_and_evaluate() {
        let g = grounder();
        let rec = DatasetRecord {
            pair_id: "p".into(),
            audio: AudioSource::inline(&clip()),
            query: "a low horn".into(),
            segments: vec![EventSegment::new(0.2, 0.5).unwrap()],
            duration: None,
        };
        let preds = g.predict_all(std::slice::from_ref(&rec), Path::new("."), 0.4).unwrap();
        let json = serde_json::to_string(&preds[0]).unwrap();
        assert!(json.contains("\"segments\"") && json.contains("\"scores\""));
        let report =
            evaluate_predictions(&preds, std::slice::from_ref(&rec), 0.4, &MatchConfig::default(), &PsdsConfig::default()).unwrap();
        assert!((0.0..=1.0).contains(&report.psds));
        let other = DatasetRecord { pair_id: "q".into(), ..rec };
        assert!(join_predictions(&preds, &[other]).is_err());
    }
}
