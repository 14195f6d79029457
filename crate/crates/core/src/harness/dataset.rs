//! JSONL datasets of query-audio pairs and their featurized form.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, quantize_i16, AudioClip, LogMelExtractor};
use crate::head::{labels_from_segments, EventSegment};
use crate::tensor::Tensor;
use crate::text::{tokenize, TokenizedQuery, Vocabulary};
use crate::{Error, Result};

/// Where a record's audio lives. Paths are relative to the JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioSource {
    File { path: PathBuf },
    /// Mono 16-bit little-endian PCM, base64 encoded.
    Inline { pcm_base64: String, sample_rate: u32 },
}

impl AudioSource {
    pub fn inline(clip: &AudioClip) -> Self {
        let bytes: Vec<u8> = clip
            .samples()
            .iter()
            .flat_map(|&s| quantize_i16(s).to_le_bytes())
            .collect();
        Self::Inline {
            pcm_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
            sample_rate: clip.sample_rate(),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<AudioClip> {
        match self {
            Self::File { path } => Ok(read_wav(base_dir.join(path))?),
            Self::Inline { pcm_base64, sample_rate } => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(pcm_base64)
                    .map_err(|e| Error::Input(format!("inline audio is not valid base64: {e}")))?;
                if bytes.len() % 2 != 0 {
                    return Err(Error::Input("inline PCM has an odd number of bytes".into()));
                }
                let samples = bytes
                    .chunks_exact(2)
                    .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
                    .collect();
                Ok(AudioClip::new(samples, *sample_rate)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub pair_id: String,
    pub audio: AudioSource,
    pub query: String,
    pub segments: Vec<EventSegment>,
    /// Clip length in seconds; read from the audio when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

impl DatasetRecord {
    pub fn validate(&self, duration: f64) -> Result<()> {
        tokenize(&self.query).map_err(|e| Error::Input(format!("pair {}: {e}", self.pair_id)))?;
        for s in &self.segments {
            s.validate()
                .map_err(|e| Error::Input(format!("pair {}: {e}", self.pair_id)))?;
            if s.offset > duration + 1e-6 {
                return Err(Error::Input(format!(
                    "pair {}: segment ({}, {}) ends after the {duration} s clip",
                    self.pair_id, s.onset, s.offset
                )));
            }
        }
        Ok(())
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing {}", path.display());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::json(ctx(), e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// A record turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pair_id: String,
    /// `I × n_mels` log-mel frames.
    pub frames: Tensor,
    pub query: TokenizedQuery,
    /// Per-snippet 0/1 targets.
    pub labels: Vec<f64>,
    pub segments: Vec<EventSegment>,
    pub duration: f64,
    pub hop_seconds: f64,
}

impl Example {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads, resamples and featurizes every record.
pub fn featurize(records: &[DatasetRecord], base_dir: &Path, extractor: &LogMelExtractor, vocab: &Vocabulary) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let clip = r.audio.load(base_dir)?;
            let clip = clip.resample(extractor.config().sample_rate)?;
            let duration = r.duration.unwrap_or(clip.duration());
            r.validate(duration)?;
            let feat = extractor.extract(&clip)?;
            let labels = labels_from_segments(&r.segments, feat.num_frames(), feat.hop_seconds)?;
            Ok(Example {
                pair_id: r.pair_id.clone(),
                frames: feat.frames().clone(),
                query: vocab.encode(&r.query)?,
                labels,
                segments: r.segments.clone(),
                duration,
                hop_seconds: feat.hop_seconds,
            })
        })
        .collect()
}

/// Per-band mean and standard deviation over every frame of every example.
pub fn feature_stats(examples: &[Example]) -> Result<(Vec<f64>, Vec<f64>)> {
    let bands = examples
        .first()
        .map(|e| e.frames.shape()[1])
        .ok_or_else(|| Error::Input("no examples to compute feature statistics".into()))?;
    let mut sum = vec![0.0; bands];
    let mut sq = vec![0.0; bands];
    let mut n = 0usize;
    for e in examples {
        for row in e.frames.data().chunks(bands) {
            for (b, v) in row.iter().enumerate() {
                sum[b] += v;
                sq[b] += v * v;
            }
            n += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt())
        .collect();
    Ok((mean, std))
}
