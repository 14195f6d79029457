//! Python bindings: feature extraction, grounding with a trained checkpoint,
//! decoding helpers, metrics and the training harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use qgca_core::audio::{AudioClip, LogMelExtractor};
use qgca_core::harness::checkpoint::Checkpoint;
use qgca_core::harness::config::RunConfig;
use qgca_core::harness::dataset::{read_jsonl, DatasetRecord};
use qgca_core::harness::ground::{evaluate_predictions, Grounder, Prediction};
use qgca_core::harness::synth::write_synth;
use qgca_core::harness::train::fit;
use qgca_core::head::{self, EventSegment};
use qgca_core::metrics::{self, MatchConfig, PsdsConfig};
use qgca_core::model::{ModelConfig, Qgca};
use qgca_core::text::{self, Vocabulary};
use qgca_core::Error;

fn py_err(e: impl Into<Error>) -> PyErr {
    let e = e.into();
    match e {
        Error::Io { .. } | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_pairs(segments: &[EventSegment]) -> Vec<(f64, f64)> {
    segments.iter().map(|s| (s.onset, s.offset)).collect()
}

fn from_pairs(segments: &[(f64, f64)]) -> PyResult<Vec<EventSegment>> {
    segments
        .iter()
        .map(|&(a, b)| EventSegment::new(a, b).map_err(py_err))
        .collect()
}

fn clip(samples: Vec<f64>, sample_rate: u32) -> PyResult<AudioClip> {
    AudioClip::new(samples, sample_rate).map_err(py_err)
}

/// A grounding model together with its vocabulary.
#[pyclass(name = "Model", module = "qgca")]
struct PyModel {
    inner: Grounder,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint written by `qgca train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Grounder::load(path).map_err(py_err)?,
        })
    }

    /// Untrained desk-size model with a vocabulary built from `queries`.
    #[staticmethod]
    #[pyo3(signature = (queries, seed = 0))]
    fn untrained(queries: Vec<String>, seed: u64) -> PyResult<Self> {
        let vocab = Vocabulary::build(&queries, 1).map_err(py_err)?;
        let model = Qgca::new(ModelConfig::small(), vocab.len(), seed).map_err(py_err)?;
        Ok(Self {
            inner: Grounder::new(model, vocab).map_err(py_err)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.model.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Per-snippet similarity scores and the snippet hop in seconds.
    fn scores(&self, samples: Vec<f64>, sample_rate: u32, query: &str) -> PyResult<(Vec<f64>, f64)> {
        let z = self.inner.scores(&clip(samples, sample_rate)?, query).map_err(py_err)?;
        Ok((z.scores, z.hop_seconds))
    }

    /// `(segments, scores)` for `query` in the clip.
    #[pyo3(signature = (samples, sample_rate, query, beta = 0.4))]
    fn ground(&self, samples: Vec<f64>, sample_rate: u32, query: &str, beta: f64) -> PyResult<(Vec<(f64, f64)>, Vec<f64>)> {
        let (segs, z) = self
            .inner
            .ground(&clip(samples, sample_rate)?, query, beta)
            .map_err(py_err)?;
        Ok((to_pairs(&segs), z.scores))
    }

    /// Query-graph α per layer and the cross-modal attention, as nested lists.
    fn attention(&self, samples: Vec<f64>, sample_rate: u32, query: &str) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let dump = self
            .inner
            .attention(&clip(samples, sample_rate)?, query)
            .map_err(py_err)?;
        let rows = |t: &qgca_core::tensor::Tensor| -> Vec<Vec<f64>> {
            let cols = t.shape()[1];
            t.data().chunks(cols).map(<[f64]>::to_vec).collect()
        };
        Ok((dump.graph_alpha.iter().map(rows).collect(), rows(&dump.cross_attention)))
    }
}

/// Log-mel frames (`I × 64`) of a clip, resampled to 16 kHz first.
#[pyfunction]
fn log_mel(samples: Vec<f64>, sample_rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let ex = LogMelExtractor::new(Default::default()).map_err(py_err)?;
    let c = clip(samples, sample_rate)?
        .resample(ex.config().sample_rate)
        .map_err(py_err)?;
    let feat = ex.extract(&c).map_err(py_err)?;
    let cols = feat.num_bands();
    Ok(feat.frames().data().chunks(cols).map(<[f64]>::to_vec).collect())
}

#[pyfunction]
fn tokenize(text_in: &str) -> PyResult<Vec<String>> {
    text::tokenize(text_in).map_err(py_err)
}

#[pyfunction]
fn labels_from_segments(segments: Vec<(f64, f64)>, length: usize, hop_seconds: f64) -> PyResult<Vec<f64>> {
    head::labels_from_segments(&from_pairs(&segments)?, length, hop_seconds).map_err(py_err)
}

#[pyfunction]
fn binarize(scores: Vec<f64>, beta: f64) -> Vec<u32> {
    head::binarize(&scores, beta).into_iter().map(u32::from).collect()
}

#[pyfunction]
fn extract_segments(prediction: Vec<u8>, hop_seconds: f64) -> Vec<(f64, f64)> {
    to_pairs(&head::extract_segments(&prediction, hop_seconds))
}

/// `(tp, fp, fn)` under t-collar matching.
#[pyfunction]
#[pyo3(signature = (predicted, reference, t_collar = 0.1, offset_ratio = 0.2))]
fn match_events(
    predicted: Vec<(f64, f64)>,
    reference: Vec<(f64, f64)>,
    t_collar: f64,
    offset_ratio: f64,
) -> PyResult<(usize, usize, usize)> {
    let cfg = MatchConfig { t_collar, offset_ratio };
    let c = metrics::match_events(&from_pairs(&predicted)?, &from_pairs(&reference)?, &cfg).map_err(py_err)?;
    Ok((c.tp, c.fp, c.fn_))
}

/// Metrics report of a predictions file against a dataset file, as JSON.
#[pyfunction]
#[pyo3(signature = (predictions, references, beta = 0.4))]
fn evaluate(predictions: PathBuf, references: PathBuf, beta: f64) -> PyResult<String> {
    let preds: Vec<Prediction> = read_jsonl(predictions).map_err(py_err)?;
    let refs: Vec<DatasetRecord> = read_jsonl(references).map_err(py_err)?;
    let report =
        evaluate_predictions(&preds, &refs, beta, &MatchConfig::default(), &PsdsConfig::default()).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Writes the synthetic benchmark and returns `(train, val, test)` sizes.
#[pyfunction]
#[pyo3(signature = (out, pairs = 250, seed = 7))]
fn synth_data(out: PathBuf, pairs: usize, seed: u64) -> PyResult<(usize, usize, usize)> {
    let s = write_synth(&out, pairs, seed).map_err(py_err)?;
    Ok((s.train, s.val, s.test))
}

/// Trains with the desk configuration and saves the best checkpoint.
/// Returns the validation loss of every epoch.
#[pyfunction]
#[pyo3(signature = (train, val, out, epochs = None, seed = None))]
fn train(py: Python<'_>, train: PathBuf, val: PathBuf, out: PathBuf, epochs: Option<usize>, seed: Option<u64>) -> PyResult<Vec<f64>> {
    let mut cfg = RunConfig::desk();
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let tr: Vec<DatasetRecord> = read_jsonl(&train).map_err(py_err)?;
    let va: Vec<DatasetRecord> = read_jsonl(&val).map_err(py_err)?;
    let base = train.parent().map(PathBuf::from).unwrap_or_default();
    let (ckpt, log) = py
        .detach(|| fit(&cfg, &tr, &va, &base, &mut |_| {}))
        .map_err(py_err)?;
    ckpt.save(&out).map_err(py_err)?;
    Ok(log.iter().map(|e| e.val_loss).collect())
}

/// Checkpoint metadata as JSON: the run configuration and best epoch.
#[pyfunction]
fn checkpoint_info(path: PathBuf) -> PyResult<String> {
    let c = Checkpoint::load(path).map_err(py_err)?;
    let info = serde_json::json!({ "config": c.config, "epoch": c.epoch, "vocab_size": c.vocab.len() });
    Ok(info.to_string())
}

/// `(name, relative error, tolerance, passed)` for every gradient check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let entries = qgca_core::gradcheck::suite(seed).map_err(py_err)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let ok = e.passes();
            (e.check.name, e.check.rel_error, e.tolerance, ok)
        })
        .collect())
}

#[pymodule]
fn qgca(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(labels_from_segments, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_segments, m)?)?;
    m.add_function(wrap_pyfunction!(match_events, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
