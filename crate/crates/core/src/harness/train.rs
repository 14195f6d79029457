//! Minibatch training with Adam, a plateau learning-rate schedule and early
//! stopping on the validation loss.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, OptimizerInfo, RngState};
use super::config::{RunConfig, TrainConfig};
use super::dataset::{feature_stats, featurize, DatasetRecord, Example};
use crate::audio::LogMelExtractor;
use crate::head::bce_loss;
use crate::model::Qgca;
use crate::tensor::{Adam, AdamState, Gradients, ParamGrads, Tape};
use crate::text::Vocabulary;
use crate::{Error, Result};

// Stream of the batch-order RNG, kept apart from parameter initialisation.
const SHUFFLE_STREAM: u64 = 1;

/// Divides the learning rate by `factor` once the monitored loss has failed
/// to improve for `patience` epochs, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns true when the rate was just reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr /= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Stops after `patience` consecutive epochs without a new best loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub improved: bool,
    pub seconds: f64,
}

/// Indices grouped into batches of similar length.
pub fn length_batches(examples: &[Example], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].len(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean BCE of one pair and its parameter gradients.
pub fn pair_gradients(model: &Qgca, ex: &Example) -> Result<(f64, Gradients)> {
    let tape = Tape::new();
    let out = model.forward(&tape, &ex.frames, &ex.query)?;
    let loss = bce_loss(&tape, out.z, &ex.labels)?;
    let value = loss.value().item();
    Ok((value, tape.backward(loss)?))
}

pub fn pair_loss(model: &Qgca, ex: &Example) -> Result<f64> {
    let tape = Tape::new();
    let out = model.forward(&tape, &ex.frames, &ex.query)?;
    Ok(bce_loss(&tape, out.z, &ex.labels)?.value().item())
}

/// BCE averaged over every snippet of every example.
pub fn dataset_loss(model: &Qgca, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        total += pair_loss(model, ex)? * ex.len() as f64;
        count += ex.len();
    }
    if count == 0 {
        return Err(Error::Input("loss over an empty dataset".into()));
    }
    Ok(total / count as f64)
}

/// One optimizer step on a batch. Pairs are weighted by their snippet count,
/// so the step follows the mean loss over all real snippets of the batch.
pub fn train_step(model: &mut Qgca, batch: &[&Example], adam: &Adam, state: &mut AdamState) -> Result<f64> {
    let snippets: usize = batch.iter().map(|e| e.len()).sum();
    let mut grads = ParamGrads::zeros(&model.params);
    let mut loss = 0.0;
    for ex in batch {
        let w = ex.len() as f64 / snippets as f64;
        let (l, g) = pair_gradients(model, ex)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss {l} on pair {}", ex.pair_id)));
        }
        loss += w * l;
        grads.accumulate(&g, w)?;
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("non-finite gradient".into()));
    }
    adam.step(&mut model.params, &grads, state)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Qgca,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub optimizer: (OptimizerInfo, AdamState),
    pub rng: RngState,
}

pub fn train(
    mut model: Qgca,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut state = AdamState::new(&model.params);
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let mut batches = length_batches(train_set, cfg.batch_size);
    let mut best = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let adam = Adam {
            lr: plateau.lr,
            ..Adam::default()
        };
        batches.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut model, &batch, &adam, &mut state).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "epoch {epoch} batch {b} ({}): {msg}",
                    batch.iter().map(|e| e.pair_id.as_str()).collect::<Vec<_>>().join(", ")
                )),
                other => other,
            })?;
            let n: usize = batch.iter().map(|e| e.len()).sum();
            sum += loss * n as f64;
            count += n;
        }
        let val_loss = dataset_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} after epoch {epoch}")));
        }
        let (improved, stop) = stopper.observe(val_loss);
        let entry = EpochLog {
            epoch,
            train_loss: sum / count as f64,
            val_loss,
            lr: plateau.lr,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        plateau.observe(val_loss);
        if improved {
            let info = OptimizerInfo {
                step: state.step,
                lr: plateau.lr,
            };
            best = Some((epoch, model.clone(), info, state.clone(), RngState::capture(&rng)));
        }
        on_epoch(&entry);
        log.push(entry);
        if stop {
            break;
        }
    }
    let (best_epoch, best, info, state, rng) = best.expect("first epoch always improves on infinity");
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        optimizer: (info, state),
        rng,
    })
}

/// Builds the vocabulary from the training split, featurizes both splits,
/// sets the input normalisation, trains and packs the best model.
pub fn fit(
    config: &RunConfig,
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    base_dir: &Path,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    config.validate()?;
    let queries: Vec<&str> = train_records.iter().map(|r| r.query.as_str()).collect();
    let vocab = Vocabulary::build(&queries, config.train.min_count)?;
    let extractor = LogMelExtractor::new(config.model.frontend)?;
    let train_set = featurize(train_records, base_dir, &extractor, &vocab)?;
    let val_set = featurize(val_records, base_dir, &extractor, &vocab)?;
    let mut model = Qgca::new(config.model.clone(), vocab.len(), config.train.seed)?;
    let (mean, std) = feature_stats(&train_set)?;
    model.set_input_stats(mean, std)?;
    let out = train(model, &train_set, &val_set, &config.train, on_epoch)?;
    let ckpt = Checkpoint {
        config: config.clone(),
        vocab,
        params: out.best.params,
        epoch: out.best_epoch,
        optimizer: Some(out.optimizer),
        rng: out.rng,
    };
    Ok((ckpt, out.log))
}
