//! Synthetic grounding benchmark: noisy clips with harmonic tone bursts and
//! templated queries that name one of the burst timbres.
//!
//! Burst boundaries and clip lengths sit on an 80 ms grid, which is four
//! feature hops and one step of the encoder's temporal resolution.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::dataset::{write_jsonl, AudioSource, DatasetRecord};
use crate::audio::{write_wav, AudioClip, DEFAULT_SAMPLE_RATE};
use crate::head::EventSegment;
use crate::{Error, Result};

pub const GRID_SECONDS: f64 = 0.08;
const GRID_SAMPLES: usize = 1280;
const MIN_CELLS: usize = 50;
const MAX_CELLS: usize = 125;
const NOISE_LEVEL: f64 = 0.02;
const BURST_LEVEL: f64 = 0.25;
const RAMP_SECONDS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timbre {
    pub name: &'static str,
    pub f0: f64,
    /// Amplitude of harmonic `k + 1`.
    pub harmonics: &'static [f64],
    /// Amplitude modulation rate in Hz, 0 for none.
    pub tremolo: f64,
}

pub const TIMBRES: [Timbre; 8] = [
    Timbre { name: "low horn", f0: 140.0, harmonics: &[1.0, 0.8, 0.6, 0.45, 0.3, 0.2], tremolo: 0.0 },
    Timbre { name: "deep hum", f0: 90.0, harmonics: &[1.0, 0.0, 0.5, 0.0, 0.3], tremolo: 0.0 },
    Timbre { name: "soft flute", f0: 520.0, harmonics: &[1.0, 0.2], tremolo: 0.0 },
    Timbre { name: "warm organ", f0: 330.0, harmonics: &[1.0, 0.5, 0.33, 0.25, 0.2, 0.17, 0.14, 0.12], tremolo: 0.0 },
    Timbre { name: "buzzing alarm", f0: 800.0, harmonics: &[1.0, 0.0, 0.33, 0.0, 0.2], tremolo: 8.0 },
    Timbre { name: "bright chime", f0: 1400.0, harmonics: &[1.0, 0.6, 0.3], tremolo: 0.0 },
    Timbre { name: "high whistle", f0: 2600.0, harmonics: &[1.0], tremolo: 0.0 },
    Timbre { name: "sharp beep", f0: 4200.0, harmonics: &[1.0, 0.1], tremolo: 0.0 },
];

const TEMPLATES: [&str; 5] = [
    "the {t} sounds {n}",
    "a {t} can be heard {n}",
    "someone plays a {t} {n}",
    "a {t} goes off {n}",
    "there is a {t} in the recording",
];

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "once",
        2 => "twice",
        _ => "three times",
    }
}

/// Samples of one burst of `timbre` lasting `n` samples.
pub fn render_burst(timbre: &Timbre, n: usize, sample_rate: u32) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let norm: f64 = timbre.harmonics.iter().sum();
    let ramp = (RAMP_SECONDS * sr) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = timbre
                .harmonics
                .iter()
                .enumerate()
                .filter(|(k, _)| timbre.f0 * (*k as f64 + 1.0) < sr / 2.0)
                .map(|(k, a)| a * (2.0 * PI * timbre.f0 * (k as f64 + 1.0) * t).sin())
                .sum::<f64>()
                / norm;
            let trem = if timbre.tremolo > 0.0 {
                0.6 + 0.4 * (2.0 * PI * timbre.tremolo * t).sin()
            } else {
                1.0
            };
            let edge = i.min(n - 1 - i);
            let env = if edge < ramp { 0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos() } else { 1.0 };
            BURST_LEVEL * tone * trem * env
        })
        .collect()
}

/// One generated pair with its audio.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub record: DatasetRecord,
    pub clip: AudioClip,
    /// Timbre index of every burst, in onset order.
    pub burst_timbres: Vec<usize>,
    pub target: usize,
}

fn place_bursts(rng: &mut ChaCha8Rng, cells: usize, count: usize) -> Vec<(usize, usize)> {
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..count {
        for _ in 0..200 {
            let len = rng.random_range(5..=20);
            let start = rng.random_range(0..=cells - len);
            // keep at least one empty cell between bursts
            let clear = placed
                .iter()
                .all(|&(s, l)| start + len < s || s + l < start);
            if clear {
                placed.push((start, len));
                break;
            }
        }
    }
    placed.sort_unstable();
    placed
}

pub fn synth_pair(rng: &mut ChaCha8Rng, pair_id: String) -> SynthPair {
    let cells = rng.random_range(MIN_CELLS..=MAX_CELLS);
    let n = cells * GRID_SAMPLES;
    let mut samples: Vec<f64> = (0..n).map(|_| rng.random_range(-NOISE_LEVEL..NOISE_LEVEL)).collect();
    let wanted = rng.random_range(1..=3);
    let bursts = place_bursts(rng, cells, wanted);
    let timbres: Vec<usize> = bursts.iter().map(|_| rng.random_range(0..TIMBRES.len())).collect();
    for (&(start, len), &t) in bursts.iter().zip(&timbres) {
        let burst = render_burst(&TIMBRES[t], len * GRID_SAMPLES, DEFAULT_SAMPLE_RATE);
        for (s, b) in samples[start * GRID_SAMPLES..].iter_mut().zip(burst) {
            *s += b;
        }
    }
    let target = timbres[rng.random_range(0..timbres.len())];
    let segments: Vec<EventSegment> = bursts
        .iter()
        .zip(&timbres)
        .filter(|(_, &t)| t == target)
        .map(|(&(s, l), _)| EventSegment {
            onset: s as f64 * GRID_SECONDS,
            offset: (s + l) as f64 * GRID_SECONDS,
        })
        .collect();
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let query = template
        .replace("{t}", TIMBRES[target].name)
        .replace("{n}", count_word(segments.len()));
    let clip = AudioClip::new(samples, DEFAULT_SAMPLE_RATE).expect("non-empty clip");
    SynthPair {
        record: DatasetRecord {
            audio: AudioSource::File {
                path: format!("audio/{pair_id}.wav").into(),
            },
            pair_id,
            query,
            segments,
            duration: Some(cells as f64 * GRID_SECONDS),
        },
        clip,
        burst_timbres: timbres,
        target,
    }
}

/// `num_pairs` deterministic pairs from `seed`.
pub fn synth_dataset(num_pairs: usize, seed: u64) -> Result<Vec<SynthPair>> {
    if num_pairs < 10 {
        return Err(Error::Input(format!("need at least 10 pairs, got {num_pairs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_pairs).map(|i| synth_pair(&mut rng, format!("pair{i:05}"))).collect())
}

/// Sizes of the train, validation and test splits (80/10/10).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub pairs: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `audio/*.wav` under `out`.
pub fn write_synth(out: &Path, num_pairs: usize, seed: u64) -> Result<SynthSummary> {
    let pairs = synth_dataset(num_pairs, seed)?;
    let audio_dir = out.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(format!("creating {}", audio_dir.display()), e))?;
    for p in &pairs {
        write_wav(audio_dir.join(format!("{}.wav", p.record.pair_id)), &p.clip)?;
    }
    let records: Vec<DatasetRecord> = pairs.into_iter().map(|p| p.record).collect();
    let (train, val, test) = split_sizes(records.len());
    write_jsonl(out.join("train.jsonl"), &records[..train])?;
    write_jsonl(out.join("val.jsonl"), &records[train..train + val])?;
    write_jsonl(out.join("test.jsonl"), &records[train + val..])?;
    Ok(SynthSummary {
        pairs: records.len(),
        train,
        val,
        test,
        seed,
    })
}
