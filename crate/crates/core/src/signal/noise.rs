//! Four noise categories standing in for a real noise corpus, plus the
//! train/val/test bank partitioning.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::synth::{random_sentence, synth_utterance, TARGET_RMS};
use super::{NoiseCategory, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

/// Number of speech clips averaged into one babble instance.
pub const BABBLE_SPEAKERS: usize = 30;
const NONSPEECH_CLIP_SAMPLES: usize = 3 * SAMPLE_RATE as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseClip {
    pub id: String,
    pub category: NoiseCategory,
    pub wave: Waveform,
}

/// Noise clips of one split, grouped by category.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    pub split: Split,
    clips: [Vec<NoiseClip>; 4],
}

#[derive(Clone, Debug)]
pub struct NoiseSplits {
    pub train: NoiseBank,
    pub val: NoiseBank,
    pub test: NoiseBank,
}

impl NoiseSplits {
    pub fn get(&self, split: Split) -> &NoiseBank {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

impl NoiseBank {
    pub fn empty(split: Split) -> Self {
        NoiseBank {
            split,
            clips: Default::default(),
        }
    }

    pub fn push(&mut self, clip: NoiseClip) {
        self.clips[clip.category.index()].push(clip);
    }

    pub fn clips(&self, category: NoiseCategory) -> &[NoiseClip] {
        &self.clips[category.index()]
    }

    pub fn all(&self) -> impl Iterator<Item = &NoiseClip> {
        self.clips.iter().flatten()
    }

    /// `(train, val, test)` clip counts for `n` clips: 10% each for val and
    /// test (rounded down), the remainder to train.
    pub fn split_sizes(n: usize) -> (usize, usize, usize) {
        let val = n / 10;
        let test = n / 10;
        (n - val - test, val, test)
    }

    /// Generates `per_category` clips for every category and partitions
    /// each category 80/10/10 by clip index.
    pub fn generate(per_category: usize, seed: u64) -> Result<NoiseSplits> {
        let mut splits = NoiseSplits {
            train: NoiseBank::empty(Split::Train),
            val: NoiseBank::empty(Split::Val),
            test: NoiseBank::empty(Split::Test),
        };
        let (n_train, n_val, _) = Self::split_sizes(per_category);
        for cat in NoiseCategory::ALL {
            for i in 0..per_category {
                let clip_seed = seed::derive(seed, &[seed::tag(cat.name()), i as u64]);
                let wave = source_clip(cat, clip_seed)?;
                let clip = NoiseClip {
                    id: format!("{}-{i:04}", cat.name()),
                    category: cat,
                    wave,
                };
                let bank = if i < n_train {
                    &mut splits.train
                } else if i < n_train + n_val {
                    &mut splits.val
                } else {
                    &mut splits.test
                };
                bank.push(clip);
            }
        }
        Ok(splits)
    }
}

/// One raw bank clip. Babble and sidespeaker banks hold single synthetic
/// utterances; music and natural banks hold 3 s recordings.
fn source_clip(cat: NoiseCategory, clip_seed: u64) -> Result<Waveform> {
    let mut rng = seed::rng(clip_seed);
    match cat {
        NoiseCategory::Babble | NoiseCategory::Sidespeaker => {
            let text = random_sentence(&mut rng, 2, 4);
            synth_utterance(&text, rng.random())
        }
        NoiseCategory::Music => music_clip(&mut rng),
        NoiseCategory::Natural => natural_clip(&mut rng),
    }
}

/// Three harmonic chords, each with a slow sinusoidal amplitude envelope.
fn music_clip<R: Rng>(rng: &mut R) -> Result<Waveform> {
    let n = NONSPEECH_CLIP_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0f64; n];
    for _ in 0..3 {
        let f0 = rng.random_range(110.0..440.0);
        let am_rate = rng.random_range(0.2..1.0);
        let am_phase = rng.random_range(0.0..2.0 * PI);
        let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * am_rate * t + am_phase).sin();
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, ph)| {
                    let k = (h + 1) as f64;
                    (2.0 * PI * k * f0 * t + ph).sin() / k
                })
                .sum();
            *o += env * tone;
        }
    }
    Waveform::from_f64_normalized(&out, TARGET_RMS)
}

/// Low-passed white noise under a bursty envelope.
fn natural_clip<R: Rng>(rng: &mut R) -> Result<Waveform> {
    let n = NONSPEECH_CLIP_SAMPLES;
    let sr = SAMPLE_RATE as f64;
    let cutoff: f64 = rng.random_range(300.0..3000.0);
    let a = 1.0 - (-2.0 * PI * cutoff / sr).exp();
    let mut env = vec![0.1f64; n];
    let bursts = rng.random_range(3..=8);
    for _ in 0..bursts {
        let len = rng.random_range((0.1 * sr) as usize..(0.6 * sr) as usize);
        let start = rng.random_range(0..n - len);
        let amp = rng.random_range(0.5..1.0);
        for k in 0..len {
            let w = 0.5 * (1.0 - (2.0 * PI * k as f64 / len as f64).cos());
            env[start + k] += amp * w;
        }
    }
    let mut y = 0.0f64;
    let out: Vec<f64> = env
        .iter()
        .map(|e| {
            let x: f64 = StandardNormal.sample(rng);
            y += a * (x - y);
            e * y
        })
        .collect();
    Waveform::from_f64_normalized(&out, TARGET_RMS)
}

/// Noise of `category` with exactly `duration` samples at RMS 0.1, drawn
/// from `bank`.
pub fn make_noise(category: NoiseCategory, duration: usize, bank: &NoiseBank, seed: u64) -> Result<Waveform> {
    make_noise_with(category, duration, bank, seed, BABBLE_SPEAKERS)
}

/// [`make_noise`] with a configurable babble speaker count. Babble sources
/// are distinct clips whenever the bank holds enough, each looped from its
/// first sample; other categories start at a random offset.
pub fn make_noise_with(
    category: NoiseCategory,
    duration: usize,
    bank: &NoiseBank,
    seed: u64,
    babble_speakers: usize,
) -> Result<Waveform> {
    if duration < super::CHAR_SAMPLES {
        return Err(Error::invalid(format!(
            "noise duration {duration} shorter than {} samples",
            super::CHAR_SAMPLES
        )));
    }
    let clips = bank.clips(category);
    if clips.is_empty() {
        return Err(Error::invalid(format!(
            "no {category} clips in the {} bank",
            bank.split.name()
        )));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("make-noise"), category.index() as u64]);
    let mixed: Vec<f64> = match category {
        NoiseCategory::Babble => {
            let k = babble_speakers.max(1);
            // Distinct clips when the bank has enough of them.
            let picks: Vec<usize> = if clips.len() >= k {
                rand::seq::index::sample(&mut rng, clips.len(), k).into_vec()
            } else {
                (0..k).map(|_| rng.random_range(0..clips.len())).collect()
            };
            let mut acc = vec![0.0f64; duration];
            for i in picks {
                let s = clips[i].wave.samples();
                for chunk in acc.chunks_mut(s.len()) {
                    for (a, v) in chunk.iter_mut().zip(s) {
                        *a += *v as f64;
                    }
                }
            }
            acc.iter().map(|v| v / k as f64).collect()
        }
        _ => {
            let clip = &clips[rng.random_range(0..clips.len())].wave;
            let offset = rng.random_range(0..clip.len());
            clip.fit_to(duration, offset)
                .samples()
                .iter()
                .map(|v| *v as f64)
                .collect()
        }
    };
    Waveform::from_f64_normalized(&mixed, TARGET_RMS)
}
