//! Audio: synthetic speech, noise generation, SNR mixing and the log-mel
//! front end. Everything is mono at 16 kHz.

mod contaminate;
mod mel;
mod mix;
mod noise;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use contaminate::{contaminate, contaminate_at, Contamination, DEFAULT_CLEAN_PROB};
pub use mel::{log_mel, mel_center_hz, mel_filterbank, MelSpectrogram, HOP, N_FFT, N_MELS, WINDOW};
pub use mix::{mean_power, mix_at_snr, noise_gain};
pub use noise::{make_noise, make_noise_with, NoiseBank, NoiseClip, NoiseSplits, Split, BABBLE_SPEAKERS};
pub use synth::{
    char_index, random_sentence, synth_utterance, CHAR_SAMPLES, LEXICON, MAX_TEXT_LEN, TARGET_RMS,
};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    /// Rejects empty or non-finite input. Amplitude is not clipped: mixtures
    /// at low SNR may exceed ±1 and clipping would change their SNR.
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty waveform"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform".into()));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn rms(&self) -> f64 {
        mean_power(&self.samples).sqrt()
    }

    /// Loops or crops to exactly `len` samples, starting at `offset`.
    pub fn fit_to(&self, len: usize, offset: usize) -> Waveform {
        let n = self.samples.len();
        let samples = (0..len).map(|i| self.samples[(i + offset) % n]).collect();
        Waveform { samples }
    }

    pub(crate) fn from_f64_normalized(x: &[f64], rms: f64) -> Result<Waveform> {
        let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
        if p <= 0.0 {
            return Err(Error::ZeroPower("normalization input"));
        }
        let g = rms / p.sqrt();
        Waveform::new(x.iter().map(|v| (v * g) as f32).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCategory {
    Babble,
    Music,
    Natural,
    Sidespeaker,
}

impl NoiseCategory {
    pub const ALL: [NoiseCategory; 4] = [
        NoiseCategory::Babble,
        NoiseCategory::Music,
        NoiseCategory::Natural,
        NoiseCategory::Sidespeaker,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseCategory::Babble => "babble",
            NoiseCategory::Music => "music",
            NoiseCategory::Natural => "natural",
            NoiseCategory::Sidespeaker => "sidespeaker",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            NoiseCategory::Babble => "Babble",
            NoiseCategory::Music => "Music",
            NoiseCategory::Natural => "Natural",
            NoiseCategory::Sidespeaker => "Sidesp.",
        }
    }
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "babble" => Ok(NoiseCategory::Babble),
            "music" => Ok(NoiseCategory::Music),
            // "noise" is the other name for the natural-sound category.
            "natural" | "noise" => Ok(NoiseCategory::Natural),
            "sidespeaker" => Ok(NoiseCategory::Sidespeaker),
            other => Err(Error::invalid(format!("unknown noise category {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    HighNoise,
    LowNoise,
}

/// Which slice of the noise space an adapter set specializes in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScenario {
    Category(NoiseCategory),
    Level(NoiseLevel),
    Full,
}

/// Lower edge of the LowNoise training range; HighNoise covers
/// `[SNR_MIN, LEVEL_SPLIT_DB)`.
pub const LEVEL_SPLIT_DB: f64 = 0.0;
pub const SNR_MIN_DB: f64 = -15.0;
pub const SNR_MAX_DB: f64 = 30.0;

impl NoiseScenario {
    pub const ALL: [NoiseScenario; 7] = [
        NoiseScenario::Full,
        NoiseScenario::Category(NoiseCategory::Babble),
        NoiseScenario::Category(NoiseCategory::Music),
        NoiseScenario::Category(NoiseCategory::Natural),
        NoiseScenario::Category(NoiseCategory::Sidespeaker),
        NoiseScenario::Level(NoiseLevel::HighNoise),
        NoiseScenario::Level(NoiseLevel::LowNoise),
    ];

    /// Short id used in paths and on the command line.
    pub fn id(self) -> &'static str {
        match self {
            NoiseScenario::Full => "full",
            NoiseScenario::Category(c) => c.name(),
            NoiseScenario::Level(NoiseLevel::HighNoise) => "high",
            NoiseScenario::Level(NoiseLevel::LowNoise) => "low",
        }
    }

    /// SNR training range; the high-noise range is half-open.
    pub fn snr_range(self) -> (f64, f64) {
        match self {
            NoiseScenario::Level(NoiseLevel::HighNoise) => (SNR_MIN_DB, LEVEL_SPLIT_DB),
            NoiseScenario::Level(NoiseLevel::LowNoise) => (LEVEL_SPLIT_DB, SNR_MAX_DB),
            _ => (SNR_MIN_DB, SNR_MAX_DB),
        }
    }

    pub fn category(self) -> Option<NoiseCategory> {
        match self {
            NoiseScenario::Category(c) => Some(c),
            _ => None,
        }
    }
}

impl fmt::Display for NoiseScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for NoiseScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(NoiseScenario::Full),
            "high" | "highnoise" => Ok(NoiseScenario::Level(NoiseLevel::HighNoise)),
            "low" | "lownoise" => Ok(NoiseScenario::Level(NoiseLevel::LowNoise)),
            other => other
                .parse::<NoiseCategory>()
                .map(NoiseScenario::Category)
                .map_err(|_| Error::invalid(format!("unknown scenario {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ids_round_trip() {
        for s in NoiseScenario::ALL {
            assert_eq!(s.id().parse::<NoiseScenario>().unwrap(), s);
        }
        assert_eq!(
            "noise".parse::<NoiseScenario>().unwrap(),
            NoiseScenario::Category(NoiseCategory::Natural)
        );
        assert!("loud".parse::<NoiseScenario>().is_err());
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![]).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn fit_to_loops() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(w.fit_to(5, 1).samples(), &[2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
