use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{make_noise, mix_at_snr, NoiseBank, NoiseCategory, NoiseScenario, Waveform};
use crate::error::{Error, Result};
use crate::seed;

/// Share of training inputs left uncontaminated.
pub const DEFAULT_CLEAN_PROB: f64 = 0.05;

/// What was done to a clean clip. Clean draws carry `snr_db = +inf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    pub category: Option<NoiseCategory>,
    pub snr_db: f64,
    pub clean: bool,
}

/// Draws a category and SNR for `scenario` (or keeps the clip clean with
/// probability `clean_prob`) and mixes.
pub fn contaminate(
    clean: &Waveform,
    scenario: NoiseScenario,
    bank: &NoiseBank,
    clean_prob: f64,
    seed: u64,
) -> Result<(Waveform, Contamination)> {
    if !(0.0..=1.0).contains(&clean_prob) {
        return Err(Error::invalid(format!("clean_prob {clean_prob} outside [0, 1]")));
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("contaminate")]);
    if rng.random::<f64>() < clean_prob {
        return Ok((
            clean.clone(),
            Contamination {
                category: None,
                snr_db: f64::INFINITY,
                clean: true,
            },
        ));
    }
    let category = match scenario.category() {
        Some(c) => c,
        None => NoiseCategory::ALL[rng.random_range(0..4)],
    };
    let (lo, hi) = scenario.snr_range();
    let snr_db = if scenario == NoiseScenario::Level(super::NoiseLevel::HighNoise) {
        rng.random_range(lo..hi)
    } else {
        rng.random_range(lo..=hi)
    };
    let noisy = contaminate_at(clean, category, snr_db, bank, rng.random())?;
    Ok((
        noisy,
        Contamination {
            category: Some(category),
            snr_db,
            clean: false,
        },
    ))
}

/// Mixes fresh `category` noise at exactly `snr_db`.
pub fn contaminate_at(
    clean: &Waveform,
    category: NoiseCategory,
    snr_db: f64,
    bank: &NoiseBank,
    seed: u64,
) -> Result<Waveform> {
    let noise = make_noise(category, clean.len().max(super::CHAR_SAMPLES), bank, seed)?;
    let noise = if noise.len() == clean.len() {
        noise
    } else {
        noise.fit_to(clean.len(), 0)
    };
    mix_at_snr(clean, &noise, snr_db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_utterance, NoiseLevel};

    fn setup() -> (Waveform, crate::signal::NoiseSplits) {
        (
            synth_utterance("red fox", 1).unwrap(),
            NoiseBank::generate(10, 2).unwrap(),
        )
    }

    #[test]
    fn clean_prob_one_is_identity() {
        let (w, b) = setup();
        for s in 0..20 {
            let (out, meta) = contaminate(&w, NoiseScenario::Full, &b.train, 1.0, s).unwrap();
            assert_eq!(out, w);
            assert!(meta.clean && meta.snr_db.is_infinite());
        }
    }

    #[test]
    fn high_noise_range() {
        let (w, b) = setup();
        let sc = NoiseScenario::Level(NoiseLevel::HighNoise);
        for s in 0..1000 {
            let (_, meta) = contaminate(&w, sc, &b.train, 0.0, s).unwrap();
            assert!((-15.0..0.0).contains(&meta.snr_db), "{}", meta.snr_db);
        }
    }

    #[test]
    fn category_scenario_is_reproducible() {
        let (w, b) = setup();
        let sc = NoiseScenario::Category(NoiseCategory::Babble);
        let run = || {
            (0..20)
                .map(|s| contaminate(&w, sc, &b.train, 0.05, s).unwrap().1)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a
            .iter()
            .all(|m| m.clean || m.category == Some(NoiseCategory::Babble)));
    }

    #[test]
    fn bad_probability() {
        let (w, b) = setup();
        assert!(contaminate(&w, NoiseScenario::Full, &b.train, 1.5, 0).is_err());
    }
}
