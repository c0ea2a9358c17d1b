//! Concatenative chord synthesis: each character is a fixed 100 ms chord.

use std::f64::consts::PI;

use rand::Rng;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

/// Samples per character (100 ms).
pub const CHAR_SAMPLES: usize = 1600;
/// Raised-cosine onset/offset length (10 ms).
const RAMP: usize = 160;
pub const TARGET_RMS: f64 = 0.1;
pub const MAX_TEXT_LEN: usize = 32;

/// Word list for the synthetic corpora. Short words so utterances stay
/// around one second.
pub const LEXICON: [&str; 40] = [
    "the", "cat", "dog", "red", "sun", "big", "run", "sky", "box", "fox", "hat", "map", "pen",
    "cup", "jam", "key", "owl", "zip", "van", "web", "yes", "quiz", "glow", "frog", "milk",
    "lamp", "ship", "wind", "blue", "gold", "jump", "kite", "moon", "note", "park", "rain",
    "snow", "tree", "wave", "yard",
];

/// `a..=z → 0..=25`, space → 26.
pub fn char_index(c: char) -> Result<usize> {
    match c {
        'a'..='z' => Ok(c as usize - 'a' as usize),
        ' ' => Ok(26),
        other => Err(Error::Vocabulary(other)),
    }
}

fn chord(idx: usize, phase1: f64, phase2: f64) -> Vec<f64> {
    let f0 = 200.0 + 15.0 * idx as f64;
    let sr = SAMPLE_RATE as f64;
    let mut out: Vec<f64> = (0..CHAR_SAMPLES)
        .map(|n| {
            let t = n as f64 / sr;
            let env = if n < RAMP {
                0.5 * (1.0 - (PI * n as f64 / RAMP as f64).cos())
            } else if n >= CHAR_SAMPLES - RAMP {
                0.5 * (1.0 - (PI * (CHAR_SAMPLES - 1 - n) as f64 / RAMP as f64).cos())
            } else {
                1.0
            };
            env * ((2.0 * PI * f0 * t + phase1).sin() + 0.5 * (2.0 * PI * 2.0 * f0 * t + phase2).sin())
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / CHAR_SAMPLES as f64).sqrt();
    for v in &mut out {
        *v *= TARGET_RMS / rms;
    }
    out
}

/// Synthesizes `text` as concatenated per-character chords, each segment at
/// RMS 0.1 (so the whole clip is too). The seed sets the starting phases of
/// the two partials, shared by every segment.
pub fn synth_utterance(text: &str, seed: u64) -> Result<Waveform> {
    if text.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    let n_chars = text.chars().count();
    if n_chars > MAX_TEXT_LEN {
        return Err(Error::invalid(format!(
            "text has {n_chars} characters, limit is {MAX_TEXT_LEN}"
        )));
    }
    let idx: Vec<usize> = text.chars().map(char_index).collect::<Result<_>>()?;
    let mut rng = seed::rng_for(seed, &[seed::tag("synth-phase")]);
    let p1 = rng.random_range(0.0..2.0 * PI);
    let p2 = rng.random_range(0.0..2.0 * PI);
    let mut samples = Vec::with_capacity(idx.len() * CHAR_SAMPLES);
    for i in idx {
        samples.extend(chord(i, p1, p2).into_iter().map(|v| v as f32));
    }
    Waveform::new(samples)
}

/// Random sentence of `min_words..=max_words` lexicon words.
pub fn random_sentence<R: Rng>(rng: &mut R, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    (0..n)
        .map(|_| LEXICON[rng.random_range(0..LEXICON.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_char_length_and_rms() {
        let w = synth_utterance("a", 7).unwrap();
        assert_eq!(w.len(), 1600);
        assert!((w.rms() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn concatenative_prefix() {
        for seed in [0, 3, 99] {
            let a = synth_utterance("a", seed).unwrap();
            let ab = synth_utterance("ab", seed).unwrap();
            assert_eq!(&ab.samples()[..1600], a.samples());
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_utterance("abc", 7).unwrap(), synth_utterance("abc", 7).unwrap());
    }

    #[test]
    fn errors() {
        assert!(synth_utterance("", 0).is_err());
        assert!(matches!(synth_utterance("aB", 0), Err(Error::Vocabulary('B'))));
        assert!(synth_utterance(&"a".repeat(33), 0).is_err());
    }

    #[test]
    fn lexicon_sentences_fit() {
        let mut rng = seed::rng(1);
        for _ in 0..200 {
            let s = random_sentence(&mut rng, 2, 3);
            assert!(s.len() <= MAX_TEXT_LEN);
            assert!(s.chars().all(|c| char_index(c).is_ok()));
        }
    }
}
