//! Synthetic lip-feature stream at 25 Hz, time-aligned with the chord
//! speech: each frame is the frozen code vector of the character being
//! spoken, cross-faded over 40 ms at character boundaries, plus jitter.

use std::sync::OnceLock;

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{char_index, CHAR_SAMPLES};
use crate::tensor::Mat;

pub const VIDEO_DIM: usize = 32;
pub const FRAME_RATE: usize = 25;
/// Audio samples per video frame (40 ms at 16 kHz).
pub const SAMPLES_PER_FRAME: usize = 640;
pub const JITTER_STD: f32 = 0.05;
const FADE_HALF: i64 = 320;
const CODEBOOK_SIZE: usize = 27;

#[derive(Clone, Debug, PartialEq)]
pub struct LipFrameSequence {
    pub frames: Mat<f32>,
}

impl LipFrameSequence {
    pub fn new(frames: Mat<f32>) -> Result<Self> {
        if frames.cols != VIDEO_DIM {
            return Err(Error::Shape(format!(
                "video frames have width {}, expected {VIDEO_DIM}",
                frames.cols
            )));
        }
        if frames.rows == 0 {
            return Err(Error::invalid("empty video"));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("video frames".into()));
        }
        Ok(LipFrameSequence { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }

    /// `ceil(duration · 25)` for a duration given in audio samples.
    pub fn frame_count(duration_samples: usize) -> usize {
        duration_samples.div_ceil(SAMPLES_PER_FRAME)
    }
}

/// Frozen seed-0 code vectors, one per character (a–z, space).
pub fn codebook() -> &'static Mat<f32> {
    static BOOK: OnceLock<Mat<f32>> = OnceLock::new();
    BOOK.get_or_init(|| {
        let mut rng = seed::rng(0);
        let data = (0..CODEBOOK_SIZE * VIDEO_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Mat::from_vec(CODEBOOK_SIZE, VIDEO_DIM, data)
    })
}

pub fn synth_video(text: &str, duration: usize, seed: u64) -> Result<LipFrameSequence> {
    if duration == 0 {
        return Err(Error::invalid("zero video duration"));
    }
    if text.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    let idx: Vec<usize> = text.chars().map(char_index).collect::<Result<_>>()?;
    let book = codebook();
    let n_frames = LipFrameSequence::frame_count(duration);
    let n_chars = idx.len() as i64;
    let char_len = CHAR_SAMPLES as i64;
    let jitter = Normal::new(0.0f32, JITTER_STD).expect("valid std");
    let mut rng = seed::rng_for(seed, &[seed::tag("video-jitter")]);
    let mut frames = Mat::zeros(n_frames, VIDEO_DIM);
    for f in 0..n_frames {
        let mid = (f * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME / 2) as i64;
        let active = (mid / char_len).min(n_chars - 1) as usize;
        let boundary = (mid + char_len / 2) / char_len;
        let d = mid - boundary * char_len;
        let row = frames.row_mut(f);
        if boundary >= 1 && boundary < n_chars && d.abs() < FADE_HALF {
            let w = (d + FADE_HALF) as f32 / (2 * FADE_HALF) as f32;
            let prev = book.row(idx[boundary as usize - 1]);
            let next = book.row(idx[boundary as usize]);
            for ((o, p), n) in row.iter_mut().zip(prev).zip(next) {
                *o = (1.0 - w) * p + w * n;
            }
        } else {
            row.copy_from_slice(book.row(idx[active]));
        }
        for o in row.iter_mut() {
            *o += jitter.sample(&mut rng);
        }
    }
    LipFrameSequence::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
    }

    #[test]
    fn single_char_frames_near_code() {
        let v = synth_video("a", 1600, 3).unwrap();
        assert_eq!(v.n_frames(), 3);
        let code = codebook().row(0);
        for f in 0..3 {
            for (x, c) in v.frames.row(f).iter().zip(code) {
                assert!((x - c).abs() < 5.0 * JITTER_STD);
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_video("cat", 4800, 9).unwrap(),
            synth_video("cat", 4800, 9).unwrap()
        );
    }

    #[test]
    fn frames_track_the_active_character() {
        // Frame 1 covers 0.04–0.08 s ('a'), frame 3 covers 0.12–0.16 s ('b').
        let v = synth_video("ab", 3200, 1).unwrap();
        let book = codebook();
        let code_gap = dist(book.row(0), book.row(1));
        assert!(code_gap > 6.0 * JITTER_STD, "codebook gap {code_gap}");
        assert!(dist(v.frames.row(1), v.frames.row(3)) > 6.0 * JITTER_STD);
        assert!(dist(v.frames.row(1), book.row(0)) < dist(v.frames.row(1), book.row(1)));
        assert!(dist(v.frames.row(3), book.row(1)) < dist(v.frames.row(3), book.row(0)));
    }

    #[test]
    fn boundary_frame_is_blended() {
        // Frame 2's midpoint sits exactly on the a|b boundary.
        let v = synth_video("ab", 3200, 1).unwrap();
        let book = codebook();
        let mean: Vec<f32> = book.row(0).iter().zip(book.row(1)).map(|(a, b)| 0.5 * (a + b)).collect();
        assert!(dist(v.frames.row(2), &mean) < 6.0 * JITTER_STD);
    }

    #[test]
    fn frame_count_formula() {
        for ms in (100..=10_000).step_by(37) {
            let n = ms * 16;
            let expect = ((ms as f64) * 25.0 / 1000.0).ceil() as usize;
            assert_eq!(LipFrameSequence::frame_count(n), expect, "{ms} ms");
        }
    }

    #[test]
    fn errors() {
        assert!(synth_video("a", 0, 0).is_err());
        assert!(synth_video("A", 1600, 0).is_err());
    }
}
