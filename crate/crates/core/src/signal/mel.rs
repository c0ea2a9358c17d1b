//! Whisper-like log-mel front end: 400-sample Hann window, hop 160, 80 HTK
//! mel bands over 0–8 kHz, no center padding.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const WINDOW: usize = 400;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 80;
const N_BINS: usize = N_FFT / 2 + 1;

/// Log-mel features, `frames × 80`, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Mat<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: Mat<f32>) -> Result<Self> {
        if frames.cols != N_MELS {
            return Err(Error::Shape(format!("mel has {} bins, expected {N_MELS}", frames.cols)));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(MelSpectrogram { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }

    /// Frame count for `n` input samples (`n ≥ 400`).
    pub fn frame_count(n: usize) -> usize {
        1 + (n - WINDOW) / HOP
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency of mel band `m`.
pub fn mel_center_hz(m: usize) -> f64 {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    mel_to_hz(top * (m + 1) as f64 / (N_MELS + 1) as f64)
}

/// Triangular filters as an `80 × 201` matrix over FFT bins.
pub fn mel_filterbank() -> Mat<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let mut fb = Mat::zeros(N_MELS, N_BINS);
    for m in 0..N_MELS {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..N_BINS {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let w = if f > l && f < c {
                (f - l) / (c - l)
            } else if f >= c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb.data[m * N_BINS + k] = w;
        }
    }
    fb
}

struct FrontEnd {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per band: first FFT bin and the weights from there up to the last
    /// nonzero one.
    filters: Vec<(usize, Vec<f64>)>,
}

fn sparse_rows(fb: &Mat<f64>) -> Vec<(usize, Vec<f64>)> {
    (0..fb.rows)
        .map(|m| {
            let row = fb.row(m);
            let first = row.iter().position(|w| *w != 0.0).unwrap_or(0);
            let last = row.iter().rposition(|w| *w != 0.0).map_or(first, |k| k + 1);
            (first, row[first..last].to_vec())
        })
        .collect()
}

fn front_end() -> &'static FrontEnd {
    static FE: OnceLock<FrontEnd> = OnceLock::new();
    FE.get_or_init(|| {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        // Periodic Hann.
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        FrontEnd {
            fft,
            window,
            filters: sparse_rows(&mel_filterbank()),
        }
    })
}

pub fn log_mel(w: &Waveform) -> Result<MelSpectrogram> {
    let x = w.samples();
    if x.len() < WINDOW {
        return Err(Error::invalid(format!(
            "waveform has {} samples, one window needs {WINDOW}",
            x.len()
        )));
    }
    let fe = front_end();
    let n_frames = MelSpectrogram::frame_count(x.len());
    let mut logs = vec![0.0f64; n_frames * N_MELS];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut power = vec![0.0f64; N_BINS];
    for t in 0..n_frames {
        let start = t * HOP;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[start + i] as f64 * fe.window[i], 0.0);
        }
        fe.fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (m, (first, w)) in fe.filters.iter().enumerate() {
            let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
            logs[t * N_MELS + m] = e.max(1e-10).log10();
        }
    }
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let frames = logs
        .iter()
        .map(|v| ((v.max(mx - 8.0) + 4.0) / 4.0) as f32)
        .collect();
    MelSpectrogram::new(Mat::from_vec(n_frames, N_MELS, frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_is_floor() {
        let w = Waveform::new(vec![0.0; 16000]).unwrap();
        let m = log_mel(&w).unwrap();
        assert_eq!(m.n_frames(), 98);
        assert!(m.frames.data.iter().all(|v| *v == -1.5));
    }

    #[test]
    fn frame_count_law() {
        for n in [400, 559, 560, 16000, 16001] {
            let w = Waveform::new(vec![0.01; n]).unwrap();
            assert_eq!(log_mel(&w).unwrap().n_frames(), 1 + (n - 400) / 160);
        }
        assert_eq!(log_mel(&Waveform::new(vec![0.0; 400]).unwrap()).unwrap().n_frames(), 1);
        assert!(log_mel(&Waveform::new(vec![0.0; 399]).unwrap()).is_err());
    }

    #[test]
    fn dynamic_range_is_clamped() {
        let w = crate::signal::synth_utterance("hello world", 1).unwrap();
        let m = log_mel(&w).unwrap();
        let mx = m.frames.data.iter().copied().fold(f32::MIN, f32::max);
        let mn = m.frames.data.iter().copied().fold(f32::MAX, f32::min);
        assert!(mx - mn <= 2.0 + 1e-6);
        assert!(mn >= -1.5);
    }
}
