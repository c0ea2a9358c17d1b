use std::collections::HashSet;

use proptest::prelude::*;

use avsr::corpus::AvSample;
use avsr::signal::{
    contaminate, contaminate_at, log_mel, make_noise, mix_at_snr, synth_utterance, NoiseBank, NoiseCategory,
    NoiseScenario, Waveform, HOP, N_MELS, WINDOW,
};
use avsr::video::synth_video;

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn bank() -> &'static NoiseBank {
    use std::sync::OnceLock;
    static BANK: OnceLock<NoiseBank> = OnceLock::new();
    BANK.get_or_init(|| NoiseBank::generate(10, 21).unwrap().train)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mixture_components_reproduce_the_target_snr(
        seed in any::<u64>(),
        cat in 0usize..4,
        snr in prop::sample::select(vec![-15.0, -10.0, 0.0, 10.0, 20.0, 30.0]),
    ) {
        let clean = synth_utterance("the cat", seed).unwrap();
        let noise = make_noise(NoiseCategory::ALL[cat], clean.len(), bank(), seed ^ 1).unwrap();
        let mix = mix_at_snr(&clean, &noise, snr).unwrap();
        let c: Vec<f64> = clean.samples().iter().map(|v| *v as f64).collect();
        let scaled: Vec<f64> = mix.samples().iter().zip(&c).map(|(m, c)| *m as f64 - c).collect();
        let measured = 10.0 * (power(&c) / power(&scaled)).log10();
        prop_assert!((measured - snr).abs() < 0.01, "{measured} vs {snr}");
    }

    #[test]
    fn log_mel_respects_floor_and_dynamic_range(seed in any::<u64>(), cat in 0usize..4, snr in -15.0f64..30.0) {
        let clean = synth_utterance("go", seed).unwrap();
        let noisy = contaminate_at(&clean, NoiseCategory::ALL[cat], snr, bank(), seed).unwrap();
        let mel = log_mel(&noisy).unwrap();
        let (lo, hi) = mel.frames.data.iter().fold((f32::MAX, f32::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        prop_assert!(lo >= -1.5 - 1e-6);
        prop_assert!(hi - lo <= 2.0 + 1e-5);
        prop_assert_eq!(mel.frames.cols, N_MELS);
        prop_assert_eq!(mel.frames.rows, 1 + (noisy.len() - WINDOW) / HOP);
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>(), cat in 0usize..4) {
        let c = NoiseCategory::ALL[cat];
        prop_assert_eq!(make_noise(c, 4000, bank(), seed).unwrap(), make_noise(c, 4000, bank(), seed).unwrap());
        prop_assert_eq!(synth_utterance("sky", seed).unwrap(), synth_utterance("sky", seed).unwrap());
        let s = NoiseScenario::Category(c);
        let clean = synth_utterance("up", seed).unwrap();
        prop_assert_eq!(
            contaminate(&clean, s, bank(), 0.05, seed).unwrap(),
            contaminate(&clean, s, bank(), 0.05, seed).unwrap()
        );
    }
}

#[test]
fn gain_matches_power_oracle_at_plus_minus_ten_db() {
    let clean = synth_utterance("red", 1).unwrap();
    // A noise clip with exactly the clean power: a sign-flipped copy.
    let noise = Waveform::new(clean.samples().iter().map(|v| -v).collect()).unwrap();
    for (snr, g) in [(10.0, 0.316228), (-10.0, 3.162278)] {
        let mix = mix_at_snr(&clean, &noise, snr).unwrap();
        let c: Vec<f64> = clean.samples().iter().map(|v| *v as f64).collect();
        let n: Vec<f64> = mix.samples().iter().zip(&c).map(|(m, c)| *m as f64 - c).collect();
        let measured_gain = (power(&n) / power(&c)).sqrt();
        assert!((measured_gain - g).abs() < 1e-5, "{snr}: {measured_gain}");
        assert!((10.0 * (power(&c) / power(&n)).log10() - snr).abs() < 1e-4);
    }
}

/// Power spectrum of one windowed frame by direct summation.
fn dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in frame.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn htk_centers() -> Vec<f64> {
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = to_mel(8000.0);
    (1..=N_MELS).map(|i| to_hz(top * i as f64 / (N_MELS + 1) as f64)).collect()
}

#[test]
fn sine_peaks_in_the_band_nearest_its_frequency() {
    let sine: Vec<f32> = (0..16000)
        .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin() as f32)
        .collect();
    let mel = log_mel(&Waveform::new(sine.clone()).unwrap()).unwrap();

    // The direct DFT puts the tone at 440 Hz (bin 11 of 40 Hz spacing).
    let hann: Vec<f64> = (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
        .collect();
    let frame: Vec<f64> = sine[..WINDOW].iter().zip(&hann).map(|(x, w)| *x as f64 * w).collect();
    let spec = dft_power(&frame);
    let peak = (0..spec.len()).max_by(|a, b| spec[*a].total_cmp(&spec[*b])).unwrap();
    let peak_hz = peak as f64 * 16000.0 / WINDOW as f64;
    assert_eq!(peak_hz, 440.0);

    let centers = htk_centers();
    let expect = (0..N_MELS)
        .min_by(|a, b| (centers[*a] - peak_hz).abs().total_cmp(&(centers[*b] - peak_hz).abs()))
        .unwrap();
    for t in 0..mel.n_frames() {
        let row = mel.frames.row(t);
        let got = (0..N_MELS).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
        assert_eq!(got, expect, "frame {t}");
    }
}

#[test]
fn noise_splits_never_share_clips() {
    let s = NoiseBank::generate(100, 5).unwrap();
    for c in NoiseCategory::ALL {
        assert_eq!(
            (s.train.clips(c).len(), s.val.clips(c).len(), s.test.clips(c).len()),
            (80, 10, 10)
        );
    }
    let mut seen = HashSet::new();
    for bank in [&s.train, &s.val, &s.test] {
        for clip in bank.all() {
            assert!(seen.insert(clip.id.clone()), "{} appears twice", clip.id);
        }
    }
}

#[test]
fn video_is_untouched_by_contamination() {
    let s = AvSample::synth("u".into(), "red sky".into(), 4).unwrap();
    let before = s.video.clone();
    for c in NoiseCategory::ALL {
        let _ = contaminate_at(&s.audio, c, -10.0, bank(), 9).unwrap();
    }
    assert_eq!(s.video, before);
    assert_eq!(synth_video("red sky", s.audio.len(), 4).unwrap().n_frames(), before.n_frames());
}
