//! Synthesizes one audio-visual utterance, mixes it with each noise category
//! at 0 dB and prints the resulting feature shapes.
use avsr::corpus::AvSample;
use avsr::signal::{contaminate_at, log_mel, mean_power, NoiseBank, NoiseCategory};

fn main() -> avsr::Result<()> {
    let sample = AvSample::synth("demo".into(), "the red cat".into(), 7)?;
    let clean_mel = log_mel(&sample.audio)?;
    println!(
        "\"{}\": {} samples ({:.2} s), mel {}x{}, video {}x{}",
        sample.text,
        sample.audio.len(),
        sample.audio.duration_secs(),
        clean_mel.frames.rows,
        clean_mel.frames.cols,
        sample.video.frames.rows,
        sample.video.frames.cols,
    );
    let bank = NoiseBank::generate(10, 1)?.test;
    for cat in NoiseCategory::ALL {
        let noisy = contaminate_at(&sample.audio, cat, 0.0, &bank, 3)?;
        let noise: Vec<f32> = noisy
            .samples()
            .iter()
            .zip(sample.audio.samples())
            .map(|(n, c)| n - c)
            .collect();
        let snr = 10.0 * (mean_power(sample.audio.samples()) / mean_power(&noise)).log10();
        println!("{:<12} measured SNR {snr:+.3} dB", cat.name());
    }
    Ok(())
}
