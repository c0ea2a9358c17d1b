//! Runs the audio-visual fusion module on a noisy mel and its lip stream and
//! shows the 4:1 rate alignment.
use avsr::corpus::AvSample;
use avsr::fusion::{align_index, FusionConfig, FusionModule};
use avsr::signal::{contaminate_at, log_mel, NoiseBank, NoiseCategory};

fn main() -> avsr::Result<()> {
    let s = AvSample::synth("a".into(), "go up".into(), 4)?;
    let bank = NoiseBank::generate(10, 2)?.test;
    let noisy = log_mel(&contaminate_at(&s.audio, NoiseCategory::Music, -5.0, &bank, 1)?)?;
    let idx = align_index(noisy.n_frames(), s.video.n_frames());
    println!(
        "{} mel frames, {} video frames; mel frame {} reads video frame {}",
        noisy.n_frames(),
        s.video.n_frames(),
        idx.len() - 1,
        idx[idx.len() - 1]
    );
    let module = FusionModule::new(FusionConfig::default(), 3)?;
    let fused = module.fuse(&noisy, &s.video)?;
    println!(
        "{} fusion parameters; untrained head passes the mel through: {}",
        module.param_count(),
        fused == noisy
    );
    Ok(())
}
