//! Compares analytic adapter and fusion gradients of the distillation loss
//! with central finite differences.
use rand::Rng;

use avsr::asr::{AsrConfig, AsrModel};
use avsr::corpus::generate_corpus;
use avsr::distill::{cache_targets, grad_check_against, loss_and_grads, sample_coordinates, stage_allows, CeTarget, Phase};
use avsr::fusion::FusionConfig;
use avsr::lora::{AdapterSet, LoraConfig};
use avsr::signal::{log_mel, NoiseScenario};

fn main() -> avsr::Result<()> {
    let base = AsrModel::new(AsrConfig::default(), 0)?;
    let c = cache_targets(&base, &generate_corpus("g", 1, 4)?)?.remove(0);
    let mut set = AdapterSet::new(&base, NoiseScenario::Full, LoraConfig::default(), FusionConfig::default(), 1)?;
    set.randomize_deltas(2, 0.05);
    let mut rng = avsr::seed::rng(3);
    for p in set.fusion.params.iter_mut().filter(|p| p.name.starts_with("fusion.head")) {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
    }
    let store = set.to_store();
    let mel = log_mel(&c.sample.audio)?.frames;
    let video = &c.sample.video.frames;
    for phase in [Phase::Pre, Phase::Ft] {
        let coords = sample_coordinates(&store, 100, 1, |p| stage_allows(phase, &p.name));
        let (_, g32) = loss_and_grads::<f32>(&base, &set, &[&store], &mel, video, &c.targets, phase, CeTarget::Soft);
        let report = grad_check_against(&store, &coords, 1e-4, &g32, |p| {
            let (lb, _) = loss_and_grads::<f64>(&base, &set, &[p], &mel, video, &c.targets, phase, CeTarget::Soft);
            Ok(lb.l_ft.unwrap_or(lb.l_pre))
        })?;
        println!(
            "{phase:?}: {} coordinates, max relative error {:.2e}, worst {:?}",
            report.checked, report.max_rel_error, report.worst
        );
    }
    Ok(())
}
