//! Distills a babble adapter set from a freshly initialized recognizer on a
//! toy corpus and prints the validation losses per stage.
use avsr::asr::{AsrConfig, AsrModel};
use avsr::corpus::generate_corpus;
use avsr::distill::{cache_targets, train_adapters, DistillData, Schedule, Stage};
use avsr::fusion::FusionConfig;
use avsr::lora::{AdapterSet, LoraConfig};
use avsr::signal::{NoiseBank, NoiseCategory, NoiseScenario};

fn main() -> avsr::Result<()> {
    let base = AsrModel::new(AsrConfig::default(), 0)?;
    let train = cache_targets(&base, &generate_corpus("train", 32, 1)?)?;
    let val = cache_targets(&base, &generate_corpus("val", 8, 1)?)?;
    let noise = NoiseBank::generate(10, 1)?;
    let schedule = Schedule {
        scale_ratio: 2e-4,
        batch_size: 4,
        ..Default::default()
    };
    for stage in Stage::ALL {
        println!("{stage}: {} steps", schedule.steps(stage));
    }
    let scenario = NoiseScenario::Category(NoiseCategory::Babble);
    let mut set = AdapterSet::new(&base, scenario, LoraConfig::default(), FusionConfig::default(), 2)?;
    let data = DistillData {
        pretrain: &train,
        main: &train,
        val: &val,
        train_noise: &noise.train,
        val_noise: &noise.val,
    };
    let log = train_adapters(&base, &mut set, &data, &schedule, |_| {})?;
    for (label, b) in &log.validation {
        println!(
            "{label:<5} l_mel {:.4} l_emb {:.4} l_ce {:.4} l_ft {:.4}",
            b.l_mel,
            b.l_emb,
            b.l_ce,
            b.l_ft.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
