//! Trains a small noise classifier, then routes noisy inputs to category and
//! level specialists.
use avsr::asr::{AsrConfig, AsrModel};
use avsr::corpus::generate_corpus;
use avsr::fusion::FusionConfig;
use avsr::lora::{AdapterSet, LoraConfig};
use avsr::registry::AdapterRegistry;
use avsr::selector::{
    infer_routed, make_classifier_data, train_classifier, ClassifierPair, ClassifierTrainConfig, Head, RouteMode,
};
use avsr::signal::{contaminate_at, NoiseBank, NoiseCategory, NoiseScenario};

fn main() -> avsr::Result<()> {
    let corpus = generate_corpus("train", 64, 1)?;
    let noise = NoiseBank::generate(20, 1)?;
    let data = make_classifier_data(&corpus, &noise.train, 512, 0.05, 3)?;
    let cfg = ClassifierTrainConfig {
        channels: 16,
        steps: 200,
        ..Default::default()
    };
    let (category, m) = train_classifier(Head::Category, &data, &data[..128], &cfg)?;
    println!("category head: training-set accuracy {:.1}%", 100.0 * m.category_accuracy.unwrap_or(0.0));
    let (snr, m) = train_classifier(Head::Snr, &data, &data[..128], &cfg)?;
    println!("snr head: training-set MAE {:.1} dB", m.snr_mae_db.unwrap_or(f64::NAN));
    let clf = ClassifierPair { category, snr };

    let base = AsrModel::new(AsrConfig::default(), 0)?;
    let mut registry = AdapterRegistry::new(base.clone());
    for (k, s) in NoiseScenario::ALL.into_iter().enumerate() {
        registry.insert(AdapterSet::new(&base, s, LoraConfig::default(), FusionConfig::default(), k as u64)?)?;
    }
    let probe = generate_corpus("test", 1, 5)?.remove(0);
    for (cat, snr_db) in [(NoiseCategory::Music, -10.0), (NoiseCategory::Sidespeaker, 20.0)] {
        let noisy = contaminate_at(&probe.audio, cat, snr_db, &noise.test, 1)?;
        for mode in [RouteMode::Category, RouteMode::Level] {
            let (_, d) = infer_routed(&registry, &clf, &noisy, &probe.video, mode)?;
            println!("{cat} at {snr_db:+} dB, {mode:?} mode -> {}", d.chosen_set);
        }
    }
    Ok(())
}
