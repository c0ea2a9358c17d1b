use std::sync::OnceLock;

use proptest::prelude::*;

use avsr::asr::{AsrConfig, AsrModel};
use avsr::corpus::AvSample;
use avsr::fusion::FusionConfig;
use avsr::lora::{inject, AdapterSet, LoraConfig};
use avsr::params::Role;
use avsr::registry::AdapterRegistry;
use avsr::selector::{
    infer_routed, make_classifier_data, route, train_classifier, ClassifierOutput, ClassifierTrainConfig, Head,
    NoiseClassifier, OracleClassifier, RouteMode,
};
use avsr::signal::{contaminate_at, log_mel, NoiseBank, NoiseCategory, NoiseLevel, NoiseScenario};

fn registry() -> &'static AdapterRegistry {
    static REG: OnceLock<AdapterRegistry> = OnceLock::new();
    REG.get_or_init(|| {
        let base = AsrModel::new(AsrConfig::default(), 8).unwrap();
        let mut reg = AdapterRegistry::new(base.clone());
        for (k, s) in NoiseScenario::ALL.into_iter().enumerate() {
            let mut set = AdapterSet::new(&base, s, LoraConfig::default(), FusionConfig::default(), k as u64).unwrap();
            set.randomize_deltas(k as u64 + 40, 0.2);
            reg.insert(set).unwrap();
        }
        reg
    })
}

fn softmax(logits: &[f32; 4], temp: f32) -> [f32; 4] {
    let m = logits.iter().fold(f32::MIN, |a, v| a.max(*v));
    let e: Vec<f32> = logits.iter().map(|v| ((v - m) / temp).exp()).collect();
    let s: f32 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s, e[3] / s]
}

fn output(probs: [f32; 4], snr: f32) -> ClassifierOutput {
    ClassifierOutput {
        category_probs: probs,
        snr_db: snr,
    }
}

proptest! {
    #[test]
    fn category_routing_ignores_temperature(
        logits in prop::array::uniform4(-5.0f32..5.0),
        temp in 0.2f32..5.0,
    ) {
        let a = route(RouteMode::Category, &output(softmax(&logits, 1.0), 0.0), registry()).unwrap();
        let b = route(RouteMode::Category, &output(softmax(&logits, temp), 0.0), registry()).unwrap();
        prop_assert_eq!(a.chosen_set, b.chosen_set);
    }

    #[test]
    fn level_routing_is_a_step_at_five_db(snr in -20.0f32..40.0, nudge in -0.5f32..0.5) {
        let d = route(RouteMode::Level, &output([0.25; 4], snr), registry()).unwrap();
        let expect = if snr < 5.0 { NoiseLevel::HighNoise } else { NoiseLevel::LowNoise };
        prop_assert_eq!(d.chosen_set, NoiseScenario::Level(expect));
        let moved = snr + nudge;
        if (moved < 5.0) == (snr < 5.0) {
            let e = route(RouteMode::Level, &output([0.25; 4], moved), registry()).unwrap();
            prop_assert_eq!(e.chosen_set, d.chosen_set);
        }
    }
}

#[test]
fn oracle_routing_equals_the_specialist() {
    let reg = registry();
    let bank = NoiseBank::generate(10, 3).unwrap().test;
    let s = AvSample::synth("r".into(), "red sky".into(), 2).unwrap();
    for (k, c) in NoiseCategory::ALL.into_iter().enumerate() {
        for snr in [-10.0, 20.0] {
            let noisy = contaminate_at(&s.audio, c, snr, &bank, k as u64).unwrap();
            let stub = OracleClassifier { category: c, snr_db: snr };
            let mel = log_mel(&noisy).unwrap();
            let (text, d) = infer_routed(reg, &stub, &noisy, &s.video, RouteMode::Category).unwrap();
            assert_eq!(d.chosen_set, NoiseScenario::Category(c));
            let direct = inject(reg.base(), reg.get(d.chosen_set).unwrap()).unwrap();
            assert_eq!(text, direct.transcribe(&mel, &s.video).unwrap());
            let (again, _) = infer_routed(reg, &stub, &noisy, &s.video, RouteMode::Category).unwrap();
            assert_eq!(again, text);

            let (text, d) = infer_routed(reg, &stub, &noisy, &s.video, RouteMode::Level).unwrap();
            let level = if snr < 5.0 { NoiseLevel::HighNoise } else { NoiseLevel::LowNoise };
            assert_eq!(d.chosen_set, NoiseScenario::Level(level));
            let direct = inject(reg.base(), reg.get(d.chosen_set).unwrap()).unwrap();
            assert_eq!(text, direct.transcribe(&mel, &s.video).unwrap());
        }
    }
}

#[test]
fn classifier_training_touches_only_classifier_tensors() {
    let reg = registry();
    let base_before = reg.base_hashes();
    let set_before = reg.get(NoiseScenario::Full).unwrap().deltas.hashes(Role::Adapter);
    let corpus: Vec<AvSample> = (0..4)
        .map(|i| AvSample::synth(format!("c{i}"), "go up".into(), i).unwrap())
        .collect();
    let bank = NoiseBank::generate(10, 4).unwrap().train;
    let data = make_classifier_data(&corpus, &bank, 8, 0.0, 1).unwrap();
    let cfg = ClassifierTrainConfig {
        steps: 2,
        batch_size: 4,
        channels: 8,
        ..Default::default()
    };
    let fresh = NoiseClassifier::new(8, cfg.seed).unwrap();
    let (clf, _) = train_classifier(Head::Category, &data, &[], &cfg).unwrap();
    assert!(clf.params.iter().all(|p| p.role == Role::Classifier));
    assert_ne!(clf.params.hashes(Role::Classifier), fresh.params.hashes(Role::Classifier));
    assert_eq!(reg.base_hashes(), base_before);
    assert_eq!(reg.get(NoiseScenario::Full).unwrap().deltas.hashes(Role::Adapter), set_before);
    let out = clf.classify(&log_mel(&corpus[0].audio).unwrap()).unwrap();
    assert!((out.category_probs.iter().sum::<f32>() - 1.0).abs() <= 1e-5);
}
