use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;

use avsr::asr::{AsrConfig, AsrModel};
use avsr::fusion::FusionConfig;
use avsr::lora::{count_params, count_system, inject, merge, AdapterSet, LoraConfig};
use avsr::params::Role;
use avsr::registry::AdapterRegistry;
use avsr::signal::{MelSpectrogram, NoiseCategory, NoiseLevel, NoiseScenario, N_MELS};
use avsr::tensor::Mat;
use avsr::video::{synth_video, LipFrameSequence};

fn base() -> &'static AsrModel {
    static BASE: OnceLock<AsrModel> = OnceLock::new();
    BASE.get_or_init(|| AsrModel::new(AsrConfig::default(), 17).unwrap())
}

fn mel(seed: u64, frames: usize) -> MelSpectrogram {
    let mut rng = avsr::seed::rng(seed);
    let data = (0..frames * N_MELS).map(|_| rng.random_range(-1.5f32..0.5)).collect();
    MelSpectrogram::new(Mat::from_vec(frames, N_MELS, data)).unwrap()
}

fn tokens(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = avsr::seed::rng(seed ^ 0x55);
    std::iter::once(27).chain((1..n).map(|_| rng.random_range(0..27))).collect()
}

fn set(scenario: NoiseScenario, seed: u64) -> AdapterSet {
    AdapterSet::new(base(), scenario, LoraConfig::default(), FusionConfig::default(), seed).unwrap()
}

fn rel_diff(a: &Mat<f32>, b: &Mat<f32>) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn fresh_sets_leave_outputs_unchanged(seed in any::<u64>(), frames in 20usize..200, n in 1usize..20) {
        let s = set(NoiseScenario::Full, seed);
        let adapted = inject(base(), &s).unwrap();
        let m = mel(seed, frames);
        let t = tokens(seed, n);
        let (eb, ea) = (base().encode(&m).unwrap(), adapted.encode(&m).unwrap());
        prop_assert!(eb.frames.max_abs_diff(&ea.frames) <= 1e-7);
        let lb = base().decode_logits(&eb, &t).unwrap();
        let la = adapted.decode_logits(&ea, &t).unwrap();
        prop_assert!(lb.logits.max_abs_diff(&la.logits) <= 1e-7);
    }

    #[test]
    fn merged_and_injected_agree(seed in any::<u64>(), frames in 20usize..200, n in 1usize..20) {
        let mut s = set(NoiseScenario::Full, seed);
        s.randomize_deltas(seed, 0.05);
        let merged = merge(base(), &s).unwrap();
        let injected = inject(base(), &s).unwrap();
        let m = mel(seed, frames);
        let (em, ei) = (merged.encode(&m).unwrap(), injected.encode(&m).unwrap());
        prop_assert!(rel_diff(&em.frames, &ei.frames) <= 1e-5);
        let t = tokens(seed, n);
        let lm = merged.decode_logits(&em, &t).unwrap();
        let li = injected.decode_logits(&ei, &t).unwrap();
        prop_assert!(rel_diff(&lm.logits, &li.logits) <= 1e-5);
    }
}

#[test]
fn merging_leaves_the_base_untouched_and_is_repeatable() {
    let before = base().params.hashes(Role::Base);
    let mut s = set(NoiseScenario::Full, 3);
    s.randomize_deltas(4, 0.1);
    let a = merge(base(), &s).unwrap();
    let b = merge(base(), &s).unwrap();
    assert_eq!(a.params.hashes(Role::Base), b.params.hashes(Role::Base));
    assert_ne!(a.params.hashes(Role::Base), before);
    assert_eq!(base().params.hashes(Role::Base), before);
}

#[test]
fn parameter_count_matches_enumeration() {
    let mut s = set(NoiseScenario::Full, 1);
    let enumerated: usize = s.tensors().map(|p| p.shape.iter().product::<usize>()).sum();
    let base_total: usize = base().params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let c = count_params(base(), &s);
    assert_eq!(c.trainable, enumerated);
    assert_eq!(c.total, enumerated + base_total);
    assert!(c.trainable < c.total);

    let frozen = "enc.0.attn.q.lora_a".to_string();
    let n = s.deltas.get(&frozen).unwrap().numel();
    s.mask.insert(frozen, false);
    assert_eq!(count_params(base(), &s).trainable, enumerated - n);

    let pair = count_system(base(), &[&set(NoiseScenario::Full, 1), &set(NoiseScenario::Full, 2)]);
    assert_eq!(pair.trainable, 2 * enumerated);
    assert_eq!(pair.total, 2 * enumerated + base_total);
}

#[test]
fn doubling_rank_doubles_delta_count() {
    let fusion = FusionConfig::default();
    let count = |r| {
        let s = AdapterSet::new(base(), NoiseScenario::Full, LoraConfig { rank: r, alpha: r as f32 }, fusion.clone(), 0).unwrap();
        count_params(base(), &s).trainable - s.fusion.params.numel()
    };
    assert_eq!(count(8), 2 * count(4));
    assert_eq!(count(4), 24 * 4 * (64 + 64));
}

fn clip() -> (MelSpectrogram, LipFrameSequence) {
    (mel(99, 120), synth_video("red sky", 120 * 160 + 240, 1).unwrap())
}

#[test]
fn swaps_are_stateless_and_move_only_adapter_bytes() {
    let mut reg = AdapterRegistry::new(base().clone());
    let scenarios = [
        NoiseScenario::Category(NoiseCategory::Music),
        NoiseScenario::Level(NoiseLevel::HighNoise),
    ];
    for (k, sc) in scenarios.iter().enumerate() {
        let mut s = set(*sc, k as u64);
        s.randomize_deltas(10 + k as u64, 0.05);
        reg.insert(s).unwrap();
    }
    let hashes = reg.base_hashes();
    let (m, v) = clip();
    let run = |sc| reg.swap_and_run(sc, |a| a.fuse(&m, &v).and_then(|f| a.encode(&f))).unwrap();
    let first = run(scenarios[0]);
    let other = run(scenarios[1]);
    let again = run(scenarios[0]);
    assert_eq!(first, again);
    assert_ne!(first, other);
    let expect = reg.get(scenarios[1]).unwrap().serialized_size();
    assert_eq!(reg.swap(scenarios[1]).unwrap(), expect);
    assert_eq!(reg.base_hashes(), hashes);
    assert!(reg.swap(NoiseScenario::Full).is_err());
}
