//! Injects a low-rank adapter set into a frozen base, checks the zero-init
//! identity, then merges a randomized set and compares both forward paths.
use avsr::asr::{AsrConfig, AsrModel};
use avsr::fusion::FusionConfig;
use avsr::lora::{count_params, inject, merge, AdapterSet, LoraConfig};
use avsr::signal::{log_mel, synth_utterance, NoiseScenario};

fn main() -> avsr::Result<()> {
    let base = AsrModel::new(AsrConfig::default(), 0)?;
    let mel = log_mel(&synth_utterance("blue sky", 2)?)?;
    let mut set = AdapterSet::new(&base, NoiseScenario::Full, LoraConfig::default(), FusionConfig::default(), 1)?;

    let fresh = inject(&base, &set)?.encode(&mel)?;
    let bare = base.encode(&mel)?;
    println!("fresh set vs base: max diff {:.1e}", fresh.frames.max_abs_diff(&bare.frames));

    set.randomize_deltas(5, 0.05);
    let injected = inject(&base, &set)?.encode(&mel)?;
    let merged = merge(&base, &set)?.encode(&mel)?;
    println!(
        "random set, merged vs injected: max diff {:.1e} (output scale {:.2})",
        merged.frames.max_abs_diff(&injected.frames),
        injected.frames.max_abs()
    );
    let c = count_params(&base, &set);
    println!("{} sites, TrP {} / ToP {}", set.targets().len(), c.trainable, c.total);
    Ok(())
}
