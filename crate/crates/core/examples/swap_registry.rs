//! Swaps adapter sets in a registry and reports the bytes each swap rewrites
//! next to the size of the frozen base.
use avsr::asr::{AsrConfig, AsrModel};
use avsr::checkpoint::serialized_size;
use avsr::fusion::FusionConfig;
use avsr::lora::{AdapterSet, LoraConfig};
use avsr::registry::AdapterRegistry;
use avsr::signal::{NoiseCategory, NoiseLevel, NoiseScenario};

fn main() -> avsr::Result<()> {
    let base = AsrModel::new(AsrConfig::default(), 0)?;
    let mut registry = AdapterRegistry::new(base.clone());
    for (k, s) in NoiseScenario::ALL.into_iter().enumerate() {
        registry.insert(AdapterSet::new(&base, s, LoraConfig::default(), FusionConfig::default(), k as u64)?)?;
    }
    let before = registry.base_hashes();
    for s in [
        NoiseScenario::Category(NoiseCategory::Babble),
        NoiseScenario::Level(NoiseLevel::LowNoise),
        NoiseScenario::Full,
    ] {
        let bytes = registry.swap(s)?;
        println!("swap to {s:<12} rewrote {bytes} bytes");
    }
    println!(
        "base is {} bytes and unchanged: {}",
        serialized_size(&base.params),
        registry.base_hashes() == before
    );
    Ok(())
}
