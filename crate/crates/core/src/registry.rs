//! Hot-swappable adapter slot over one frozen recognizer.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use crate::asr::AsrModel;
use crate::error::{Error, Result};
use crate::lora::{inject, validate, AdaptedModel, AdapterSet};
use crate::params::Role;
use crate::signal::NoiseScenario;

/// Stored adapter sets plus one active slot. Inference holds a read lock;
/// a swap holds the write lock, so no inference runs while tensors change.
pub struct AdapterRegistry {
    base: AsrModel,
    sets: BTreeMap<NoiseScenario, AdapterSet>,
    slot: RwLock<Option<AdapterSet>>,
}

impl AdapterRegistry {
    pub fn new(base: AsrModel) -> Self {
        AdapterRegistry {
            base,
            sets: BTreeMap::new(),
            slot: RwLock::new(None),
        }
    }

    pub fn insert(&mut self, set: AdapterSet) -> Result<()> {
        validate(&self.base, &set)?;
        self.sets.insert(set.scenario, set);
        Ok(())
    }

    pub fn base(&self) -> &AsrModel {
        &self.base
    }

    pub fn contains(&self, scenario: NoiseScenario) -> bool {
        self.sets.contains_key(&scenario)
    }

    pub fn scenarios(&self) -> Vec<NoiseScenario> {
        self.sets.keys().copied().collect()
    }

    pub fn get(&self, scenario: NoiseScenario) -> Option<&AdapterSet> {
        self.sets.get(&scenario)
    }

    pub fn active(&self) -> Option<NoiseScenario> {
        self.slot.read().expect("registry lock").as_ref().map(|s| s.scenario)
    }

    pub fn base_hashes(&self) -> BTreeMap<String, String> {
        self.base.params.hashes(Role::Base)
    }

    fn load_into(&self, slot: &mut Option<AdapterSet>, scenario: NoiseScenario) -> Result<usize> {
        let src = self
            .sets
            .get(&scenario)
            .ok_or_else(|| Error::Adapter(format!("no adapter set for scenario {scenario}")))?;
        match slot {
            Some(active) => {
                let mut bytes = active.deltas.overwrite_from(&src.deltas)?;
                bytes += active.fusion.params.overwrite_from(&src.fusion.params)?;
                active.scenario = src.scenario;
                active.lora = src.lora;
                active.mask.clone_from(&src.mask);
                Ok(bytes)
            }
            None => {
                *slot = Some(src.clone());
                Ok(src.serialized_size())
            }
        }
    }

    /// Makes `scenario` the active set, rewriting only adapter and fusion
    /// tensors. Returns the number of bytes written.
    pub fn swap(&self, scenario: NoiseScenario) -> Result<usize> {
        let mut slot = self.slot.write().expect("registry lock");
        self.load_into(&mut slot, scenario)
    }

    /// Runs `f` on the active set under a read lock.
    pub fn with_active<R>(&self, f: impl FnOnce(&AdaptedModel) -> Result<R>) -> Result<R> {
        let slot = self.slot.read().expect("registry lock");
        let set = slot
            .as_ref()
            .ok_or_else(|| Error::Adapter("no adapter set is active".into()))?;
        f(&inject(&self.base, set)?)
    }

    /// Swap followed by `f`, both under the write lock so the pair is
    /// atomic with respect to other callers.
    pub fn swap_and_run<R>(&self, scenario: NoiseScenario, f: impl FnOnce(&AdaptedModel) -> Result<R>) -> Result<R> {
        let mut slot = self.slot.write().expect("registry lock");
        self.load_into(&mut slot, scenario)?;
        let set = slot.as_ref().expect("just loaded");
        f(&inject(&self.base, set)?)
    }

    /// Bytes the active slot's tensors occupy when serialized.
    pub fn active_bytes(&self) -> usize {
        self.slot
            .read()
            .expect("registry lock")
            .as_ref()
            .map_or(0, AdapterSet::serialized_size)
    }

    pub fn scales(&self) -> Option<HashMap<String, f32>> {
        self.slot.read().expect("registry lock").as_ref().map(AdapterSet::scales)
    }
}
