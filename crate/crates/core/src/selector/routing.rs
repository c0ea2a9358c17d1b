use std::io::Write;

use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierOutput, NoiseClassifier, LEVEL_THRESHOLD_DB};
use crate::asr::argmax;
use crate::error::{Error, Result};
use crate::registry::AdapterRegistry;
use crate::signal::{log_mel, MelSpectrogram, NoiseCategory, NoiseLevel, NoiseScenario, Waveform};
use crate::video::LipFrameSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteMode {
    Category,
    Level,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub mode: RouteMode,
    pub predicted_category: Option<NoiseCategory>,
    pub predicted_snr_db: Option<f64>,
    pub chosen_set: NoiseScenario,
}

/// Anything that can estimate the noise scenario of a noisy mel.
pub trait ScenarioClassifier: Sync {
    fn classify(&self, mel: &MelSpectrogram) -> Result<ClassifierOutput>;
}

impl ScenarioClassifier for NoiseClassifier {
    fn classify(&self, mel: &MelSpectrogram) -> Result<ClassifierOutput> {
        NoiseClassifier::classify(self, mel)
    }
}

/// Category distribution from one network, SNR from another.
pub struct ClassifierPair {
    pub category: NoiseClassifier,
    pub snr: NoiseClassifier,
}

impl ScenarioClassifier for ClassifierPair {
    fn classify(&self, mel: &MelSpectrogram) -> Result<ClassifierOutput> {
        let c = self.category.classify(mel)?;
        let s = self.snr.classify(mel)?;
        Ok(ClassifierOutput {
            category_probs: c.category_probs,
            snr_db: s.snr_db,
        })
    }
}

/// Reports the true scenario: a one-hot category and the exact SNR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleClassifier {
    pub category: NoiseCategory,
    pub snr_db: f64,
}

impl ScenarioClassifier for OracleClassifier {
    fn classify(&self, _: &MelSpectrogram) -> Result<ClassifierOutput> {
        let mut p = [0.0; 4];
        p[self.category.index()] = 1.0;
        Ok(ClassifierOutput {
            category_probs: p,
            snr_db: self.snr_db as f32,
        })
    }
}

/// Category mode: argmax of the distribution, ties to the lowest index.
/// Level mode: HighNoise strictly below 5 dB, LowNoise otherwise.
pub fn route(mode: RouteMode, out: &ClassifierOutput, registry: &AdapterRegistry) -> Result<RoutingDecision> {
    let decision = match mode {
        RouteMode::Category => {
            let c = NoiseCategory::ALL[argmax(&out.category_probs)];
            RoutingDecision {
                mode,
                predicted_category: Some(c),
                predicted_snr_db: None,
                chosen_set: NoiseScenario::Category(c),
            }
        }
        RouteMode::Level => {
            let snr = out.snr_db as f64;
            let level = if snr < LEVEL_THRESHOLD_DB {
                NoiseLevel::HighNoise
            } else {
                NoiseLevel::LowNoise
            };
            RoutingDecision {
                mode,
                predicted_category: None,
                predicted_snr_db: Some(snr),
                chosen_set: NoiseScenario::Level(level),
            }
        }
    };
    if !registry.contains(decision.chosen_set) {
        return Err(Error::Adapter(format!(
            "registry has no {} set for {mode:?} routing",
            decision.chosen_set
        )));
    }
    Ok(decision)
}

/// Routed recognition from a precomputed noisy mel: classify, route, swap
/// the chosen set in, then fuse and decode under the same lock.
pub fn infer_routed_mel(
    registry: &AdapterRegistry,
    clf: &dyn ScenarioClassifier,
    mel: &MelSpectrogram,
    video: &LipFrameSequence,
    mode: RouteMode,
) -> Result<(String, RoutingDecision, ClassifierOutput)> {
    let out = clf.classify(mel)?;
    let decision = route(mode, &out, registry)?;
    let text = registry.swap_and_run(decision.chosen_set, |m| m.transcribe(mel, video))?;
    Ok((text, decision, out))
}

pub fn infer_routed(
    registry: &AdapterRegistry,
    clf: &dyn ScenarioClassifier,
    noisy: &Waveform,
    video: &LipFrameSequence,
    mode: RouteMode,
) -> Result<(String, RoutingDecision)> {
    let mel = log_mel(noisy)?;
    let (text, d, _) = infer_routed_mel(registry, clf, &mel, video, mode)?;
    Ok((text, d))
}

/// One line of the routing log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: String,
    pub mode: RouteMode,
    pub category_probs: [f32; 4],
    pub snr_est: f32,
    pub chosen_set: NoiseScenario,
}

pub fn write_decisions<W: Write>(mut w: W, records: &[DecisionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
