//! Noise-scenario classifier and the routing policy that picks an adapter
//! set per utterance.

mod classifier;
mod routing;

pub use classifier::{
    evaluate_classifier, fit_frames, make_classifier_data, train_classifier, ClassifierExample, ClassifierMetrics,
    ClassifierOutput, ClassifierTrainConfig, Head, NoiseClassifier, INPUT_FRAMES, LEVEL_THRESHOLD_DB, MIN_FRAMES,
};
pub use routing::{
    infer_routed, infer_routed_mel, route, write_decisions, ClassifierPair, DecisionRecord, OracleClassifier,
    RouteMode, RoutingDecision, ScenarioClassifier,
};
