//! End-to-end experiment steps over a work directory: corpus synthesis,
//! base training, adapter distillation, classifier training, grid
//! evaluation and parameter reports. All I/O goes through the paths of a
//! [`Workspace`].

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::asr::{train_base, AsrModel, BaseExample, BaseTrainReport};
use crate::checkpoint;
use crate::config::{RunConfig, RunInfo};
use crate::corpus::{self, generate_corpus, AvSample, ManifestRecord};
use crate::distill::{cache_targets, train_adapters, CachedSample, DistillData, MetricsRow, TrainLog};
use crate::error::{Error, Result};
use crate::evalkit::{eval_grid_many, NoisyUtterance, ParamColumns, Recognizer, WerReport};
use crate::lora::{count_params, count_system, inject, AdapterSet};
use crate::registry::AdapterRegistry;
use crate::seed;
use crate::selector::{
    evaluate_classifier, infer_routed_mel, make_classifier_data, train_classifier, ClassifierMetrics, DecisionRecord,
    Head, NoiseClassifier, OracleClassifier, RouteMode, ScenarioClassifier,
};
use crate::signal::{log_mel, NoiseBank, NoiseCategory, NoiseClip, NoiseLevel, NoiseScenario, NoiseSplits, Split};

/// Layout of one experiment's artifacts.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn noise_dir(&self) -> PathBuf {
        self.root.join("noise")
    }

    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn adapter_dir(&self, scenario: NoiseScenario) -> PathBuf {
        self.root.join("adapters").join(scenario.id())
    }

    pub fn classifier_dir(&self, head: Head) -> PathBuf {
        self.root.join("classifier").join(match head {
            Head::Category => "category",
            Head::Snr => "snr",
        })
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Missing(path))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test: usize,
    /// Noise clips per split: train, val, test.
    pub noise: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NoiseRecord {
    id: String,
    category: NoiseCategory,
    split: Split,
    path: String,
}

/// Writes the train and test corpora (one manifest, `train + test` lines)
/// and the partitioned noise bank.
pub fn synth(ws: &Workspace, info: &RunInfo) -> Result<SynthSummary> {
    let cfg = &info.config;
    cfg.validate()?;
    let dir = ws.corpus_dir();
    let train = generate_corpus("train", cfg.train_size, cfg.seed)?;
    let test = generate_corpus("test", cfg.test_size, cfg.seed)?;
    let mut records: Vec<ManifestRecord> = corpus::write_samples(&dir, &train, Split::Train)?;
    records.extend(corpus::write_samples(&dir, &test, Split::Test)?);
    corpus::write_manifest(&corpus::manifest_path(&dir), &records)?;
    info.write(&dir)?;

    let splits = NoiseBank::generate(cfg.noise_clips_per_category, seed::derive(cfg.seed, &[seed::tag("noise")]))?;
    write_noise(&ws.noise_dir(), &splits)?;
    info.write(&ws.noise_dir())?;
    Ok(SynthSummary {
        train: train.len(),
        test: test.len(),
        noise: (splits.train.all().count(), splits.val.all().count(), splits.test.all().count()),
    })
}

pub fn write_noise(dir: &Path, splits: &NoiseSplits) -> Result<()> {
    let mut records = Vec::new();
    for bank in [&splits.train, &splits.val, &splits.test] {
        let sub = dir.join(bank.split.name());
        fs::create_dir_all(&sub)?;
        for clip in bank.all() {
            let path = format!("{}/{}.f32", bank.split.name(), clip.id);
            corpus::write_f32(&dir.join(&path), clip.wave.samples())?;
            records.push(NoiseRecord {
                id: clip.id.clone(),
                category: clip.category,
                split: bank.split,
                path,
            });
        }
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        std::io::Write::write_all(&mut w, b"\n")?;
    }
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn load_noise(ws: &Workspace) -> Result<NoiseSplits> {
    let dir = ws.noise_dir();
    let text = fs::read_to_string(require(dir.join("manifest.jsonl"))?)?;
    let mut splits = NoiseSplits {
        train: NoiseBank::empty(Split::Train),
        val: NoiseBank::empty(Split::Val),
        test: NoiseBank::empty(Split::Test),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: NoiseRecord = serde_json::from_str(line)?;
        let clip = NoiseClip {
            wave: corpus::read_waveform(&dir.join(&r.path))?,
            id: r.id,
            category: r.category,
        };
        match r.split {
            Split::Train => splits.train.push(clip),
            Split::Val => splits.val.push(clip),
            Split::Test => splits.test.push(clip),
        }
    }
    Ok(splits)
}

pub fn load_corpus(ws: &Workspace, split: Split) -> Result<Vec<AvSample>> {
    let dir = ws.corpus_dir();
    require(corpus::manifest_path(&dir))?;
    corpus::load_split(&dir, split)
}

/// In-memory corpora that never touch disk: the first-stage pre-training
/// corpus and the validation corpus.
pub fn pretrain_corpus(cfg: &RunConfig) -> Result<Vec<AvSample>> {
    generate_corpus("pretrain", cfg.pretrain_size, cfg.seed)
}

pub fn val_corpus(cfg: &RunConfig) -> Result<Vec<AvSample>> {
    generate_corpus("val", cfg.val_size, cfg.seed)
}

fn base_examples(samples: &[AvSample]) -> Result<Vec<BaseExample>> {
    samples
        .iter()
        .map(|s| {
            Ok(BaseExample {
                mel: log_mel(&s.audio)?.frames,
                text: s.text.clone(),
            })
        })
        .collect()
}

/// Supervised clean-audio training of the base recognizer; held-out WER is
/// measured on the validation corpus.
pub fn train_base_stage(ws: &Workspace, info: &RunInfo) -> Result<(AsrModel, BaseTrainReport)> {
    let cfg = &info.config;
    let train = load_corpus(ws, Split::Train)?;
    let heldout = val_corpus(cfg)?;
    let (model, report) = train_base(&base_examples(&train)?, &base_examples(&heldout)?, &cfg.base)?;
    let dir = ws.base_dir();
    checkpoint::save(
        &dir,
        &model.params,
        serde_json::json!({ "kind": "base", "model": model.config, "heldout_wer": report.heldout_wer }),
    )?;
    write_json(&dir.join("metrics.json"), &report)?;
    info.write(&dir)?;
    Ok((model, report))
}

pub fn load_base(ws: &Workspace, cfg: &RunConfig) -> Result<AsrModel> {
    let dir = require(ws.base_dir())?;
    let (params, _) = checkpoint::load(&dir)?;
    AsrModel::from_params(cfg.base.model.clone(), params)
}

/// Teacher targets for the three distillation corpora.
pub struct DistillCorpora {
    pub pretrain: Vec<CachedSample>,
    pub main: Vec<CachedSample>,
    pub val: Vec<CachedSample>,
}

impl DistillCorpora {
    pub fn prepare(ws: &Workspace, cfg: &RunConfig, base: &AsrModel) -> Result<Self> {
        let main = load_corpus(ws, Split::Train)?;
        Ok(DistillCorpora {
            pretrain: cache_targets(base, &pretrain_corpus(cfg)?)?,
            main: cache_targets(base, &main)?,
            val: cache_targets(base, &val_corpus(cfg)?)?,
        })
    }
}

pub fn adapter_seed(cfg: &RunConfig, scenario: NoiseScenario) -> u64 {
    seed::derive(cfg.seed, &[seed::tag("adapter-init"), seed::tag(scenario.id())])
}

/// Distills one adapter set. On a numeric failure the last good state is
/// saved under `last-good/` before the error is returned.
pub fn train_adapter_stage(
    ws: &Workspace,
    info: &RunInfo,
    base: &AsrModel,
    scenario: NoiseScenario,
    corpora: &DistillCorpora,
    noise: &NoiseSplits,
    progress: impl FnMut(&MetricsRow),
) -> Result<(AdapterSet, TrainLog)> {
    let cfg = &info.config;
    let mut set = AdapterSet::new(base, scenario, cfg.lora, cfg.fusion.clone(), adapter_seed(cfg, scenario))?;
    let data = DistillData {
        pretrain: &corpora.pretrain,
        main: &corpora.main,
        val: &corpora.val,
        train_noise: &noise.train,
        val_noise: &noise.val,
    };
    let dir = ws.adapter_dir(scenario);
    let log = match train_adapters(base, &mut set, &data, &cfg.schedule, progress) {
        Ok(log) => log,
        Err(e) => {
            set.save(&dir.join("last-good"))?;
            info.write(&dir)?;
            return Err(e);
        }
    };
    set.save(&dir)?;
    log.write_csv(fs::File::create(dir.join("metrics.csv"))?)?;
    write_json(&dir.join("validation.json"), &log.validation)?;
    info.write(&dir)?;
    Ok((set, log))
}

pub fn load_adapters(ws: &Workspace, scenario: NoiseScenario) -> Result<AdapterSet> {
    AdapterSet::load(&require(ws.adapter_dir(scenario))?)
}

/// Builds the classifier data once (train noise for training, validation
/// noise for metrics) and trains each requested head on it.
pub fn train_classifier_stage(
    ws: &Workspace,
    info: &RunInfo,
    heads: &[Head],
) -> Result<Vec<(NoiseClassifier, ClassifierMetrics)>> {
    let cfg = &info.config;
    let (train, val, noise) = (load_corpus(ws, Split::Train)?, val_corpus(cfg)?, load_noise(ws)?);
    let clean_prob = cfg.schedule.clean_prob;
    let data_seed = seed::derive(cfg.seed, &[seed::tag("classifier-data")]);
    let train_x = make_classifier_data(&train, &noise.train, cfg.classifier_train_size, clean_prob, data_seed)?;
    let val_x = make_classifier_data(&val, &noise.val, cfg.classifier_val_size, 0.0, data_seed ^ 1)?;
    heads
        .iter()
        .map(|&head| {
            let (clf, metrics) = train_classifier(head, &train_x, &val_x, &cfg.classifier)?;
            let dir = ws.classifier_dir(head);
            clf.save(&dir, head, Some(&metrics))?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            info.write(&dir)?;
            Ok((clf, metrics))
        })
        .collect()
}

pub fn load_classifier(ws: &Workspace, head: Head) -> Result<NoiseClassifier> {
    let (clf, saved) = NoiseClassifier::load(&require(ws.classifier_dir(head))?)?;
    if saved != head {
        return Err(Error::Checkpoint(format!("classifier at {} was trained for the {saved:?} head", ws.classifier_dir(head).display())));
    }
    Ok(clf)
}

/// Re-scores a trained classifier on fresh validation data.
pub fn classifier_metrics(ws: &Workspace, cfg: &RunConfig, clf: &NoiseClassifier, head: Head) -> Result<ClassifierMetrics> {
    let noise = load_noise(ws)?;
    let data_seed = seed::derive(cfg.seed, &[seed::tag("classifier-data")]);
    let val = make_classifier_data(&val_corpus(cfg)?, &noise.val, cfg.classifier_val_size, 0.0, data_seed ^ 1)?;
    evaluate_classifier(clf, head, &val)
}

/// A row of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemSpec {
    Base,
    Direct(NoiseScenario),
    Routed { mode: RouteMode, oracle: bool },
}

impl SystemSpec {
    pub fn id(self) -> String {
        match self {
            SystemSpec::Base => "base".into(),
            SystemSpec::Direct(s) => s.id().into(),
            SystemSpec::Routed { mode, oracle } => {
                let m = match mode {
                    RouteMode::Category => "routed-category",
                    RouteMode::Level => "routed-level",
                };
                if oracle {
                    format!("{m}-oracle")
                } else {
                    m.into()
                }
            }
        }
    }

    /// Adapter sets the system needs.
    pub fn scenarios(self) -> Vec<NoiseScenario> {
        match self {
            SystemSpec::Base => vec![],
            SystemSpec::Direct(s) => vec![s],
            SystemSpec::Routed { mode, .. } => routed_scenarios(mode),
        }
    }
}

pub fn routed_scenarios(mode: RouteMode) -> Vec<NoiseScenario> {
    match mode {
        RouteMode::Category => NoiseCategory::ALL.iter().map(|c| NoiseScenario::Category(*c)).collect(),
        RouteMode::Level => vec![
            NoiseScenario::Level(NoiseLevel::HighNoise),
            NoiseScenario::Level(NoiseLevel::LowNoise),
        ],
    }
}

pub struct EvalOutcome {
    pub report: WerReport,
    pub params: BTreeMap<String, ParamColumns>,
    /// Routing log per routed system, sorted by record id.
    pub decisions: BTreeMap<String, Vec<DecisionRecord>>,
}

fn columns(c: crate::lora::ParamCount) -> ParamColumns {
    ParamColumns {
        trainable: c.trainable,
        total: c.total,
    }
}

/// Parameter columns for each system, from the sets on disk.
pub fn param_table(ws: &Workspace, cfg: &RunConfig, systems: &[SystemSpec]) -> Result<BTreeMap<String, ParamColumns>> {
    let base = load_base(ws, cfg)?;
    let mut sets = BTreeMap::new();
    for s in systems.iter().flat_map(|s| s.scenarios()) {
        if let std::collections::btree_map::Entry::Vacant(e) = sets.entry(s) {
            e.insert(load_adapters(ws, s)?);
        }
    }
    Ok(systems
        .iter()
        .map(|sys| {
            let c = match sys {
                SystemSpec::Base => ParamColumns {
                    trainable: 0,
                    total: base.param_count(),
                },
                _ => {
                    let group: Vec<&AdapterSet> = sys.scenarios().iter().map(|s| &sets[s]).collect();
                    columns(count_system(&base, &group))
                }
            };
            (sys.id(), c)
        })
        .collect())
}

/// Scores every system on the test grid with shared noisy inputs. Routed
/// systems swap sets per utterance through one registry and log each
/// decision.
pub fn evaluate(ws: &Workspace, cfg: &RunConfig, systems: &[SystemSpec]) -> Result<EvalOutcome> {
    let base = load_base(ws, cfg)?;
    let test = load_corpus(ws, Split::Test)?;
    let noise = load_noise(ws)?;
    let mut registry = AdapterRegistry::new(base.clone());
    for s in systems.iter().flat_map(|s| s.scenarios()) {
        if !registry.contains(s) {
            registry.insert(load_adapters(ws, s)?)?;
        }
    }
    let mut classifiers: BTreeMap<Head, NoiseClassifier> = BTreeMap::new();
    for sys in systems {
        if let SystemSpec::Routed { mode, oracle: false } = sys {
            let head = match mode {
                RouteMode::Category => Head::Category,
                RouteMode::Level => Head::Snr,
            };
            if let std::collections::btree_map::Entry::Vacant(e) = classifiers.entry(head) {
                e.insert(load_classifier(ws, head)?);
            }
        }
    }
    let logs: Vec<Mutex<Vec<DecisionRecord>>> = systems.iter().map(|_| Mutex::new(Vec::new())).collect();
    let mut recognizers: Vec<Box<dyn Recognizer + '_>> = Vec::new();
    for (k, sys) in systems.iter().enumerate() {
        let log = &logs[k];
        let r: Box<dyn Recognizer> = match *sys {
            SystemSpec::Base => {
                let b = &base;
                Box::new(move |u: &NoisyUtterance| b.transcribe(u.mel))
            }
            SystemSpec::Direct(s) => {
                let model = inject(&base, registry.get(s).expect("inserted above"))?;
                Box::new(move |u: &NoisyUtterance| model.transcribe(u.mel, u.video))
            }
            SystemSpec::Routed { mode, oracle } => {
                let reg = &registry;
                let clf: Option<&NoiseClassifier> = if oracle {
                    None
                } else {
                    classifiers.get(&match mode {
                        RouteMode::Category => Head::Category,
                        RouteMode::Level => Head::Snr,
                    })
                };
                Box::new(move |u: &NoisyUtterance| {
                    let stub = OracleClassifier {
                        category: u.category,
                        snr_db: u.snr_db,
                    };
                    let c: &dyn ScenarioClassifier = match clf {
                        Some(c) => c,
                        None => &stub,
                    };
                    let (text, decision, out) = infer_routed_mel(reg, c, u.mel, u.video, mode)?;
                    log.lock().expect("decision log").push(DecisionRecord {
                        id: format!("{}@{}{:+}", u.id, u.category, u.snr_db),
                        mode,
                        category_probs: out.category_probs,
                        snr_est: out.snr_db,
                        chosen_set: decision.chosen_set,
                    });
                    Ok(text)
                })
            }
        };
        recognizers.push(r);
    }
    let ids: Vec<String> = systems.iter().map(|s| s.id()).collect();
    let named: Vec<(&str, &dyn Recognizer)> = ids
        .iter()
        .zip(&recognizers)
        .map(|(id, r)| (id.as_str(), r.as_ref()))
        .collect();
    let grid_seed = seed::derive(cfg.seed, &[seed::tag("eval")]);
    let reports = eval_grid_many(&named, &test, &noise.test, &NoiseCategory::ALL, &cfg.eval_snrs, grid_seed)?;
    drop(recognizers);
    let mut decisions = BTreeMap::new();
    for (sys, log) in systems.iter().zip(logs) {
        if matches!(sys, SystemSpec::Routed { .. }) {
            let mut d = log.into_inner().expect("decision log");
            d.sort_by(|a, b| a.id.cmp(&b.id));
            decisions.insert(sys.id(), d);
        }
    }
    let mut params = BTreeMap::new();
    for sys in systems {
        let c = match sys {
            SystemSpec::Base => ParamColumns {
                trainable: 0,
                total: base.param_count(),
            },
            SystemSpec::Direct(s) => columns(count_params(&base, registry.get(*s).expect("inserted"))),
            SystemSpec::Routed { mode, .. } => {
                let group: Vec<&AdapterSet> = routed_scenarios(*mode)
                    .iter()
                    .map(|s| registry.get(*s).expect("inserted"))
                    .collect();
                columns(count_system(&base, &group))
            }
        };
        params.insert(sys.id(), c);
    }
    Ok(EvalOutcome {
        report: WerReport::merge(reports),
        params,
        decisions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Writes `wer.csv` or `wer.md` plus one `decisions-<system>.jsonl` per
/// routed system; returns the report path.
pub fn write_outcome(dir: &Path, outcome: &EvalOutcome, format: ReportFormat, info: &RunInfo) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = match format {
        ReportFormat::Csv => {
            let p = dir.join("wer.csv");
            outcome.report.write_csv(fs::File::create(&p)?)?;
            p
        }
        ReportFormat::Markdown => {
            let p = dir.join("wer.md");
            fs::write(&p, outcome.report.to_markdown(&outcome.params))?;
            p
        }
    };
    for (id, records) in &outcome.decisions {
        crate::selector::write_decisions(
            BufWriter::new(fs::File::create(dir.join(format!("decisions-{id}.jsonl")))?),
            records,
        )?;
    }
    info.write(dir)?;
    Ok(path)
}
