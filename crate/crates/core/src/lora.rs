//! Low-rank adapter sets: deltas on every attention projection of the
//! recognizer, bundled with a fusion module, plus injection, merging and
//! parameter accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::asr::{AsrModel, EncoderEmbedding, LogitSequence, Tokenizer};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModule};
use crate::nn::Binder;
use crate::params::{Param, ParamStore, Role};
use crate::seed;
use crate::signal::{MelSpectrogram, NoiseScenario};
use crate::tensor::Mat;
use crate::video::LipFrameSequence;

pub const INIT_STD_A: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 4.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Materialized view of one layer's delta `(alpha / r) · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    pub target: String,
    /// `r × d_in`.
    pub a: Mat<f32>,
    /// `d_out × r`.
    pub b: Mat<f32>,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraDelta {
    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    /// The dense `d_out × d_in` weight delta.
    pub fn weight_delta(&self) -> Mat<f32> {
        let mut d = self.b.matmul(&self.a, false, false);
        let s = self.alpha / self.rank as f32;
        for v in d.data.iter_mut() {
            *v *= s;
        }
        d
    }
}

/// The swappable unit: one delta per wrapped layer plus a fusion module.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub scenario: NoiseScenario,
    pub lora: LoraConfig,
    /// `{target}.lora_a` / `{target}.lora_b`, role `Adapter`.
    pub deltas: ParamStore,
    pub fusion: FusionModule,
    /// Per-tensor trainability; tensors absent from the map are frozen.
    pub mask: BTreeMap<String, bool>,
}

impl AdapterSet {
    /// Fresh set for every attention projection of `base`: `A ~ N(0, 0.02)`,
    /// `B = 0`, everything trainable.
    pub fn new(
        base: &AsrModel,
        scenario: NoiseScenario,
        lora: LoraConfig,
        fusion: FusionConfig,
        seed: u64,
    ) -> Result<Self> {
        if lora.rank == 0 {
            return Err(Error::Adapter("rank must be at least 1".into()));
        }
        let mut rng = seed::rng_for(seed, &[seed::tag("lora-init")]);
        let mut deltas = ParamStore::new();
        for target in base.attention_projections() {
            let (d_out, d_in) = weight_dims(base, &target)?;
            deltas.insert_normal(&mut rng, &format!("{target}.lora_a"), &[lora.rank, d_in], Role::Adapter, INIT_STD_A)?;
            deltas.insert_const(&format!("{target}.lora_b"), &[d_out, lora.rank], Role::Adapter, 0.0)?;
        }
        let fusion = FusionModule::new(fusion, seed::derive(seed, &[seed::tag("fusion")]))?;
        let mask = deltas
            .iter()
            .chain(fusion.params.iter())
            .map(|p| (p.name.clone(), true))
            .collect();
        Ok(AdapterSet {
            scenario,
            lora,
            deltas,
            fusion,
            mask,
        })
    }

    /// Layers carrying a delta, in serialization order.
    pub fn targets(&self) -> Vec<String> {
        self.deltas
            .iter()
            .filter_map(|p| p.name.strip_suffix(".lora_a").map(str::to_string))
            .collect()
    }

    pub fn delta(&self, target: &str) -> Option<LoraDelta> {
        let a = self.deltas.get(&format!("{target}.lora_a"))?;
        let b = self.deltas.get(&format!("{target}.lora_b"))?;
        Some(LoraDelta {
            target: target.to_string(),
            a: a.to_mat(),
            b: b.to_mat(),
            rank: self.lora.rank,
            alpha: self.lora.alpha,
        })
    }

    pub fn deltas(&self) -> Vec<LoraDelta> {
        self.targets().iter().filter_map(|t| self.delta(t)).collect()
    }

    pub fn scales(&self) -> HashMap<String, f32> {
        let s = self.lora.scale();
        self.targets().into_iter().map(|t| (t, s)).collect()
    }

    pub fn is_trainable(&self, p: &Param) -> bool {
        self.mask.get(&p.name).copied().unwrap_or(false)
    }

    /// Every adapter and fusion tensor.
    pub fn tensors(&self) -> impl Iterator<Item = &Param> {
        self.deltas.iter().chain(self.fusion.params.iter())
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = self.deltas.clone();
        s.extend(self.fusion.params.clone()).expect("disjoint name spaces");
        s
    }

    pub fn serialized_size(&self) -> usize {
        checkpoint::serialized_size(&self.deltas) + checkpoint::serialized_size(&self.fusion.params)
    }

    /// Replaces every `B` with Gaussian noise; the fresh-set `B = 0` makes
    /// the deltas invisible, which is useless for equivalence tests.
    pub fn randomize_deltas(&mut self, seed: u64, std: f32) {
        let mut rng = seed::rng_for(seed, &[seed::tag("lora-randomize")]);
        let dist = Normal::new(0.0f32, std).expect("valid std");
        for p in self.deltas.iter_mut() {
            if p.name.ends_with(".lora_b") {
                for v in p.data.iter_mut() {
                    *v = dist.sample(&mut rng);
                }
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "adapter-set",
            "scenario": self.scenario,
            "lora": self.lora,
            "fusion": self.fusion.config,
            "mask": self.mask,
        });
        checkpoint::save(dir, &self.to_store(), meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load(dir)?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("adapter set metadata lacks {k:?}")))
        };
        let scenario: NoiseScenario = serde_json::from_value(field("scenario")?)?;
        let lora: LoraConfig = serde_json::from_value(field("lora")?)?;
        let fusion_cfg: FusionConfig = serde_json::from_value(field("fusion")?)?;
        let mask: BTreeMap<String, bool> = serde_json::from_value(field("mask")?)?;
        let mut deltas = ParamStore::new();
        let mut fusion = ParamStore::new();
        for p in store.iter() {
            let dst = match p.role {
                Role::Adapter => &mut deltas,
                Role::Fusion => &mut fusion,
                r => return Err(Error::Checkpoint(format!("{}: unexpected role {r:?}", p.name))),
            };
            dst.insert(&p.name, &p.shape, p.role, p.data.clone())?;
        }
        let reference = FusionModule::new(fusion_cfg.clone(), 0)?;
        if reference.params.len() != fusion.len() {
            return Err(Error::Checkpoint("fusion weights incomplete".into()));
        }
        Ok(AdapterSet {
            scenario,
            lora,
            deltas,
            fusion: FusionModule {
                config: fusion_cfg,
                params: fusion,
            },
            mask,
        })
    }
}

fn weight_dims(base: &AsrModel, target: &str) -> Result<(usize, usize)> {
    let w = base
        .params
        .get(&format!("{target}.weight"))
        .ok_or_else(|| Error::Adapter(format!("base has no layer {target}")))?;
    Ok(w.dims())
}

/// Checks that `set` wraps exactly the attention projections of `base` with
/// correctly shaped deltas.
pub fn validate(base: &AsrModel, set: &AdapterSet) -> Result<()> {
    let want: BTreeSet<String> = base.attention_projections().into_iter().collect();
    let have: BTreeSet<String> = set.targets().into_iter().collect();
    if let Some(m) = want.difference(&have).next() {
        return Err(Error::Adapter(format!("no delta for {m}")));
    }
    if let Some(e) = have.difference(&want).next() {
        return Err(Error::Adapter(format!("delta for unknown layer {e}")));
    }
    for t in &want {
        let (d_out, d_in) = weight_dims(base, t)?;
        let a = set.deltas.get(&format!("{t}.lora_a")).expect("present");
        let b = set
            .deltas
            .get(&format!("{t}.lora_b"))
            .ok_or_else(|| Error::Adapter(format!("{t} lacks lora_b")))?;
        let r = set.lora.rank;
        if a.shape != [r, d_in] || b.shape != [d_out, r] {
            return Err(Error::Shape(format!(
                "{t}: A {:?}, B {:?}, expected [{r}, {d_in}] and [{d_out}, {r}]",
                a.shape, b.shape
            )));
        }
    }
    let extra = set.deltas.len() - 2 * want.len();
    if extra != 0 {
        return Err(Error::Adapter(format!("{extra} stray adapter tensors")));
    }
    Ok(())
}

/// The recognizer with a set's deltas applied on the fly.
pub struct AdaptedModel<'a> {
    pub base: &'a AsrModel,
    pub set: &'a AdapterSet,
    scales: HashMap<String, f32>,
    enabled: bool,
}

pub fn inject<'a>(base: &'a AsrModel, set: &'a AdapterSet) -> Result<AdaptedModel<'a>> {
    validate(base, set)?;
    Ok(AdaptedModel {
        base,
        set,
        scales: set.scales(),
        enabled: true,
    })
}

impl<'a> AdaptedModel<'a> {
    pub fn disable(&mut self) {
        self.enabled = false;
    }

    pub fn enable(&mut self) {
        self.enabled = true;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn binder(&self) -> Binder<'_> {
        let b = Binder::frozen(&[&self.base.params, &self.set.deltas, &self.set.fusion.params]);
        if self.enabled {
            b.with_lora(&self.scales)
        } else {
            b
        }
    }

    pub fn scales(&self) -> &HashMap<String, f32> {
        &self.scales
    }

    /// Encoder on an already-prepared mel, fusion bypassed.
    pub fn encode(&self, mel: &MelSpectrogram) -> Result<EncoderEmbedding> {
        self.base.encode_with(&self.binder(), &mel.frames)
    }

    pub fn decode_logits(&self, emb: &EncoderEmbedding, tokens: &[usize]) -> Result<LogitSequence> {
        self.base.decode_logits_with(&self.binder(), emb, tokens)
    }

    pub fn greedy_decode(&self, emb: &EncoderEmbedding) -> String {
        Tokenizer.decode(&self.base.greedy_tokens_with(&self.binder(), emb))
    }

    pub fn fuse(&self, noisy: &MelSpectrogram, video: &LipFrameSequence) -> Result<MelSpectrogram> {
        self.set.fusion.fuse(noisy, video)
    }

    /// Full noisy path: fusion, adapted encoder, greedy decoding.
    pub fn transcribe(&self, noisy: &MelSpectrogram, video: &LipFrameSequence) -> Result<String> {
        let fused = self.fuse(noisy, video)?;
        Ok(self.greedy_decode(&self.encode(&fused)?))
    }
}

/// Folds the deltas into a copy of the base weights: `W' = W + (alpha/r)·B·A`.
pub fn merge(base: &AsrModel, set: &AdapterSet) -> Result<AsrModel> {
    validate(base, set)?;
    let mut out = base.clone();
    for d in set.deltas() {
        let dw = d.weight_delta();
        let w = out
            .params
            .get_mut(&format!("{}.weight", d.target))
            .expect("validated");
        for (x, y) in w.data.iter_mut().zip(&dw.data) {
            *x += *y;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

/// Trainable = `Σ r·(d_in + d_out)` over deltas plus fusion parameters,
/// counting only tensors the mask marks trainable; total adds the base.
pub fn count_params(base: &AsrModel, set: &AdapterSet) -> ParamCount {
    count_system(base, &[set])
}

/// Several sets sharing one base: trainable sums over the sets, total adds
/// the base once.
pub fn count_system(base: &AsrModel, sets: &[&AdapterSet]) -> ParamCount {
    let trainable: usize = sets
        .iter()
        .map(|s| {
            let deltas: usize = s
                .targets()
                .iter()
                .filter_map(|t| {
                    let a = s.deltas.get(&format!("{t}.lora_a"))?;
                    let b = s.deltas.get(&format!("{t}.lora_b"))?;
                    let d_in = a.shape[1];
                    let d_out = b.shape[0];
                    let n_a = if s.is_trainable(a) { s.lora.rank * d_in } else { 0 };
                    let n_b = if s.is_trainable(b) { s.lora.rank * d_out } else { 0 };
                    Some(n_a + n_b)
                })
                .sum();
            let fusion: usize = s
                .fusion
                .params
                .iter()
                .filter(|p| s.is_trainable(p))
                .map(Param::numel)
                .sum();
            deltas + fusion
        })
        .sum();
    ParamCount {
        trainable,
        total: trainable + base.param_count(),
    }
}
