//! Teacher-student distillation. The frozen recognizer on clean audio gives
//! mel, embedding and logit targets; the adapted model on noisy audio plus
//! video is trained to match them in four stages.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::{argmax, AsrModel, EncoderEmbedding, LogitSequence};
use crate::autograd::{softmax_rows, log_softmax_rows, Tape, Var};
use crate::corpus::AvSample;
use crate::error::{Error, Result};
use crate::lora::{inject, AdaptedModel, AdapterSet};
use crate::nn::Binder;
use crate::optim::{self, Adam};
use crate::params::{GradStore, Param, ParamStore};
use crate::seed;
use crate::signal::{contaminate, log_mel, MelSpectrogram, NoiseBank, NoiseScenario, Waveform};
use crate::tensor::{Mat, Real};
use crate::video::LipFrameSequence;

/// Weight of the mel term in the pre-training loss.
pub const MEL_WEIGHT: f64 = 0.5;

/// Clean-input outputs of the frozen recognizer.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    pub mel_c: MelSpectrogram,
    pub emb_c: EncoderEmbedding,
    /// Teacher-forced logits for [`DistillTargets::decoder_input`].
    pub logits_c: LogitSequence,
    /// Greedy teacher output, starting with `<sot>`.
    pub teacher_tokens: Vec<usize>,
}

impl DistillTargets {
    /// Teacher tokens without the last one: row `i` of the logits predicts
    /// token `i + 1`.
    pub fn decoder_input(&self) -> &[usize] {
        &self.teacher_tokens[..self.teacher_tokens.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutputs {
    pub mel_n: MelSpectrogram,
    pub emb_n: EncoderEmbedding,
    pub logits_n: LogitSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Ft,
}

/// Target distribution for the logit-level term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeTarget {
    /// Teacher softmax.
    #[default]
    Soft,
    /// One-hot teacher argmax.
    Hard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mel: f64,
    pub l_emb: f64,
    pub l_ce: f64,
    pub l_pre: f64,
    /// Unset in the pre-training phase.
    pub l_ft: Option<f64>,
}

pub fn teacher_forward(base: &AsrModel, clean: &Waveform) -> Result<DistillTargets> {
    let mel_c = log_mel(clean)?;
    let emb_c = base.encode(&mel_c)?;
    let teacher_tokens = base.greedy_tokens_with(&base.binder(), &emb_c);
    let logits_c = base.decode_logits(&emb_c, &teacher_tokens[..teacher_tokens.len() - 1])?;
    Ok(DistillTargets {
        mel_c,
        emb_c,
        logits_c,
        teacher_tokens,
    })
}

/// Student path for one noisy input: fusion, adapted encoder, and the
/// adapted decoder teacher-forced on the teacher tokens.
pub fn student_forward(
    model: &AdaptedModel,
    noisy: &MelSpectrogram,
    video: &LipFrameSequence,
    targets: &DistillTargets,
) -> Result<StudentOutputs> {
    let mel_n = model.fuse(noisy, video)?;
    let emb_n = model.encode(&mel_n)?;
    let logits_n = model.decode_logits(&emb_n, targets.decoder_input())?;
    Ok(StudentOutputs { mel_n, emb_n, logits_n })
}

fn mean_abs_diff(a: &Mat<f32>, b: &Mat<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum();
    Ok(s / a.data.len() as f64)
}

fn ce_term(teacher: &Mat<f32>, student: &Mat<f32>, ce: CeTarget) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!("logits {:?} vs {:?}", teacher.shape(), student.shape())));
    }
    let t = teacher.cast::<f64>();
    let lsm = log_softmax_rows(&student.cast::<f64>());
    let target = match ce {
        CeTarget::Soft => softmax_rows(&t),
        CeTarget::Hard => one_hot_argmax(&t),
    };
    let s: f64 = target.data.iter().zip(&lsm.data).map(|(p, l)| -p * l).sum();
    Ok(s / t.rows as f64)
}

fn one_hot_argmax<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row: Vec<f32> = m.row(r).iter().map(|v| v.as_f32()).collect();
        out.data[r * m.cols + argmax(&row)] = T::one();
    }
    out
}

/// `l_pre = 0.5·l_mel + l_emb`, and in the fine-tuning phase
/// `l_ft = l_pre + l_ce`.
pub fn loss(targets: &DistillTargets, student: &StudentOutputs, phase: Phase, ce: CeTarget) -> Result<LossBreakdown> {
    let l_mel = mean_abs_diff(&targets.mel_c.frames, &student.mel_n.frames)?;
    let l_emb = mean_abs_diff(&targets.emb_c.frames, &student.emb_n.frames)?;
    let l_ce = ce_term(&targets.logits_c.logits, &student.logits_n.logits, ce)?;
    let l_pre = MEL_WEIGHT * l_mel + l_emb;
    Ok(LossBreakdown {
        l_mel,
        l_emb,
        l_ce,
        l_pre,
        l_ft: (phase == Phase::Ft).then_some(l_pre + l_ce),
    })
}

/// Nodes of one student loss graph.
pub struct LossGraph {
    pub mel_n: Var,
    pub emb_n: Var,
    pub logits_n: Option<Var>,
    pub l_mel: Var,
    pub l_emb: Var,
    pub l_ce: Option<Var>,
    pub total: Var,
}

/// Builds the student loss on `tape`. The decoder is only run in the
/// fine-tuning phase.
#[allow(clippy::too_many_arguments)]
pub fn loss_graph<T: Real>(
    tape: &mut Tape<T>,
    base: &AsrModel,
    set: &AdapterSet,
    b: &Binder,
    noisy: &Mat<f32>,
    video: &Mat<f32>,
    targets: &DistillTargets,
    phase: Phase,
    ce: CeTarget,
) -> LossGraph {
    let m = tape.constant(noisy.cast());
    let v = tape.constant(video.cast());
    let mel_n = set.fusion.fuse_graph(tape, b, m, v);
    let emb_n = base.encode_graph(tape, b, mel_n);
    let l_mel = tape.l1_loss(mel_n, targets.mel_c.frames.cast());
    let l_emb = tape.l1_loss(emb_n, targets.emb_c.frames.cast());
    let pre = tape.weighted_sum(&[(l_mel, MEL_WEIGHT), (l_emb, 1.0)]);
    match phase {
        Phase::Pre => LossGraph {
            mel_n,
            emb_n,
            logits_n: None,
            l_mel,
            l_emb,
            l_ce: None,
            total: pre,
        },
        Phase::Ft => {
            let kv = base.cross_kv(tape, b, emb_n);
            let logits = base.decode_graph(tape, b, &kv, targets.decoder_input());
            let teacher = targets.logits_c.logits.cast::<T>();
            let l_ce = match ce {
                CeTarget::Soft => tape.soft_cross_entropy(logits, softmax_rows(&teacher)),
                CeTarget::Hard => {
                    let rows: Vec<usize> = (0..teacher.rows)
                        .map(|r| argmax(&teacher.row(r).iter().map(|v| v.as_f32()).collect::<Vec<_>>()))
                        .collect();
                    tape.cross_entropy(logits, rows)
                }
            };
            let total = tape.add(pre, l_ce);
            LossGraph {
                mel_n,
                emb_n,
                logits_n: Some(logits),
                l_mel,
                l_emb,
                l_ce: Some(l_ce),
                total,
            }
        }
    }
}

fn breakdown<T: Real>(tape: &Tape<T>, g: &LossGraph, phase: Phase) -> LossBreakdown {
    let l_mel = tape.scalar(g.l_mel).as_f64();
    let l_emb = tape.scalar(g.l_emb).as_f64();
    let l_ce = g.l_ce.map_or(0.0, |v| tape.scalar(v).as_f64());
    let l_pre = MEL_WEIGHT * l_mel + l_emb;
    LossBreakdown {
        l_mel,
        l_emb,
        l_ce,
        l_pre,
        l_ft: (phase == Phase::Ft).then_some(l_pre + l_ce),
    }
}

/// Which tensors a stage may train: the fusion module and encoder deltas
/// during pre-training, everything in the fine-tuning phase. The set's own
/// mask applies on top.
pub fn stage_allows(phase: Phase, name: &str) -> bool {
    match phase {
        Phase::Pre => name.starts_with("fusion.") || name.starts_with("enc."),
        Phase::Ft => true,
    }
}

/// Loss and gradients of the trainable adapter and fusion tensors for one
/// noisy sample. `params` supplies the set's tensors (possibly perturbed).
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads<T: Real>(
    base: &AsrModel,
    set: &AdapterSet,
    params: &[&ParamStore],
    noisy: &Mat<f32>,
    video: &Mat<f32>,
    targets: &DistillTargets,
    phase: Phase,
    ce: CeTarget,
) -> (LossBreakdown, GradStore) {
    let pred = |p: &Param| set.is_trainable(p) && stage_allows(phase, &p.name);
    let scales = set.scales();
    let mut stores = vec![&base.params];
    stores.extend_from_slice(params);
    let b = Binder::frozen(&stores).with_trainable(&pred).with_lora(&scales);
    let mut tape = Tape::<T>::new();
    let g = loss_graph(&mut tape, base, set, &b, noisy, video, targets, phase, ce);
    let lb = breakdown(&tape, &g, phase);
    let grads = tape.backward(g.total);
    (lb, optim::tape_grads(&tape, &grads))
}

/// Distillation sample: clean utterance plus its cached teacher targets.
#[derive(Clone, Debug)]
pub struct CachedSample {
    pub sample: AvSample,
    pub targets: DistillTargets,
}

pub fn cache_targets(base: &AsrModel, samples: &[AvSample]) -> Result<Vec<CachedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(CachedSample {
                targets: teacher_forward(base, &s.audio)?,
                sample: s.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    P1,
    P2,
    F1,
    F2,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::P1, Stage::P2, Stage::F1, Stage::F2];

    pub fn phase(self) -> Phase {
        match self {
            Stage::P1 | Stage::P2 => Phase::Pre,
            Stage::F1 | Stage::F2 => Phase::Ft,
        }
    }

    /// Iterations of this stage in the full-size schedule.
    pub fn reference_steps(self) -> usize {
        match self {
            Stage::P1 | Stage::P2 => 112_000,
            Stage::F1 | Stage::F2 => 21_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::P1 => "p1",
            Stage::P2 => "p2",
            Stage::F1 => "f1",
            Stage::F2 => "f2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Multiplies every reference step count.
    pub scale_ratio: f64,
    pub batch_size: usize,
    pub lr_pre: f64,
    pub lr_ft: f64,
    pub lr_final: f64,
    /// Applied to every stage after the first.
    pub lr_multiplier: f64,
    pub clean_prob: f64,
    pub ce_target: CeTarget,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            scale_ratio: 0.01,
            batch_size: 16,
            lr_pre: 1e-4,
            lr_ft: 1e-5,
            lr_final: 1e-7,
            lr_multiplier: 1.0,
            clean_prob: crate::signal::DEFAULT_CLEAN_PROB,
            ce_target: CeTarget::Soft,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn steps(&self, stage: Stage) -> usize {
        ((stage.reference_steps() as f64 * self.scale_ratio).round() as usize).max(1)
    }

    pub fn lr(&self, stage: Stage, step: usize) -> f64 {
        let m = if stage == Stage::P1 { 1.0 } else { self.lr_multiplier };
        m * match stage {
            Stage::P1 | Stage::P2 => self.lr_pre,
            Stage::F1 => self.lr_ft,
            Stage::F2 => optim::cosine_lr(step, self.steps(stage), self.lr_ft, self.lr_final),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<MetricsRow>,
    /// Validation losses (fine-tuning phase) before training and after each
    /// stage, labeled `init`, `p1`, ….
    pub validation: Vec<(String, LossBreakdown)>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "stage", "lr", "l_mel", "l_emb", "l_ce", "l_pre", "l_ft"])?;
        for r in &self.rows {
            let pre = r.stage.phase() == Phase::Pre;
            let opt = |v: f64| if pre { String::new() } else { format!("{v:.6}") };
            out.write_record([
                r.step.to_string(),
                r.stage.to_string(),
                format!("{:e}", r.lr),
                format!("{:.6}", r.loss.l_mel),
                format!("{:.6}", r.loss.l_emb),
                opt(r.loss.l_ce),
                format!("{:.6}", r.loss.l_pre),
                r.loss.l_ft.map(|v| format!("{v:.6}")).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn validation_at(&self, label: &str) -> Option<&LossBreakdown> {
        self.validation.iter().find(|(l, _)| l == label).map(|(_, b)| b)
    }
}

/// Training material shared by every adapter set.
pub struct DistillData<'a> {
    /// First pre-training stage.
    pub pretrain: &'a [CachedSample],
    /// Second pre-training stage and both fine-tuning stages.
    pub main: &'a [CachedSample],
    pub val: &'a [CachedSample],
    /// Noise for training draws.
    pub train_noise: &'a NoiseBank,
    /// Noise for validation draws.
    pub val_noise: &'a NoiseBank,
}

fn noisy_input(
    s: &CachedSample,
    scenario: NoiseScenario,
    bank: &NoiseBank,
    clean_prob: f64,
    seed: u64,
) -> Result<MelSpectrogram> {
    let (noisy, _) = contaminate(&s.sample.audio, scenario, bank, clean_prob, seed)?;
    log_mel(&noisy)
}

/// Mean fine-tuning-phase loss over `val`, with fixed per-sample noise.
pub fn validation_loss(
    base: &AsrModel,
    set: &AdapterSet,
    val: &[CachedSample],
    bank: &NoiseBank,
    schedule: &Schedule,
) -> Result<LossBreakdown> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let model = inject(base, set)?;
    let parts: Vec<LossBreakdown> = val
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = seed::derive(schedule.seed, &[seed::tag("distill-val"), i as u64]);
            let noisy = noisy_input(s, set.scenario, bank, schedule.clean_prob, seed)?;
            let out = student_forward(&model, &noisy, &s.sample.video, &s.targets)?;
            loss(&s.targets, &out, Phase::Ft, schedule.ce_target)
        })
        .collect::<Result<_>>()?;
    Ok(mean_breakdown(&parts, Phase::Ft))
}

fn mean_breakdown(parts: &[LossBreakdown], phase: Phase) -> LossBreakdown {
    let n = parts.len() as f64;
    let l_mel = parts.iter().map(|b| b.l_mel).sum::<f64>() / n;
    let l_emb = parts.iter().map(|b| b.l_emb).sum::<f64>() / n;
    let l_ce = parts.iter().map(|b| b.l_ce).sum::<f64>() / n;
    let l_pre = MEL_WEIGHT * l_mel + l_emb;
    LossBreakdown {
        l_mel,
        l_emb,
        l_ce,
        l_pre,
        l_ft: (phase == Phase::Ft).then_some(l_pre + l_ce),
    }
}

/// Runs the four-stage schedule on `set`, which the scenario's contamination
/// policy drives. On divergence the offending update is not applied, so
/// `set` still holds the last good weights.
pub fn train_adapters(
    base: &AsrModel,
    set: &mut AdapterSet,
    data: &DistillData,
    schedule: &Schedule,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainLog> {
    if data.pretrain.is_empty() || data.main.is_empty() {
        return Err(Error::invalid("distillation needs non-empty corpora"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    crate::lora::validate(base, set)?;
    let scenario = set.scenario;
    let mut log = TrainLog::default();
    if !data.val.is_empty() {
        log.validation.push((
            "init".into(),
            validation_loss(base, set, data.val, data.val_noise, schedule)?,
        ));
    }
    let mut opt = Adam::new();
    let mut global = 0usize;
    let stream = seed::derive(schedule.seed, &[seed::tag("distill"), seed::tag(scenario.id())]);
    for stage in Stage::ALL {
        let corpus = if stage == Stage::P1 { data.pretrain } else { data.main };
        let phase = stage.phase();
        let mut rng = seed::rng_for(stream, &[seed::tag(stage.name())]);
        let mut order: Vec<usize> = Vec::new();
        for step in 0..schedule.steps(stage) {
            let mut batch = Vec::with_capacity(schedule.batch_size);
            while batch.len() < schedule.batch_size {
                if order.is_empty() {
                    order = (0..corpus.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push((order.pop().expect("refilled"), rng.random::<u64>()));
            }
            let s: &AdapterSet = set;
            let parts: Vec<Result<(LossBreakdown, GradStore)>> = batch
                .par_iter()
                .map(|&(i, noise_seed)| {
                    let c = &corpus[i];
                    let noisy = noisy_input(c, scenario, data.train_noise, schedule.clean_prob, noise_seed)?;
                    Ok(loss_and_grads::<f32>(
                        base,
                        s,
                        &[&s.deltas, &s.fusion.params],
                        &noisy.frames,
                        &c.sample.video.frames,
                        &c.targets,
                        phase,
                        schedule.ce_target,
                    ))
                })
                .collect();
            let mut grads = GradStore::default();
            let mut losses = Vec::with_capacity(batch.len());
            for p in parts {
                let (lb, g) = p?;
                grads.merge(&g);
                losses.push(lb);
            }
            grads.scale(1.0 / batch.len() as f32);
            let lb = mean_breakdown(&losses, phase);
            let lr = schedule.lr(stage, step);
            let row = MetricsRow {
                step: global,
                stage,
                lr,
                loss: lb,
            };
            if !lb.l_pre.is_finite() || !lb.l_ce.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    step: global,
                    detail: format!("stage {stage}: non-finite loss or gradient ({lb:?})"),
                });
            }
            opt.update(&mut [&mut set.deltas, &mut set.fusion.params], &grads, lr as f32);
            progress(&row);
            log.rows.push(row);
            global += 1;
        }
        if !data.val.is_empty() {
            log.validation.push((
                stage.name().into(),
                validation_loss(base, set, data.val, data.val_noise, schedule)?,
            ));
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose analytic gradient was absent, i.e. exactly zero.
    pub masked: usize,
    pub worst: Option<(String, usize)>,
}

/// Draws `n` coordinates: a tensor uniformly among those accepted by
/// `filter`, then an element uniformly within it.
pub fn sample_coordinates(
    store: &ParamStore,
    n: usize,
    seed: u64,
    filter: impl Fn(&Param) -> bool,
) -> Vec<(String, usize)> {
    let names: Vec<&Param> = store.iter().filter(|p| filter(p)).collect();
    if names.is_empty() {
        return Vec::new();
    }
    let mut rng = seed::rng_for(seed, &[seed::tag("grad-check")]);
    (0..n)
        .map(|_| {
            let p = names[rng.random_range(0..names.len())];
            (p.name.clone(), rng.random_range(0..p.numel()))
        })
        .collect()
}

/// Central finite differences against analytic gradients. `f` evaluates the
/// loss and gradients for a parameter store; gradients missing from the
/// result count as exactly zero.
pub fn grad_check(
    store: &ParamStore,
    coords: &[(String, usize)],
    eps: f64,
    f: impl Fn(&ParamStore) -> Result<(f64, GradStore)>,
) -> Result<GradCheckReport> {
    let (_, analytic) = f(store)?;
    grad_check_against(store, coords, eps, &analytic, |p| Ok(f(p)?.0))
}

/// [`grad_check`] with the analytic gradients supplied separately, so they
/// can come from a different precision than the finite differences.
pub fn grad_check_against(
    store: &ParamStore,
    coords: &[(String, usize)],
    eps: f64,
    analytic: &GradStore,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        masked: 0,
        worst: None,
    };
    let mut probe = store.clone();
    for (name, i) in coords {
        let orig = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no tensor {name}")))?
            .data[*i];
        let set = |p: &mut ParamStore, v: f32| p.get_mut(name).expect("present").data[*i] = v;
        set(&mut probe, orig + eps as f32);
        let up = loss(&probe)?;
        set(&mut probe, orig - eps as f32);
        let down = loss(&probe)?;
        set(&mut probe, orig);
        // The perturbation actually applied after rounding to f32.
        let h = (orig + eps as f32) as f64 - (orig - eps as f32) as f64;
        let g_fd = (up - down) / h;
        let g = match analytic.get(name) {
            Some(g) => g[*i] as f64,
            None => {
                report.masked += 1;
                0.0
            }
        };
        let rel = (g_fd - g).abs() / (g_fd.abs() + g.abs()).max(1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *i));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::AsrConfig;
    use crate::fusion::FusionConfig;
    use crate::lora::LoraConfig;
    use crate::params::Role;

    #[test]
    fn quadratic_probe() {
        let mut s = ParamStore::new();
        s.insert("w", &[3], Role::Adapter, vec![0.5, -1.0, 2.0]).unwrap();
        let f = |p: &ParamStore| {
            let w = &p.get("w").unwrap().data;
            let loss: f64 = w.iter().map(|v| (*v as f64).powi(2)).sum();
            let mut g = GradStore::default();
            g.add("w", &w.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
            Ok((loss, g))
        };
        let coords: Vec<_> = (0..3).map(|i| ("w".to_string(), i)).collect();
        let r = grad_check(&s, &coords, 1e-3, f).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn loss_arithmetic() {
        let base = AsrModel::new(AsrConfig::default(), 0).unwrap();
        let clean = crate::signal::synth_utterance("cat", 1).unwrap();
        let t = teacher_forward(&base, &clean).unwrap();
        let same = StudentOutputs {
            mel_n: t.mel_c.clone(),
            emb_n: t.emb_c.clone(),
            logits_n: t.logits_c.clone(),
        };
        let lb = loss(&t, &same, Phase::Ft, CeTarget::Soft).unwrap();
        assert_eq!((lb.l_mel, lb.l_emb), (0.0, 0.0));
        let p = softmax_rows(&t.logits_c.logits.cast::<f64>());
        let h: f64 = p.data.iter().map(|q| -q * q.ln()).sum::<f64>() / p.rows as f64;
        assert!((lb.l_ce - h).abs() < 1e-9);
        let mut shifted = same.clone();
        for v in shifted.mel_n.frames.data.iter_mut() {
            *v += 1.0;
        }
        let lb = loss(&t, &shifted, Phase::Pre, CeTarget::Soft).unwrap();
        assert!((lb.l_pre - 0.5).abs() < 1e-6);
        assert_eq!(lb.l_ft, None);
    }

    #[test]
    fn teacher_is_deterministic_and_bypasses_fusion() {
        let base = AsrModel::new(AsrConfig::default(), 0).unwrap();
        let clean = crate::signal::synth_utterance("red fox", 2).unwrap();
        let a = teacher_forward(&base, &clean).unwrap();
        assert_eq!(a, teacher_forward(&base, &clean).unwrap());
        assert_eq!(a.mel_c, log_mel(&clean).unwrap());
        assert_eq!(a.emb_c.frames.rows, a.mel_c.n_frames().div_ceil(2));
        assert!(a.teacher_tokens.len() <= 34);
        assert_eq!(a.logits_c.logits.rows, a.teacher_tokens.len() - 1);
    }

    #[test]
    fn pretraining_never_touches_decoder_deltas() {
        let base = AsrModel::new(AsrConfig::default(), 0).unwrap();
        let mut set = AdapterSet::new(&base, NoiseScenario::Full, LoraConfig::default(), FusionConfig::default(), 1).unwrap();
        set.randomize_deltas(2, 0.05);
        let s = crate::corpus::AvSample::synth("x".into(), "sun".into(), 3).unwrap();
        let t = teacher_forward(&base, &s.audio).unwrap();
        let noisy = log_mel(&s.audio).unwrap();
        let (_, g) = loss_and_grads::<f32>(
            &base,
            &set,
            &[&set.deltas, &set.fusion.params],
            &noisy.frames,
            &s.video.frames,
            &t,
            Phase::Pre,
            CeTarget::Soft,
        );
        assert!(g.grads.keys().all(|k| !k.starts_with("dec.")));
        assert!(g.grads.keys().any(|k| k.starts_with("enc.")));
        let (_, g) = loss_and_grads::<f32>(
            &base,
            &set,
            &[&set.deltas, &set.fusion.params],
            &noisy.frames,
            &s.video.frames,
            &t,
            Phase::Ft,
            CeTarget::Soft,
        );
        assert!(g.grads.keys().any(|k| k.starts_with("dec.")));
    }

    #[test]
    fn schedule_scaling() {
        let s = Schedule::default();
        assert_eq!(s.steps(Stage::P1), 1120);
        assert_eq!(s.steps(Stage::F2), 210);
        assert_eq!(s.lr(Stage::P2, 0), 1e-4);
        assert!((s.lr(Stage::F2, 209) - 1e-7).abs() < 1e-15);
        let half = Schedule {
            lr_multiplier: 0.5,
            ..Schedule::default()
        };
        assert_eq!(half.lr(Stage::P1, 0), 1e-4);
        assert_eq!(half.lr(Stage::P2, 0), 5e-5);
    }
}
