use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asr::argmax;
use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::corpus::AvSample;
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::optim::{self, Adam};
use crate::params::{Param, ParamStore, Role};
use crate::seed;
use crate::signal::{contaminate_at, log_mel, MelSpectrogram, NoiseBank, NoiseCategory, N_MELS, SNR_MAX_DB, SNR_MIN_DB};
use crate::tensor::{Mat, Real};

/// Frames the trunk sees; longer inputs are cropped, shorter padded.
pub const INPUT_FRAMES: usize = 96;
pub const MIN_FRAMES: usize = 10;
/// Log-mel value of silence, used for padding.
const PAD_VALUE: f32 = -1.5;
const RES_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Category,
    Snr,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Head::Category),
            "snr" | "level" => Ok(Head::Snr),
            other => Err(Error::invalid(format!("unknown classifier head {other:?}"))),
        }
    }
}

/// Category distribution and SNR estimate for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub category_probs: [f32; 4],
    pub snr_db: f32,
}

/// Residual CNN over the noisy mel: an input conv, four residual blocks of
/// two convs (the first strided), an output conv, mean pooling, then a
/// category head and an SNR head.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseClassifier {
    pub channels: usize,
    pub params: ParamStore,
}

/// The trunk's fixed-size view of a mel: first 96 frames, padded with the
/// silence value.
pub fn fit_frames(mel: &Mat<f32>) -> Mat<f32> {
    let mut out = Mat::from_vec(INPUT_FRAMES, mel.cols, vec![PAD_VALUE; INPUT_FRAMES * mel.cols]);
    let n = mel.rows.min(INPUT_FRAMES);
    out.data[..n * mel.cols].copy_from_slice(&mel.data[..n * mel.cols]);
    out
}

impl NoiseClassifier {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, &[seed::tag("classifier-init")]);
        let r = &mut rng;
        let c = channels;
        let role = Role::Classifier;
        let mut p = ParamStore::new();
        nn::init_conv(&mut p, r, "clf.conv0", c, N_MELS, role)?;
        nn::init_layer_norm(&mut p, "clf.ln0", c, role)?;
        for k in 0..RES_BLOCKS {
            for j in ["a", "b"] {
                nn::init_conv(&mut p, r, &format!("clf.block{k}.conv_{j}"), c, c, role)?;
                nn::init_layer_norm(&mut p, &format!("clf.block{k}.ln_{j}"), c, role)?;
            }
        }
        nn::init_conv(&mut p, r, "clf.conv_out", c, c, role)?;
        nn::init_layer_norm(&mut p, "clf.ln_out", c, role)?;
        nn::init_linear(&mut p, r, "clf.cat.fc1", c, c, role)?;
        nn::init_linear(&mut p, r, "clf.cat.fc2", NoiseCategory::ALL.len(), c, role)?;
        nn::init_linear(&mut p, r, "clf.snr.fc1", c, c, role)?;
        nn::init_linear(&mut p, r, "clf.snr.fc2", 1, c, role)?;
        Ok(NoiseClassifier { channels, params: p })
    }

    pub fn conv_layers(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.contains("conv") && p.name.ends_with(".weight"))
            .count()
    }

    /// 1 × C pooled summary.
    fn trunk<T: Real>(&self, tape: &mut Tape<T>, b: &Binder, x: Var) -> Var {
        let h = b.conv1d(tape, "clf.conv0", x, 1);
        let h = b.layer_norm(tape, "clf.ln0", h);
        let mut h = tape.gelu(h);
        for k in 0..RES_BLOCKS {
            let a = b.conv1d(tape, &format!("clf.block{k}.conv_a"), h, 2);
            let a = b.layer_norm(tape, &format!("clf.block{k}.ln_a"), a);
            let a = tape.gelu(a);
            let y = b.conv1d(tape, &format!("clf.block{k}.conv_b"), a, 1);
            let y = b.layer_norm(tape, &format!("clf.block{k}.ln_b"), y);
            let rows = tape.value(h).rows;
            let skip = tape.gather_rows(h, (0..rows).step_by(2).collect());
            let s = tape.add(skip, y);
            h = tape.gelu(s);
        }
        let h = b.conv1d(tape, "clf.conv_out", h, 1);
        let h = b.layer_norm(tape, "clf.ln_out", h);
        let h = tape.gelu(h);
        tape.mean_rows(h)
    }

    fn head<T: Real>(&self, tape: &mut Tape<T>, b: &Binder, pooled: Var, head: Head) -> Var {
        let name = match head {
            Head::Category => "clf.cat",
            Head::Snr => "clf.snr",
        };
        let h = b.linear(tape, &format!("{name}.fc1"), pooled);
        let h = tape.gelu(h);
        b.linear(tape, &format!("{name}.fc2"), h)
    }

    pub fn classify(&self, mel: &MelSpectrogram) -> Result<ClassifierOutput> {
        if mel.n_frames() < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "classifier needs at least {MIN_FRAMES} frames, got {}",
                mel.n_frames()
            )));
        }
        let b = Binder::frozen(&[&self.params]);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(fit_frames(&mel.frames));
        let pooled = self.trunk(&mut tape, &b, x);
        let logits = self.head(&mut tape, &b, pooled, Head::Category);
        let probs = tape.softmax(logits);
        let snr = self.head(&mut tape, &b, pooled, Head::Snr);
        let p = tape.value(probs).row(0);
        Ok(ClassifierOutput {
            category_probs: [p[0], p[1], p[2], p[3]],
            snr_db: tape.scalar(snr),
        })
    }

    pub fn save(&self, dir: &Path, head: Head, metrics: Option<&ClassifierMetrics>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "classifier",
            "head": head,
            "channels": self.channels,
            "metrics": metrics,
        });
        checkpoint::save(dir, &self.params, meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, Head)> {
        let (params, meta) = checkpoint::load(dir)?;
        let head: Head = serde_json::from_value(meta.get("head").cloned().unwrap_or_default())
            .map_err(|_| Error::Checkpoint("classifier metadata lacks a head".into()))?;
        let channels = meta.get("channels").and_then(|v| v.as_u64()).unwrap_or(64) as usize;
        let reference = NoiseClassifier::new(channels, 0)?;
        for p in reference.params.iter() {
            if params.get(&p.name).map(|q| &q.shape) != Some(&p.shape) {
                return Err(Error::Checkpoint(format!("classifier tensor {} missing or misshapen", p.name)));
            }
        }
        Ok((NoiseClassifier { channels, params }, head))
    }
}

/// One training or validation input with its ground truth. Clean inputs
/// carry no category and the top of the SNR range as their label.
#[derive(Clone, Debug)]
pub struct ClassifierExample {
    pub mel: Mat<f32>,
    pub category: Option<NoiseCategory>,
    pub snr_db: f64,
}

/// `n` noisy inputs drawn from `corpus` with uniform categories and SNRs
/// over the full training range; `clean_prob` of them stay clean.
pub fn make_classifier_data(
    corpus: &[AvSample],
    bank: &NoiseBank,
    n: usize,
    clean_prob: f64,
    seed: u64,
) -> Result<Vec<ClassifierExample>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng_for(seed, &[seed::tag("classifier-data"), i as u64]);
            let s = &corpus[rng.random_range(0..corpus.len())];
            if rng.random::<f64>() < clean_prob {
                return Ok(ClassifierExample {
                    mel: fit_frames(&log_mel(&s.audio)?.frames),
                    category: None,
                    snr_db: SNR_MAX_DB,
                });
            }
            let cat = NoiseCategory::ALL[rng.random_range(0..4)];
            let snr = rng.random_range(SNR_MIN_DB..=SNR_MAX_DB);
            let noisy = contaminate_at(&s.audio, cat, snr, bank, rng.random())?;
            Ok(ClassifierExample {
                mel: fit_frames(&log_mel(&noisy)?.frames),
                category: Some(cat),
                snr_db: snr,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            channels: 64,
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
            final_lr: 1e-5,
            seed: 0,
        }
    }
}

/// SNR decisions are scored against this threshold.
pub const LEVEL_THRESHOLD_DB: f64 = 5.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub head: Option<Head>,
    pub n: usize,
    pub category_accuracy: Option<f64>,
    pub snr_mae_db: Option<f64>,
    /// Share of inputs landing on the correct side of 5 dB.
    pub threshold_accuracy: Option<f64>,
    pub per_category_threshold_accuracy: BTreeMap<NoiseCategory, f64>,
    pub train_losses: Vec<f64>,
}

fn example_loss<T: Real>(
    clf: &NoiseClassifier,
    b: &Binder,
    e: &ClassifierExample,
    head: Head,
) -> (Tape<T>, Var) {
    let mut tape = Tape::<T>::new();
    let x = tape.constant(e.mel.cast());
    let pooled = clf.trunk(&mut tape, b, x);
    let out = clf.head(&mut tape, b, pooled, head);
    let loss = match head {
        Head::Category => tape.cross_entropy(out, vec![e.category.expect("filtered").index()]),
        Head::Snr => tape.mse_loss(out, Mat::from_vec(1, 1, vec![T::from_f64(e.snr_db)])),
    };
    (tape, loss)
}

/// Trains the trunk and one head. Category training skips clean inputs.
pub fn train_classifier(
    head: Head,
    train: &[ClassifierExample],
    val: &[ClassifierExample],
    cfg: &ClassifierTrainConfig,
) -> Result<(NoiseClassifier, ClassifierMetrics)> {
    let usable: Vec<&ClassifierExample> = match head {
        Head::Category => train.iter().filter(|e| e.category.is_some()).collect(),
        Head::Snr => train.iter().collect(),
    };
    if usable.is_empty() {
        return Err(Error::invalid(format!("no training examples carry a label for the {head:?} head")));
    }
    if head == Head::Snr {
        if let Some(e) = usable.iter().find(|e| !e.snr_db.is_finite()) {
            return Err(Error::invalid(format!("SNR label {} is not finite", e.snr_db)));
        }
    }
    let mut clf = NoiseClassifier::new(cfg.channels, cfg.seed)?;
    let prefix = match head {
        Head::Category => "clf.cat.",
        Head::Snr => "clf.snr.",
    };
    let other = match head {
        Head::Category => "clf.snr.",
        Head::Snr => "clf.cat.",
    };
    let trainable = move |p: &Param| p.name.starts_with(prefix) || !p.name.starts_with(other);
    let mut opt = Adam::new();
    let mut rng = seed::rng_for(cfg.seed, &[seed::tag("classifier-batches")]);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = ClassifierMetrics {
        head: Some(head),
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..usable.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let c = &clf;
        let (mut grads, losses) = optim::batch_gradients(&batch, |&i| {
            let b = Binder::frozen(&[&c.params]).with_trainable(&trainable);
            let (tape, loss) = example_loss::<f32>(c, &b, usable[i], head);
            let g = tape.backward(loss);
            Ok((optim::tape_grads(&tape, &g), tape.scalar(loss) as f64))
        })?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("classifier loss {loss}"),
            });
        }
        optim::clip_grad_norm(&mut grads, 5.0);
        let lr = optim::cosine_lr(step, cfg.steps, cfg.lr, cfg.final_lr);
        opt.update(&mut [&mut clf.params], &grads, lr as f32);
        metrics.train_losses.push(loss);
    }
    if !val.is_empty() {
        let eval = evaluate_classifier(&clf, head, val)?;
        metrics.n = eval.n;
        metrics.category_accuracy = eval.category_accuracy;
        metrics.snr_mae_db = eval.snr_mae_db;
        metrics.threshold_accuracy = eval.threshold_accuracy;
        metrics.per_category_threshold_accuracy = eval.per_category_threshold_accuracy;
    }
    Ok((clf, metrics))
}

/// Accuracy (category head) or MAE and 5 dB decision accuracy (SNR head),
/// with the decision accuracy broken out per noise category.
pub fn evaluate_classifier(clf: &NoiseClassifier, head: Head, data: &[ClassifierExample]) -> Result<ClassifierMetrics> {
    let outs: Vec<ClassifierOutput> = data
        .par_iter()
        .map(|e| clf.classify(&MelSpectrogram::new(e.mel.clone())?))
        .collect::<Result<_>>()?;
    let mut m = ClassifierMetrics {
        head: Some(head),
        n: data.len(),
        ..Default::default()
    };
    match head {
        Head::Category => {
            let labeled: Vec<(usize, &ClassifierOutput)> = data
                .iter()
                .zip(&outs)
                .filter_map(|(e, o)| e.category.map(|c| (c.index(), o)))
                .collect();
            let hits = labeled
                .iter()
                .filter(|(c, o)| argmax(&o.category_probs) == *c)
                .count();
            m.category_accuracy = Some(hits as f64 / labeled.len().max(1) as f64);
        }
        Head::Snr => {
            let mae = data
                .iter()
                .zip(&outs)
                .map(|(e, o)| (o.snr_db as f64 - e.snr_db).abs())
                .sum::<f64>()
                / data.len().max(1) as f64;
            let side = |v: f64| v < LEVEL_THRESHOLD_DB;
            let correct = |e: &ClassifierExample, o: &ClassifierOutput| side(o.snr_db as f64) == side(e.snr_db);
            let hits = data.iter().zip(&outs).filter(|(e, o)| correct(e, o)).count();
            m.snr_mae_db = Some(mae);
            m.threshold_accuracy = Some(hits as f64 / data.len().max(1) as f64);
            for cat in NoiseCategory::ALL {
                let sel: Vec<bool> = data
                    .iter()
                    .zip(&outs)
                    .filter(|(e, _)| e.category == Some(cat))
                    .map(|(e, o)| correct(e, o))
                    .collect();
                if !sel.is_empty() {
                    let acc = sel.iter().filter(|b| **b).count() as f64 / sel.len() as f64;
                    m.per_category_threshold_accuracy.insert(cat, acc);
                }
            }
        }
    }
    Ok(m)
}
