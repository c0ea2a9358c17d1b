use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{AsrConfig, AsrModel};
use super::tokenizer::Tokenizer;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::evalkit::corpus_wer;
use crate::nn::Binder;
use crate::optim::{self, Adam};
use crate::params::Param;
use crate::seed;
use crate::tensor::Mat;

/// One clean training utterance: `T × 80` log-mel and its transcript.
#[derive(Clone, Debug)]
pub struct BaseExample {
    pub mel: Mat<f32>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub model: AsrConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub final_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            model: AsrConfig::default(),
            steps: 800,
            batch_size: 16,
            lr: 2e-3,
            warmup: 100,
            final_lr: 1e-5,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub losses: Vec<f64>,
    /// Clean greedy WER (%) on the held-out examples, if any were given.
    pub heldout_wer: Option<f64>,
}

fn lr_at(cfg: &BaseTrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        cfg.lr * (step + 1) as f64 / cfg.warmup as f64
    } else {
        optim::cosine_lr(step - cfg.warmup, cfg.steps - cfg.warmup, cfg.lr, cfg.final_lr)
    }
}

/// Teacher-forced cross-entropy training of a fresh model.
pub fn train_base(
    train: &[BaseExample],
    heldout: &[BaseExample],
    cfg: &BaseTrainConfig,
) -> Result<(AsrModel, BaseTrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.warmup > cfg.steps {
        return Err(Error::invalid("steps and batch size must be positive, warmup ≤ steps"));
    }
    let tok = Tokenizer;
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = train
        .iter()
        .map(|e| tok.training_pair(&e.text))
        .collect::<Result<_>>()?;
    let mut model = AsrModel::new(cfg.model.clone(), cfg.seed)?;
    for (input, _) in &pairs {
        model.check_tokens(input)?;
    }
    let mut opt = Adam::new();
    let mut rng = seed::rng_for(cfg.seed, &[seed::tag("base-batches")]);
    let mut order: Vec<usize> = Vec::new();
    let mut report = BaseTrainReport::default();
    let all = |_: &Param| true;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let m = &model;
        let (mut grads, losses) = optim::batch_gradients(&batch, |&i| {
            let b = Binder::frozen(&[&m.params]).with_trainable(&all);
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(train[i].mel.clone());
            let e = m.encode_graph(&mut tape, &b, x);
            let kv = m.cross_kv(&mut tape, &b, e);
            let (input, target) = &pairs[i];
            let y = m.decode_graph(&mut tape, &b, &kv, input);
            let loss = tape.cross_entropy(y, target.clone());
            let g = tape.backward(loss);
            Ok((optim::tape_grads(&tape, &g), tape.scalar(loss) as f64))
        })?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("base training loss {loss}"),
            });
        }
        optim::clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.update(&mut [&mut model.params], &grads, lr_at(cfg, step) as f32);
        report.losses.push(loss);
    }
    if !heldout.is_empty() {
        let pairs: Vec<(String, String)> = heldout
            .iter()
            .map(|e| {
                let hyp = model.encode_with(&model.binder(), &e.mel).map(|emb| model.greedy_decode(&emb))?;
                Ok((e.text.clone(), hyp))
            })
            .collect::<Result<_>>()?;
        report.heldout_wer = Some(corpus_wer(&pairs)?);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{log_mel, synth_utterance};

    fn example(text: &str, seed: u64) -> BaseExample {
        BaseExample {
            mel: log_mel(&synth_utterance(text, seed).unwrap()).unwrap().frames,
            text: text.into(),
        }
    }

    #[test]
    fn memorizes_one_sample() {
        let cfg = BaseTrainConfig {
            steps: 200,
            batch_size: 1,
            lr: 1e-3,
            warmup: 10,
            ..Default::default()
        };
        let (_, rep) = train_base(&[example("cat dog", 1)], &[], &cfg).unwrap();
        let first = rep.losses[0];
        let last = *rep.losses.last().unwrap();
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn deterministic_checkpoint() {
        let cfg = BaseTrainConfig {
            steps: 5,
            batch_size: 2,
            warmup: 1,
            ..Default::default()
        };
        let data = [example("cat", 1), example("sun", 2), example("red box", 3)];
        let (a, _) = train_base(&data, &[], &cfg).unwrap();
        let (b, _) = train_base(&data, &[], &cfg).unwrap();
        assert_eq!(a.params.hashes(crate::params::Role::Base), b.params.hashes(crate::params::Role::Base));
    }
}
