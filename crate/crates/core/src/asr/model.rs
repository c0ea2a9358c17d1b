use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, EOT, SOT, VOCAB_SIZE};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::params::{ParamStore, Role};
use crate::seed;
use crate::signal::{MelSpectrogram, N_MELS};
use crate::tensor::{sinusoidal_positions, Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsrConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Longest decoder input, including `<sot>`.
    pub max_tokens: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            d_model: 64,
            heads: 4,
            ff_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_tokens: 34,
        }
    }
}

/// `T × 64` encoder output; `T = ceil(mel frames / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderEmbedding {
    pub frames: Mat<f32>,
}

/// `L × 31` unnormalized decoder scores, one row per input token.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSequence {
    pub logits: Mat<f32>,
}

/// Encoder-decoder transformer over log-mel frames.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: AsrConfig,
    pub params: ParamStore,
}

impl AsrModel {
    pub fn new(config: AsrConfig, seed: u64) -> Result<Self> {
        if config.d_model % config.heads != 0 {
            return Err(Error::invalid("d_model must be divisible by heads"));
        }
        let mut rng = seed::rng_for(seed, &[seed::tag("asr-init")]);
        let r = &mut rng;
        let d = config.d_model;
        let role = Role::Base;
        let mut p = ParamStore::new();
        nn::init_conv(&mut p, r, "stem.conv1", d, N_MELS, role)?;
        nn::init_conv(&mut p, r, "stem.conv2", d, d, role)?;
        for l in 0..config.enc_layers {
            nn::init_layer_norm(&mut p, &format!("enc.{l}.ln1"), d, role)?;
            nn::init_attention(&mut p, r, &format!("enc.{l}.attn"), d, role)?;
            nn::init_layer_norm(&mut p, &format!("enc.{l}.ln2"), d, role)?;
            nn::init_feed_forward(&mut p, r, &format!("enc.{l}.ff"), d, config.ff_dim, role)?;
        }
        nn::init_layer_norm(&mut p, "enc.ln_post", d, role)?;
        p.insert_normal(r, "dec.tok_emb", &[VOCAB_SIZE, d], role, 0.1)?;
        p.insert_normal(r, "dec.pos_emb", &[config.max_tokens, d], role, 0.1)?;
        for l in 0..config.dec_layers {
            nn::init_layer_norm(&mut p, &format!("dec.{l}.ln1"), d, role)?;
            nn::init_attention(&mut p, r, &format!("dec.{l}.self_attn"), d, role)?;
            nn::init_layer_norm(&mut p, &format!("dec.{l}.ln2"), d, role)?;
            nn::init_attention(&mut p, r, &format!("dec.{l}.cross_attn"), d, role)?;
            nn::init_layer_norm(&mut p, &format!("dec.{l}.ln3"), d, role)?;
            nn::init_feed_forward(&mut p, r, &format!("dec.{l}.ff"), d, config.ff_dim, role)?;
        }
        nn::init_layer_norm(&mut p, "dec.ln_post", d, role)?;
        nn::init_linear(&mut p, r, "dec.out", VOCAB_SIZE, d, role)?;
        Ok(AsrModel { config, params: p })
    }

    pub fn from_params(config: AsrConfig, params: ParamStore) -> Result<Self> {
        let reference = AsrModel::new(config.clone(), 0)?;
        for p in reference.params.iter() {
            match params.get(&p.name) {
                Some(q) if q.shape == p.shape => {}
                Some(q) => {
                    return Err(Error::Shape(format!(
                        "{}: checkpoint shape {:?}, model expects {:?}",
                        p.name, q.shape, p.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {}", p.name))),
            }
        }
        Ok(AsrModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Every attention projection, encoder first: the adapter injection sites.
    pub fn attention_projections(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.config.enc_layers {
            for p in ["q", "k", "v", "o"] {
                out.push(format!("enc.{l}.attn.{p}"));
            }
        }
        for l in 0..self.config.dec_layers {
            for block in ["self_attn", "cross_attn"] {
                for p in ["q", "k", "v", "o"] {
                    out.push(format!("dec.{l}.{block}.{p}"));
                }
            }
        }
        out
    }

    pub fn binder(&self) -> Binder<'_> {
        Binder::frozen(&[&self.params])
    }

    /// Encoder graph from a `T × 80` mel node.
    pub fn encode_graph<T: Real>(&self, tape: &mut Tape<T>, b: &Binder, mel: Var) -> Var {
        let h = b.conv1d(tape, "stem.conv1", mel, 1);
        let h = tape.gelu(h);
        let h = b.conv1d(tape, "stem.conv2", h, 2);
        let h = tape.gelu(h);
        let (t, d) = tape.value(h).shape();
        let pos = tape.constant(sinusoidal_positions(t, d));
        let mut x = tape.add(h, pos);
        for l in 0..self.config.enc_layers {
            let n = b.layer_norm(tape, &format!("enc.{l}.ln1"), x);
            let a = b.mha(tape, &format!("enc.{l}.attn"), n, n, self.config.heads, false);
            x = tape.add(x, a);
            let n = b.layer_norm(tape, &format!("enc.{l}.ln2"), x);
            let f = b.feed_forward(tape, &format!("enc.{l}.ff"), n);
            x = tape.add(x, f);
        }
        b.layer_norm(tape, "enc.ln_post", x)
    }

    /// Cross-attention keys and values per decoder layer; computed once per
    /// utterance and reused across decoding steps.
    pub fn cross_kv<T: Real>(&self, tape: &mut Tape<T>, b: &Binder, emb: Var) -> Vec<(Var, Var)> {
        (0..self.config.dec_layers)
            .map(|l| b.key_value(tape, &format!("dec.{l}.cross_attn"), emb))
            .collect()
    }

    /// Decoder logits for `tokens` given precomputed cross keys/values.
    pub fn decode_graph<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Binder,
        kv: &[(Var, Var)],
        tokens: &[usize],
    ) -> Var {
        let tok = b.p(tape, "dec.tok_emb");
        let pos = b.p(tape, "dec.pos_emb");
        let te = tape.gather_rows(tok, tokens.to_vec());
        let pe = tape.gather_rows(pos, (0..tokens.len()).collect());
        let mut x = tape.add(te, pe);
        let heads = self.config.heads;
        for (l, &ckv) in kv.iter().enumerate() {
            let n = b.layer_norm(tape, &format!("dec.{l}.ln1"), x);
            let a = b.mha(tape, &format!("dec.{l}.self_attn"), n, n, heads, true);
            x = tape.add(x, a);
            let n = b.layer_norm(tape, &format!("dec.{l}.ln2"), x);
            let a = b.attend(tape, &format!("dec.{l}.cross_attn"), n, ckv, heads, false);
            x = tape.add(x, a);
            let n = b.layer_norm(tape, &format!("dec.{l}.ln3"), x);
            let f = b.feed_forward(tape, &format!("dec.{l}.ff"), n);
            x = tape.add(x, f);
        }
        let x = b.layer_norm(tape, "dec.ln_post", x);
        b.linear(tape, "dec.out", x)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&SOT) {
            return Err(Error::invalid("decoder input must start with <sot>"));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::invalid(format!(
                "{} decoder tokens, limit is {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= VOCAB_SIZE) {
            return Err(Error::invalid(format!("token id {t} out of range")));
        }
        Ok(())
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<EncoderEmbedding> {
        self.encode_with(&self.binder(), &mel.frames)
    }

    pub fn decode_logits(&self, emb: &EncoderEmbedding, tokens: &[usize]) -> Result<LogitSequence> {
        self.decode_logits_with(&self.binder(), emb, tokens)
    }

    pub fn greedy_decode(&self, emb: &EncoderEmbedding) -> String {
        Tokenizer.decode(&self.greedy_tokens_with(&self.binder(), emb))
    }

    pub fn transcribe(&self, mel: &MelSpectrogram) -> Result<String> {
        Ok(self.greedy_decode(&self.encode(mel)?))
    }

    /// Encoder forward pass under an arbitrary binder (base or adapted).
    pub fn encode_with(&self, b: &Binder, mel: &Mat<f32>) -> Result<EncoderEmbedding> {
        if mel.cols != N_MELS {
            return Err(Error::Shape(format!("mel has {} bins, expected {N_MELS}", mel.cols)));
        }
        if mel.rows < 2 {
            return Err(Error::invalid("encoder needs at least 2 mel frames"));
        }
        if !mel.is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(mel.clone());
        let e = self.encode_graph(&mut tape, b, x);
        Ok(EncoderEmbedding {
            frames: tape.value(e).clone(),
        })
    }

    pub fn decode_logits_with(&self, b: &Binder, emb: &EncoderEmbedding, tokens: &[usize]) -> Result<LogitSequence> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::<f32>::new();
        let e = tape.constant(emb.frames.clone());
        let kv = self.cross_kv(&mut tape, b, e);
        let y = self.decode_graph(&mut tape, b, &kv, tokens);
        Ok(LogitSequence {
            logits: tape.value(y).clone(),
        })
    }

    /// Greedy token sequence starting at `<sot>`; ends at `<eot>` (included)
    /// or at the length cap.
    pub fn greedy_tokens_with(&self, b: &Binder, emb: &EncoderEmbedding) -> Vec<usize> {
        let mut tape = Tape::<f32>::new();
        let e = tape.constant(emb.frames.clone());
        let kv = self.cross_kv(&mut tape, b, e);
        let mut tokens = vec![SOT];
        while tokens.len() < self.config.max_tokens {
            let y = self.decode_graph(&mut tape, b, &kv, &tokens);
            let next = argmax(tape.value(y).row(tokens.len() - 1));
            tokens.push(next);
            if next == EOT {
                break;
            }
        }
        tokens
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AsrModel {
        AsrModel::new(AsrConfig::default(), 1).unwrap()
    }

    fn random_mel(t: usize, seed: u64) -> MelSpectrogram {
        use rand::Rng;
        let mut r = seed::rng(seed);
        MelSpectrogram::new(Mat::from_vec(t, N_MELS, (0..t * N_MELS).map(|_| r.random_range(-1.5..0.5)).collect()))
            .unwrap()
    }

    #[test]
    fn twenty_four_injection_sites() {
        let m = model();
        let sites = m.attention_projections();
        assert_eq!(sites.len(), 24);
        for s in &sites {
            assert!(m.params.contains(&format!("{s}.weight")), "{s}");
        }
    }

    #[test]
    fn shape_law_and_determinism() {
        let m = model();
        let mel = random_mel(98, 0);
        let e = m.encode(&mel).unwrap();
        assert_eq!(e.frames.shape(), (49, 64));
        assert_eq!(e, m.encode(&mel).unwrap());
        for t in [2, 3, 7, 300] {
            assert_eq!(m.encode(&random_mel(t, 1)).unwrap().frames.rows, t.div_ceil(2));
        }
        assert!(m.encode(&random_mel(1, 1)).is_err());
    }

    #[test]
    fn first_frame_matters() {
        let m = model();
        let a = random_mel(40, 2);
        let mut b = a.clone();
        b.frames.data[0] += 0.5;
        let d = m.encode(&a).unwrap().frames.max_abs_diff(&m.encode(&b).unwrap().frames);
        assert!(d > 0.0);
    }

    #[test]
    fn decoder_is_causal() {
        let m = model();
        let e = m.encode(&random_mel(30, 3)).unwrap();
        let short = m.decode_logits(&e, &[SOT, 3, 4]).unwrap();
        let long = m.decode_logits(&e, &[SOT, 3, 4, 9, 26]).unwrap();
        assert_eq!(m.decode_logits(&e, &[SOT]).unwrap().logits.rows, 1);
        for r in 0..3 {
            for (a, b) in short.logits.row(r).iter().zip(long.logits.row(r)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
        assert!(m.decode_logits(&e, &[SOT, 31]).is_err());
        assert!(m.decode_logits(&e, &[3]).is_err());
    }

    #[test]
    fn permuted_embedding_changes_logits() {
        let m = model();
        let e = m.encode(&random_mel(30, 4)).unwrap();
        let mut p = e.clone();
        let rows = p.frames.rows;
        for r in 0..rows {
            p.frames.row_mut(r).copy_from_slice(e.frames.row(rows - 1 - r));
        }
        let a = m.decode_logits(&e, &[SOT, 1, 2]).unwrap();
        let b = m.decode_logits(&p, &[SOT, 1, 2]).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) > 0.0);
    }

    #[test]
    fn rigged_eot_gives_empty_text() {
        let mut m = model();
        let bias = m.params.get_mut("dec.out.bias").unwrap();
        bias.data[EOT] = 1e6;
        let e = m.encode(&random_mel(20, 5)).unwrap();
        assert_eq!(m.greedy_decode(&e), "");
        let unrigged = model();
        let t = unrigged.greedy_tokens_with(&unrigged.binder(), &e);
        assert!(t.len() <= 34);
        assert_eq!(unrigged.greedy_decode(&e), unrigged.greedy_decode(&e));
    }
}
