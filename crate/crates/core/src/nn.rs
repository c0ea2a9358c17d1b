//! Layer helpers shared by the ASR core, the fusion module and the noise
//! classifier. Parameters are looked up by name through a [`Binder`], which
//! also decides which tensors are trainable and whether low-rank deltas
//! are applied to a linear layer.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Param, ParamStore, Role};
use crate::tensor::{Mat, Real};

pub type TrainPredicate<'a> = &'a (dyn Fn(&Param) -> bool + Sync);

fn never(_: &Param) -> bool {
    false
}

/// Resolves parameter names against one or more stores for a single tape.
#[derive(Clone)]
pub struct Binder<'a> {
    stores: Vec<&'a ParamStore>,
    trainable: TrainPredicate<'a>,
    lora: Option<&'a HashMap<String, f32>>,
}

impl<'a> Binder<'a> {
    /// All tensors frozen, no adapters.
    pub fn frozen(stores: &[&'a ParamStore]) -> Self {
        Binder {
            stores: stores.to_vec(),
            trainable: &never,
            lora: None,
        }
    }

    pub fn with_trainable(mut self, pred: TrainPredicate<'a>) -> Self {
        self.trainable = pred;
        self
    }

    /// Enables low-rank deltas: `scales` maps a wrapped layer prefix to
    /// `alpha / r`; the delta tensors must live in one of the stores.
    pub fn with_lora(mut self, scales: &'a HashMap<String, f32>) -> Self {
        self.lora = Some(scales);
        self
    }

    pub fn find(&self, name: &str) -> Option<&'a Param> {
        self.stores.iter().find_map(|s| s.get(name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.find(name).is_some()
    }

    pub fn p<T: Real>(&self, tape: &mut Tape<T>, name: &str) -> Var {
        let param = self
            .find(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        let train = (self.trainable)(param);
        tape.named_leaf(name, train, || {
            let (r, c) = param.dims();
            Mat::from_vec(r, c, param.data.iter().map(|v| T::from_f32(*v)).collect())
        })
    }

    /// `x · Wᵀ + b`, plus `scale · (x · Aᵀ) · Bᵀ` when a delta is active for
    /// this layer.
    pub fn linear<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Var {
        let w = self.p(tape, &format!("{prefix}.weight"));
        let bias_name = format!("{prefix}.bias");
        let b = self.has(&bias_name).then(|| self.p(tape, &bias_name));
        let y = tape.linear(x, w, b);
        match self.lora.and_then(|m| m.get(prefix)) {
            Some(&scale) => {
                let a = self.p(tape, &format!("{prefix}.lora_a"));
                let bm = self.p(tape, &format!("{prefix}.lora_b"));
                let h = tape.matmul(x, a, false, true);
                let d = tape.matmul(h, bm, false, true);
                let d = tape.scale(d, T::from_f32(scale));
                tape.add(y, d)
            }
            None => y,
        }
    }

    pub fn layer_norm<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Var {
        let g = self.p(tape, &format!("{prefix}.gamma"));
        let b = self.p(tape, &format!("{prefix}.beta"));
        tape.layer_norm(x, g, b)
    }

    /// Kernel-3, pad-1 convolution over time; weight is `out × (3·in)`.
    pub fn conv1d<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var, stride: usize) -> Var {
        let cols = tape.im2col(x, 3, stride, 1);
        self.linear(tape, prefix, cols)
    }

    pub fn feed_forward<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Var {
        let h = self.linear(tape, &format!("{prefix}.fc1"), x);
        let h = tape.gelu(h);
        self.linear(tape, &format!("{prefix}.fc2"), h)
    }

    /// Key/value projections, split out so decoders can reuse them across
    /// steps.
    pub fn key_value<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, kv: Var) -> (Var, Var) {
        let k = self.linear(tape, &format!("{prefix}.k"), kv);
        let v = self.linear(tape, &format!("{prefix}.v"), kv);
        (k, v)
    }

    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        xq: Var,
        kv: (Var, Var),
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.linear(tape, &format!("{prefix}.q"), xq);
        let a = tape.attention(q, kv.0, kv.1, heads, causal);
        self.linear(tape, &format!("{prefix}.o"), a)
    }

    pub fn mha<T: Real>(
        &self,
        tape: &mut Tape<T>,
        prefix: &str,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let kv = self.key_value(tape, prefix, xkv);
        self.attend(tape, prefix, xq, kv, heads, causal)
    }
}

pub fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_out: usize,
    d_in: usize,
    role: Role,
) -> Result<()> {
    store.insert_normal(rng, &format!("{prefix}.weight"), &[d_out, d_in], role, (1.0 / d_in as f32).sqrt())?;
    store.insert_const(&format!("{prefix}.bias"), &[d_out], role, 0.0)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, role: Role) -> Result<()> {
    store.insert_const(&format!("{prefix}.gamma"), &[dim], role, 1.0)?;
    store.insert_const(&format!("{prefix}.beta"), &[dim], role, 0.0)
}

pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    role: Role,
) -> Result<()> {
    init_linear(store, rng, prefix, c_out, 3 * c_in, role)
}

pub fn init_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d: usize,
    role: Role,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), d, d, role)?;
    }
    // A key bias shifts every score in a row equally, so softmax cancels it
    // and its gradient is identically zero.
    store.remove(&format!("{prefix}.k.bias"));
    Ok(())
}

pub fn init_feed_forward<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d: usize,
    hidden: usize,
    role: Role,
) -> Result<()> {
    init_linear(store, rng, &format!("{prefix}.fc1"), hidden, d, role)?;
    init_linear(store, rng, &format!("{prefix}.fc2"), d, hidden, role)
}
