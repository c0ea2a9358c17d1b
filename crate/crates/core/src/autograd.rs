//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records one forward pass. Ops are coarse (fused attention,
//! layer norm, im2col) so a transformer layer is a few dozen nodes and the
//! per-sample overhead stays small next to the GEMMs.

use std::collections::HashMap;

use crate::tensor::{gemm_into, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Im2col {
        a: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    MeanRows {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    L1 {
        a: Var,
        target: Mat<T>,
    },
    Mse {
        a: Var,
        target: Mat<T>,
    },
    SoftCe {
        logits: Var,
        target: Mat<T>,
        softmax: Mat<T>,
    },
    HardCe {
        logits: Var,
        targets: Vec<usize>,
        softmax: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only
/// leaves keep their gradient after the pass.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            named: HashMap::new(),
            trainable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn input(&mut self, m: Mat<T>, requires_grad: bool) -> Var {
        self.push(m, Op::Leaf, requires_grad)
    }

    /// Binds a named parameter once per tape; later lookups reuse the leaf.
    pub fn named_leaf(
        &mut self,
        name: &str,
        requires_grad: bool,
        make: impl FnOnce() -> Mat<T>,
    ) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(make(), Op::Leaf, requires_grad);
        self.named.insert(name.to_string(), v);
        if requires_grad {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Trainable leaves bound through [`Tape::named_leaf`], in binding order.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = self.value(a).matmul(self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    /// `x · wᵀ (+ bias)` with `w` stored `out × in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let y = self.matmul(x, w, false, true);
        match bias {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| *x + *y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(bias);
        assert_eq!(vb.data.len(), va.cols, "bias width mismatch");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o = *o + *b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddBias { a, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| *x * s).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, s }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat::from_vec(va.rows, va.cols, va.data.iter().map(|&x| gelu(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::from_f64(1e-5);
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let n = T::from_f64(cols as f64);
        let mut out = Mat::zeros(rows, cols);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let x = va.row(r);
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (x[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q` (`Tq × d`), `k`, `v` (`Tk × d`). With `causal`, query `i` only
    /// sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = vq.shape();
        let tk = vk.rows;
        assert_eq!(vk.cols, d);
        assert_eq!(vv.shape(), (tk, d));
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out: Mat<T> = Mat::zeros(tq, d);
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            // SAFETY: head slices are in-bounds strided views of q/k/v/out.
            unsafe {
                T::gemm(
                    tq,
                    dh,
                    tk,
                    scale,
                    vq.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    vk.data.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::zero(),
                    p.as_mut_ptr(),
                    tk as isize,
                    1,
                );
            }
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let lim = if causal { (i + 1).min(tk) } else { tk };
                let mx = row[..lim].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row[..lim].iter_mut() {
                    *x = (*x - mx).exp();
                    sum = sum + *x;
                }
                for x in row[..lim].iter_mut() {
                    *x = *x / sum;
                }
                for x in row[lim..].iter_mut() {
                    *x = T::zero();
                }
            }
            unsafe {
                T::gemm(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    p.as_ptr(),
                    tk as isize,
                    1,
                    vv.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::zero(),
                    out.data.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Unfolds `T × C` into `T_out × (kernel·C)` with zero padding, so a
    /// 1-D convolution becomes `im2col · Wᵀ`. Column block `j` holds input
    /// row `t·stride + j − pad`.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let va = self.value(a);
        let (t, c) = va.shape();
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Mat::zeros(t_out, kernel * c);
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.data[o * kernel * c + j * c..o * kernel * c + (j + 1) * c]
                        .copy_from_slice(va.row(src as usize));
                }
            }
        }
        let rg = self.rg(a);
        self.push(
            out,
            Op::Im2col {
                a,
                kernel,
                stride,
                pad,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(idx.len(), va.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(va.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows { a, idx }, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(1, va.cols);
        for r in 0..va.rows {
            for (o, x) in out.data.iter_mut().zip(va.row(r)) {
                *o = *o + *x;
            }
        }
        let n = T::from_f64(va.rows as f64);
        for o in out.data.iter_mut() {
            *o = *o / n;
        }
        let rg = self.rg(a);
        self.push(out, Op::MeanRows { a }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, a: Var, target: Mat<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "l1 shape mismatch");
        let s: f64 = va
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, y)| (*x - *y).abs().as_f64())
            .sum();
        let out = Mat::from_vec(1, 1, vec![T::from_f64(s / va.data.len() as f64)]);
        let rg = self.rg(a);
        self.push(out, Op::L1 { a, target }, rg)
    }

    pub fn mse_loss(&mut self, a: Var, target: Mat<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "mse shape mismatch");
        let s: f64 = va
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, y)| {
                let d = (*x - *y).as_f64();
                d * d
            })
            .sum();
        let out = Mat::from_vec(1, 1, vec![T::from_f64(s / va.data.len() as f64)]);
        let rg = self.rg(a);
        self.push(out, Op::Mse { a, target }, rg)
    }

    /// Row-mean of `−Σ_v target_v · log softmax(logits)_v`; `target` rows
    /// are probability distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Mat<T>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), target.shape(), "soft-ce shape mismatch");
        let lsm = log_softmax_rows(vl);
        let s: f64 = lsm
            .data
            .iter()
            .zip(&target.data)
            .map(|(l, p)| -(*p * *l).as_f64())
            .sum();
        let softmax = Mat::from_vec(lsm.rows, lsm.cols, lsm.data.iter().map(|l| l.exp()).collect());
        let out = Mat::from_vec(1, 1, vec![T::from_f64(s / vl.rows as f64)]);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftCe {
                logits,
                target,
                softmax,
            },
            rg,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len(), "ce target count mismatch");
        let lsm = log_softmax_rows(vl);
        let s: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &y)| -lsm.at(r, y).as_f64())
            .sum();
        let softmax = Mat::from_vec(lsm.rows, lsm.cols, lsm.data.iter().map(|l| l.exp()).collect());
        let out = Mat::from_vec(1, 1, vec![T::from_f64(s / vl.rows as f64)]);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::HardCe {
                logits,
                targets,
                softmax,
            },
            rg,
        )
    }

    /// `Σ wᵢ · lossᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, T::from_f64(w)) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.expect("weighted_sum needs at least one term")
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).data.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = grad_slot(grads, *a, va.rows, va.cols);
                    match (*ta, *tb) {
                        (false, false) => gemm_into(&mut ga.data, g, false, vb, true, T::one(), T::one()),
                        (false, true) => gemm_into(&mut ga.data, g, false, vb, false, T::one(), T::one()),
                        (true, false) => gemm_into(&mut ga.data, vb, false, g, true, T::one(), T::one()),
                        (true, true) => gemm_into(&mut ga.data, vb, true, g, true, T::one(), T::one()),
                    }
                }
                if self.rg(*b) {
                    let gb = grad_slot(grads, *b, vb.rows, vb.cols);
                    match (*ta, *tb) {
                        (false, false) => gemm_into(&mut gb.data, va, true, g, false, T::one(), T::one()),
                        (false, true) => gemm_into(&mut gb.data, g, true, va, false, T::one(), T::one()),
                        (true, false) => gemm_into(&mut gb.data, va, false, g, false, T::one(), T::one()),
                        (true, true) => gemm_into(&mut gb.data, g, true, va, true, T::one(), T::one()),
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if self.rg(p) {
                        accumulate(grads, p, g.data.iter().copied(), g.rows, g.cols);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.data.iter().copied(), g.rows, g.cols);
                }
                if self.rg(*bias) {
                    let vb = self.value(*bias);
                    let gb = grad_slot(grads, *bias, vb.rows, vb.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o = *o + *x;
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                let s = *s;
                accumulate(grads, *a, g.data.iter().map(|x| *x * s), g.rows, g.cols);
            }
            Op::Gelu { a } => {
                let va = self.value(*a);
                accumulate(
                    grads,
                    *a,
                    g.data.iter().zip(&va.data).map(|(gy, x)| *gy * gelu_grad(*x)),
                    g.rows,
                    g.cols,
                );
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (g.rows, g.cols);
                let gm = &self.value(*gamma).data;
                if self.rg(*gamma) {
                    let gg = grad_slot(grads, *gamma, 1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] = gg.data[c] + g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = grad_slot(grads, *beta, 1, cols);
                    for r in 0..rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o = *o + *x;
                        }
                    }
                }
                if self.rg(*a) {
                    let n = T::from_f64(cols as f64);
                    let ga = grad_slot(grads, *a, rows, cols);
                    let mut dxh = vec![T::zero(); cols];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gm[c];
                            dxh[c] = d;
                            m1 = m1 + d;
                            m2 = m2 + d * xhat[r * cols + c];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for c in 0..cols {
                            let v = rstd[r] * (dxh[c] - m1 - xhat[r * cols + c] * m2);
                            ga.data[r * cols + c] = ga.data[r * cols + c] + v;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            Op::Im2col {
                a,
                kernel,
                stride,
                pad,
            } => {
                if !self.rg(*a) {
                    return;
                }
                let va = self.value(*a);
                let (t, c) = va.shape();
                let ga = grad_slot(grads, *a, t, c);
                for o in 0..g.rows {
                    for j in 0..*kernel {
                        let src = (o * stride + j) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < t {
                            let dst = &mut ga.data[src as usize * c..(src as usize + 1) * c];
                            let from = &g.data[o * kernel * c + j * c..o * kernel * c + (j + 1) * c];
                            for (d, s) in dst.iter_mut().zip(from) {
                                *d = *d + *s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let va = self.value(*a);
                let ga = grad_slot(grads, *a, va.rows, va.cols);
                for (o, &src) in idx.iter().enumerate() {
                    let cols = va.cols;
                    for c in 0..cols {
                        ga.data[src * cols + c] = ga.data[src * cols + c] + g.data[o * cols + c];
                    }
                }
            }
            Op::MeanRows { a } => {
                let va = self.value(*a);
                let n = T::from_f64(va.rows as f64);
                let ga = grad_slot(grads, *a, va.rows, va.cols);
                for r in 0..va.rows {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *o = *o + *x / n;
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let ga = grad_slot(grads, *a, y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(gy, yy)| *gy * *yy).sum();
                    for c in 0..y.cols {
                        let idx = r * y.cols + c;
                        ga.data[idx] = ga.data[idx] + y.data[idx] * (g.data[idx] - dot);
                    }
                }
            }
            Op::L1 { a, target } => {
                let va = self.value(*a);
                let s = g.data[0] / T::from_f64(va.data.len() as f64);
                accumulate(
                    grads,
                    *a,
                    va.data.iter().zip(&target.data).map(|(x, y)| {
                        let d = *x - *y;
                        if d > T::zero() {
                            s
                        } else if d < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    }),
                    va.rows,
                    va.cols,
                );
            }
            Op::Mse { a, target } => {
                let va = self.value(*a);
                let s = g.data[0] * T::from_f64(2.0 / va.data.len() as f64);
                accumulate(
                    grads,
                    *a,
                    va.data.iter().zip(&target.data).map(|(x, y)| (*x - *y) * s),
                    va.rows,
                    va.cols,
                );
            }
            Op::SoftCe {
                logits,
                target,
                softmax,
            } => {
                let s = g.data[0] / T::from_f64(softmax.rows as f64);
                // Target rows may not sum exactly to one; keep the general form.
                let mut out = Vec::with_capacity(softmax.data.len());
                for r in 0..softmax.rows {
                    let mass: T = target.row(r).iter().copied().sum();
                    for c in 0..softmax.cols {
                        out.push((softmax.at(r, c) * mass - target.at(r, c)) * s);
                    }
                }
                accumulate(grads, *logits, out.into_iter(), softmax.rows, softmax.cols);
            }
            Op::HardCe {
                logits,
                targets,
                softmax,
            } => {
                let s = g.data[0] / T::from_f64(softmax.rows as f64);
                let mut out: Vec<T> = softmax.data.iter().map(|p| *p * s).collect();
                for (r, &y) in targets.iter().enumerate() {
                    out[r * softmax.cols + y] = out[r * softmax.cols + y] - s;
                }
                accumulate(grads, *logits, out.into_iter(), softmax.rows, softmax.cols);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Mat<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = vq.shape();
        let tk = vk.rows;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq: Mat<T> = Mat::zeros(tq, d);
        let mut dk: Mat<T> = Mat::zeros(tk, d);
        let mut dv: Mat<T> = Mat::zeros(tk, d);
        let mut dp = vec![T::zero(); tq * tk];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            // SAFETY: strided in-bounds head views, as in the forward pass.
            unsafe {
                // dP = dO_h · V_hᵀ
                T::gemm(
                    tq,
                    dh,
                    tk,
                    T::one(),
                    g.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    vv.data.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::zero(),
                    dp.as_mut_ptr(),
                    tk as isize,
                    1,
                );
                // dV_h = Pᵀ · dO_h
                T::gemm(
                    tk,
                    tq,
                    dh,
                    T::one(),
                    p.as_ptr(),
                    1,
                    tk as isize,
                    g.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::zero(),
                    dv.data.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut dp[i * tk..(i + 1) * tk];
                let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                for (x, pp) in dr.iter_mut().zip(pr) {
                    *x = *pp * (*x - dot);
                }
            }
            unsafe {
                // dQ_h = scale · dS · K_h
                T::gemm(
                    tq,
                    tk,
                    dh,
                    scale,
                    dp.as_ptr(),
                    tk as isize,
                    1,
                    vk.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::zero(),
                    dq.data.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
                // dK_h = scale · dSᵀ · Q_h
                T::gemm(
                    tk,
                    tq,
                    dh,
                    scale,
                    dp.as_ptr(),
                    1,
                    tk as isize,
                    vq.data.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    T::zero(),
                    dk.data.as_mut_ptr().add(h * dh),
                    d as isize,
                    1,
                );
            }
        }
        for (var, m) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                accumulate(grads, var, m.data.into_iter(), m.rows, m.cols);
            }
        }
    }
}

pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad).saturating_sub(kernel) / stride + 1
}

fn grad_slot<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, rows: usize, cols: usize) -> &mut Mat<T> {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn accumulate<T: Real>(
    grads: &mut [Option<Mat<T>>],
    v: Var,
    values: impl Iterator<Item = T>,
    rows: usize,
    cols: usize,
) {
    match &mut grads[v.0] {
        Some(m) => {
            for (o, x) in m.data.iter_mut().zip(values) {
                *o = *o + x;
            }
        }
        slot @ None => *slot = Some(Mat::from_vec(rows, cols, values.collect())),
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    // 0.5·(1 + tanh(u)) is the logistic function of 2u.
    x / (T::one() + (-gelu_arg(x) - gelu_arg(x)).exp())
}

#[inline]
fn gelu_arg<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    c * (x + k * x * x * x)
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let two = T::from_f64(2.0);
    let s = T::one() / (T::one() + (-two * gelu_arg(x)).exp());
    s + two * x * s * (T::one() - s) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

pub fn softmax_rows<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}

pub fn log_softmax_rows<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = m.clone();
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|x| (*x - mx).exp()).sum::<T>().ln() + mx;
        for x in row.iter_mut() {
            *x = *x - lse;
        }
    }
    out
}
