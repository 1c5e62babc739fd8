//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Matrices are row-major with the feature axis last. Parameters are borrowed
//! from a [`ParamStore`] rather than copied; their gradients come back as a
//! [`Gradients`] value from [`Tape::backward`].

use std::collections::HashMap;

use super::tensor::{Gradients, ParamId, ParamStore, Real, Tensor};
use super::NnError;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    Concat(Var, Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        rel_k: Option<Var>,
        rel_v: Option<Var>,
        heads: usize,
        probs: Vec<T>,
    },
    PairBilinear {
        h: Var,
        weight: Var,
        bias: Var,
        pairs: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m x k) * b^T` where `b` is `n x k`.
fn matmul_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out += a^T * b` where `a` is `m x k` and `b` is `m x n`.
fn matmul_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.by_id(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        let id = self.params.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.value(v).matrix_dims()
    }

    /// `a * b`, or `a * b^T` with `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (m, k) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let n = if transpose_b {
            assert_eq!(bc, k, "matmul inner dimension");
            br
        } else {
            assert_eq!(br, k, "matmul inner dimension");
            bc
        };
        let mut out = vec![T::zero(); m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if transpose_b {
            matmul_bt(ad, bd, m, k, n, &mut out);
        } else {
            matmul(ad, bd, m, k, n, &mut out);
        }
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul { a, b, transpose_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("add shape");
        self.push(t, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (_, cols) = self.dims2(x);
        let b = self.value(bias).data();
        assert_eq!(b.len(), cols, "bias width");
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("add_row shape");
        self.push(t, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("scale shape");
        self.push(t, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("tanh shape");
        self.push(t, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("gelu shape");
        self.push(t, Op::Gelu(x))
    }

    /// Concatenates two matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (m, ca) = self.dims2(a);
        let (mb, cb) = self.dims2(b);
        assert_eq!(m, mb, "concat rows");
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(vec![m, ca + cb], data).expect("concat shape");
        self.push(t, Op::Concat(a, b))
    }

    /// Copies the listed rows of `table`; the result has `shape`, whose
    /// last axis must equal the table width.
    pub fn gather(&mut self, table: Var, rows: Vec<usize>, shape: Vec<usize>) -> Var {
        let (nrows, cols) = self.dims2(table);
        assert_eq!(shape.last(), Some(&cols), "gather width");
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            assert!(r < nrows, "gather row {r} of {nrows}");
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(shape, data).expect("gather shape");
        self.push(t, Op::Gather { table, rows })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (m, d) = self.dims2(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), d, "layer-norm gain width");
        assert_eq!(b.len(), d, "layer-norm bias width");
        let xd = self.value(x).data();
        let dn = T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = Vec::with_capacity(m * d);
        let mut xhat = Vec::with_capacity(m * d);
        let mut rstd = Vec::with_capacity(m);
        for row in xd.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let t = Tensor::new(vec![m, d], out).expect("layer-norm shape");
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention with optional relation-aware
    /// key and value terms of shape `[h, I, I, d_head]` where `h` is 1 (shared
    /// across heads) or the head count.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        rel_k: Option<Var>,
        rel_v: Option<Var>,
        heads: usize,
    ) -> Var {
        let (len, d) = self.dims2(q);
        assert_eq!(self.dims2(k), (len, d), "key shape");
        assert_eq!(self.dims2(v), (len, d), "value shape");
        assert_eq!(d % heads, 0, "heads divide width");
        let dh = d / heads;
        for rel in [rel_k, rel_v].into_iter().flatten() {
            let s = self.value(rel).shape();
            assert!(
                s.len() == 4 && (s[0] == 1 || s[0] == heads) && s[1..] == [len, len, dh],
                "relative tensor shape {s:?}"
            );
        }
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rk = rel_k.map(|r| (self.value(r).shape()[0], self.value(r).data()));
        let rv = rel_v.map(|r| (self.value(r).shape()[0], self.value(r).data()));
        let rel_offset = |blocks: usize, h: usize, i: usize, j: usize| {
            let hb = if blocks == 1 { 0 } else { h };
            ((hb * len + i) * len + j) * dh
        };

        let mut out = vec![T::zero(); len * d];
        let mut probs = vec![T::zero(); heads * len * len];
        let mut keyvec = vec![T::zero(); dh];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..len {
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                let p = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kd[j * d + c0..j * d + c0 + dh];
                    let key: &[T] = match rk {
                        Some((blocks, r)) => {
                            let o = rel_offset(blocks, h, i, j);
                            for (c, kv) in keyvec.iter_mut().enumerate() {
                                *kv = kj[c] + r[o + c];
                            }
                            &keyvec
                        }
                        None => kj,
                    };
                    let mut s = T::zero();
                    for (&a, &b) in qi.iter().zip(key) {
                        s += a * b;
                    }
                    *pj = s * scale;
                }
                let max = p.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= total;
                }
                let oi = &mut out[i * d + c0..i * d + c0 + dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    match rv {
                        Some((blocks, r)) => {
                            let o = rel_offset(blocks, h, i, j);
                            for c in 0..dh {
                                oi[c] += pj * (vj[c] + r[o + c]);
                            }
                        }
                        None => {
                            for c in 0..dh {
                                oi[c] += pj * vj[c];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![len, d], out).expect("attention shape");
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                rel_k,
                rel_v,
                heads,
                probs,
            },
        )
    }

    /// Softmax weights of an attention node, laid out `[heads, I, I]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-pair class scores `h_i^T W_c h_j + b_c` with `W` shaped `[C, d, d]`.
    pub fn pair_bilinear(
        &mut self,
        h: Var,
        weight: Var,
        bias: Var,
        pairs: Vec<(usize, usize)>,
    ) -> Var {
        let (len, d) = self.dims2(h);
        let ws = self.value(weight).shape().to_vec();
        assert!(
            ws.len() == 3 && ws[1] == d && ws[2] == d,
            "bilinear weight shape"
        );
        let classes = ws[0];
        let (hd, wd, bd) = (
            self.value(h).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        assert_eq!(bd.len(), classes, "bilinear bias width");
        let mut out = Vec::with_capacity(pairs.len() * classes);
        let mut tmp = vec![T::zero(); d];
        for &(i, j) in &pairs {
            assert!(i < len && j < len, "pair index");
            let hj = &hd[j * d..(j + 1) * d];
            let hi = &hd[i * d..(i + 1) * d];
            for c in 0..classes {
                let w = &wd[c * d * d..(c + 1) * d * d];
                tmp.iter_mut().for_each(|t| *t = T::zero());
                matmul(w, hj, d, d, 1, &mut tmp);
                let s: T = hi.iter().zip(&tmp).map(|(&a, &b)| a * b).sum();
                out.push(s + bd[c]);
            }
        }
        let t = Tensor::new(vec![pairs.len().max(1), classes], out).expect("pair shape");
        self.push(
            t,
            Op::PairBilinear {
                h,
                weight,
                bias,
                pairs,
            },
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let (m, c) = self.dims2(logits);
        assert_eq!(targets.len(), m, "one target per row");
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * c);
        let mut loss = T::zero();
        for (row, &t) in ld.chunks(c).zip(&targets) {
            assert!(t < c, "target class {t} of {c}");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_total = total.ln();
            loss += log_total - (row[t] - max);
            probs.extend(row.iter().map(|&v| (v - max).exp() / total));
        }
        let t = Tensor::new(vec![1], vec![loss / T::of(m as f64)]).expect("scalar");
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Scalar `sum(x * weights)`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), weights.len(), "weight count");
        let s = xv.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let t = Tensor::new(vec![1], vec![s]).expect("scalar");
        self.push(t, Op::WeightedSum { x, weights })
    }

    /// Scalar sum of every element.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, vec![T::one(); n])
    }

    /// Back-propagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::NoRecordedForward);
        }
        if self.value(loss).numel() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::with_capacity(self.params.len());

        for n in (0..=loss.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            match &self.nodes[n].op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, g),
                op => self.backprop(op, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn backprop(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = self.dims2(*a);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if *transpose_b {
                    let (n, _) = self.dims2(*b);
                    // C = A B^T: dA = dC B, dB = dC^T A.
                    matmul(g, bd, m, n, k, self.slot(grads, *a));
                    matmul_at(g, ad, m, n, k, self.slot(grads, *b));
                } else {
                    let (_, n) = self.dims2(*b);
                    matmul_bt(g, bd, m, n, k, self.slot(grads, *a));
                    matmul_at(ad, g, m, k, n, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.slot(grads, v)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(s, &d)| *s += d);
                }
            }
            Op::AddRow { x, bias } => {
                self.slot(grads, *x)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, &d)| *s += d);
                let cols = self.value(*bias).numel();
                let gb = self.slot(grads, *bias);
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.slot(grads, *x)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &d)| *a += d * s);
            }
            Op::Tanh(x) => {
                // Recover tanh(x) from the stored input.
                let xd = self.value(*x).data().to_vec();
                let gx = self.slot(grads, *x);
                for ((a, &d), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                    let y = xv.tanh();
                    *a += d * (T::one() - y * y);
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data().to_vec();
                let gx = self.slot(grads, *x);
                for ((a, &d), &xv) in gx.iter_mut().zip(g).zip(&xd) {
                    *a += d * gelu_parts(xv).1;
                }
            }
            Op::Concat(a, b) => {
                let (m, ca) = self.dims2(*a);
                let (_, cb) = self.dims2(*b);
                let w = ca + cb;
                let ga = self.slot(grads, *a);
                for i in 0..m {
                    for c in 0..ca {
                        ga[i * ca + c] += g[i * w + c];
                    }
                }
                let gb = self.slot(grads, *b);
                for i in 0..m {
                    for c in 0..cb {
                        gb[i * cb + c] += g[i * w + ca + c];
                    }
                }
            }
            Op::Gather { table, rows } => {
                let (_, cols) = self.dims2(*table);
                let gt = self.slot(grads, *table);
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g[k * cols..(k + 1) * cols];
                    gt[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &d)| *a += d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = self.dims2(*x);
                let gv = self.value(*gain).data();
                let dn = T::of(d as f64);
                {
                    let gg = self.slot(grads, *gain);
                    for i in 0..m {
                        for c in 0..d {
                            gg[c] += g[i * d + c] * xhat[i * d + c];
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *bias);
                    for i in 0..m {
                        for c in 0..d {
                            gb[c] += g[i * d + c];
                        }
                    }
                }
                let gx = self.slot(grads, *x);
                for i in 0..m {
                    let row = i * d..(i + 1) * d;
                    let dxhat: Vec<T> = g[row.clone()]
                        .iter()
                        .zip(gv)
                        .map(|(&a, &b)| a * b)
                        .collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat
                        .iter()
                        .zip(&xhat[row.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>()
                        / dn;
                    for c in 0..d {
                        gx[i * d + c] += rstd[i] * (dxhat[c] - mean_d - xhat[i * d + c] * mean_dx);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                rel_k,
                rel_v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *rel_k, *rel_v, *heads, probs, g, grads),
            Op::PairBilinear {
                h,
                weight,
                bias,
                pairs,
            } => {
                let (_, d) = self.dims2(*h);
                let classes = self.value(*weight).shape()[0];
                let (hd, wd) = (self.value(*h).data(), self.value(*weight).data());
                let mut gh = vec![T::zero(); hd.len()];
                let mut gw = vec![T::zero(); wd.len()];
                let mut gbias = vec![T::zero(); classes];
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let hi = &hd[i * d..(i + 1) * d];
                    let hj = &hd[j * d..(j + 1) * d];
                    for c in 0..classes {
                        let gp = g[p * classes + c];
                        if gp == T::zero() {
                            continue;
                        }
                        gbias[c] += gp;
                        let w = &wd[c * d * d..(c + 1) * d * d];
                        for a in 0..d {
                            let mut wa_hj = T::zero();
                            for b in 0..d {
                                let wab = w[a * d + b];
                                wa_hj += wab * hj[b];
                                gw[c * d * d + a * d + b] += gp * hi[a] * hj[b];
                                gh[j * d + b] += gp * hi[a] * wab;
                            }
                            gh[i * d + a] += gp * wa_hj;
                        }
                    }
                }
                for (v, buf) in [(*h, gh), (*weight, gw), (*bias, gbias)] {
                    self.slot(grads, v)
                        .iter_mut()
                        .zip(buf)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, c) = self.dims2(*logits);
                let scale = g[0] / T::of(m as f64);
                let gl = self.slot(grads, *logits);
                for (i, &t) in targets.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == t { T::one() } else { T::zero() };
                        gl[i * c + k] += scale * (probs[i * c + k] - onehot);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let s = g[0];
                self.slot(grads, *x)
                    .iter_mut()
                    .zip(weights)
                    .for_each(|(a, &w)| *a += s * w);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        rel_k: Option<Var>,
        rel_v: Option<Var>,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (len, d) = self.dims2(q);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let rk = rel_k.map(|r| (self.value(r).shape()[0], self.value(r).data()));
        let rv = rel_v.map(|r| (self.value(r).shape()[0], self.value(r).data()));
        let rel_offset = |blocks: usize, h: usize, i: usize, j: usize| {
            let hb = if blocks == 1 { 0 } else { h };
            ((hb * len + i) * len + j) * dh
        };

        let mut gq = vec![T::zero(); len * d];
        let mut gk = vec![T::zero(); len * d];
        let mut gv = vec![T::zero(); len * d];
        let mut grk = rk.map(|(_, r)| vec![T::zero(); r.len()]);
        let mut grv = rv.map(|(_, r)| vec![T::zero(); r.len()]);
        let mut dp = vec![T::zero(); len];

        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..len {
                let p = &probs[(h * len + i) * len..(h * len + i + 1) * len];
                let go = &g[i * d + c0..i * d + c0 + dh];
                // Through the weighted sum of (v_j + relV_ij).
                for j in 0..len {
                    let vj = &vd[j * d + c0..j * d + c0 + dh];
                    let mut s = T::zero();
                    match rv {
                        Some((blocks, r)) => {
                            let o = rel_offset(blocks, h, i, j);
                            for c in 0..dh {
                                s += go[c] * (vj[c] + r[o + c]);
                            }
                            let grv = grv.as_mut().expect("allocated with rel_v");
                            for c in 0..dh {
                                grv[o + c] += p[j] * go[c];
                            }
                        }
                        None => {
                            for c in 0..dh {
                                s += go[c] * vj[c];
                            }
                        }
                    }
                    dp[j] = s;
                    for c in 0..dh {
                        gv[j * d + c0 + c] += p[j] * go[c];
                    }
                }
                // Through the softmax.
                let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi = &qd[i * d + c0..i * d + c0 + dh];
                for j in 0..len {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &kd[j * d + c0..j * d + c0 + dh];
                    match rk {
                        Some((blocks, r)) => {
                            let o = rel_offset(blocks, h, i, j);
                            for c in 0..dh {
                                gq[i * d + c0 + c] += ds * (kj[c] + r[o + c]);
                            }
                            let grk = grk.as_mut().expect("allocated with rel_k");
                            for c in 0..dh {
                                grk[o + c] += ds * qi[c];
                            }
                        }
                        None => {
                            for c in 0..dh {
                                gq[i * d + c0 + c] += ds * kj[c];
                            }
                        }
                    }
                    for c in 0..dh {
                        gk[j * d + c0 + c] += ds * qi[c];
                    }
                }
            }
        }
        let mut add = |var: Var, buf: Vec<T>| {
            self.slot(grads, var)
                .iter_mut()
                .zip(buf)
                .for_each(|(a, b)| *a += b);
        };
        add(q, gq);
        add(k, gk);
        add(v, gv);
        if let (Some(var), Some(buf)) = (rel_k, grk) {
            add(var, buf);
        }
        if let (Some(var), Some(buf)) = (rel_v, grv) {
            add(var, buf);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry against the tape.
    fn check(store: &ParamStore<f64>, build: impl Fn(&mut Tape<f64>) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(store);
            let loss = build(&mut tape);
            tape.backward(loss).unwrap()
        };
        let eval = |s: &ParamStore<f64>| {
            let mut tape = Tape::new(s);
            let loss = build(&mut tape);
            tape.value(loss).data()[0]
        };
        let eps = 1e-5;
        for (name, t) in store.iter() {
            let id = store.id(name).unwrap();
            for k in 0..t.numel() {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[k] += eps;
                let up = eval(&s);
                s.get_mut(name).unwrap().data_mut()[k] -= 2.0 * eps;
                let down = eval(&s);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = tape_grads.get(id).map_or(0.0, |g| g[k]);
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{name}[{k}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("x", random(&[3, 4], &mut rng));
        store.insert("w", random(&[4, 5], &mut rng));
        store.insert("u", random(&[2, 5], &mut rng));
        store.insert("b", random(&[5], &mut rng));
        store.insert("c", random(&[2, 9], &mut rng));
        store.insert("g", random(&[7], &mut rng));
        store.insert("bb", random(&[7], &mut rng));
        store.insert("table", random(&[6, 7], &mut rng));
        let weights: Vec<f64> = (0..21).map(|k| (k as f64 * 0.37).sin()).collect();
        check(&store, |t| {
            let x = t.param("x").unwrap();
            let w = t.param("w").unwrap();
            let u = t.param("u").unwrap();
            let b = t.param("b").unwrap();
            let xw = t.matmul(x, w, false);
            let xw = t.add_row(xw, b);
            let act = t.gelu(xw);
            let proj = t.matmul(act, u, true);
            let th = t.tanh(proj);
            let table = t.param("table").unwrap();
            let rows = t.gather(table, vec![0, 5, 5], vec![3, 7]);
            let cat = t.concat(th, rows);
            let cat = t.scale(cat, 0.7);
            let c = t.param("c").unwrap();
            let mixed = t.matmul(cat, c, true);
            let left = t.gather(table, vec![1, 2, 3], vec![3, 7]);
            let g = t.param("g").unwrap();
            let bb = t.param("bb").unwrap();
            let sum = t.add(left, rows);
            let ln = t.layer_norm(sum, g, bb);
            let s1 = t.weighted_sum(ln, weights.clone());
            let s2 = t.sum(mixed);
            t.add(s1, s2)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, d, heads) = (4, 6, 2);
        for blocks in [1, heads] {
            let mut store = ParamStore::new();
            for name in ["q", "k", "v"] {
                store.insert(name, random(&[len, d], &mut rng));
            }
            store.insert("rk", random(&[blocks, len, len, d / heads], &mut rng));
            store.insert("rv", random(&[blocks, len, len, d / heads], &mut rng));
            let weights: Vec<f64> = (0..len * d).map(|k| (k as f64 * 0.91).cos()).collect();
            check(&store, |t| {
                let q = t.param("q").unwrap();
                let k = t.param("k").unwrap();
                let v = t.param("v").unwrap();
                let rk = t.param("rk").unwrap();
                let rv = t.param("rv").unwrap();
                let a = t.attention(q, k, v, Some(rk), Some(rv), heads);
                t.weighted_sum(a, weights.clone())
            });
        }
    }

    #[test]
    fn head_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("h", random(&[4, 3], &mut rng));
        store.insert("w", random(&[2, 3, 3], &mut rng));
        store.insert("b", random(&[2], &mut rng));
        check(&store, |t| {
            let h = t.param("h").unwrap();
            let w = t.param("w").unwrap();
            let b = t.param("b").unwrap();
            let logits = t.pair_bilinear(h, w, b, vec![(0, 1), (2, 2), (3, 0), (1, 3)]);
            t.cross_entropy(logits, vec![1, 0, 0, 1])
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::<f32>::new();
        let mut t = Tape::new(&store);
        let x = Tensor::<f32>::from_fn(&[5, 8], |_| rng.gen_range(-3.0..3.0));
        let q = t.constant(x.clone());
        let a = t.attention(q, q, q, None, None, 2);
        let probs = t.attention_probs(a).unwrap();
        for row in probs.chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_log_classes() {
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        let z = t.constant(Tensor::zeros(&[3, 5]));
        let l = t.cross_entropy(z, vec![0, 4, 2]);
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_needs_a_recorded_scalar() {
        let store = ParamStore::<f64>::new();
        let mut t = Tape::new(&store);
        assert!(matches!(
            t.backward(Var(0)),
            Err(NnError::NoRecordedForward)
        ));
        let z = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(z), Err(NnError::ShapeMismatch(_))));
    }
}
