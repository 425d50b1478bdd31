//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of every node that transitively depends on a leaf
//! created with [`Tape::param`].
//!
//! Matrices are row-major `[rows, cols]`. Sequence batches are packed as
//! `[batch * seq, features]`; convolution activations are `[batch, channels, time]`.

use std::cell::RefCell;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward closure: `(grad_out, parent_values, out_value, parent_needs_grad)`
/// returns one optional gradient per parent.
pub type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[v.id].take()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), needs_grad: true, backward: None })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value, parents: Vec::new(), needs_grad: false, backward: None })
    }

    /// Record an operation whose value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].needs_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        })
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Borrow a node value without cloning.
    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Back-propagate from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let contribs = back(&g, &parent_values, &node.value, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for ((&p, c), &need) in node.parents.iter().zip(contribs).zip(&needs) {
                let Some(c) = c else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(c.len(), nodes[p].value.len(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn elementwise<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, d: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), g.data().iter().zip(x.data()).map(|(&g, &x)| g * d(x)).collect())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

/// Unfold `x[c, t]` into `[c * k, t_out]` patches.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    col: &mut [T],
) {
    for c in 0..channels {
        let xr = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let dst = &mut col[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, d) in dst.iter_mut().enumerate() {
                let pos = (t * stride + kk) as isize - pad as isize;
                *d = if pos >= 0 && (pos as usize) < len { xr[pos as usize] } else { T::zero() };
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `x[c, len]`.
pub(crate) fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
    x: &mut [T],
) {
    for c in 0..channels {
        for kk in 0..k {
            let src = &col[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, &v) in src.iter().enumerate() {
                let pos = (t * stride + kk) as isize - pad as isize;
                if pos >= 0 && (pos as usize) < len {
                    x[c * len + pos as usize] += v;
                }
            }
        }
    }
}

pub fn conv1d_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

pub fn conv_transpose1d_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len - 1) * stride + k - 2 * pad
}

/// Plain (tape-free) 1-D convolution of `x[b, ci, t]` with `w[co, ci, k]`.
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, wci, "conv1d channel mismatch");
    let out_len = conv1d_out_len(len, k, stride, pad);
    let mut col = vec![T::zero(); ci * k * out_len];
    let mut out = vec![T::zero(); b * co * out_len];
    for bi in 0..b {
        im2col(&x.data()[bi * ci * len..(bi + 1) * ci * len], ci, len, k, stride, pad, out_len, &mut col);
        let o = &mut out[bi * co * out_len..(bi + 1) * co * out_len];
        if let Some(bias) = bias {
            for c in 0..co {
                o[c * out_len..(c + 1) * out_len].iter_mut().for_each(|v| *v = bias.data()[c]);
            }
        }
        T::gemm(co, ci * k, out_len, w.data(), false, &col, false, o, bias.is_some());
    }
    Tensor::new(&[b, co, out_len], out)
}

/// Plain transposed convolution of `x[b, ci, t]` with `w[ci, co, k]`.
pub fn conv_transpose1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (b, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (wci, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, wci, "conv_transpose1d channel mismatch");
    let out_len = conv_transpose1d_out_len(len, k, stride, pad);
    let mut col = vec![T::zero(); co * k * len];
    let mut out = vec![T::zero(); b * co * out_len];
    for bi in 0..b {
        T::gemm(co * k, ci, len, w.data(), true, &x.data()[bi * ci * len..(bi + 1) * ci * len], false, &mut col, false);
        let o = &mut out[bi * co * out_len..(bi + 1) * co * out_len];
        col2im(&col, co, out_len, k, stride, pad, len, o);
        if let Some(bias) = bias {
            for c in 0..co {
                o[c * out_len..(c + 1) * out_len].iter_mut().for_each(|v| *v += bias.data()[c]);
            }
        }
    }
    Tensor::new(&[b, co, out_len], out)
}

/// Row-wise layer normalisation without affine parameters; returns `(normed, rstd)`.
fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let n = x.cols();
    let nf = T::of(n as f64);
    let mut normed = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in normed[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (normed, rstds)
}

pub fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let (mut normed, _) = normalize_rows(x, T::of(LN_EPS));
    for (i, v) in normed.iter_mut().enumerate() {
        let j = i % n;
        *v = *v * gain.data()[j] + bias.data()[j];
    }
    Tensor::new(x.shape(), normed)
}

pub const LN_EPS: f64 = 1e-5;

/// Causal multi-head attention over `batch` packed sequences of `seq` rows each.
/// Returns the output and the attention probabilities `[batch, heads, seq, seq]`.
pub fn causal_attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    seq: usize,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / heads;
    let batch = q.rows() / seq;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut out = vec![T::zero(); q.len()];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
            for i in 0..seq {
                let qi = &q.data()[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &k.data()[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    p[i * seq + j] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = T::zero();
                for j in 0..=i {
                    let e = (p[i * seq + j] - max).exp();
                    p[i * seq + j] = e;
                    z += e;
                }
                let oi = &mut out[(b * seq + i) * d + h * dh..(b * seq + i) * d + (h + 1) * dh];
                for j in 0..=i {
                    let w = p[i * seq + j] / z;
                    p[i * seq + j] = w;
                    let vj = &v.data()[(b * seq + j) * d + h * dh..(b * seq + j) * d + (h + 1) * dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    (Tensor::new(q.shape(), out), probs)
}

/// Log-softmax of one row.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let z = e.iter().copied().sum::<T>();
    e.into_iter().map(|v| v / z).collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(*self, |v| v.shape().to_vec())
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.tape.with_value(*self, |v| v.data()[0])
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| other.tape.with_value(other, |b| a.matmul(b)));
        self.tape.custom(
            &[self, other],
            value,
            Box::new(|g, p, _, needs| {
                let (a, b) = (p[0], p[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    Tensor::new(a.shape(), d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    Tensor::new(b.shape(), d)
                });
                vec![da, db]
            }),
        )
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            other.tape.with_value(other, |b| {
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                assert_eq!(k, b.cols(), "matmul_t inner dimension mismatch");
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
                Tensor::new(&[m, n], out)
            })
        });
        self.tape.custom(
            &[self, other],
            value,
            Box::new(|g, p, _, needs| {
                let (a, b) = (p[0], p[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.rows());
                let da = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, b.data(), false, &mut d, false);
                    Tensor::new(a.shape(), d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), true, a.data(), false, &mut d, false);
                    Tensor::new(b.shape(), d)
                });
                vec![da, db]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            other.tape.with_value(other, |b| {
                assert_eq!(a.len(), b.len(), "add: length mismatch");
                let mut out = a.clone();
                out.add_assign(b);
                out
            })
        });
        self.tape.custom(
            &[self, other],
            value,
            Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.clone().reshape(p[0].shape())),
                    needs[1].then(|| g.clone().reshape(p[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.add(other.scale(-T::one()))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| a.map(|v| v * s));
        self.tape.custom(&[self], value, Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(self, c: Tensor<T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            assert_eq!(a.len(), c.len(), "mul_const: length mismatch");
            Tensor::new(a.shape(), a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect())
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(move |g, _, _, _| {
                vec![Some(Tensor::new(g.shape(), g.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect()))]
            }),
        )
    }

    /// Add a row vector (any shape with `cols` elements) to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let rows = self.tape.with_value(self, |a| a.rows());
        self.add_block_rows(row, rows)
    }

    /// `self` is `[blocks * block_len, n]`, `rows` is `[blocks, n]`; row `b` is
    /// added to every row of block `b`.
    pub fn add_block_rows(self, rows: Var<'t, T>, block_len: usize) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            rows.tape.with_value(rows, |r| {
                let n = a.cols();
                assert_eq!(r.len() % n, 0, "add_block_rows: width mismatch");
                assert_eq!(a.rows(), (r.len() / n) * block_len, "add_block_rows: block mismatch");
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let b = i / block_len;
                    for (o, &v) in out.row_mut(i).iter_mut().zip(&r.data()[b * n..(b + 1) * n]) {
                        *o += v;
                    }
                }
                out
            })
        });
        self.tape.custom(
            &[self, rows],
            value,
            Box::new(move |g, p, _, needs| {
                let dr = needs[1].then(|| {
                    let n = g.cols();
                    let mut d = vec![T::zero(); p[1].len()];
                    for i in 0..g.rows() {
                        let b = i / block_len;
                        for (o, &v) in d[b * n..(b + 1) * n].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    Tensor::new(p[1].shape(), d)
                });
                vec![needs[0].then(|| g.clone()), dr]
            }),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| a.map(|v| v.max(T::zero())));
        self.tape.custom(
            &[self],
            value,
            Box::new(|g, p, _, _| {
                vec![Some(elementwise(g, p[0], |x| if x > T::zero() { T::one() } else { T::zero() }))]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| a.map(gelu));
        self.tape.custom(&[self], value, Box::new(|g, p, _, _| vec![Some(elementwise(g, p[0], |x| gelu_parts(x).1))]))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| a.map(|v| v.tanh()));
        self.tape.custom(
            &[self],
            value,
            Box::new(|g, _, out, _| vec![Some(elementwise(g, out, |y| T::one() - y * y))]),
        )
    }

    /// Row-wise layer norm with learned gain and bias of width `cols`.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |x| {
            gain.tape.with_value(gain, |g| bias.tape.with_value(bias, |b| layer_norm_forward(x, g, b)))
        });
        self.tape.custom(
            &[self, gain, bias],
            value,
            Box::new(|g, p, _, needs| {
                let (x, gain) = (p[0], p[1]);
                let n = x.cols();
                let nf = T::of(n as f64);
                let (normed, rstds) = normalize_rows(x, T::of(LN_EPS));
                let mut dx = vec![T::zero(); x.len()];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                for r in 0..x.rows() {
                    let gr = g.row(r);
                    let nr = &normed[r * n..(r + 1) * n];
                    let mut sum_dn = T::zero();
                    let mut sum_dn_n = T::zero();
                    for j in 0..n {
                        let dn = gr[j] * gain.data()[j];
                        sum_dn += dn;
                        sum_dn_n += dn * nr[j];
                        dgain[j] += gr[j] * nr[j];
                        dbias[j] += gr[j];
                    }
                    for j in 0..n {
                        let dn = gr[j] * gain.data()[j];
                        dx[r * n + j] = rstds[r] * (dn - sum_dn / nf - nr[j] * sum_dn_n / nf);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(x.shape(), dx)),
                    needs[1].then(|| Tensor::new(p[1].shape(), dgain)),
                    needs[2].then(|| Tensor::new(p[2].shape(), dbias)),
                ]
            }),
        )
    }

    /// Causal multi-head self-attention; `self` holds queries, and every
    /// `seq` consecutive rows form one independent sequence.
    pub fn causal_attention(self, k: Var<'t, T>, v: Var<'t, T>, heads: usize, seq: usize) -> Var<'t, T> {
        let tape = self.tape;
        let (value, probs) = tape.with_value(self, |q| {
            tape.with_value(k, |kt| tape.with_value(v, |vt| causal_attention_forward(q, kt, vt, heads, seq)))
        });
        tape.custom(
            &[self, k, v],
            value,
            Box::new(move |g, p, _, _| {
                let (q, k, v) = (p[0], p[1], p[2]);
                let d = q.cols();
                let dh = d / heads;
                let batch = q.rows() / seq;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = vec![T::zero(); q.len()];
                let mut dk = vec![T::zero(); k.len()];
                let mut dv = vec![T::zero(); v.len()];
                let mut dp = vec![T::zero(); seq];
                let range = |row: usize, h: usize| row * d + h * dh..row * d + (h + 1) * dh;
                for b in 0..batch {
                    for h in 0..heads {
                        let pm = &probs[((b * heads + h) * seq) * seq..((b * heads + h + 1) * seq) * seq];
                        for i in 0..seq {
                            let gi = &g.data()[range(b * seq + i, h)];
                            let mut dot = T::zero();
                            for j in 0..=i {
                                let vj = &v.data()[range(b * seq + j, h)];
                                let pij = pm[i * seq + j];
                                let dpij = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                dp[j] = dpij;
                                dot += pij * dpij;
                                for (o, &x) in dv[range(b * seq + j, h)].iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                            for j in 0..=i {
                                let ds = pm[i * seq + j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &k.data()[range(b * seq + j, h)];
                                for (o, &x) in dq[range(b * seq + i, h)].iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let qi = &q.data()[range(b * seq + i, h)];
                                for (o, &x) in dk[range(b * seq + j, h)].iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(q.shape(), dq)),
                    Some(Tensor::new(k.shape(), dk)),
                    Some(Tensor::new(v.shape(), dv)),
                ]
            }),
        )
    }

    /// Select rows of a `[vocab, n]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t, T> {
        let ids = ids.to_vec();
        let value = self.tape.with_value(self, |t| {
            let n = t.cols();
            let mut out = Vec::with_capacity(ids.len() * n);
            for &i in &ids {
                assert!(i < t.rows(), "gather_rows: index {i} out of range {}", t.rows());
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(&[ids.len(), n], out)
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(move |g, p, _, _| {
                let n = g.cols();
                let mut d = Tensor::zeros(p[0].shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                debug_assert_eq!(d.cols(), n);
                vec![Some(d)]
            }),
        )
    }

    /// Stack rows of `self` above rows of `other`.
    pub fn concat_rows(self, other: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            other.tape.with_value(other, |b| {
                assert_eq!(a.cols(), b.cols(), "concat_rows: width mismatch");
                let mut d = a.data().to_vec();
                d.extend_from_slice(b.data());
                Tensor::new(&[a.rows() + b.rows(), a.cols()], d)
            })
        });
        self.tape.custom(
            &[self, other],
            value,
            Box::new(|g, p, _, needs| {
                let split = p[0].len();
                vec![
                    needs[0].then(|| Tensor::new(p[0].shape(), g.data()[..split].to_vec())),
                    needs[1].then(|| Tensor::new(p[1].shape(), g.data()[split..].to_vec())),
                ]
            }),
        )
    }

    /// Mean over rows, giving `[1, cols]`.
    pub fn mean_rows(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            let n = a.cols();
            let inv = T::one() / T::of(a.rows() as f64);
            let mut out = vec![T::zero(); n];
            for r in 0..a.rows() {
                for (o, &v) in out.iter_mut().zip(a.row(r)) {
                    *o += v;
                }
            }
            Tensor::new(&[1, n], out.into_iter().map(|v| v * inv).collect())
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(|g, p, _, _| {
                let rows = p[0].rows();
                let inv = T::one() / T::of(rows as f64);
                let mut d = Vec::with_capacity(p[0].len());
                for _ in 0..rows {
                    d.extend(g.data().iter().map(|&v| v * inv));
                }
                vec![Some(Tensor::new(p[0].shape(), d))]
            }),
        )
    }

    /// Mean of all elements.
    pub fn mean_all(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            Tensor::scalar(a.data().iter().copied().sum::<T>() / T::of(a.len() as f64))
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(|g, p, _, _| {
                let v = g.data()[0] / T::of(p[0].len() as f64);
                vec![Some(Tensor::full(p[0].shape(), v))]
            }),
        )
    }

    /// Mean squared error between two equal-length tensors.
    pub fn mse(self, other: Var<'t, T>) -> Var<'t, T> {
        let value = self.tape.with_value(self, |a| {
            other.tape.with_value(other, |b| {
                assert_eq!(a.len(), b.len(), "mse: length mismatch");
                let s = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
                Tensor::scalar(s / T::of(a.len() as f64))
            })
        });
        self.tape.custom(
            &[self, other],
            value,
            Box::new(|g, p, _, needs| {
                let c = T::of(2.0) * g.data()[0] / T::of(p[0].len() as f64);
                let d: Vec<T> = p[0].data().iter().zip(p[1].data()).map(|(&x, &y)| c * (x - y)).collect();
                vec![
                    needs[0].then(|| Tensor::new(p[0].shape(), d.clone())),
                    needs[1].then(|| Tensor::new(p[1].shape(), d.iter().map(|&v| -v).collect())),
                ]
            }),
        )
    }

    /// Mean over rows of the squared Euclidean row distance `||a_r - b_r||^2`.
    pub fn mean_row_sq_dist(self, other: Var<'t, T>) -> Var<'t, T> {
        let cols = self.tape.with_value(self, |a| a.cols());
        self.mse(other).scale(T::of(cols as f64))
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    /// `None` targets are ignored.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'t, T> {
        let targets = targets.to_vec();
        let (value, count) = self.tape.with_value(self, |l| {
            assert_eq!(l.rows(), targets.len(), "cross_entropy: target count mismatch");
            let mut total = T::zero();
            let mut count = 0usize;
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    assert!(t < l.cols(), "cross_entropy: target {t} out of range");
                    total -= log_softmax(l.row(r))[t];
                    count += 1;
                }
            }
            (Tensor::scalar(total / T::of(count.max(1) as f64)), count)
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(move |g, p, _, _| {
                let l = p[0];
                let scale = g.data()[0] / T::of(count.max(1) as f64);
                let mut d = Tensor::zeros(l.shape());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let sm = softmax(l.row(r));
                        let dr = d.row_mut(r);
                        for (j, (o, s)) in dr.iter_mut().zip(sm).enumerate() {
                            *o = scale * (s - if j == t { T::one() } else { T::zero() });
                        }
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Value of `replacement`, gradient copied straight through to `self`.
    pub fn straight_through(self, replacement: Tensor<T>) -> Var<'t, T> {
        self.tape.with_value(self, |a| assert_eq!(a.len(), replacement.len(), "straight_through: shape mismatch"));
        let shape = self.shape();
        self.tape.custom(&[self], replacement.reshape(&shape), Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    /// `[batch, channels, time]` to `[batch * time, channels]`.
    pub fn channels_to_rows(self) -> Var<'t, T> {
        let value = self.tape.with_value(self, |x| channels_to_rows(x));
        self.tape.custom(
            &[self],
            value,
            Box::new(|g, p, _, _| {
                let (b, c, t) = (p[0].shape()[0], p[0].shape()[1], p[0].shape()[2]);
                vec![Some(rows_to_channels(g, b, c, t))]
            }),
        )
    }

    /// `[batch * time, channels]` to `[batch, channels, time]`.
    pub fn rows_to_channels(self, batch: usize) -> Var<'t, T> {
        let value = self.tape.with_value(self, |x| rows_to_channels(x, batch, x.cols(), x.rows() / batch));
        self.tape.custom(&[self], value, Box::new(|g, _, _, _| vec![Some(channels_to_rows(g))]))
    }

    /// Strided 1-D convolution, `self[b, ci, t]`, `w[co, ci, k]`, `bias[co]`.
    pub fn conv1d(self, w: Var<'t, T>, bias: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let tape = self.tape;
        let value = tape.with_value(self, |x| {
            tape.with_value(w, |w| tape.with_value(bias, |b| conv1d_forward(x, w, Some(b), stride, pad)))
        });
        tape.custom(
            &[self, w, bias],
            value,
            Box::new(move |g, p, out, needs| {
                let (x, w) = (p[0], p[1]);
                let (b, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let out_len = out.shape()[2];
                let mut col = vec![T::zero(); ci * k * out_len];
                let mut dcol = vec![T::zero(); ci * k * out_len];
                let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); co];
                for bi in 0..b {
                    let gb = &g.data()[bi * co * out_len..(bi + 1) * co * out_len];
                    for c in 0..co {
                        db[c] += gb[c * out_len..(c + 1) * out_len].iter().copied().sum::<T>();
                    }
                    if needs[1] {
                        im2col(&x.data()[bi * ci * len..(bi + 1) * ci * len], ci, len, k, stride, pad, out_len, &mut col);
                        T::gemm(co, out_len, ci * k, gb, false, &col, true, &mut dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(ci * k, co, out_len, w.data(), true, gb, false, &mut dcol, false);
                        col2im(&dcol, ci, len, k, stride, pad, out_len, &mut dx[bi * ci * len..(bi + 1) * ci * len]);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(x.shape(), d)),
                    needs[1].then(|| Tensor::new(w.shape(), dw)),
                    needs[2].then(|| Tensor::new(p[2].shape(), db)),
                ]
            }),
        )
    }

    /// Transposed 1-D convolution, `self[b, ci, t]`, `w[ci, co, k]`, `bias[co]`.
    pub fn conv_transpose1d(self, w: Var<'t, T>, bias: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let tape = self.tape;
        let value = tape.with_value(self, |x| {
            tape.with_value(w, |w| tape.with_value(bias, |b| conv_transpose1d_forward(x, w, Some(b), stride, pad)))
        });
        tape.custom(
            &[self, w, bias],
            value,
            Box::new(move |g, p, out, needs| {
                let (x, w) = (p[0], p[1]);
                let (b, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (_, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let out_len = out.shape()[2];
                let mut col = vec![T::zero(); co * k * len];
                let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); co];
                for bi in 0..b {
                    let gb = &g.data()[bi * co * out_len..(bi + 1) * co * out_len];
                    for c in 0..co {
                        db[c] += gb[c * out_len..(c + 1) * out_len].iter().copied().sum::<T>();
                    }
                    im2col(gb, co, out_len, k, stride, pad, len, &mut col);
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(ci, co * k, len, w.data(), false, &col, false, &mut dx[bi * ci * len..(bi + 1) * ci * len], false);
                    }
                    if needs[1] {
                        T::gemm(ci, len, co * k, &x.data()[bi * ci * len..(bi + 1) * ci * len], false, &col, true, &mut dw, true);
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(x.shape(), d)),
                    needs[1].then(|| Tensor::new(w.shape(), dw)),
                    needs[2].then(|| Tensor::new(p[2].shape(), db)),
                ]
            }),
        )
    }

    /// Divide every row by its Euclidean norm.
    pub fn l2_normalize_rows(self) -> Var<'t, T> {
        let eps = T::of(1e-12);
        let value = self.tape.with_value(self, |x| {
            let mut out = x.clone();
            for r in 0..x.rows() {
                let n = (x.row(r).iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
            out
        });
        self.tape.custom(
            &[self],
            value,
            Box::new(move |g, p, out, _| {
                let x = p[0];
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    let n = (x.row(r).iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                vec![Some(d)]
            }),
        )
    }
}

pub fn channels_to_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                out[(bi * t + ti) * c + ci] = x.data()[(bi * c + ci) * t + ti];
            }
        }
    }
    Tensor::new(&[b * t, c], out)
}

pub fn rows_to_channels<T: Scalar>(x: &Tensor<T>, b: usize, c: usize, t: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                out[(bi * c + ci) * t + ti] = x.data()[(bi * t + ti) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, t], out)
}

pub mod gradcheck {
    //! Central finite-difference checks used across the crate's tests.

    use super::*;

    /// Relative error between the tape gradient and central differences of
    /// `f` with respect to every input tensor.
    pub fn max_rel_error(
        inputs: &[Tensor<f64>],
        f: &dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
        h: f64,
    ) -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let eval = |ins: &[Tensor<f64>]| {
            let tape = Tape::new();
            let vars: Vec<_> = ins.iter().map(|t| tape.param(t.clone())).collect();
            f(&tape, &vars).item()
        };
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].data()[j];
                num = num.max((fd - a).abs());
                den = den.max(fd.abs().max(a.abs()));
            }
        }
        num / den.max(1e-12)
    }
}
