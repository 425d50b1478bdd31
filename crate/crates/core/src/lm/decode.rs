use super::{ConditioningBundle, LmModel};
use crate::autograd::{gelu, layer_norm_forward, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Incremental decoding state for `rows` sequences stepped in lock-step,
/// with per-layer key/value caches. Rows usually pair a real condition
/// with its null counterpart.
pub struct DecodeSession<'m, T: Scalar> {
    model: &'m LmModel<T>,
    rows: usize,
    total: usize,
    y: Tensor<T>,
    per_pos: Option<Tensor<T>>,
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    len: usize,
}

fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = x.matmul(w);
    let n = out.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i % n];
    }
    out
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    pub fn new(model: &'m LmModel<T>, bundles: &[ConditioningBundle<'_>]) -> Result<Self> {
        let total = bundles.first().map(|b| b.total_len).ok_or_else(|| Error::Invalid("no sequences to decode".into()))?;
        if bundles.iter().any(|b| b.total_len != total) {
            return Err(Error::Shape("decoded sequences must share a length".into()));
        }
        let tape = Tape::new();
        let b = model.params.bind_frozen(&tape);
        let refs: Vec<&ConditioningBundle> = bundles.iter().collect();
        let (y, per_pos) = model.conditioning(&b, &refs, &vec![0; bundles.len()], total)?;
        let layers = model.config.n_layers;
        Ok(Self {
            model,
            rows: bundles.len(),
            total,
            y: y.value(),
            per_pos: per_pos.map(|p| p.value()),
            keys: vec![vec![Vec::new(); bundles.len()]; layers],
            values: vec![vec![Vec::new(); bundles.len()]; layers],
            len: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Positions currently held in the cache.
    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn reset(&mut self) {
        for layer in self.keys.iter_mut().chain(self.values.iter_mut()) {
            layer.iter_mut().for_each(Vec::clear);
        }
        self.len = 0;
    }

    /// Feed one input id per row at absolute position `abs` (the index of the
    /// token being predicted) and return next-token logits `[rows, K]`.
    pub fn step(&mut self, inputs: &[usize], abs: usize) -> Result<Tensor<T>> {
        let m = self.model;
        let c = &m.config;
        if inputs.len() != self.rows {
            return Err(Error::Shape(format!("{} inputs for {} rows", inputs.len(), self.rows)));
        }
        if self.len >= c.context_len {
            return Err(Error::Invalid("decode window is full".into()));
        }
        if abs >= self.total {
            return Err(Error::Invalid(format!("position {abs} beyond sequence of {}", self.total)));
        }
        if let Some(&id) = inputs.iter().find(|&&id| id > c.bos()) {
            return Err(Error::TokenOutOfRange { id, size: c.vocab_size });
        }
        let p = &m.params;
        let l = &m.layout;
        let h = c.hidden_dim;
        let tok = p.get(l.tok);
        let pos = p.get(l.pos).row(self.len);
        let mut x = Vec::with_capacity(self.rows * h);
        for (r, &id) in inputs.iter().enumerate() {
            let pp = self.per_pos.as_ref().map(|t| t.row(r * self.total + abs));
            for j in 0..h {
                let mut v = tok.row(id)[j] + pos[j] + self.y.row(r)[j];
                if let Some(pp) = pp {
                    v += pp[j];
                }
                x.push(v);
            }
        }
        let mut x = Tensor::new(&[self.rows, h], x);
        let heads = c.n_heads;
        let dh = h / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        for (li, blk) in l.blocks.iter().enumerate() {
            let hn = layer_norm_forward(&x, p.get(blk.ln1.0), p.get(blk.ln1.1));
            let q = affine(&hn, p.get(blk.q.0), p.get(blk.q.1));
            let k = affine(&hn, p.get(blk.k.0), p.get(blk.k.1));
            let v = affine(&hn, p.get(blk.v.0), p.get(blk.v.1));
            let mut att = vec![T::zero(); self.rows * h];
            for r in 0..self.rows {
                self.keys[li][r].extend_from_slice(k.row(r));
                self.values[li][r].extend_from_slice(v.row(r));
                let (ks, vs) = (&self.keys[li][r], &self.values[li][r]);
                let n = self.len + 1;
                for hd in 0..heads {
                    let qh = &q.row(r)[hd * dh..(hd + 1) * dh];
                    let scores: Vec<T> = (0..n)
                        .map(|j| qh.iter().zip(&ks[j * h + hd * dh..j * h + (hd + 1) * dh]).map(|(&a, &b)| a * b).sum::<T>() * scale)
                        .collect();
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    let e: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
                    let z = e.iter().copied().sum::<T>();
                    let out = &mut att[r * h + hd * dh..r * h + (hd + 1) * dh];
                    for (j, &ej) in e.iter().enumerate() {
                        let w = ej / z;
                        for (o, &vv) in out.iter_mut().zip(&vs[j * h + hd * dh..j * h + (hd + 1) * dh]) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let o = affine(&Tensor::new(&[self.rows, h], att), p.get(blk.o.0), p.get(blk.o.1));
            x.add_assign(&o);
            let hn = layer_norm_forward(&x, p.get(blk.ln2.0), p.get(blk.ln2.1));
            let f = affine(&hn, p.get(blk.fc1.0), p.get(blk.fc1.1)).map(gelu);
            x.add_assign(&affine(&f, p.get(blk.fc2.0), p.get(blk.fc2.1)));
        }
        self.len += 1;
        let out = affine(&layer_norm_forward(&x, p.get(l.ln_f.0), p.get(l.ln_f.1)), p.get(l.head.0), p.get(l.head.1));
        if !out.all_finite() {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(out)
    }

    /// Generate `n` tokens, feeding each chosen id to every row.
    ///
    /// `choose(t, logits)` picks token `t` from the `[rows, K]` logits. Past
    /// the context length the window slides by half a context and the cache
    /// is rebuilt from the retained tokens.
    pub fn run(&mut self, n: usize, mut choose: impl FnMut(usize, &Tensor<T>) -> Result<usize>) -> Result<Vec<usize>> {
        if n > self.total {
            return Err(Error::Invalid(format!("{n} tokens requested from a sequence of {}", self.total)));
        }
        let ctx = self.model.config.context_len;
        let k = self.model.config.vocab_size;
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        let mut start = 0;
        self.reset();
        for t in 0..n {
            if t - start + 1 > ctx {
                start = t + 1 - (ctx / 2).max(1);
                self.reset();
                for u in start..t {
                    let input = self.model.shifted_inputs(&tokens, u, 1)[0];
                    self.step(&vec![input; self.rows], u)?;
                }
            }
            let input = self.model.shifted_inputs(&tokens, t, 1)[0];
            let logits = self.step(&vec![input; self.rows], t)?;
            let z = choose(t, &logits)?;
            if z >= k {
                return Err(Error::TokenOutOfRange { id: z, size: k });
            }
            tokens.push(z);
        }
        Ok(tokens)
    }
}
