//! Named parameter storage and the AdamW optimiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Buffers are stored alongside
/// trainable parameters but never receive gradients or optimiser updates.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.push(name.into(), t, false)
    }

    fn push(&mut self, name: String, t: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        ParamId(self.tensors.len() - 1)
    }

    /// Linear layer weight `[fan_in, fan_out]`, scaled by `1/sqrt(fan_in)`.
    pub fn add_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> (ParamId, ParamId) {
        let w = self.add(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng));
        let b = self.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        (w, b)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(t, _)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Replace tensors by name, checking shapes. Every stored name must be present.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let Some((_, t)) = named.iter().find(|(n, _)| n == name) else {
                return Err(format!("missing section {name}"));
            };
            if t.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "section {name}: shape {:?} does not match expected {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Put every tensor on the tape: trainable ones as parameters, buffers as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| if tr { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Put every tensor on the tape as a constant, for inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }
}

/// Tape handles for every entry of a [`ParamSet`].
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wrap vars already on a tape, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Per-parameter gradients in [`ParamSet`] order; zeros where nothing flowed.
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_steps: 500, clip_norm: 1.0 }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// AdamW with linear warm-up and global-norm gradient clipping.
/// Weight decay is applied only to tensors of rank two or more.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: OptimConfig,
    step: usize,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> f64 {
        assert_eq!(grads.len(), params.len());
        let c = self.config;
        let norm = grads
            .iter()
            .zip(&params.trainable)
            .filter(|(_, &tr)| tr)
            .map(|(g, _)| g.sum_sq().as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        for i in 0..params.len() {
            if !params.trainable[i] {
                continue;
            }
            let decay = if params.tensors[i].shape().len() >= 2 { T::of(1.0 - lr * c.weight_decay) } else { T::one() };
            let p = params.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                let g = g * T::of(clip);
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = m.as_f64() / bc1;
                let vhat = v.as_f64() / bc2;
                *p = *p * decay - T::of(lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_decays_weights_without_gradient() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add("w", Tensor::full(&[2, 2], 1.0));
        let b = ps.add("b", Tensor::full(&[2], 1.0));
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.5, warmup_steps: 0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        let grads = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        opt.step(&mut ps, &grads);
        assert!((ps.get(w).data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(ps.get(b).data()[0], 1.0);
    }

    #[test]
    fn adamw_minimises_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let x = ps.add("x", Tensor::from_f64(&[3], &[3.0, -2.0, 0.5]));
        let cfg = OptimConfig { lr: 0.05, warmup_steps: 10, ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        for _ in 0..2000 {
            let tape = Tape::new();
            let b = ps.bind(&tape);
            let target = tape.constant(Tensor::from_f64(&[3], &[1.0, 1.0, 1.0]));
            let loss = b.var(x).mse(target);
            let g = tape.backward(loss);
            let grads = b.grads(&g);
            opt.step(&mut ps, &grads);
        }
        for &v in ps.get(x).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn warmup_is_linear() {
        let c = OptimConfig { lr: 1.0, warmup_steps: 4, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.25);
        assert_eq!(c.lr_at(3), 1.0);
        assert_eq!(c.lr_at(100), 1.0);
    }
}
