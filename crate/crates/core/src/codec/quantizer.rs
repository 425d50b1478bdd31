//! Nearest-neighbour vector quantisation with EMA codebook learning.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent vectors of one hierarchy level, `[S, code_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<T> {
    pub level: usize,
    pub vectors: Tensor<T>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Codebook indices of one hierarchy level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub level: usize,
    pub ids: Vec<usize>,
    pub downsample_factor: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Padded waveform length these tokens span.
    pub fn span(&self) -> usize {
        self.ids.len() * self.downsample_factor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub decay: f64,
    pub eps: f64,
    /// Consecutive unused steps after which a code is reseeded.
    pub dead_steps: usize,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { decay: 0.99, eps: 1e-5, dead_steps: 256 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub level: usize,
    codes: Tensor<T>,
    usage_counts: Vec<T>,
    ema_sums: Tensor<T>,
    idle_steps: Vec<usize>,
    initialized: bool,
}

impl<T: Scalar> Codebook<T> {
    pub fn new<R: Rng + ?Sized>(level: usize, size: usize, dim: usize, rng: &mut R) -> Self {
        assert!(size >= 2, "codebook needs at least two codes");
        let codes = Tensor::randn(&[size, dim], 1.0 / (dim as f64).sqrt(), rng);
        Self::from_codes(level, codes)
    }

    pub fn from_codes(level: usize, codes: Tensor<T>) -> Self {
        let k = codes.rows();
        Self {
            level,
            ema_sums: codes.clone(),
            codes,
            usage_counts: vec![T::one(); k],
            idle_steps: vec![0; k],
            initialized: false,
        }
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn usage_counts(&self) -> &[T] {
        &self.usage_counts
    }

    pub fn ema_sums(&self) -> &Tensor<T> {
        &self.ema_sums
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn restore(&mut self, codes: Tensor<T>, usage: Vec<T>, sums: Tensor<T>, initialized: bool) {
        self.codes = codes;
        self.usage_counts = usage;
        self.ema_sums = sums;
        self.initialized = initialized;
        self.idle_steps = vec![0; self.codes.rows()];
    }

    /// Index of the nearest code by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[T]) -> usize {
        let mut best = 0;
        let mut best_d = T::infinity();
        for k in 0..self.size() {
            let d = self.codes.row(k).iter().zip(v).map(|(&c, &x)| (x - c) * (x - c)).sum::<T>();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Nearest code for every row of `[n, dim]`.
    pub fn assign(&self, rows: &Tensor<T>) -> Result<Vec<usize>> {
        if rows.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "latent dimension {} does not match codebook dimension {}",
                rows.cols(),
                self.dim()
            )));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("cannot quantize an empty latent sequence".into()));
        }
        Ok((0..rows.rows()).map(|r| self.nearest(rows.row(r))).collect())
    }

    /// Code vectors for the given ids, `[ids.len(), dim]`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            if id >= self.size() {
                return Err(Error::TokenOutOfRange { id, size: self.size() });
            }
            out.extend_from_slice(self.codes.row(id));
        }
        Ok(Tensor::new(&[ids.len(), self.dim()], out))
    }

    /// Quantize one latent sequence: tokens plus the looked-up code vectors.
    pub fn quantize(&self, h: &LatentSequence<T>, downsample_factor: usize) -> Result<(TokenSequence, LatentSequence<T>)> {
        let ids = self.assign(&h.vectors)?;
        let q = self.lookup(&ids)?;
        Ok((
            TokenSequence { level: h.level, ids, downsample_factor },
            LatentSequence { level: h.level, vectors: q },
        ))
    }

    /// Seed codes from randomly chosen latent rows. Used on the first training batch.
    pub fn init_from<R: Rng + ?Sized>(&mut self, rows: &Tensor<T>, rng: &mut R) {
        let (n, k) = (rows.rows(), self.size());
        if n == 0 {
            return;
        }
        let picks: Vec<usize> = if n >= k { sample(rng, n, k).into_vec() } else { (0..k).map(|_| rng.gen_range(0..n)).collect() };
        for (code, &p) in picks.iter().enumerate() {
            let src = rows.row(p).to_vec();
            let jitter = if n >= k { 0.0 } else { 1e-3 };
            for (c, v) in self.codes.row_mut(code).iter_mut().zip(src) {
                *c = v + T::of(jitter * (rng.gen::<f64>() - 0.5));
            }
        }
        self.ema_sums = self.codes.clone();
        self.usage_counts = vec![T::one(); k];
        self.idle_steps = vec![0; k];
        self.initialized = true;
    }

    /// One EMA step from the latents `rows` and their assignments.
    ///
    /// `decay >= 1` freezes the codebook. Codes left unused for
    /// `cfg.dead_steps` consecutive steps are reseeded from random rows.
    /// Returns the number of reseeded codes.
    pub fn ema_update<R: Rng + ?Sized>(&mut self, rows: &Tensor<T>, ids: &[usize], cfg: &EmaConfig, rng: &mut R) -> usize {
        if cfg.decay >= 1.0 || ids.is_empty() || rows.rows() != ids.len() {
            return 0;
        }
        let (k, d) = (self.size(), self.dim());
        let mut counts = vec![0usize; k];
        let mut sums = vec![T::zero(); k * d];
        for (r, &id) in ids.iter().enumerate() {
            counts[id] += 1;
            for (s, &v) in sums[id * d..(id + 1) * d].iter_mut().zip(rows.row(r)) {
                *s += v;
            }
        }
        let decay = T::of(cfg.decay);
        let rest = T::one() - decay;
        let eps = T::of(cfg.eps);
        let mut reseeded = 0;
        for c in 0..k {
            self.usage_counts[c] = decay * self.usage_counts[c] + rest * T::of(counts[c] as f64);
            let usage = self.usage_counts[c].max(eps);
            for j in 0..d {
                let s = &mut self.ema_sums.data_mut()[c * d + j];
                *s = decay * *s + rest * sums[c * d + j];
                self.codes.data_mut()[c * d + j] = *s / usage;
            }
            if counts[c] > 0 {
                self.idle_steps[c] = 0;
            } else {
                self.idle_steps[c] += 1;
                if cfg.dead_steps > 0 && self.idle_steps[c] >= cfg.dead_steps {
                    let src = rows.row(rng.gen_range(0..rows.rows())).to_vec();
                    self.codes.row_mut(c).copy_from_slice(&src);
                    self.ema_sums.row_mut(c).copy_from_slice(&src);
                    self.usage_counts[c] = T::one();
                    self.idle_steps[c] = 0;
                    reseeded += 1;
                }
            }
        }
        reseeded
    }
}
