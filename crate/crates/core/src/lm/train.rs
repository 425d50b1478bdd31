use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditioningBundle, Level, LmModel, Window};
use crate::autograd::Tape;
use crate::conditioning::{cfg_dropout, EmbeddingClip};
use crate::error::{Error, Result};
use crate::nn::{AdamW, OptimConfig};
use crate::scalar::Scalar;

/// One training sequence with its image condition. Up examples also carry
/// the co-located Low tokens.
#[derive(Debug, Clone)]
pub struct LmExample {
    pub tokens: Vec<usize>,
    pub clip: EmbeddingClip,
    pub low_tokens: Option<Vec<usize>>,
}

impl LmExample {
    pub fn bundle(&self, level: Level, ratio: usize) -> Result<ConditioningBundle<'_>> {
        match (level, &self.low_tokens) {
            (Level::Low, _) => Ok(ConditioningBundle::low(Some(&self.clip), self.tokens.len())),
            (Level::Up, Some(low)) => ConditioningBundle::up(&self.clip, low, self.tokens.len(), ratio),
            (Level::Up, None) => Err(Error::Invalid("Up example without Low tokens".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 16, optim: OptimConfig::default(), seed: 0 }
    }
}

impl LmTrainConfig {
    /// Schedule for the toy layouts on the 1 kHz synthetic corpus.
    pub fn toy(level: Level) -> Self {
        let optim = OptimConfig { warmup_steps: 100, ..OptimConfig::default() };
        match level {
            Level::Low => Self { steps: 3000, batch_size: 16, optim: OptimConfig { lr: 2e-3, ..optim }, seed: 0 },
            Level::Up => Self { steps: 6000, batch_size: 8, optim: OptimConfig { lr: 3e-3, ..optim }, seed: 0 },
        }
    }
}

/// Teacher-forced training on random context-sized windows. Returns the
/// per-step mean nll. On a non-finite loss or gradient the model keeps its
/// last finite state, which is written to `rescue` when given.
pub fn train_lm<T: Scalar>(
    model: &mut LmModel<T>,
    data: &[LmExample],
    cfg: &LmTrainConfig,
    rescue: Option<&Path>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Invalid("LM training needs at least one example".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let c = model.config.clone();
    let bundles: Vec<ConditioningBundle> = data.iter().map(|e| e.bundle(c.level, c.up_ratio)).collect::<Result<_>>()?;
    for (e, b) in data.iter().zip(&bundles) {
        model.check_tokens(&e.tokens)?;
        model.check_bundle(b)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim, &model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let w = picks.iter().map(|&i| data[i].tokens.len()).min().unwrap().min(c.context_len);
        let dropped = if c.cfg_dropout > 0.0 { cfg_dropout(picks.len(), c.cfg_dropout, &mut rng)? } else { vec![false; picks.len()] };
        let nulls: Vec<ConditioningBundle> = picks.iter().map(|&i| bundles[i].with_clip(None)).collect();
        let mut windows = Vec::with_capacity(picks.len());
        let mut targets = Vec::with_capacity(picks.len() * w);
        for (j, &i) in picks.iter().enumerate() {
            let toks = &data[i].tokens;
            let start = rng.gen_range(0..=toks.len() - w);
            let bundle = if dropped[j] { &nulls[j] } else { &bundles[i] };
            windows.push(Window { bundle, start, inputs: model.shifted_inputs(toks, start, w) });
            targets.extend(toks[start..start + w].iter().map(|&t| Some(t)));
        }
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let loss = model.forward_windows(&b, &windows)?.cross_entropy(&targets);
        let value = loss.item().as_f64();
        let grads = b.grads(&tape.backward(loss));
        let what = if !value.is_finite() {
            Some("loss")
        } else if grads.iter().any(|g| !g.all_finite()) {
            Some("gradient")
        } else {
            None
        };
        if let Some(what) = what {
            if let Some(p) = rescue {
                model.save(p)?;
            }
            return Err(Error::Diverged { step, what: what.into() });
        }
        curve.push(value);
        let snapshot = model.params.clone();
        opt.step(&mut model.params, &grads);
        if model.params.iter().any(|(_, t)| !t.all_finite()) {
            model.params = snapshot;
            if let Some(p) = rescue {
                model.save(p)?;
            }
            return Err(Error::Diverged { step, what: "parameters".into() });
        }
    }
    Ok(curve)
}

/// Mean over examples of `nll(null condition) - nll(real condition)`.
pub fn conditional_gain<T: Scalar>(model: &LmModel<T>, data: &[LmExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("no examples".into()));
    }
    let c = model.config();
    let mut total = 0.0;
    for e in data {
        let real = e.bundle(c.level, c.up_ratio)?;
        let null = real.with_clip(None);
        total += model.sequence_nll(&e.tokens, &null)? - model.sequence_nll(&e.tokens, &real)?;
    }
    Ok(total / data.len() as f64)
}
