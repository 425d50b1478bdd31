//! Ancestral sampling with classifier-free guidance on the Low model,
//! unguided Up sampling, and end-to-end generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, TokenSequence, Waveform};
use crate::conditioning::EmbeddingClip;
use crate::error::{Error, Result};
use crate::lm::{ConditioningBundle, DecodeSession, Level, LmModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub eta: f64,
    /// Softmax temperature; 0 selects greedy (argmax) decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { eta: 3.0, temperature: 1.0, top_k: None, seed: 0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return Err(Error::Config(format!("top_k must lie in [1, {vocab}], got {k}")));
            }
        }
        Ok(())
    }
}

/// `uncond + eta * (cond - uncond)`, returning the inputs unchanged at
/// `eta = 1` and `eta = 0`.
pub fn guide<T: Scalar>(cond: &[T], uncond: &[T], eta: f64) -> Result<Vec<T>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape(format!("guidance over {} and {} logits", cond.len(), uncond.len())));
    }
    if eta == 1.0 {
        return Ok(cond.to_vec());
    }
    if eta == 0.0 {
        return Ok(uncond.to_vec());
    }
    let e = T::of(eta);
    Ok(cond.iter().zip(uncond).map(|(&a, &b)| b + e * (a - b)).collect())
}

/// Pick an index from unnormalised scores with one uniform draw `u` in `[0, 1)`.
/// Ties in greedy mode and in the top-k cut go to the lowest index.
pub fn sample_index<T: Scalar>(scores: &[T], temperature: f64, top_k: Option<usize>, u: f64) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to sample from".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampling scores".into()));
    }
    let s: Vec<f64> = scores.iter().map(|v| v.as_f64()).collect();
    if temperature == 0.0 {
        return Ok(s.iter().enumerate().fold(0, |best, (i, &v)| if v > s[best] { i } else { best }));
    }
    let mut keep: Vec<usize> = (0..s.len()).collect();
    if let Some(k) = top_k {
        keep.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        keep.truncate(k.max(1));
        keep.sort_unstable();
    }
    let max = keep.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = keep.iter().map(|&i| ((s[i] - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut target = u * total;
    for (j, &wj) in w.iter().enumerate() {
        if target < wj {
            return Ok(keep[j]);
        }
        target -= wj;
    }
    Ok(*keep.last().unwrap())
}

fn check_level<T: Scalar>(model: &LmModel<T>, level: Level) -> Result<()> {
    if model.config().level != level {
        return Err(Error::Invalid(format!("expected a {level} model, got {}", model.config().level)));
    }
    Ok(())
}

/// Low tokens under guidance: each step evaluates the real and null
/// conditions together and samples from `softmax(guide(...) / temperature)`.
pub fn sample_low<T: Scalar>(model: &LmModel<T>, cond: &ConditioningBundle<'_>, n: usize, g: &GuidanceConfig) -> Result<Vec<usize>> {
    check_level(model, Level::Low)?;
    g.validate(model.config().vocab_size)?;
    if !model.has_null() {
        return Err(Error::Invalid("Low model lacks a null embedding".into()));
    }
    if cond.clip.is_none() {
        return Err(Error::Invalid("guided sampling needs a real condition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut session = DecodeSession::new(model, &[cond.clone(), cond.with_clip(None)])?;
    session.run(n, |_, logits| {
        let u: f64 = rng.gen();
        sample_index(&guide(logits.row(0), logits.row(1), g.eta)?, g.temperature, g.top_k, u)
    })
}

/// Sampling from the conditional model alone, with the same draw order as [`sample_low`].
pub fn sample_conditional<T: Scalar>(
    model: &LmModel<T>,
    cond: &ConditioningBundle<'_>,
    n: usize,
    g: &GuidanceConfig,
) -> Result<Vec<usize>> {
    g.validate(model.config().vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut session = DecodeSession::new(model, std::slice::from_ref(cond))?;
    session.run(n, |_, logits: &Tensor<T>| {
        let u: f64 = rng.gen();
        sample_index(logits.row(0), g.temperature, g.top_k, u)
    })
}

/// Up tokens for the given Low tokens, without guidance. Uses RNG stream 1
/// of `g.seed` so it never shares draws with the Low pass.
pub fn sample_up<T: Scalar>(model: &LmModel<T>, low: &[usize], clip: &EmbeddingClip, g: &GuidanceConfig) -> Result<Vec<usize>> {
    check_level(model, Level::Up)?;
    g.validate(model.config().vocab_size)?;
    let n = low.len() * model.config().up_ratio;
    let cond = ConditioningBundle::up(clip, low, n, model.config().up_ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    rng.set_stream(1);
    let mut session = DecodeSession::new(model, &[cond])?;
    session.run(n, |_, logits| {
        let u: f64 = rng.gen();
        sample_index(logits.row(0), g.temperature, g.top_k, u)
    })
}

/// Token counts for a clip: `[fine (Up), coarse (Low)]` plus the sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPlan {
    pub samples: usize,
    pub up: usize,
    pub low: usize,
}

pub fn token_plan<T: Scalar>(codec: &CodecModel<T>, duration_s: f64) -> Result<TokenPlan> {
    let c = codec.config();
    if c.levels() != 2 {
        return Err(Error::Config("generation expects a two-level codec".into()));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::Invalid(format!("duration must be positive, got {duration_s}")));
    }
    let samples = (duration_s * c.sample_rate as f64).round() as usize;
    if samples == 0 {
        return Err(Error::Invalid("duration shorter than one sample".into()));
    }
    let lens = c.token_lengths(samples);
    Ok(TokenPlan { samples, up: lens[0], low: lens[1] })
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub waveform: Waveform,
    pub low: TokenSequence,
    pub up: Option<TokenSequence>,
}

/// Clip embedding to waveform: guided Low sampling, optional Up sampling,
/// codec decoding. Without an Up model the Low tokens are decoded alone.
pub fn generate<T: Scalar>(
    clip: &EmbeddingClip,
    codec: &CodecModel<T>,
    low_model: &LmModel<T>,
    up_model: Option<&LmModel<T>>,
    g: &GuidanceConfig,
    duration_s: f64,
) -> Result<Generated> {
    let plan = token_plan(codec, duration_s).map_err(|e| e.in_stage("plan"))?;
    let factors = codec.config().factors();
    if low_model.config().vocab_size != codec.config().codebook_size {
        return Err(Error::Config("Low model vocabulary does not match the codec".into()).in_stage("plan"));
    }
    let cond = ConditioningBundle::low(Some(clip), plan.low);
    let low_ids = sample_low(low_model, &cond, plan.low, g).map_err(|e| e.in_stage("sample_low"))?;
    let low = TokenSequence { level: 1, ids: low_ids, downsample_factor: factors[1] };
    let up = match up_model {
        Some(m) => {
            if m.config().up_ratio * plan.low != plan.up {
                return Err(Error::Config("Up model ratio does not match the codec factors".into()).in_stage("sample_up"));
            }
            let ids = sample_up(m, &low.ids, clip, g).map_err(|e| e.in_stage("sample_up"))?;
            Some(TokenSequence { level: 0, ids, downsample_factor: factors[0] })
        }
        None => None,
    };
    let waveform = match &up {
        Some(u) => codec.decode(&[u.clone(), low.clone()], Some(plan.samples)),
        None => codec.decode_coarse(&low, Some(plan.samples)),
    }
    .map_err(|e| e.in_stage("decode"))?
    .clamped();
    Ok(Generated { waveform, low, up })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::lm::LMConfig;

    #[test]
    fn guide_identities() {
        let a = [0.3f64, -1.2, 2.5];
        let b = [1.0f64, 0.1, -0.4];
        assert_eq!(guide(&a, &b, 1.0).unwrap(), a);
        assert_eq!(guide(&a, &b, 0.0).unwrap(), b);
        assert_eq!(guide(&[-1.0f64], &[-2.0], 3.0).unwrap(), vec![1.0]);
        assert!(guide(&a, &b[..2], 2.0).is_err());
    }

    #[test]
    fn sampling_modes() {
        let s = [0.0f64, 2.0, 2.0, -1.0];
        assert_eq!(sample_index(&s, 0.0, None, 0.99).unwrap(), 1);
        assert_eq!(sample_index(&s, 1.0, Some(1), 0.99).unwrap(), 1);
        for i in 0..20 {
            let k = sample_index(&s, 1.0, Some(2), i as f64 / 20.0).unwrap();
            assert!(k == 1 || k == 2);
        }
        // Inverse CDF: u below the first mass picks index 0.
        assert_eq!(sample_index(&[0.0f64, 0.0], 1.0, None, 0.49).unwrap(), 0);
        assert_eq!(sample_index(&[0.0f64, 0.0], 1.0, None, 0.51).unwrap(), 1);
        assert!(sample_index(&[f64::NAN], 1.0, None, 0.5).is_err());
    }

    #[test]
    fn empirical_frequencies_follow_softmax() {
        let s = [0.0f64, 1.0, -0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_index(&s, 1.0, None, rng.gen()).unwrap()] += 1;
        }
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for i in 0..3 {
            let p = s[i].exp() / z;
            assert!((counts[i] as f64 / 20_000.0 - p).abs() < 0.015);
        }
    }

    fn low_model() -> LmModel<f64> {
        let cfg = LMConfig {
            context_len: 16,
            n_layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            emb_dim: 4,
            cond_dim: 8,
            ..LMConfig::toy(Level::Low, 6)
        };
        LmModel::new(cfg, 3, None).unwrap()
    }

    fn clip() -> EmbeddingClip {
        EmbeddingClip::from_flat(2, 4, vec![0.5, -0.5, 0.1, 0.9, -0.3, 0.2, 0.7, 0.0], "c").unwrap()
    }

    #[test]
    fn eta_one_equals_conditional_sampling() {
        let m = low_model();
        let c = clip();
        let cond = ConditioningBundle::low(Some(&c), 16);
        for seed in 0..5 {
            let g = GuidanceConfig { eta: 1.0, seed, ..Default::default() };
            assert_eq!(sample_low(&m, &cond, 16, &g).unwrap(), sample_conditional(&m, &cond, 16, &g).unwrap());
        }
        let g = GuidanceConfig { eta: 3.0, seed: 9, ..Default::default() };
        assert_eq!(sample_low(&m, &cond, 16, &g).unwrap(), sample_low(&m, &cond, 16, &g).unwrap());
    }

    #[test]
    fn greedy_ignores_seed() {
        let m = low_model();
        let c = clip();
        let cond = ConditioningBundle::low(Some(&c), 16);
        let a = sample_low(&m, &cond, 16, &GuidanceConfig { temperature: 0.0, seed: 1, ..Default::default() }).unwrap();
        let b = sample_low(&m, &cond, 16, &GuidanceConfig { temperature: 0.0, seed: 2, ..Default::default() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn up_sampling_and_generation() {
        let codec = CodecModel::<f64>::new(
            CodecConfig { sample_rate: 1000, channels: 4, res_blocks: 1, codebook_size: 6, code_dim: 3, ..CodecConfig::toy() },
            1,
        )
        .unwrap();
        let up_cfg = LMConfig {
            context_len: 16,
            n_layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            emb_dim: 4,
            cond_dim: 8,
            ..LMConfig::toy(Level::Up, 6)
        };
        let up = LmModel::<f64>::new(up_cfg, 4, Some(codec.codebooks()[1].codes())).unwrap();
        let low = low_model();
        let c = clip();
        let g = GuidanceConfig::default();
        let u = sample_up(&up, &[0, 1, 2], &c, &g).unwrap();
        assert_eq!(u.len(), 12);
        assert_eq!(u, sample_up(&up, &[0, 1, 2], &c, &g).unwrap());
        assert!(sample_up(&low, &[0], &c, &g).is_err());

        let out = generate(&clip(), &codec, &low, Some(&up), &g, 0.1).unwrap();
        assert_eq!(out.waveform.len(), 100);
        assert_eq!(out.low.len(), 4);
        assert_eq!(out.up.as_ref().unwrap().len(), 16);
        assert!(out.waveform.peak() <= 1.0);
        let coarse = generate(&clip(), &codec, &low, None, &g, 0.1).unwrap();
        assert_eq!(coarse.low, out.low);
        assert!(coarse.up.is_none());
        let wrong = EmbeddingClip::from_flat(1, 3, vec![0.0; 3], "w").unwrap();
        match generate(&wrong, &codec, &low, Some(&up), &g, 0.1) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "sample_low"),
            other => panic!("expected a staged error, got {other:?}"),
        }
    }

    #[test]
    fn paper_token_plan() {
        let codec = CodecModel::<f32>::new(CodecConfig { channels: 2, codebook_size: 4, code_dim: 2, ..CodecConfig::paper() }, 0).unwrap();
        assert_eq!(token_plan(&codec, 4.0).unwrap(), TokenPlan { samples: 64_000, up: 8000, low: 2000 });
    }
}
