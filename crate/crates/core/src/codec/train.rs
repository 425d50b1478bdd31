use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CodecLossReport, CodecModel, QuantMode, Waveform};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{AdamW, OptimConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training crop length in samples; rounded up to the largest factor.
    pub crop_len: usize,
    pub optim: OptimConfig,
    /// Probability that a batch item is decoded from the coarsest level only.
    pub low_only_prob: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 8, crop_len: 16_000, optim: OptimConfig::default(), low_only_prob: 0.25, seed: 0 }
    }
}

impl CodecTrainConfig {
    /// Schedule for the toy codec layout on the 1 kHz synthetic corpus.
    pub fn toy() -> Self {
        Self { crop_len: 1024, optim: OptimConfig { lr: 5e-4, warmup_steps: 100, ..OptimConfig::default() }, ..Self::default() }
    }
}

fn crop_batch<T: Scalar>(data: &[Waveform], batch: usize, len: usize, peak: f32, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut out = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let w = &data[rng.gen_range(0..data.len())];
        let start = if w.len() > len { rng.gen_range(0..=w.len() - len) } else { 0 };
        let end = (start + len).min(w.len());
        let seg = Waveform::new(w.samples()[start..end].to_vec(), w.sample_rate()).expect("slice of a valid waveform");
        let seg = seg.peak_limited(peak);
        out.extend(seg.samples().iter().map(|&v| T::of(v as f64)));
        out.extend(std::iter::repeat_n(T::zero(), len - seg.len()));
    }
    Tensor::new(&[batch, 1, len], out)
}

/// Train `model` in place and return the per-step loss curve.
///
/// Codebooks are seeded from the first batch, then follow EMA updates.
/// A non-finite loss or gradient stops training with [`Error::Diverged`];
/// the model is left at its last finite state, which is also written to
/// `rescue` when given.
pub fn train_codec<T: Scalar>(
    model: &mut CodecModel<T>,
    data: &[Waveform],
    cfg: &CodecTrainConfig,
    rescue: Option<&Path>,
) -> Result<Vec<CodecLossReport>> {
    if data.is_empty() {
        return Err(Error::Invalid("codec training needs at least one waveform".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(w) = data.iter().find(|w| w.sample_rate() != model.config.sample_rate) {
        return Err(Error::Invalid(format!(
            "training audio at {} Hz, codec expects {} Hz",
            w.sample_rate(),
            model.config.sample_rate
        )));
    }
    let len = model.config.padded_len(cfg.crop_len.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optim, &model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x = crop_batch::<T>(data, cfg.batch_size, len, model.config.input_peak, &mut rng);
        if model.codebooks.iter().any(|c| !c.is_initialized()) {
            let tape = Tape::new();
            let b = model.params.bind_frozen(&tape);
            let hs = model.encoder(&b, tape.constant(x.clone()));
            for (cb, h) in model.codebooks.iter_mut().zip(hs) {
                if !cb.is_initialized() {
                    cb.init_from(&h.channels_to_rows().value(), &mut rng);
                }
            }
        }
        let keep: Option<Vec<bool>> =
            (cfg.low_only_prob > 0.0).then(|| (0..cfg.batch_size).map(|_| rng.gen::<f64>() >= cfg.low_only_prob).collect());

        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let out = model.forward_loss(&tape, &b, &x, &QuantMode::Nearest, keep.as_deref())?;
        let diverged = |what: &str| -> Result<Vec<CodecLossReport>> {
            if let Some(p) = rescue {
                model.save(p)?;
            }
            Err(Error::Diverged { step, what: what.into() })
        };
        if !out.report.total.is_finite() {
            return diverged("loss");
        }
        let grads = b.grads(&tape.backward(out.total));
        if grads.iter().any(|g| !g.all_finite()) {
            return diverged("gradient");
        }
        let (latents, ids) = (out.latents, out.ids);
        curve.push(out.report);
        drop(tape);
        let snapshot = model.params.clone();
        opt.step(&mut model.params, &grads);
        if model.params.iter().any(|(_, t)| !t.all_finite()) {
            model.params = snapshot;
            if let Some(p) = rescue {
                model.save(p)?;
            }
            return Err(Error::Diverged { step, what: "parameters".into() });
        }
        let ema = model.config.ema;
        for ((cb, rows), ids) in model.codebooks.iter_mut().zip(&latents).zip(&ids) {
            cb.ema_update(rows, ids, &ema, &mut rng);
        }
    }
    Ok(curve)
}

/// Fraction of codes used at least once per level when tokenizing `data`.
pub fn codebook_utilization<T: Scalar>(model: &CodecModel<T>, data: &[Waveform]) -> Result<Vec<f64>> {
    let mut used = vec![HashSet::new(); model.config.levels()];
    for w in data {
        for t in model.tokenize(w)? {
            used[t.level].extend(t.ids);
        }
    }
    Ok(used.iter().map(|u| u.len() as f64 / model.config.codebook_size as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::codec::{CodecConfig, StftConfig};

    fn small() -> CodecConfig {
        CodecConfig {
            sample_rate: 1000,
            channels: 8,
            layers_per_level: vec![3, 2],
            res_blocks: 1,
            codebook_size: 16,
            code_dim: 8,
            stft: StftConfig { windows: vec![32, 64], overlap: 0.75 },
            ..CodecConfig::paper()
        }
    }

    #[test]
    fn straight_through_gradient_matches_frozen_offset_differences() {
        // Tiny model (well under 100 parameters): one channel, one layer per level.
        let cfg = CodecConfig {
            channels: 1,
            layers_per_level: vec![1, 1],
            res_blocks: 1,
            code_dim: 2,
            codebook_size: 4,
            stft: StftConfig { windows: vec![8], overlap: 0.5 },
            ..small()
        };
        let mut model = CodecModel::<f64>::new(cfg, 7).unwrap();
        // Random biases keep ReLU inputs away from the kink at exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..model.params.len() {
            let id = model.params.find(model.params.iter().nth(i).unwrap().0).unwrap();
            let t = model.params.get_mut(id);
            let noise = Tensor::<f64>::randn(t.shape(), 0.2, &mut rng);
            t.add_assign(&noise);
        }
        assert!(model.num_params() <= 100, "{} params", model.num_params());
        let x: Vec<f64> = (0..16).map(|i| 0.5 * (i as f64 * 0.9).sin()).collect();
        let x = Tensor::new(&[1, 1, 16], x);

        // Offsets q - h at the initial parameters stay fixed under perturbation,
        // so finite differences see exactly the straight-through path.
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let out = model.forward_loss(&tape, &b, &x, &QuantMode::Nearest, None).unwrap();
        let offsets: Vec<Tensor<f64>> = out
            .latents
            .iter()
            .zip(&out.quantized)
            .map(|(h, q)| Tensor::new(h.shape(), q.data().iter().zip(h.data()).map(|(a, b)| a - b).collect()))
            .collect();
        let st_grads = b.grads(&tape.backward(out.total));
        let mode = QuantMode::FrozenOffsets(offsets);
        let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
        let err = max_rel_error(
            &inputs,
            &|tape, vars| {
                let b = crate::nn::Bound::from_vars(vars.to_vec());
                model.forward_loss(tape, &b, &x, &mode, None).unwrap().total
            },
            1e-6,
        );
        assert!(err < 1e-4, "relative error {err}");

        // The frozen-offset graph yields the same gradients as the straight-through one.
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let out = model.forward_loss(&tape, &b, &x, &mode, None).unwrap();
        let fo_grads = b.grads(&tape.backward(out.total));
        for (a, c) in st_grads.iter().zip(&fo_grads) {
            for (u, v) in a.data().iter().zip(c.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_training_stays_finite() {
        let mut m = CodecModel::<f32>::new(small(), 1).unwrap();
        let data = vec![Waveform::new(vec![0.0; 256], 1000).unwrap()];
        let cfg = CodecTrainConfig { steps: 200, batch_size: 2, crop_len: 128, seed: 3, ..Default::default() };
        let curve = train_codec(&mut m, &data, &cfg, None).unwrap();
        assert_eq!(curve.len(), 200);
        assert!(curve.iter().all(|r| r.total.is_finite()));
        assert!(m.codebooks().iter().all(|c| c.codes().all_finite()));
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_rate() {
        let data = vec![Waveform::new((0..300).map(|i| (i as f32 * 0.2).sin() * 0.5).collect(), 1000).unwrap()];
        let cfg = CodecTrainConfig { steps: 5, batch_size: 2, crop_len: 96, seed: 9, ..Default::default() };
        let mut a = CodecModel::<f32>::new(small(), 4).unwrap();
        let mut b = a.clone();
        let ca = train_codec(&mut a, &data, &cfg, None).unwrap();
        let cb = train_codec(&mut b, &data, &cfg, None).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.tokenize(&data[0]).unwrap(), b.tokenize(&data[0]).unwrap());
        let wrong = vec![Waveform::new(vec![0.0; 300], 2000).unwrap()];
        assert!(train_codec(&mut a, &wrong, &cfg, None).is_err());
    }

    #[test]
    fn divergence_is_reported_and_rescued() {
        let mut m = CodecModel::<f32>::new(small(), 2).unwrap();
        let data = vec![Waveform::new((0..300).map(|i| (i as f32 * 0.2).sin()).collect(), 1000).unwrap()];
        let cfg = CodecTrainConfig {
            steps: 50,
            batch_size: 1,
            crop_len: 96,
            optim: OptimConfig { lr: 1e30, warmup_steps: 0, clip_norm: 0.0, weight_decay: 0.0, ..Default::default() },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("last.ckpt");
        match train_codec(&mut m, &data, &cfg, Some(&p)) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
        let saved = CodecModel::<f32>::load(&p).unwrap();
        assert!(saved.params().iter().all(|(_, t)| t.all_finite()));
    }
}
