//! Small spectrogram classifier used as the desk-scale judge: its hidden
//! layer is the FAD feature space, its softmax gives class posteriors, and
//! an optional projection head maps audio into the image embedding space.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassPosterior, FeatureExtractor};
use crate::autograd::{softmax, Tape};
use crate::checkpoint;
use crate::codec::stft::magnitudes;
use crate::codec::Waveform;
use crate::conditioning::EmbeddingClip;
use crate::error::{Error, Result};
use crate::nn::{AdamW, OptimConfig, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"IM2WCLSF";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub window: usize,
    pub hop: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub head_steps: usize,
    pub lr: f64,
    /// Softmax temperature of the contrastive projection head.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { window: 64, hop: 16, hidden: 32, feature_dim: 16, steps: 400, head_steps: 300, lr: 1e-2, temperature: 0.1, seed: 0 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 4 || self.hop == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("classifier window, hop and widths must be positive".into()));
        }
        if !(self.lr > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("classifier lr and temperature must be positive".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        2 * (self.window / 2 + 1)
    }
}

#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub waveform: Waveform,
    pub label: usize,
    pub embedding: Option<EmbeddingClip>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: ClassifierConfig,
    sample_rate: u32,
    num_classes: usize,
    emb_dim: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyClassifier {
    meta: Meta,
    params: ParamSet<f64>,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    out: (ParamId, ParamId),
    head: Option<ParamId>,
}

/// Floor added to window-normalised power before the log, so inaudible
/// noise in empty bins does not dominate the features.
const LOG_OFFSET: f64 = 1e-3;
/// Lower bound on per-feature standard deviation during standardisation.
const MIN_STD: f64 = 0.1;

/// Per-bin mean and standard deviation of the log power spectrogram.
fn spectral_summary(w: &Waveform, cfg: &ClassifierConfig) -> Vec<f64> {
    let x: Vec<f64> = w.samples().iter().map(|&v| v as f64).collect();
    let frames = magnitudes(&x, cfg.window, cfg.hop);
    let bins = cfg.window / 2 + 1;
    let norm = cfg.window as f64 / 2.0;
    let n = frames.len() as f64;
    let logs: Vec<Vec<f64>> =
        frames.iter().map(|f| f.iter().map(|m| ((m / norm).powi(2) + LOG_OFFSET).ln()).collect()).collect();
    let mut out = vec![0.0; 2 * bins];
    for b in 0..bins {
        let mean = logs.iter().map(|f| f[b]).sum::<f64>() / n;
        let var = logs.iter().map(|f| (f[b] - mean).powi(2)).sum::<f64>() / n;
        out[b] = mean;
        out[bins + b] = var.sqrt();
    }
    out
}

impl ToyClassifier {
    fn build(meta: Meta, seed: u64, with_head: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &meta.config;
        let mut params = ParamSet::new();
        let l1 = params.add_linear("l1", c.input_dim(), c.hidden, &mut rng);
        let l2 = params.add_linear("l2", c.hidden, c.feature_dim, &mut rng);
        let out = params.add_linear("out", c.feature_dim, meta.num_classes, &mut rng);
        let head = meta.emb_dim.filter(|_| with_head).map(|d| params.add("head", Tensor::zeros(&[c.feature_dim, d])));
        let dim = c.input_dim();
        Self { meta, params, in_mean: vec![0.0; dim], in_std: vec![1.0; dim], l1, l2, out, head }
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.meta.config
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn sample_rate(&self) -> u32 {
        self.meta.sample_rate
    }

    pub fn has_embedding_head(&self) -> bool {
        self.head.is_some()
    }

    fn inputs(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.sample_rate() != self.meta.sample_rate {
            return Err(Error::Invalid(format!(
                "classifier expects {} Hz audio, got {} Hz",
                self.meta.sample_rate,
                w.sample_rate()
            )));
        }
        let s = spectral_summary(w, &self.meta.config);
        Ok(s.iter().zip(&self.in_mean).zip(&self.in_std).map(|((v, m), sd)| (v - m) / sd).collect())
    }

    fn affine(&self, x: &[f64], (w, b): (ParamId, ParamId)) -> Vec<f64> {
        let w = self.params.get(w);
        let b = self.params.get(b).data();
        let mut out = b.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wij;
            }
        }
        out
    }

    fn hidden(&self, inputs: &[f64]) -> Vec<f64> {
        let h1: Vec<f64> = self.affine(inputs, self.l1).into_iter().map(|v| v.max(0.0)).collect();
        self.affine(&h1, self.l2).into_iter().map(f64::tanh).collect()
    }

    /// Penultimate-layer activations.
    pub fn features(&self, w: &Waveform) -> Result<Vec<f64>> {
        Ok(self.hidden(&self.inputs(w)?))
    }

    pub fn posterior(&self, w: &Waveform) -> Result<ClassPosterior> {
        let h = self.features(w)?;
        ClassPosterior::new(softmax(&self.affine(&h, self.out)))
    }

    /// Audio embedding in the image embedding space, for Clip-Score.
    pub fn audio_embedding(&self, w: &Waveform) -> Result<Vec<f64>> {
        let head = self.head.ok_or_else(|| Error::Invalid("classifier was trained without an embedding head".into()))?;
        let h = self.features(w)?;
        let p = self.params.get(head);
        Ok((0..p.cols()).map(|j| h.iter().enumerate().map(|(i, &hi)| hi * p.row(i)[j]).sum()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.meta).expect("metadata serialises");
        let n = self.in_mean.len();
        let norm = [
            ("input.mean".to_string(), Tensor::new(&[n], self.in_mean.clone())),
            ("input.std".to_string(), Tensor::new(&[n], self.in_std.clone())),
        ];
        let sections = self.params.iter().chain(norm.iter().map(|(k, t)| (k.as_str(), t)));
        checkpoint::write(path, CLASSIFIER_MAGIC, &json, sections)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path, CLASSIFIER_MAGIC)?;
        let meta: Meta = serde_json::from_str(&ck.config_json).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        meta.config.validate()?;
        let mut model = Self::build(meta, 0, true);
        model.params.load_named(&ck.sections_as::<f64>()).map_err(|m| Error::format(path, m))?;
        let get = |k: &str| {
            ck.section(k).map(|t| t.cast::<f64>().into_data()).ok_or_else(|| Error::format(path, format!("missing {k}")))
        };
        model.in_mean = get("input.mean")?;
        model.in_std = get("input.std")?;
        if model.in_mean.len() != model.meta.config.input_dim() || model.in_std.len() != model.in_mean.len() {
            return Err(Error::format(path, "input normalisation has the wrong size"));
        }
        Ok(model)
    }
}

impl FeatureExtractor for ToyClassifier {
    fn name(&self) -> &str {
        "toy-spectrogram-classifier"
    }

    fn dim(&self) -> usize {
        self.meta.config.feature_dim
    }

    fn extract(&self, w: &Waveform) -> Result<Vec<f64>> {
        self.features(w)
    }
}

/// Full-batch training of the classifier, then (when every clip carries an
/// embedding) a contrastive projection head on the frozen features.
pub fn train_toy_classifier(data: &[LabeledClip], cfg: &ClassifierConfig) -> Result<ToyClassifier> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::Invalid("no training clips".into()))?;
    let sample_rate = first.waveform.sample_rate();
    if data.iter().any(|d| d.waveform.sample_rate() != sample_rate) {
        return Err(Error::Invalid("training clips have mixed sample rates".into()));
    }
    let num_classes = data.iter().map(|d| d.label).max().unwrap() + 1;
    let mut seen = vec![false; num_classes];
    data.iter().for_each(|d| seen[d.label] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Invalid("classifier training needs at least two classes".into()));
    }
    let emb_dim = match data.iter().map(|d| d.embedding.as_ref().map(|e| e.dim())).collect::<Option<Vec<_>>>() {
        Some(dims) if dims.iter().all(|&d| d == dims[0]) => Some(dims[0]),
        Some(_) => return Err(Error::Invalid("embedding dimensions differ across clips".into())),
        None => None,
    };
    let mut model = ToyClassifier::build(Meta { config: cfg.clone(), sample_rate, num_classes, emb_dim }, cfg.seed, false);

    let raw: Vec<Vec<f64>> = data.iter().map(|d| spectral_summary(&d.waveform, cfg)).collect();
    let n = raw.len();
    let dim = cfg.input_dim();
    for j in 0..dim {
        let mean = raw.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        model.in_mean[j] = mean;
        model.in_std[j] = var.sqrt().max(MIN_STD);
    }
    let x: Vec<f64> =
        raw.iter().flat_map(|r| r.iter().zip(&model.in_mean).zip(&model.in_std).map(|((v, m), s)| (v - m) / s)).collect();
    let x = Tensor::new(&[n, dim], x);
    let targets: Vec<Option<usize>> = data.iter().map(|d| Some(d.label)).collect();

    let optim = OptimConfig { lr: cfg.lr, warmup_steps: 0, ..OptimConfig::default() };
    let mut opt = AdamW::new(optim, &model.params);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let (w1, b1) = (b.var(model.l1.0), b.var(model.l1.1));
        let (w2, b2) = (b.var(model.l2.0), b.var(model.l2.1));
        let (w3, b3) = (b.var(model.out.0), b.var(model.out.1));
        let h = tape.constant(x.clone()).matmul(w1).add_row(b1).relu().matmul(w2).add_row(b2).tanh();
        let loss = h.matmul(w3).add_row(b3).cross_entropy(&targets);
        if !loss.item().is_finite() {
            return Err(Error::Diverged { step, what: "classifier loss".into() });
        }
        opt.step(&mut model.params, &b.grads(&tape.backward(loss)));
    }

    if let Some(d) = emb_dim {
        let feats: Vec<f64> = (0..n).flat_map(|i| model.hidden(x.row(i))).collect();
        let feats = Tensor::new(&[n, cfg.feature_dim], feats);
        let emb: Vec<f64> = data
            .iter()
            .flat_map(|c| {
                let m = c.embedding.as_ref().unwrap().mean_frame();
                let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                m.into_iter().map(move |v| v / norm)
            })
            .collect();
        let emb_t = Tensor::new(&[n, d], emb).transpose();
        let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut hp = ParamSet::new();
        let hd = hp.add("head", Tensor::randn(&[cfg.feature_dim, d], (1.0 / cfg.feature_dim as f64).sqrt(), &mut rng));
        let mut head_opt = AdamW::new(optim, &hp);
        for step in 0..cfg.head_steps {
            let tape = Tape::new();
            let b = hp.bind(&tape);
            let a = tape.constant(feats.clone()).matmul(b.var(hd)).l2_normalize_rows();
            let loss = a.matmul(tape.constant(emb_t.clone())).scale(1.0 / cfg.temperature).cross_entropy(&diag);
            if !loss.item().is_finite() {
                return Err(Error::Diverged { step, what: "embedding head loss".into() });
            }
            head_opt.step(&mut hp, &b.grads(&tape.backward(loss)));
        }
        model.head = Some(model.params.add("head", hp.get(hd).clone()));
    }
    Ok(model)
}
