//! Hierarchical 1-D VQ-VAE audio codec.
//!
//! A single strided convolutional encoder is tapped at several depths; each
//! tap feeds its own codebook. The decoder mirrors the encoder with
//! transposed convolutions and merges the finer levels back in on the way up,
//! so the coarsest level alone is also decodable.

pub mod quantizer;
pub mod stft;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, CODEC_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use quantizer::{Codebook, EmaConfig, LatentSequence, TokenSequence};
pub use stft::{spectral_loss, StftConfig};
pub use train::{codebook_utilization, train_codec, CodecTrainConfig};

/// Mono audio with validated, finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("waveform must contain at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Hard-limit every sample to `[-1, 1]`.
    pub fn clamped(mut self) -> Self {
        self.samples.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        self
    }

    /// Scale down so the peak does not exceed `limit`; quieter input is untouched.
    pub fn peak_limited(&self, limit: f32) -> Self {
        let p = self.peak();
        if p <= limit {
            return self.clone();
        }
        let g = limit / p;
        Self { samples: self.samples.iter().map(|v| v * g).collect(), sample_rate: self.sample_rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Convolution width of every hidden layer.
    pub channels: usize,
    /// Stride-2 layers per level, finest level first. `[3, 2]` taps after
    /// layers 3 and 5, giving downsampling factors 8 and 32.
    pub layers_per_level: Vec<usize>,
    pub res_blocks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub commitment: f64,
    pub reconstruction_weight: f64,
    pub spectral_weight: f64,
    pub ema: EmaConfig,
    pub stft: StftConfig,
    /// Inputs are scaled down to this peak before encoding.
    pub input_peak: f32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl CodecConfig {
    /// Full-size layout: 16 kHz, factors 8/32, 2048 codes of width 128.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            channels: 128,
            layers_per_level: vec![3, 2],
            res_blocks: 2,
            codebook_size: 2048,
            code_dim: 128,
            commitment: 0.25,
            reconstruction_weight: 1.0,
            spectral_weight: 1.0,
            ema: EmaConfig::default(),
            stft: StftConfig::default(),
            input_peak: 0.95,
        }
    }

    /// Desk-scale layout: 128 codes of width 32 on 1 kHz synthetic audio.
    pub fn toy() -> Self {
        Self {
            sample_rate: 1000,
            channels: 16,
            res_blocks: 1,
            codebook_size: 128,
            code_dim: 32,
            stft: StftConfig { windows: vec![32, 64, 128], overlap: 0.75 },
            ema: EmaConfig { dead_steps: 20, ..EmaConfig::default() },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.channels == 0 || self.code_dim == 0 {
            return Err(Error::Config("codec sample_rate, channels and code_dim must be positive".into()));
        }
        if self.layers_per_level.is_empty() || self.layers_per_level.contains(&0) {
            return Err(Error::Config("every codec level needs at least one stride-2 layer".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if !(self.ema.decay > 0.0 && self.ema.decay <= 1.0) {
            return Err(Error::Config("ema.decay must lie in (0, 1]".into()));
        }
        if self.commitment < 0.0 || self.reconstruction_weight < 0.0 || self.spectral_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        self.stft.validate()
    }

    pub fn levels(&self) -> usize {
        self.layers_per_level.len()
    }

    /// Downsampling factor of each level, finest first.
    pub fn factors(&self) -> Vec<usize> {
        let mut depth = 0;
        self.layers_per_level
            .iter()
            .map(|&n| {
                depth += n;
                1usize << depth
            })
            .collect()
    }

    pub fn max_factor(&self) -> usize {
        *self.factors().last().unwrap()
    }

    /// Length after right zero-padding to a multiple of the largest factor.
    pub fn padded_len(&self, len: usize) -> usize {
        len.div_ceil(self.max_factor()) * self.max_factor()
    }

    /// Token count per level for a waveform of `len` samples.
    pub fn token_lengths(&self, len: usize) -> Vec<usize> {
        let p = self.padded_len(len);
        self.factors().iter().map(|f| p / f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecLossReport {
    pub reconstruction: f64,
    pub spectral: f64,
    pub commitment: f64,
    /// Always zero: codebooks learn through EMA updates instead of a loss term.
    pub codebook: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub spectral: f64,
    pub commitment: f64,
}

impl From<&CodecConfig> for LossWeights {
    fn from(c: &CodecConfig) -> Self {
        Self { reconstruction: c.reconstruction_weight, spectral: c.spectral_weight, commitment: c.commitment }
    }
}

/// Encoder output and chosen code vectors of one level, both `[S, dim]`.
#[derive(Debug, Clone)]
pub struct QuantizerStats<T> {
    pub latents: Tensor<T>,
    pub quantized: Tensor<T>,
}

/// Scalar recomputation of the training objective for one reconstruction.
pub fn codec_loss<T: Scalar>(
    x: &[T],
    x_hat: &[T],
    stats: &[QuantizerStats<T>],
    weights: &LossWeights,
    stft: &StftConfig,
) -> Result<CodecLossReport> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("reconstruction length {} differs from input {}", x_hat.len(), x.len())));
    }
    let recon = x.iter().zip(x_hat).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / x.len() as f64;
    let spectral = stft::spectral_loss(x, x_hat, stft)?.as_f64();
    let mut commit = 0.0;
    for s in stats {
        if s.latents.shape() != s.quantized.shape() {
            return Err(Error::Shape("latents and quantized vectors differ in shape".into()));
        }
        let rows = s.latents.rows().max(1) as f64;
        commit += s.latents.data().iter().zip(s.quantized.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / rows;
    }
    let commitment = weights.commitment * commit;
    let report = CodecLossReport {
        reconstruction: recon,
        spectral,
        commitment,
        codebook: 0.0,
        total: weights.reconstruction * recon + weights.spectral * spectral + commitment,
    };
    if [report.reconstruction, report.spectral, report.commitment, report.total].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("codec loss".into()));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Res {
    c3: Conv,
    c1: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_res: Vec<Vec<Res>>,
    taps: Vec<Conv>,
    dec_in: Vec<Conv>,
    dec_res: Vec<Vec<Res>>,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

/// How latents are replaced by codes in the training graph.
pub enum QuantMode<T> {
    /// Nearest code, gradient copied straight through.
    Nearest,
    /// `latent + offset` with fixed per-level offsets `[batch * S, dim]`;
    /// a differentiable stand-in used to verify the straight-through path.
    FrozenOffsets(Vec<Tensor<T>>),
}

/// Everything the training step needs from one forward pass.
pub struct ForwardOutput<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub report: CodecLossReport,
    pub x_hat: Var<'t, T>,
    /// Per level: latent rows `[batch * S, dim]`, their ids and quantized rows.
    pub latents: Vec<Tensor<T>>,
    pub ids: Vec<Vec<usize>>,
    pub quantized: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct CodecModel<T: Scalar> {
    config: CodecConfig,
    params: ParamSet<T>,
    layout: Layout,
    codebooks: Vec<Codebook<T>>,
}

fn conv<T: Scalar>(ps: &mut ParamSet<T>, name: &str, co: usize, ci: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) -> Conv {
    let std = gain / ((ci * k) as f64).sqrt();
    Conv {
        w: ps.add(format!("{name}.weight"), Tensor::randn(&[co, ci, k], std, rng)),
        b: ps.add(format!("{name}.bias"), Tensor::zeros(&[co])),
    }
}

fn conv_t<T: Scalar>(ps: &mut ParamSet<T>, name: &str, ci: usize, co: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
    let std = 1.0 / ((ci * k / 2) as f64).sqrt();
    Conv {
        w: ps.add(format!("{name}.weight"), Tensor::randn(&[ci, co, k], std, rng)),
        b: ps.add(format!("{name}.bias"), Tensor::zeros(&[co])),
    }
}

fn res<T: Scalar>(ps: &mut ParamSet<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Res {
    Res { c3: conv(ps, &format!("{name}.c3"), c, c, 3, 1.0, rng), c1: conv(ps, &format!("{name}.c1"), c, c, 1, 0.3, rng) }
}

impl<T: Scalar> CodecModel<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = config.channels;
        let total_layers: usize = config.layers_per_level.iter().sum();
        let enc_in = conv(&mut ps, "enc.in", c, 1, 3, 1.0, &mut rng);
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        for i in 0..total_layers {
            enc_down.push(conv(&mut ps, &format!("enc.down{i}"), c, c, 4, 1.0, &mut rng));
            enc_res.push((0..config.res_blocks).map(|r| res(&mut ps, &format!("enc.res{i}.{r}"), c, &mut rng)).collect());
        }
        let taps = (0..config.levels())
            .map(|l| conv(&mut ps, &format!("enc.tap{l}"), config.code_dim, c, 1, 1.0, &mut rng))
            .collect();
        let dec_in = (0..config.levels())
            .map(|l| conv(&mut ps, &format!("dec.in{l}"), c, config.code_dim, 3, 1.0, &mut rng))
            .collect();
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        for i in 0..total_layers {
            dec_res.push((0..config.res_blocks).map(|r| res(&mut ps, &format!("dec.res{i}.{r}"), c, &mut rng)).collect());
            dec_up.push(conv_t(&mut ps, &format!("dec.up{i}"), c, c, 4, &mut rng));
        }
        let dec_out = conv(&mut ps, "dec.out", 1, c, 3, 1.0, &mut rng);
        let codebooks = (0..config.levels())
            .map(|l| Codebook::new(l, config.codebook_size, config.code_dim, &mut rng))
            .collect();
        let layout = Layout { enc_in, enc_down, enc_res, taps, dec_in, dec_res, dec_up, dec_out };
        Ok(Self { config, params: ps, layout, codebooks })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn codebooks(&self) -> &[Codebook<T>] {
        &self.codebooks
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    fn apply_conv<'t>(b: &Bound<'t, T>, x: Var<'t, T>, c: Conv, stride: usize, pad: usize) -> Var<'t, T> {
        x.conv1d(b.var(c.w), b.var(c.b), stride, pad)
    }

    fn residual<'t>(b: &Bound<'t, T>, h: Var<'t, T>, r: &Res) -> Var<'t, T> {
        let inner = Self::apply_conv(b, h.relu(), r.c3, 1, 1).relu();
        h.add(Self::apply_conv(b, inner, r.c1, 1, 0))
    }

    /// `x[batch, 1, time]` to per-level latents `[batch, dim, S_l]`.
    pub fn encoder<'t>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let l = &self.layout;
        let mut h = Self::apply_conv(b, x, l.enc_in, 1, 1);
        let mut layer = 0;
        let mut out = Vec::new();
        for (lvl, &n) in self.config.layers_per_level.iter().enumerate() {
            for _ in 0..n {
                h = Self::apply_conv(b, h, l.enc_down[layer], 2, 1).relu();
                for r in &l.enc_res[layer] {
                    h = Self::residual(b, h, r);
                }
                layer += 1;
            }
            out.push(Self::apply_conv(b, h, l.taps[lvl], 1, 0));
        }
        out
    }

    /// Per-level code vectors `[batch, dim, S_l]` to `[batch, 1, time]`.
    /// Finer levels may be absent; `fine_keep` zeroes their contribution per batch item.
    pub fn decoder<'t>(&self, b: &Bound<'t, T>, qs: &[Option<Var<'t, T>>], fine_keep: Option<&[bool]>) -> Result<Var<'t, T>> {
        let l = &self.layout;
        let levels = self.config.levels();
        if qs.len() != levels {
            return Err(Error::Shape(format!("decoder expects {levels} levels, got {}", qs.len())));
        }
        if qs[levels - 1].is_none() {
            return Err(Error::Invalid("the coarsest level is required for decoding".into()));
        }
        let total_layers: usize = self.config.layers_per_level.iter().sum();
        let mut h: Option<Var<'t, T>> = None;
        let mut up = 0;
        for lvl in (0..levels).rev() {
            if let Some(q) = qs[lvl] {
                let mut c = Self::apply_conv(b, q, l.dec_in[lvl], 1, 1);
                if let (Some(keep), true) = (fine_keep, lvl + 1 < levels) {
                    let shape = c.shape();
                    let per = shape[1] * shape[2];
                    let mask: Vec<T> = keep
                        .iter()
                        .flat_map(|&k| std::iter::repeat_n(if k { T::one() } else { T::zero() }, per))
                        .collect();
                    c = c.mul_const(Tensor::new(&shape, mask));
                }
                h = Some(match h {
                    None => c,
                    Some(h) => {
                        if h.shape() != c.shape() {
                            return Err(Error::Shape(format!(
                                "level {lvl} has shape {:?}, decoder state {:?}",
                                c.shape(),
                                h.shape()
                            )));
                        }
                        h.add(c)
                    }
                });
            }
            let mut hh = h.expect("coarsest level present");
            for _ in 0..self.config.layers_per_level[lvl] {
                for r in &l.dec_res[up] {
                    hh = Self::residual(b, hh, r);
                }
                hh = hh.relu().conv_transpose1d(b.var(l.dec_up[up].w), b.var(l.dec_up[up].b), 2, 1);
                up += 1;
            }
            h = Some(hh);
        }
        debug_assert_eq!(up, total_layers);
        Ok(Self::apply_conv(b, h.unwrap().relu(), l.dec_out, 1, 1))
    }

    fn padded_input(&self, x: &Waveform) -> Result<Tensor<T>> {
        if x.sample_rate() != self.config.sample_rate {
            return Err(Error::Invalid(format!(
                "waveform sample rate {} does not match codec rate {}",
                x.sample_rate(),
                self.config.sample_rate
            )));
        }
        let x = x.peak_limited(self.config.input_peak);
        let len = self.config.padded_len(x.len());
        let mut data: Vec<T> = x.samples().iter().map(|&v| T::of(v as f64)).collect();
        data.resize(len, T::zero());
        Ok(Tensor::new(&[1, 1, len], data))
    }

    /// Continuous latents of every level, finest first.
    pub fn encode(&self, x: &Waveform) -> Result<Vec<LatentSequence<T>>> {
        let input = self.padded_input(x)?;
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let hs = self.encoder(&b, tape.constant(input));
        let out: Vec<_> = hs
            .into_iter()
            .enumerate()
            .map(|(level, h)| LatentSequence { level, vectors: h.channels_to_rows().value() })
            .collect();
        if out.iter().any(|l| !l.vectors.all_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(out)
    }

    pub fn quantize(&self, h: &LatentSequence<T>) -> Result<(TokenSequence, LatentSequence<T>)> {
        let cb = self.codebooks.get(h.level).ok_or_else(|| Error::Invalid(format!("no codebook for level {}", h.level)))?;
        cb.quantize(h, self.config.factors()[h.level])
    }

    /// Encode and quantize every level.
    pub fn tokenize(&self, x: &Waveform) -> Result<Vec<TokenSequence>> {
        self.encode(x)?.iter().map(|h| self.quantize(h).map(|(t, _)| t)).collect()
    }

    /// Decode one token sequence per level, trimming to `source_len` when given.
    pub fn decode(&self, tokens: &[TokenSequence], source_len: Option<usize>) -> Result<Waveform> {
        let opt: Vec<Option<&TokenSequence>> = tokens.iter().map(Some).collect();
        self.decode_levels(&opt, source_len)
    }

    /// Decode from the coarsest level alone.
    pub fn decode_coarse(&self, coarse: &TokenSequence, source_len: Option<usize>) -> Result<Waveform> {
        let mut opt: Vec<Option<&TokenSequence>> = vec![None; self.config.levels()];
        *opt.last_mut().unwrap() = Some(coarse);
        self.decode_levels(&opt, source_len)
    }

    /// Decode with any subset of finer levels present; the coarsest is required.
    pub fn decode_levels(&self, tokens: &[Option<&TokenSequence>], source_len: Option<usize>) -> Result<Waveform> {
        let levels = self.config.levels();
        if tokens.len() != levels {
            return Err(Error::Shape(format!("expected {levels} token levels, got {}", tokens.len())));
        }
        let factors = self.config.factors();
        let mut span = None;
        for (lvl, t) in tokens.iter().enumerate() {
            let Some(t) = t else { continue };
            if t.is_empty() {
                return Err(Error::Invalid(format!("level {lvl} token sequence is empty")));
            }
            let s = t.len() * factors[lvl];
            match span {
                None => span = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Shape(format!("level {lvl} spans {s} samples, other levels span {prev}")));
                }
                _ => {}
            }
        }
        let span = span.ok_or_else(|| Error::Invalid("no token levels given".into()))?;
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let mut qs = Vec::with_capacity(levels);
        for (lvl, t) in tokens.iter().enumerate() {
            qs.push(match t {
                Some(t) => {
                    let rows = self.codebooks[lvl].lookup(&t.ids)?;
                    Some(tape.constant(rows).rows_to_channels(1))
                }
                None => None,
            });
        }
        let out = self.decoder(&b, &qs, None)?.value();
        let len = source_len.unwrap_or(span).min(span);
        let samples: Vec<f32> = out.data()[..len].iter().map(|v| v.as_f64() as f32).collect();
        Waveform::new(samples, self.config.sample_rate)
    }

    /// Training graph for a batch `x[batch, 1, time]` (time a multiple of the largest factor).
    pub fn forward_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        b: &Bound<'t, T>,
        x: &Tensor<T>,
        mode: &QuantMode<T>,
        fine_keep: Option<&[bool]>,
    ) -> Result<ForwardOutput<'t, T>> {
        let batch = x.shape()[0];
        if x.shape()[2] % self.config.max_factor() != 0 {
            return Err(Error::Shape("training crop must be a multiple of the largest downsampling factor".into()));
        }
        let xv = tape.constant(x.clone());
        let hs = self.encoder(b, xv);
        let mut latents = Vec::new();
        let mut ids_all = Vec::new();
        let mut quantized = Vec::new();
        let mut qs = Vec::new();
        let mut commit: Option<Var<'t, T>> = None;
        for (lvl, h) in hs.into_iter().enumerate() {
            let rows = h.channels_to_rows();
            let rv = rows.value();
            let ids = self.codebooks[lvl].assign(&rv)?;
            let q = self.codebooks[lvl].lookup(&ids)?;
            let st = match mode {
                QuantMode::Nearest => rows.straight_through(q.clone()),
                QuantMode::FrozenOffsets(off) => rows.add(tape.constant(off[lvl].clone())),
            };
            let c = rows.mean_row_sq_dist(tape.constant(q.clone()));
            commit = Some(match commit {
                None => c,
                Some(acc) => acc.add(c),
            });
            qs.push(Some(st.rows_to_channels(batch)));
            latents.push(rv);
            ids_all.push(ids);
            quantized.push(q);
        }
        let x_hat = self.decoder(b, &qs, fine_keep)?;
        let recon = x_hat.mse(xv);
        let spectral = stft::spectral_loss_var(x_hat, x, &self.config.stft);
        let commit = commit.expect("at least one level");
        let w = LossWeights::from(&self.config);
        let total = recon
            .scale(T::of(w.reconstruction))
            .add(spectral.scale(T::of(w.spectral)))
            .add(commit.scale(T::of(w.commitment)));
        let report = CodecLossReport {
            reconstruction: recon.item().as_f64(),
            spectral: spectral.item().as_f64(),
            commitment: w.commitment * commit.item().as_f64(),
            codebook: 0.0,
            total: total.item().as_f64(),
        };
        Ok(ForwardOutput { total, report, x_hat, latents, ids: ids_all, quantized })
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra: Vec<(String, Tensor<T>)> = Vec::new();
        for (l, cb) in self.codebooks.iter().enumerate() {
            extra.push((format!("codebook{l}.codes"), cb.codes().clone()));
            extra.push((format!("codebook{l}.usage"), Tensor::new(&[cb.size()], cb.usage_counts().to_vec())));
            extra.push((format!("codebook{l}.ema_sums"), cb.ema_sums().clone()));
            let flag = if cb.is_initialized() { T::one() } else { T::zero() };
            extra.push((format!("codebook{l}.initialized"), Tensor::scalar(flag)));
        }
        let sections = self.params.iter().chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
        checkpoint::write(path, CODEC_MAGIC, &self.config_json(), sections)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path, CODEC_MAGIC)?;
        let config: CodecConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::format(path, format!("config echo: {e}")))?;
        let mut model = Self::new(config, 0)?;
        let named = ck.sections_as::<T>();
        model.params.load_named(&named).map_err(|m| Error::format(path, m))?;
        for l in 0..model.codebooks.len() {
            let get = |s: &str| {
                ck.section(&format!("codebook{l}.{s}"))
                    .map(|t| t.cast::<T>())
                    .ok_or_else(|| Error::format(path, format!("missing codebook{l}.{s}")))
            };
            let codes = get("codes")?;
            if codes.shape() != model.codebooks[l].codes().shape() {
                return Err(Error::format(path, format!("codebook{l} shape mismatch")));
            }
            let usage = get("usage")?.into_data();
            let sums = get("ema_sums")?;
            let init = get("initialized")?.data()[0] > T::zero();
            model.codebooks[l].restore(codes, usage, sums, init);
        }
        Ok(model)
    }
}
