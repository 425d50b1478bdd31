//! Synthetic paired corpora, WAV I/O and dataset manifests.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Waveform;
use crate::conditioning::{EmbeddingClip, EmbeddingMeta, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};

mod manifest;
mod wav;

pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, Split, MANIFEST_SCHEMA_VERSION};
pub use wav::{read_wav, write_wav};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Tone,
    Chirp,
    NoiseBand,
    AmTone,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [GeneratorKind::Tone, GeneratorKind::Chirp, GeneratorKind::NoiseBand, GeneratorKind::AmTone];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Tone => "tone",
            GeneratorKind::Chirp => "chirp",
            GeneratorKind::NoiseBand => "noise-band",
            GeneratorKind::AmTone => "am-tone",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClassSpec {
    pub class_id: usize,
    pub kind: GeneratorKind,
    /// Hz. Tone frequency, chirp sweep span, noise-band centre or AM carrier.
    pub freq_range: (f64, f64),
    /// Noise-band width in Hz.
    pub bandwidth: f64,
    /// AM rate in Hz.
    pub mod_rate: (f64, f64),
    /// Chirp sweep period in seconds.
    pub sweep_period: (f64, f64),
    pub amplitude: (f64, f64),
    pub anchor: Vec<f32>,
    pub anchor_jitter: f64,
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub waveform: Waveform,
    pub embedding: EmbeddingClip,
    pub meta: EmbeddingMeta,
    pub class_id: usize,
}

/// `n` orthonormal vectors from Gram-Schmidt on Gaussian draws.
pub fn orthonormal_anchors(n: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f32>>> {
    if n > dim {
        return Err(Error::Invalid(format!("cannot place {n} orthogonal anchors in {dim} dimensions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Ok(out.into_iter().map(|v| v.into_iter().map(|a| a as f32).collect()).collect())
}

/// Class layouts scaled to the Nyquist frequency, one per generator kind in
/// [`GeneratorKind::ALL`] order.
pub fn default_classes(n: usize, sample_rate: u32, emb_dim: usize, jitter: f64, seed: u64) -> Result<Vec<SynthClassSpec>> {
    if !(1..=GeneratorKind::ALL.len()).contains(&n) {
        return Err(Error::Config(format!("between 1 and {} classes are available, asked for {n}", GeneratorKind::ALL.len())));
    }
    let nyq = sample_rate as f64 / 2.0;
    let anchors = orthonormal_anchors(n, emb_dim, seed)?;
    Ok(GeneratorKind::ALL[..n]
        .iter()
        .zip(anchors)
        .enumerate()
        .map(|(class_id, (&kind, anchor))| {
            let (freq_range, bandwidth, mod_rate) = match kind {
                GeneratorKind::Tone => ((0.2 * nyq, 0.36 * nyq), 0.0, (0.0, 0.0)),
                GeneratorKind::Chirp => ((0.12 * nyq, 0.84 * nyq), 0.0, (0.0, 0.0)),
                GeneratorKind::NoiseBand => ((0.6 * nyq, 0.76 * nyq), 0.16 * nyq, (0.0, 0.0)),
                GeneratorKind::AmTone => ((0.4 * nyq, 0.52 * nyq), 0.0, (3.0, 8.0)),
            };
            SynthClassSpec {
                class_id,
                kind,
                freq_range,
                bandwidth,
                mod_rate,
                sweep_period: (0.4, 0.8),
                amplitude: (0.4, 0.8),
                anchor,
                anchor_jitter: jitter,
            }
        })
        .collect())
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn render(spec: &SynthClassSpec, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = |i: usize| i as f64 / sr;
    match spec.kind {
        GeneratorKind::Tone => {
            let f = uniform(rng, spec.freq_range);
            let ph = rng.gen_range(0.0..2.0 * PI);
            (0..n).map(|i| (2.0 * PI * f * t(i) + ph).sin()).collect()
        }
        GeneratorKind::Chirp => {
            // Repeating sweep, so any window longer than a period shows the full span.
            let (lo, hi) = spec.freq_range;
            let third = (hi - lo) / 3.0;
            let (mut f0, mut f1) = (uniform(rng, (lo, lo + third)), uniform(rng, (hi - third, hi)));
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut f0, &mut f1);
            }
            let period = uniform(rng, spec.sweep_period);
            let offset = rng.gen_range(0.0..1.0);
            let mut ph = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let f = f0 + (f1 - f0) * (t(i) / period + offset).fract();
                    let v = ph.sin();
                    ph += 2.0 * PI * f / sr;
                    v
                })
                .collect()
        }
        GeneratorKind::NoiseBand => {
            let c = uniform(rng, spec.freq_range);
            let half = spec.bandwidth / 2.0;
            let parts: Vec<(f64, f64)> =
                (0..24).map(|_| (uniform(rng, (c - half, c + half)), rng.gen_range(0.0..2.0 * PI))).collect();
            let x: Vec<f64> = (0..n).map(|i| parts.iter().map(|&(f, p)| (2.0 * PI * f * t(i) + p).sin()).sum()).collect();
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            x.into_iter().map(|v| v / peak).collect()
        }
        GeneratorKind::AmTone => {
            let f = uniform(rng, spec.freq_range);
            let r = uniform(rng, spec.mod_rate);
            let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            (0..n).map(|i| (0.5 + 0.5 * (2.0 * PI * r * t(i) + p2).sin()) * (2.0 * PI * f * t(i) + p1).sin()).collect()
        }
    }
}

/// One waveform from the class generator and `frames` jittered, unit-norm
/// copies of the class anchor at evenly spaced timestamps.
pub fn synth_pair(
    spec: &SynthClassSpec,
    duration: f64,
    sample_rate: u32,
    frames: usize,
    rng: &mut ChaCha8Rng,
    source_id: &str,
) -> Result<SynthPair> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Invalid(format!("duration must be positive, got {duration}")));
    }
    if frames == 0 {
        return Err(Error::Invalid("at least one embedding frame is needed".into()));
    }
    let n = ((duration * sample_rate as f64).round() as usize).max(1);
    let amp = uniform(rng, spec.amplitude);
    let samples: Vec<f32> = render(spec, n, sample_rate as f64, rng).into_iter().map(|v| (amp * v) as f32).collect();
    let waveform = Waveform::new(samples, sample_rate)?;
    let normal = Normal::new(0.0, spec.anchor_jitter.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let rows: Vec<Vec<f32>> = (0..frames)
        .map(|_| {
            if spec.anchor_jitter <= 0.0 {
                return spec.anchor.clone();
            }
            let v: Vec<f64> = spec.anchor.iter().map(|&a| a as f64 + normal.sample(rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| (a / norm) as f32).collect()
        })
        .collect();
    let embedding = EmbeddingClip::new(rows, source_id)?;
    let timestamps = (0..frames).map(|m| (m as f64 + 0.5) * duration / frames as f64).collect();
    let meta = EmbeddingMeta { source_id: Some(source_id.to_string()), timestamps: Some(timestamps) };
    Ok(SynthPair { waveform, embedding, meta, class_id: spec.class_id })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub test_clips_per_class: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub sample_rate: u32,
    pub frames: usize,
    pub emb_dim: usize,
    pub anchor_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clips_per_class: 200,
            test_clips_per_class: 40,
            min_duration: 1.0,
            max_duration: 4.0,
            sample_rate: 1000,
            frames: 4,
            emb_dim: DEFAULT_EMBED_DIM,
            anchor_jitter: 0.02,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > GeneratorKind::ALL.len() {
            return Err(Error::Config(format!("num_classes must lie in [1, {}]", GeneratorKind::ALL.len())));
        }
        if !(self.min_duration > 0.0 && self.max_duration >= self.min_duration && self.max_duration.is_finite()) {
            return Err(Error::Config("durations must satisfy 0 < min_duration <= max_duration".into()));
        }
        if self.sample_rate == 0 || self.frames == 0 || self.emb_dim < self.num_classes {
            return Err(Error::Config("sample_rate and frames must be positive and emb_dim >= num_classes".into()));
        }
        if !(self.anchor_jitter >= 0.0 && self.anchor_jitter.is_finite()) {
            return Err(Error::Config("anchor_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> Result<Vec<SynthClassSpec>> {
        default_classes(self.num_classes, self.sample_rate, self.emb_dim, self.anchor_jitter, self.seed)
    }

    pub fn clips_for(&self, split: Split) -> usize {
        let per_class = match split {
            Split::Train => self.clips_per_class,
            Split::Test => self.test_clips_per_class,
        };
        per_class * self.num_classes
    }
}

/// Seed for entry `index` of a split: the first eight bytes of
/// SHA-256 over the base seed, split name and index.
pub fn entry_seed(base: u64, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(split.to_string().as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// In-memory split; entry `i` belongs to class `i mod num_classes`.
pub fn synth_split(cfg: &DatasetConfig, split: Split) -> Result<Vec<SynthPair>> {
    cfg.validate()?;
    let classes = cfg.classes()?;
    (0..cfg.clips_for(split))
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(entry_seed(cfg.seed, split, i));
            let duration = uniform(&mut rng, (cfg.min_duration, cfg.max_duration));
            synth_pair(&classes[i % cfg.num_classes], duration, cfg.sample_rate, cfg.frames, &mut rng, &format!("{split}-{i:05}"))
        })
        .collect()
}

/// Write a split under `out_dir/<split>/` with its manifest at
/// `out_dir/<split>.json`.
pub fn write_split(cfg: &DatasetConfig, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    let pairs = synth_split(cfg, split)?;
    let dir = out_dir.join(split.to_string());
    std::fs::create_dir_all(&dir)?;
    let entries = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let wav = Path::new(&split.to_string()).join(format!("{i:05}.wav"));
            let embedding = Path::new(&split.to_string()).join(format!("{i:05}.emb"));
            write_wav(&p.waveform, &out_dir.join(&wav))?;
            p.embedding.save(&out_dir.join(&embedding), Some(&p.meta))?;
            Ok(ManifestEntry { wav, embedding, class_id: p.class_id, duration: p.waveform.duration_secs(), source: None })
        })
        .collect::<Result<Vec<_>>>()?;
    let names = GeneratorKind::ALL[..cfg.num_classes].iter().map(|k| k.name().to_string()).collect();
    let m = DatasetManifest::new(cfg.sample_rate, split, names, entries, out_dir);
    save_manifest(&m, &out_dir.join(format!("{split}.json")))?;
    Ok(m)
}
