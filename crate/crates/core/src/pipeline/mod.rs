//! File-based workflows: each command reads a JSON run config, writes its
//! outputs under a run directory and echoes the resolved config there.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{train_codec, codebook_utilization, CodecConfig, CodecTrainConfig, Waveform};
use crate::conditioning::EmbeddingClip;
use crate::datasets::{load_manifest, save_manifest, write_split, write_wav, DatasetConfig, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::lm::{train_lm, LMConfig, Level, LmExample, LmTrainConfig};
use crate::metrics::{accuracy, clip_score, fad, paired_kl, train_toy_classifier, ClassPosterior, ClassifierConfig, FeatureExtractor, LabeledClip, ToyClassifier, DEFAULT_GAMMA};
use crate::sampler::{generate, GuidanceConfig};
use crate::{Codec32, Lm32};

pub const CONFIG_ECHO: &str = "config.json";
pub const CODEC_FILE: &str = "codec.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const GENERATED_MANIFEST: &str = "generated.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";

pub fn lm_file(level: Level) -> String {
    format!("{level}.ckpt")
}

/// Hex SHA-256 of the compact JSON form of `cfg`.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let bytes = serde_json::to_vec(cfg).expect("run configs serialise");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a run config; unknown keys and malformed values are config errors.
pub fn parse_config<C: for<'de> Deserialize<'de>>(text: &str) -> Result<C> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn write_json<V: Serialize>(value: &V, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn open_run_dir<C: Serialize>(out_dir: &Path, cfg: &C) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_json(cfg, &out_dir.join(CONFIG_ECHO))
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint(path.to_path_buf()))
    }
}

fn load_codec(path: &Path) -> Result<Codec32> {
    require(path)?;
    Codec32::load(path)
}

fn load_lm(path: &Path, level: Level) -> Result<Lm32> {
    require(path)?;
    let m = Lm32::load(path)?;
    if m.config().level != level {
        return Err(Error::Config(format!("{} holds a {} model, expected {level}", path.display(), m.config().level)));
    }
    Ok(m)
}

fn load_dataset(path: &Path, sample_rate: u32) -> Result<DatasetManifest> {
    let m = load_manifest(path)?;
    if m.sample_rate != sample_rate {
        return Err(Error::DatasetMismatch(format!("{} is at {} Hz, the codec at {sample_rate} Hz", path.display(), m.sample_rate)));
    }
    if m.is_empty() {
        return Err(Error::DatasetMismatch(format!("{} has no entries", path.display())));
    }
    Ok(m)
}

fn load_waves(m: &DatasetManifest, limit: usize) -> Result<Vec<Waveform>> {
    (0..limit).into_par_iter().map(|i| m.load_waveform(i)).collect()
}

fn load_clips(m: &DatasetManifest, limit: usize, emb_dim: usize) -> Result<Vec<EmbeddingClip>> {
    let clips: Vec<EmbeddingClip> = (0..limit).map(|i| m.load_embedding(i)).collect::<Result<_>>()?;
    if let Some((i, c)) = clips.iter().enumerate().find(|(_, c)| c.dim() != emb_dim) {
        return Err(Error::DatasetMismatch(format!("entry {i} has {}-dim embeddings, the model expects {emb_dim}", c.dim())));
    }
    Ok(clips)
}

/// Deterministic per-sample seed derived from the run seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(b"sample");
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Writes `train.json` and `test.json` with their audio and embeddings.
pub fn cmd_synth(cfg: &DatasetConfig, out_dir: &Path) -> Result<[DatasetManifest; 2]> {
    cfg.validate()?;
    open_run_dir(out_dir, cfg)?;
    Ok([write_split(cfg, Split::Train, out_dir)?, write_split(cfg, Split::Test, out_dir)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecRun {
    /// Training manifest.
    pub dataset: PathBuf,
    pub codec: CodecConfig,
    pub train: CodecTrainConfig,
    /// Initialisation and training seed; overrides `train.seed`.
    pub seed: u64,
}

impl Default for CodecRun {
    fn default() -> Self {
        Self { dataset: PathBuf::from("data/train.json"), codec: CodecConfig::toy(), train: CodecTrainConfig::toy(), seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CodecSummary {
    pub params: usize,
    pub final_loss: f64,
    pub utilization: Vec<f64>,
    pub losses: Vec<f64>,
}

pub fn cmd_train_codec(run: &CodecRun, out_dir: &Path) -> Result<CodecSummary> {
    let mut run = run.clone();
    run.train.seed = run.seed;
    run.codec.validate()?;
    if run.train.steps == 0 || run.train.batch_size == 0 {
        return Err(Error::Config("codec steps and batch_size must be positive".into()));
    }
    let data = load_dataset(&run.dataset, run.codec.sample_rate)?;
    open_run_dir(out_dir, &run)?;
    let waves = load_waves(&data, data.len())?;
    let mut model = Codec32::new(run.codec.clone(), run.seed)?;
    let path = out_dir.join(CODEC_FILE);
    let reports = train_codec(&mut model, &waves, &run.train, Some(&path))?;
    model.save(&path)?;
    let summary = CodecSummary {
        params: model.num_params(),
        final_loss: reports.last().map_or(f64::NAN, |r| r.total),
        utilization: codebook_utilization(&model, &waves)?,
        losses: reports.iter().map(|r| r.total).collect(),
    };
    write_json(&summary, &out_dir.join("codec_summary.json"))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmRun {
    pub dataset: PathBuf,
    pub codec: PathBuf,
    pub level: Level,
    /// Defaults to the toy layout for `level` sized to the codec's codebook.
    pub model: Option<LMConfig>,
    /// Defaults to [`LmTrainConfig::toy`] for `level`.
    pub train: Option<LmTrainConfig>,
    pub seed: u64,
}

impl Default for LmRun {
    fn default() -> Self {
        Self { dataset: PathBuf::from("data/train.json"), codec: PathBuf::from(CODEC_FILE), level: Level::Low, model: None, train: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LmSummary {
    pub level: Level,
    pub params: usize,
    pub final_nll: f64,
    pub curve: Vec<f64>,
}

pub fn cmd_train_lm(run: &LmRun, out_dir: &Path) -> Result<LmSummary> {
    let codec = load_codec(&run.codec)?;
    let cc = codec.config();
    if cc.levels() != 2 {
        return Err(Error::Config("LM training expects a two-level codec".into()));
    }
    let mut run = run.clone();
    let model_cfg = run.model.take().unwrap_or_else(|| LMConfig::toy(run.level, cc.codebook_size));
    model_cfg.validate()?;
    if model_cfg.level != run.level {
        return Err(Error::Config(format!("model.level {} disagrees with level {}", model_cfg.level, run.level)));
    }
    if model_cfg.vocab_size != cc.codebook_size {
        return Err(Error::Config(format!("vocab_size {} but the codec has {} codes", model_cfg.vocab_size, cc.codebook_size)));
    }
    let factors = cc.factors();
    if run.level == Level::Up && model_cfg.up_ratio * factors[0] != factors[1] {
        return Err(Error::Config(format!("up_ratio {} does not match codec factors {factors:?}", model_cfg.up_ratio)));
    }
    let mut train_cfg = run.train.take().unwrap_or_else(|| LmTrainConfig::toy(run.level));
    train_cfg.seed = run.seed;
    run.model = Some(model_cfg.clone());
    run.train = Some(train_cfg.clone());

    let data = load_dataset(&run.dataset, cc.sample_rate)?;
    let clips = load_clips(&data, data.len(), model_cfg.emb_dim)?;
    open_run_dir(out_dir, &run)?;
    let waves = load_waves(&data, data.len())?;
    let tokens = waves.par_iter().map(|w| codec.tokenize(w)).collect::<Result<Vec<_>>>()?;
    let examples: Vec<LmExample> = tokens
        .into_iter()
        .zip(clips)
        .map(|(t, clip)| match run.level {
            Level::Low => LmExample { tokens: t[1].ids.clone(), clip, low_tokens: None },
            Level::Up => LmExample { tokens: t[0].ids.clone(), clip, low_tokens: Some(t[1].ids.clone()) },
        })
        .collect();
    let low_codebook = (run.level == Level::Up).then(|| codec.codebooks()[1].codes());
    let mut model = Lm32::new(model_cfg, run.seed, low_codebook)?;
    let path = out_dir.join(lm_file(run.level));
    let curve = train_lm(&mut model, &examples, &train_cfg, Some(&path))?;
    model.save(&path)?;
    let tail = &curve[curve.len().saturating_sub(50)..];
    let summary = LmSummary {
        level: run.level,
        params: model.num_params(),
        final_nll: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        curve,
    };
    write_json(&summary, &out_dir.join(format!("{}_summary.json", run.level)))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateRun {
    /// Manifest supplying the image conditions.
    pub dataset: PathBuf,
    pub codec: PathBuf,
    pub low: PathBuf,
    /// Without an Up model the Low tokens are decoded alone.
    pub up: Option<PathBuf>,
    pub guidance: GuidanceConfig,
    pub duration: f64,
    /// Use only the first `limit` conditions.
    pub limit: Option<usize>,
    /// Per-sample seeds are derived from this; overrides `guidance.seed`.
    pub seed: u64,
}

impl Default for GenerateRun {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/test.json"),
            codec: PathBuf::from(CODEC_FILE),
            low: PathBuf::from(lm_file(Level::Low)),
            up: Some(PathBuf::from(lm_file(Level::Up))),
            guidance: GuidanceConfig::default(),
            duration: 1.0,
            limit: None,
            seed: 0,
        }
    }
}

/// Per-file record written next to each generated WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub source: usize,
    pub class_id: usize,
    pub eta: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub duration: f64,
    pub up: bool,
    pub low_tokens: usize,
    pub up_tokens: Option<usize>,
}

fn check_models(codec: &Codec32, low: &Lm32, up: Option<&Lm32>) -> Result<()> {
    let k = codec.config().codebook_size;
    if low.config().vocab_size != k || up.is_some_and(|u| u.config().vocab_size != k) {
        return Err(Error::Config(format!("LM vocabularies do not match the codec's {k} codes")));
    }
    if up.is_some_and(|u| u.config().emb_dim != low.config().emb_dim) {
        return Err(Error::Config("Low and Up models expect different embedding sizes".into()));
    }
    Ok(())
}

/// Generate one clip per condition; item `j` uses condition `j` and seed
/// `sample_seed(seed, j)`.
fn generate_batch(
    codec: &Codec32,
    low: &Lm32,
    up: Option<&Lm32>,
    clips: &[EmbeddingClip],
    g: &GuidanceConfig,
    duration: f64,
    seed: u64,
) -> Result<Vec<(Waveform, Sidecar)>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(j, clip)| {
            let g = GuidanceConfig { seed: sample_seed(seed, j), ..g.clone() };
            let out = generate(clip, codec, low, up, &g, duration)?;
            let side = Sidecar {
                source: j,
                class_id: 0,
                eta: g.eta,
                temperature: g.temperature,
                top_k: g.top_k,
                seed: g.seed,
                duration,
                up: out.up.is_some(),
                low_tokens: out.low.ids.len(),
                up_tokens: out.up.as_ref().map(|u| u.ids.len()),
            };
            Ok((out.waveform, side))
        })
        .collect()
}

pub fn cmd_generate(run: &GenerateRun, out_dir: &Path) -> Result<DatasetManifest> {
    let mut run = run.clone();
    run.guidance.seed = run.seed;
    if !(run.duration > 0.0 && run.duration.is_finite()) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let codec = load_codec(&run.codec)?;
    let low = load_lm(&run.low, Level::Low)?;
    let up = run.up.as_deref().map(|p| load_lm(p, Level::Up)).transpose()?;
    check_models(&codec, &low, up.as_ref())?;
    run.guidance.validate(codec.config().codebook_size)?;
    let data = load_dataset(&run.dataset, codec.config().sample_rate)?;
    let n = run.limit.map_or(data.len(), |l| l.min(data.len()));
    let clips = load_clips(&data, n, low.config().emb_dim)?;
    open_run_dir(out_dir, &run)?;
    let out = generate_batch(&codec, &low, up.as_ref(), &clips, &run.guidance, run.duration, run.seed)?;
    let mut entries = Vec::with_capacity(n);
    for (j, (wave, mut side)) in out.into_iter().enumerate() {
        side.class_id = data.entries[j].class_id;
        let wav = PathBuf::from(format!("{j:05}.wav"));
        let emb = PathBuf::from(format!("{j:05}.emb"));
        write_wav(&wave, &out_dir.join(&wav))?;
        std::fs::copy(data.embedding_path(j), out_dir.join(&emb))?;
        write_json(&side, &out_dir.join(format!("{j:05}.json")))?;
        entries.push(ManifestEntry { wav, embedding: emb, class_id: side.class_id, duration: wave.duration_secs(), source: Some(j) });
    }
    let m = DatasetManifest::new(codec.config().sample_rate, Split::Test, data.class_names.clone(), entries, out_dir);
    save_manifest(&m, &out_dir.join(GENERATED_MANIFEST))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    /// Pretrained classifier; when absent one is trained on `train`.
    pub checkpoint: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub config: ClassifierConfig,
    pub gamma: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { checkpoint: None, train: Some(PathBuf::from("data/train.json")), config: ClassifierConfig::default(), gamma: DEFAULT_GAMMA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateRun {
    /// Real test manifest the generated clips were conditioned on.
    pub real: PathBuf,
    pub generated: PathBuf,
    pub judge: JudgeConfig,
    /// Seed for classifier training; overrides `judge.config.seed`.
    pub seed: u64,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        Self { real: PathBuf::from("data/test.json"), generated: PathBuf::from(GENERATED_MANIFEST), judge: JudgeConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fad: f64,
    /// Absent when the classifier has no embedding head.
    pub clip_score: Option<f64>,
    pub kl: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub real: usize,
    pub generated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub metrics: Metrics,
    pub counts: Counts,
    pub extractor: String,
    /// Accuracy of the classifier on the real clips.
    pub judge_accuracy: f64,
    pub config_hash: String,
}

/// The real half of an evaluation, with posteriors computed once.
pub struct Judge {
    pub classifier: ToyClassifier,
    pub gamma: f64,
    real: Vec<Waveform>,
    clips: Vec<EmbeddingClip>,
    labels: Vec<usize>,
    posteriors: Vec<ClassPosterior>,
}

impl Judge {
    fn build(cfg: &JudgeConfig, seed: u64, real: &DatasetManifest, save_to: Option<&Path>) -> Result<Self> {
        let classifier = match (&cfg.checkpoint, &cfg.train) {
            (Some(p), _) => {
                require(p)?;
                ToyClassifier::load(p)?
            }
            (None, Some(train)) => {
                let m = load_dataset(train, real.sample_rate)?;
                let waves = load_waves(&m, m.len())?;
                let clips = load_clips(&m, m.len(), real.load_embedding(0)?.dim())?;
                let data: Vec<LabeledClip> = waves
                    .into_iter()
                    .zip(clips)
                    .zip(&m.entries)
                    .map(|((waveform, clip), e)| LabeledClip { waveform, label: e.class_id, embedding: Some(clip) })
                    .collect();
                let clf = train_toy_classifier(&data, &ClassifierConfig { seed, ..cfg.config.clone() })?;
                if let Some(p) = save_to {
                    clf.save(p)?;
                }
                clf
            }
            (None, None) => return Err(Error::Config("judge needs a checkpoint or a training manifest".into())),
        };
        if classifier.sample_rate() != real.sample_rate {
            return Err(Error::DatasetMismatch(format!("classifier runs at {} Hz, data at {} Hz", classifier.sample_rate(), real.sample_rate)));
        }
        if real.num_classes() > classifier.num_classes() {
            return Err(Error::DatasetMismatch(format!("{} classes in the data, {} in the classifier", real.num_classes(), classifier.num_classes())));
        }
        let real_waves = load_waves(real, real.len())?;
        let clips = (0..real.len()).map(|i| real.load_embedding(i)).collect::<Result<Vec<_>>>()?;
        let posteriors = real_waves.par_iter().map(|w| classifier.posterior(w)).collect::<Result<Vec<_>>>()?;
        let labels = real.entries.iter().map(|e| e.class_id).collect();
        Ok(Self { classifier, gamma: cfg.gamma, real: real_waves, clips, labels, posteriors })
    }

    pub fn real_accuracy(&self) -> Result<f64> {
        accuracy(&self.posteriors, &self.labels)
    }

    /// Score generated clips; `sources[j]` is the real entry clip `j` was
    /// conditioned on. The FAD reference is each real clip cut to the
    /// generated length.
    pub fn score(&self, generated: &[Waveform], sources: &[usize]) -> Result<Metrics> {
        if generated.len() != sources.len() || generated.is_empty() {
            return Err(Error::Invalid("need one source per generated clip".into()));
        }
        if let Some(&s) = sources.iter().find(|&&s| s >= self.real.len()) {
            return Err(Error::DatasetMismatch(format!("generated clip refers to real entry {s} of {}", self.real.len())));
        }
        let len = generated.iter().map(Waveform::len).max().unwrap();
        let reference = self
            .real
            .iter()
            .map(|w| Waveform::new(w.samples()[..len.min(w.len())].to_vec(), w.sample_rate()))
            .collect::<Result<Vec<_>>>()?;
        let fad = fad(&reference, generated, &self.classifier)?;
        let post = generated.par_iter().map(|w| self.classifier.posterior(w)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = sources.iter().map(|&s| self.labels[s]).collect();
        let paired: Vec<ClassPosterior> = sources.iter().map(|&s| self.posteriors[s].clone()).collect();
        let clip_score = if self.classifier.has_embedding_head() {
            let scores = generated
                .par_iter()
                .zip(sources)
                .map(|(w, &s)| clip_score(&self.clips[s], &self.classifier.audio_embedding(w)?, self.gamma))
                .collect::<Result<Vec<_>>>()?;
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        } else {
            None
        };
        let k = self.classifier.num_classes();
        let mut confusion = vec![vec![0; k]; k];
        for (p, &l) in post.iter().zip(&labels) {
            confusion[l][p.argmax()] += 1;
        }
        Ok(Metrics { fad, clip_score, kl: paired_kl(&paired, &post)?, accuracy: accuracy(&post, &labels)?, confusion })
    }
}

pub fn cmd_evaluate(run: &EvaluateRun, out_dir: &Path) -> Result<EvaluationReport> {
    let mut run = run.clone();
    run.judge.config.seed = run.seed;
    run.judge.config.validate()?;
    let real = load_manifest(&run.real)?;
    let generated = load_manifest(&run.generated)?;
    if generated.sample_rate != real.sample_rate {
        return Err(Error::DatasetMismatch(format!("generated audio at {} Hz, real at {} Hz", generated.sample_rate, real.sample_rate)));
    }
    let sources = generated
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| e.source.ok_or_else(|| Error::DatasetMismatch(format!("generated entry {i} names no source"))))
        .collect::<Result<Vec<_>>>()?;
    open_run_dir(out_dir, &run)?;
    let judge = Judge::build(&run.judge, run.seed, &real, Some(&out_dir.join(CLASSIFIER_FILE)))?;
    let waves = load_waves(&generated, generated.len())?;
    let report = EvaluationReport {
        metrics: judge.score(&waves, &sources)?,
        counts: Counts { real: real.len(), generated: generated.len() },
        extractor: judge.classifier.name().to_string(),
        judge_accuracy: judge.real_accuracy()?,
        config_hash: config_hash(&run),
    };
    write_json(&report, &out_dir.join(REPORT_FILE))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateRun {
    pub dataset: PathBuf,
    pub codec: PathBuf,
    /// Low model trained with per-token frame features.
    pub low_every: PathBuf,
    /// Low model trained without them.
    pub low_no_every: PathBuf,
    pub up: PathBuf,
    /// Guidance scale of the CFG-on rows; CFG-off rows use 1.
    pub eta: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub duration: f64,
    pub limit: Option<usize>,
    pub judge: JudgeConfig,
    pub seed: u64,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/test.json"),
            codec: PathBuf::from(CODEC_FILE),
            low_every: PathBuf::from("low.ckpt"),
            low_no_every: PathBuf::from("low_no_every.ckpt"),
            up: PathBuf::from(lm_file(Level::Up)),
            eta: 3.0,
            temperature: 1.0,
            top_k: None,
            duration: 1.0,
            limit: None,
            judge: JudgeConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub cfg: bool,
    pub up: bool,
    pub every: bool,
    pub eta: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub samples: usize,
    pub extractor: String,
    pub config_hash: String,
}

/// All eight {CFG, Up, Every} on/off combinations, scored on the same
/// conditions and seeds.
pub fn cmd_ablate(run: &AblateRun, out_dir: &Path) -> Result<AblationReport> {
    let mut run = run.clone();
    run.judge.config.seed = run.seed;
    run.judge.config.validate()?;
    if !(run.duration > 0.0 && run.duration.is_finite()) {
        return Err(Error::Config("duration must be positive".into()));
    }
    let codec = load_codec(&run.codec)?;
    let lows = [load_lm(&run.low_no_every, Level::Low)?, load_lm(&run.low_every, Level::Low)?];
    for (want, m) in [false, true].iter().zip(&lows) {
        if m.config().use_every_token_frames != *want {
            return Err(Error::Config(format!("low_{}every checkpoint has use_every_token_frames = {}", if *want { "" } else { "no_" }, !want)));
        }
    }
    let up = load_lm(&run.up, Level::Up)?;
    for low in &lows {
        check_models(&codec, low, Some(&up))?;
    }
    let g = GuidanceConfig { eta: run.eta, temperature: run.temperature, top_k: run.top_k, seed: run.seed };
    g.validate(codec.config().codebook_size)?;
    let data = load_dataset(&run.dataset, codec.config().sample_rate)?;
    let n = run.limit.map_or(data.len(), |l| l.min(data.len()));
    let clips = load_clips(&data, n, up.config().emb_dim)?;
    open_run_dir(out_dir, &run)?;
    let judge = Judge::build(&run.judge, run.seed, &data, Some(&out_dir.join(CLASSIFIER_FILE)))?;
    let sources: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(8);
    for cfg in [true, false] {
        for use_up in [true, false] {
            for (every, low) in [(true, &lows[1]), (false, &lows[0])] {
                let g = GuidanceConfig { eta: if cfg { run.eta } else { 1.0 }, ..g.clone() };
                let out = generate_batch(&codec, low, use_up.then_some(&up), &clips, &g, run.duration, run.seed)?;
                let waves: Vec<Waveform> = out.into_iter().map(|(w, _)| w).collect();
                rows.push(AblationRow { cfg, up: use_up, every, eta: g.eta, metrics: judge.score(&waves, &sources)? });
            }
        }
    }
    let report = AblationReport { rows, samples: n, extractor: judge.classifier.name().to_string(), config_hash: config_hash(&run) };
    write_json(&report, &out_dir.join(ABLATION_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests;
