//! Transformer-decoder token models for the Low (coarse) and Up (fine) levels.
//!
//! Both models predict the next codebook id from the previous ids plus
//! additive conditioning: the aggregated image vector at every position,
//! optionally the temporally aligned frame (Low), and the co-located Low
//! code vector (Up).

mod decode;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax, Tape, Var};
use crate::checkpoint::{self, LM_MAGIC};
use crate::conditioning::{align_frame, align_low_for_up, Aggregator, EmbeddingClip, DEFAULT_EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use decode::DecodeSession;
pub use train::{conditional_gain, train_lm, LmExample, LmTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Up,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::Up => "up",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LMConfig {
    pub level: Level,
    pub context_len: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Codebook size K of this level; BOS is appended internally as id K.
    pub vocab_size: usize,
    pub emb_dim: usize,
    /// Aggregator width.
    pub cond_dim: usize,
    pub use_every_token_frames: bool,
    /// Probability of replacing the condition by the learned null during training.
    pub cfg_dropout: f64,
    /// Up tokens per Low token.
    pub up_ratio: usize,
    pub mlp_ratio: usize,
}

impl LMConfig {
    /// 4 layers, width 256, 4 heads.
    pub fn desk(level: Level, vocab_size: usize) -> Self {
        Self {
            level,
            context_len: 512,
            n_layers: 4,
            hidden_dim: 256,
            n_heads: 4,
            vocab_size,
            emb_dim: DEFAULT_EMBED_DIM,
            cond_dim: 256,
            use_every_token_frames: level == Level::Low,
            cfg_dropout: if level == Level::Low { 0.5 } else { 0.0 },
            up_ratio: 4,
            mlp_ratio: 4,
        }
    }

    /// 2 layers, width 64: sized for the 1 kHz synthetic corpus.
    pub fn toy(level: Level, vocab_size: usize) -> Self {
        Self { context_len: 128, n_layers: 2, hidden_dim: 64, cond_dim: 64, ..Self::desk(level, vocab_size) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.context_len == 0 {
            return bad("context_len must be at least 1");
        }
        if self.n_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad("hidden_dim must be a positive multiple of n_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.emb_dim == 0 || self.cond_dim == 0 || self.mlp_ratio == 0 {
            return bad("emb_dim, cond_dim and mlp_ratio must be positive");
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) {
            return bad("cfg_dropout must lie in [0, 1]");
        }
        if self.level == Level::Up {
            if self.cfg_dropout > 0.0 {
                return bad("the Up model has no null condition; cfg_dropout must be 0");
            }
            if self.up_ratio == 0 {
                return bad("up_ratio must be positive");
            }
        }
        Ok(())
    }

    pub fn bos(&self) -> usize {
        self.vocab_size
    }

    fn has_null(&self) -> bool {
        self.level == Level::Low
    }

    fn frames(&self) -> bool {
        self.level == Level::Low && self.use_every_token_frames
    }
}

/// Everything a token position is conditioned on, for one sequence of `total_len` tokens.
#[derive(Debug, Clone)]
pub struct ConditioningBundle<'a> {
    /// `None` selects the learned null condition.
    pub clip: Option<&'a EmbeddingClip>,
    /// Low ids repeated to Up rate; Up models only.
    pub low_tokens_upsampled: Option<Vec<usize>>,
    pub total_len: usize,
}

impl<'a> ConditioningBundle<'a> {
    pub fn low(clip: Option<&'a EmbeddingClip>, total_len: usize) -> Self {
        Self { clip, low_tokens_upsampled: None, total_len }
    }

    pub fn up(clip: &'a EmbeddingClip, low: &[usize], up_len: usize, ratio: usize) -> Result<Self> {
        Ok(Self { clip: Some(clip), low_tokens_upsampled: Some(align_low_for_up(low, up_len, ratio)?), total_len: up_len })
    }

    pub fn with_clip(&self, clip: Option<&'a EmbeddingClip>) -> Self {
        Self { clip, ..self.clone() }
    }
}

/// A contiguous slice of one training or scoring sequence.
pub(crate) struct Window<'a, 'b> {
    pub bundle: &'b ConditioningBundle<'a>,
    pub start: usize,
    pub inputs: Vec<usize>,
}

type Lin = (ParamId, ParamId);

#[derive(Debug, Clone)]
struct Block {
    ln1: Lin,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    ln2: Lin,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    agg: Aggregator,
    y_proj: Lin,
    f_proj: Option<Lin>,
    low_codes: Option<ParamId>,
    z_proj: Option<Lin>,
    blocks: Vec<Block>,
    ln_f: Lin,
    head: Lin,
}

#[derive(Debug, Clone)]
pub struct LmModel<T: Scalar> {
    config: LMConfig,
    params: ParamSet<T>,
    layout: Layout,
}

fn lin<'t, T: Scalar>(b: &Bound<'t, T>, x: Var<'t, T>, l: Lin) -> Var<'t, T> {
    x.matmul(b.var(l.0)).add_row(b.var(l.1))
}

fn ln<'t, T: Scalar>(b: &Bound<'t, T>, x: Var<'t, T>, l: Lin) -> Var<'t, T> {
    x.layer_norm(b.var(l.0), b.var(l.1))
}

impl<T: Scalar> LmModel<T> {
    /// `low_codebook` (`[K_low, code_dim]`) is required for Up models and is
    /// stored as a frozen buffer.
    pub fn new(config: LMConfig, seed: u64, low_codebook: Option<&Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let h = config.hidden_dim;
        let tok = ps.add("tok_emb", Tensor::randn(&[config.vocab_size + 1, h], 0.1, &mut rng));
        let pos = ps.add("pos_emb", Tensor::randn(&[config.context_len, h], 0.02, &mut rng));
        let agg = Aggregator::register(&mut ps, config.emb_dim, config.cond_dim, config.has_null(), config.frames(), &mut rng);
        let y_proj = ps.add_linear("y_proj", config.cond_dim, h, &mut rng);
        let f_proj = config.frames().then(|| ps.add_linear("f_proj", config.emb_dim, h, &mut rng));
        let (low_codes, z_proj) = match (config.level, low_codebook) {
            (Level::Up, Some(cb)) => {
                let id = ps.add_buffer("low.codes", cb.clone());
                (Some(id), Some(ps.add_linear("z_proj", cb.cols(), h, &mut rng)))
            }
            (Level::Up, None) => return Err(Error::Invalid("an Up model needs the Low codebook".into())),
            (Level::Low, _) => (None, None),
        };
        let ln_params = |ps: &mut ParamSet<T>, name: &str| {
            (ps.add(format!("{name}.gain"), Tensor::full(&[h], T::one())), ps.add(format!("{name}.bias"), Tensor::zeros(&[h])))
        };
        let mut blocks = Vec::new();
        for i in 0..config.n_layers {
            let p = format!("block{i}");
            let ln1 = ln_params(&mut ps, &format!("{p}.ln1"));
            let q = ps.add_linear(&format!("{p}.q"), h, h, &mut rng);
            let k = ps.add_linear(&format!("{p}.k"), h, h, &mut rng);
            let v = ps.add_linear(&format!("{p}.v"), h, h, &mut rng);
            let o = ps.add_linear(&format!("{p}.o"), h, h, &mut rng);
            let ln2 = ln_params(&mut ps, &format!("{p}.ln2"));
            let fc1 = ps.add_linear(&format!("{p}.fc1"), h, h * config.mlp_ratio, &mut rng);
            let fc2 = ps.add_linear(&format!("{p}.fc2"), h * config.mlp_ratio, h, &mut rng);
            // Residual branches start small so the stack is near-identity at init.
            let depth = 1.0 / (2.0 * config.n_layers as f64).sqrt();
            for id in [o.0, fc2.0] {
                let t = ps.get_mut(id);
                *t = t.map(|v| v * T::of(depth));
            }
            blocks.push(Block { ln1, q, k, v, o, ln2, fc1, fc2 });
        }
        let ln_f = ln_params(&mut ps, "ln_f");
        let head = ps.add_linear("head", h, config.vocab_size, &mut rng);
        let layout = Layout { tok, pos, agg, y_proj, f_proj, low_codes, z_proj, blocks, ln_f, head };
        Ok(Self { config, params: ps, layout })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Teacher-forced mean nll of a whole sequence, as a graph over the
    /// bound parameters. The sequence must fit in one context.
    pub fn loss_graph<'t>(&self, b: &Bound<'t, T>, tokens: &[usize], cond: &ConditioningBundle<'_>) -> Result<Var<'t, T>> {
        self.check_tokens(tokens)?;
        self.check_bundle(cond)?;
        if tokens.is_empty() || tokens.len() > self.config.context_len || tokens.len() > cond.total_len {
            return Err(Error::Shape(format!("{} tokens for a context of {}", tokens.len(), self.config.context_len)));
        }
        let window = Window { bundle: cond, start: 0, inputs: self.shifted_inputs(tokens, 0, tokens.len()) };
        let targets: Vec<Option<usize>> = tokens.iter().map(|&t| Some(t)).collect();
        Ok(self.forward_windows(b, &[window])?.cross_entropy(&targets))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    pub fn has_null(&self) -> bool {
        self.layout.agg.has_null()
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.layout.agg
    }

    fn check_bundle(&self, c: &ConditioningBundle<'_>) -> Result<()> {
        if c.total_len == 0 {
            return Err(Error::Invalid("conditioning for an empty sequence".into()));
        }
        if let Some(clip) = c.clip {
            if clip.dim() != self.config.emb_dim {
                return Err(Error::Shape(format!("clip dimension {} but model expects {}", clip.dim(), self.config.emb_dim)));
            }
        } else if !self.has_null() {
            return Err(Error::Invalid(format!("the {} model has no null condition", self.config.level)));
        }
        match (self.config.level, &c.low_tokens_upsampled) {
            (Level::Up, Some(z)) => {
                if z.len() != c.total_len {
                    return Err(Error::Shape(format!("{} upsampled Low tokens for {} Up tokens", z.len(), c.total_len)));
                }
                let k = self.params.get(self.layout.low_codes.unwrap()).rows();
                if let Some(&id) = z.iter().find(|&&id| id >= k) {
                    return Err(Error::TokenOutOfRange { id, size: k });
                }
            }
            (Level::Up, None) => return Err(Error::Invalid("Up conditioning needs Low tokens".into())),
            (Level::Low, Some(_)) => return Err(Error::Invalid("Low conditioning takes no Low tokens".into())),
            (Level::Low, None) => {}
        }
        Ok(())
    }

    /// Additive conditioning: one `[B, H]` row per sequence plus, when the
    /// level has per-position features, `[B * w, H]` rows for positions
    /// `start..start + w` of each sequence.
    pub(crate) fn conditioning<'t>(
        &self,
        b: &Bound<'t, T>,
        bundles: &[&ConditioningBundle<'_>],
        start: &[usize],
        w: usize,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        let l = &self.layout;
        let tape = b.var(l.tok).tape();
        for c in bundles {
            self.check_bundle(c)?;
        }
        let clips: Vec<Option<&EmbeddingClip>> = bundles.iter().map(|c| c.clip).collect();
        let y = lin(b, l.agg.mlp(b, l.agg.inputs(b, &clips)?), l.y_proj);
        let mut per_pos: Option<Var<'t, T>> = None;
        if let Some(fp) = l.f_proj {
            let d = self.config.emb_dim;
            let mut rows = Vec::new();
            let mut sel = Vec::with_capacity(bundles.len() * w);
            let mut n_real = 0;
            for (c, &s0) in bundles.iter().zip(start) {
                for s in s0..s0 + w {
                    match c.clip {
                        Some(clip) => {
                            let m = align_frame(s, c.total_len, clip.frame_count())?;
                            rows.extend(clip.frame(m).iter().map(|&v| T::of(v as f64)));
                            sel.push(n_real);
                            n_real += 1;
                        }
                        None => sel.push(usize::MAX),
                    }
                }
            }
            let null = l.agg.null_f().map(|id| b.var(id));
            let table = match (n_real > 0, null) {
                (true, Some(n)) => tape.constant(Tensor::new(&[n_real, d], rows)).concat_rows(n),
                (true, None) => tape.constant(Tensor::new(&[n_real, d], rows)),
                (false, Some(n)) => n,
                (false, None) => return Err(Error::Invalid("no null frame vector".into())),
            };
            let sel: Vec<usize> = sel.into_iter().map(|i| if i == usize::MAX { n_real } else { i }).collect();
            per_pos = Some(lin(b, table.gather_rows(&sel), fp));
        }
        if let (Some(codes), Some(zp)) = (l.low_codes, l.z_proj) {
            let mut ids = Vec::with_capacity(bundles.len() * w);
            for (c, &s0) in bundles.iter().zip(start) {
                let z = c.low_tokens_upsampled.as_ref().expect("checked above");
                ids.extend_from_slice(&z[s0..s0 + w]);
            }
            let zc = lin(b, b.var(codes).gather_rows(&ids), zp);
            per_pos = Some(match per_pos {
                Some(p) => p.add(zc),
                None => zc,
            });
        }
        Ok((y, per_pos))
    }

    fn trunk<'t>(&self, b: &Bound<'t, T>, mut x: Var<'t, T>, seq: usize) -> Var<'t, T> {
        for blk in &self.layout.blocks {
            let h = ln(b, x, blk.ln1);
            let att = lin(b, h, blk.q).causal_attention(lin(b, h, blk.k), lin(b, h, blk.v), self.config.n_heads, seq);
            x = x.add(lin(b, att, blk.o));
            let h = ln(b, x, blk.ln2);
            x = x.add(lin(b, lin(b, h, blk.fc1).gelu(), blk.fc2));
        }
        lin(b, ln(b, x, self.layout.ln_f), self.layout.head)
    }

    /// Logits `[B * w, K]` for equal-length windows.
    pub(crate) fn forward_windows<'t>(&self, b: &Bound<'t, T>, windows: &[Window<'_, '_>]) -> Result<Var<'t, T>> {
        let w = windows.first().map(|x| x.inputs.len()).ok_or_else(|| Error::Invalid("empty batch".into()))?;
        if w == 0 || w > self.config.context_len {
            return Err(Error::Shape(format!("window of {w} tokens, context is {}", self.config.context_len)));
        }
        let mut ids = Vec::with_capacity(windows.len() * w);
        for win in windows {
            if win.inputs.len() != w {
                return Err(Error::Shape("windows in a batch must share a length".into()));
            }
            if win.start + w > win.bundle.total_len {
                return Err(Error::Shape(format!(
                    "window {}..{} exceeds sequence of {}",
                    win.start,
                    win.start + w,
                    win.bundle.total_len
                )));
            }
            if let Some(&id) = win.inputs.iter().find(|&&id| id > self.config.bos()) {
                return Err(Error::TokenOutOfRange { id, size: self.config.vocab_size });
            }
            ids.extend_from_slice(&win.inputs);
        }
        let pos: Vec<usize> = (0..windows.len()).flat_map(|_| 0..w).collect();
        let l = &self.layout;
        let mut x = b.var(l.tok).gather_rows(&ids).add(b.var(l.pos).gather_rows(&pos));
        let bundles: Vec<&ConditioningBundle> = windows.iter().map(|w| w.bundle).collect();
        let starts: Vec<usize> = windows.iter().map(|w| w.start).collect();
        let (y, per_pos) = self.conditioning(b, &bundles, &starts, w)?;
        x = x.add_block_rows(y, w);
        if let Some(p) = per_pos {
            x = x.add(p);
        }
        Ok(self.trunk(b, x, w))
    }

    /// Inputs for targets `start..start + w` of `tokens`: the previous id, or BOS at 0.
    pub(crate) fn shifted_inputs(&self, tokens: &[usize], start: usize, w: usize) -> Vec<usize> {
        (start..start + w).map(|t| if t == 0 { self.config.bos() } else { tokens[t - 1] }).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, size: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Teacher-forced logits `[S, K]`; row `s` is the distribution of token `s`
    /// given tokens `< s` and `cond`.
    pub fn forward(&self, tokens: &[usize], cond: &ConditioningBundle<'_>) -> Result<Tensor<T>> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() || tokens.len() > cond.total_len {
            return Err(Error::Shape(format!("{} tokens for a sequence of {}", tokens.len(), cond.total_len)));
        }
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let win = Window { bundle: cond, start: 0, inputs: self.shifted_inputs(tokens, 0, tokens.len()) };
        let out = self.forward_windows(&b, &[win])?.value();
        if !out.all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of `tokens`, scored in consecutive
    /// context-sized windows.
    pub fn sequence_nll(&self, tokens: &[usize], cond: &ConditioningBundle<'_>) -> Result<f64> {
        self.check_tokens(tokens)?;
        if tokens.len() != cond.total_len {
            return Err(Error::Shape(format!("{} tokens for a sequence of {}", tokens.len(), cond.total_len)));
        }
        let mut total = 0.0;
        let mut start = 0;
        while start < tokens.len() {
            let w = self.config.context_len.min(tokens.len() - start);
            let tape = Tape::new();
            let b = self.params.bind_frozen(&tape);
            let win = Window { bundle: cond, start, inputs: self.shifted_inputs(tokens, start, w) };
            let logits = self.forward_windows(&b, &[win])?.value();
            total += nll(&logits, &tokens[start..start + w])?.as_f64() * w as f64;
            start += w;
        }
        Ok(total / tokens.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.config).expect("config serialises");
        checkpoint::write(path, LM_MAGIC, &json, self.params.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path, LM_MAGIC)?;
        let config: LMConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::format(path, format!("config echo: {e}")))?;
        let low = match config.level {
            Level::Up => Some(
                ck.section("low.codes")
                    .map(|t| t.cast::<T>())
                    .ok_or_else(|| Error::format(path, "missing section low.codes"))?,
            ),
            Level::Low => None,
        };
        let mut model = Self::new(config, 0, low.as_ref()).map_err(|e| Error::format(path, e.to_string()))?;
        model.params.load_named(&ck.sections_as::<T>()).map_err(|m| Error::format(path, m))?;
        Ok(model)
    }
}

/// Mean of `-log softmax(logits[s])[targets[s]]` over rows.
pub fn nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let k = logits.cols();
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::TokenOutOfRange { id: t, size: k });
        }
        total -= log_softmax(logits.row(r))[t];
    }
    Ok(total / T::of(targets.len() as f64))
}
