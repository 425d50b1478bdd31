//! Image-embedding conditioning: clip files, temporal alignment, the
//! aggregator MLP, the learned null condition and training-time dropout.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"IM2WEMB1";
pub const DEFAULT_EMBED_DIM: usize = 512;

/// Optional JSON trailer of an embedding file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<f64>>,
}

/// Per-frame image embeddings of one clip, `M` rows of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingClip {
    frames: Vec<f32>,
    dim: usize,
    pub source_id: String,
}

impl EmbeddingClip {
    pub fn new(frames: Vec<Vec<f32>>, source_id: impl Into<String>) -> Result<Self> {
        let dim = frames.first().map(Vec::len).unwrap_or(0);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape("embedding frames differ in dimension".into()));
        }
        Self::from_flat(frames.len(), dim, frames.concat(), source_id)
    }

    pub fn from_flat(m: usize, dim: usize, data: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Invalid("embedding clip needs at least one frame".into()));
        }
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        if data.len() != m * dim {
            return Err(Error::Shape(format!("{} values for {m} frames of dimension {dim}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding frame {} entry {}", i / dim, i % dim)));
        }
        Ok(Self { frames: data, dim, source_id: source_id.into() })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, m: usize) -> &[f32] {
        &self.frames[m * self.dim..(m + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks(self.dim)
    }

    /// Mean over frames, accumulated in double precision.
    pub fn mean_frame(&self) -> Vec<f64> {
        let m = self.frame_count() as f64;
        let mut out = vec![0.0; self.dim];
        for f in self.frames() {
            for (o, &v) in out.iter_mut().zip(f) {
                *o += v as f64;
            }
        }
        out.iter_mut().for_each(|v| *v /= m);
        out
    }

    pub fn to_bytes(&self, meta: Option<&EmbeddingMeta>) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.frames.len() * 4);
        buf.extend_from_slice(EMBEDDING_MAGIC);
        buf.extend_from_slice(&(self.frame_count() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(meta) = meta {
            buf.extend_from_slice(serde_json::to_string(meta).expect("metadata serialises").as_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, Option<EmbeddingMeta>)> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 {
            return Err(bad(format!("file is {} bytes, shorter than the 16-byte header", bytes.len())));
        }
        if &bytes[..8] != EMBEDDING_MAGIC {
            return Err(bad("bad magic, expected IM2WEMB1".into()));
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if m == 0 || d == 0 {
            return Err(bad(format!("frame count {m} and dimension {d} must both be positive")));
        }
        let body = m.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("header sizes overflow".into()))?;
        if bytes.len() < 16 + body {
            return Err(bad(format!("truncated: {m}x{d} floats need {} bytes, found {}", body, bytes.len() - 16)));
        }
        let data: Vec<f32> =
            bytes[16..16 + body].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value at frame {} entry {}", i / d, i % d)));
        }
        let trailer = &bytes[16 + body..];
        let meta = if trailer.iter().all(u8::is_ascii_whitespace) {
            None
        } else {
            let text = std::str::from_utf8(trailer).map_err(|_| bad("metadata trailer is not UTF-8".into()))?;
            Some(serde_json::from_str::<EmbeddingMeta>(text).map_err(|e| bad(format!("metadata trailer: {e}")))?)
        };
        let id = meta
            .as_ref()
            .and_then(|m| m.source_id.clone())
            .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        Ok((Self { frames: data, dim: d, source_id: id }, meta))
    }

    pub fn save(&self, path: &Path, meta: Option<&EmbeddingMeta>) -> Result<()> {
        let tmp = path.with_extension("emb.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes(meta))?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Read an embedding interchange file.
pub fn load_embedding_clip(path: &Path) -> Result<EmbeddingClip> {
    load_embedding_clip_with_meta(path).map(|(c, _)| c)
}

pub fn load_embedding_clip_with_meta(path: &Path) -> Result<(EmbeddingClip, Option<EmbeddingMeta>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    EmbeddingClip::from_bytes(&std::fs::read(path)?, path)
}

/// Frame index for token `s` of `total`: `floor(s * M / S)`.
pub fn align_frame(s: usize, total: usize, frames: usize) -> Result<usize> {
    if s >= total {
        return Err(Error::Invalid(format!("token index {s} outside sequence of {total}")));
    }
    if frames == 0 {
        return Err(Error::Invalid("clip has no frames".into()));
    }
    Ok(((s as u128 * frames as u128 / total as u128) as usize).min(frames - 1))
}

/// Each Low token repeated `ratio` times, giving the Up-rate sequence.
pub fn align_low_for_up(low: &[usize], up_len: usize, ratio: usize) -> Result<Vec<usize>> {
    if ratio == 0 || low.len() * ratio != up_len {
        return Err(Error::Shape(format!(
            "{} Low tokens at ratio {ratio} do not cover {up_len} Up tokens",
            low.len()
        )));
    }
    Ok(low.iter().flat_map(|&z| std::iter::repeat_n(z, ratio)).collect())
}

/// Per-sample decision to replace the condition by the learned null.
pub fn cfg_dropout<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok((0..n).map(|_| rng.gen::<f64>() < p).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCondition<T> {
    pub y_tilde: Vec<T>,
    pub is_null: bool,
}

/// Parameter handles of the aggregator MLP and, when present, the null vectors.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub emb_dim: usize,
    pub cond_dim: usize,
    layers: [(ParamId, ParamId); 3],
    null_y: Option<ParamId>,
    null_f: Option<ParamId>,
}

impl Aggregator {
    /// Register `d_emb -> d_cond -> d_cond -> d_cond` and optionally the null
    /// vectors (`null_frame` only matters when per-token frames are used).
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        emb_dim: usize,
        cond_dim: usize,
        with_null: bool,
        null_frame: bool,
        rng: &mut R,
    ) -> Self {
        let layers = [
            ps.add_linear("agg.0", emb_dim, cond_dim, rng),
            ps.add_linear("agg.1", cond_dim, cond_dim, rng),
            ps.add_linear("agg.2", cond_dim, cond_dim, rng),
        ];
        let null_y = with_null.then(|| ps.add("null.y", Tensor::randn(&[1, emb_dim], 0.01, rng)));
        let null_f = (with_null && null_frame).then(|| ps.add("null.f", Tensor::randn(&[1, emb_dim], 0.01, rng)));
        Self { emb_dim, cond_dim, layers, null_y, null_f }
    }

    pub fn has_null(&self) -> bool {
        self.null_y.is_some()
    }

    pub fn null_y(&self) -> Option<ParamId> {
        self.null_y
    }

    pub fn null_f(&self) -> Option<ParamId> {
        self.null_f
    }

    /// MLP over `[n, emb_dim]` rows.
    pub fn mlp<'t, T: Scalar>(&self, b: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let [(w0, b0), (w1, b1), (w2, b2)] = self.layers;
        let h = x.matmul(b.var(w0)).add_row(b.var(b0)).relu();
        let h = h.matmul(b.var(w1)).add_row(b.var(b1)).relu();
        h.matmul(b.var(w2)).add_row(b.var(b2))
    }

    /// Aggregator inputs for a batch: the frame mean for real clips and the
    /// null vector where `clip` is `None`. Returns `[n, emb_dim]`.
    pub fn inputs<'t, T: Scalar>(&self, b: &Bound<'t, T>, clips: &[Option<&EmbeddingClip>]) -> Result<Var<'t, T>> {
        let tape = b.var(self.layers[0].0).tape();
        let mut means = Vec::with_capacity(clips.len() * self.emb_dim);
        let mut sel = Vec::with_capacity(clips.len());
        let mut real = 0;
        for c in clips.iter().flatten() {
            if c.dim() != self.emb_dim {
                return Err(Error::Shape(format!("clip dimension {} but aggregator expects {}", c.dim(), self.emb_dim)));
            }
            means.extend(c.mean_frame().into_iter().map(T::of));
        }
        for c in clips {
            if c.is_some() {
                sel.push(real);
                real += 1;
            } else {
                sel.push(usize::MAX);
            }
        }
        let table = if real > 0 { Some(tape.constant(Tensor::new(&[real, self.emb_dim], means))) } else { None };
        let table = match (table, self.null_y) {
            (Some(t), Some(n)) => t.concat_rows(b.var(n)),
            (Some(t), None) => t,
            (None, Some(n)) => b.var(n),
            (None, None) => return Err(Error::Invalid("model has no null condition".into())),
        };
        if sel.contains(&usize::MAX) && self.null_y.is_none() {
            return Err(Error::Invalid("model has no null condition".into()));
        }
        let sel: Vec<usize> = sel.into_iter().map(|i| if i == usize::MAX { real } else { i }).collect();
        Ok(table.gather_rows(&sel))
    }

    pub fn aggregate<T: Scalar>(&self, params: &ParamSet<T>, clip: &EmbeddingClip) -> Result<AggregatedCondition<T>> {
        self.run(params, Some(clip))
    }

    pub fn null_condition<T: Scalar>(&self, params: &ParamSet<T>) -> Result<AggregatedCondition<T>> {
        self.run(params, None)
    }

    fn run<T: Scalar>(&self, params: &ParamSet<T>, clip: Option<&EmbeddingClip>) -> Result<AggregatedCondition<T>> {
        let tape = crate::autograd::Tape::new();
        let b = params.bind_frozen(&tape);
        let y = self.mlp(&b, self.inputs(&b, &[clip])?).value();
        if !y.all_finite() {
            return Err(Error::NonFinite("aggregated condition".into()));
        }
        Ok(AggregatedCondition { y_tilde: y.into_data(), is_null: clip.is_none() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(frames: &[&[f32]]) -> EmbeddingClip {
        EmbeddingClip::new(frames.iter().map(|f| f.to_vec()).collect(), "c").unwrap()
    }

    #[test]
    fn alignment_examples() {
        let seq: Vec<usize> = (0..8).map(|s| align_frame(s, 8, 3).unwrap()).collect();
        assert_eq!(seq, vec![0, 0, 0, 1, 1, 1, 2, 2]);
        assert!((0..5).all(|s| align_frame(s, 5, 1).unwrap() == 0));
        assert!((0..7).all(|s| align_frame(s, 7, 7).unwrap() == s));
        assert!(align_frame(8, 8, 3).is_err());
    }

    #[test]
    fn low_upsampling() {
        assert_eq!(align_low_for_up(&[3, 9], 8, 4).unwrap(), vec![3, 3, 3, 3, 9, 9, 9, 9]);
        assert_eq!(align_low_for_up(&[5], 4, 4).unwrap(), vec![5; 4]);
        assert!(align_low_for_up(&[3, 9], 7, 4).is_err());
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cfg_dropout(100, 0.0, &mut rng).unwrap().iter().all(|&r| !r));
        assert!(cfg_dropout(100, 1.0, &mut rng).unwrap().iter().all(|&r| r));
        let frac = cfg_dropout(10_000, 0.5, &mut rng).unwrap().iter().filter(|&&r| r).count() as f64 / 1e4;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
        assert!(cfg_dropout(1, 1.5, &mut rng).is_err());
        let a = cfg_dropout(50, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, cfg_dropout(50, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap());
    }

    #[test]
    fn aggregation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::<f64>::new();
        let agg = Aggregator::register(&mut ps, 3, 4, true, true, &mut rng);
        let a = [0.5f32, -1.0, 2.0];
        let b = [1.5f32, 0.25, -0.5];
        let one = agg.aggregate(&ps, &clip(&[&a])).unwrap();
        assert_eq!(one.y_tilde.len(), 4);
        assert!(!one.is_null);

        let ab = agg.aggregate(&ps, &clip(&[&a, &b])).unwrap();
        let ba = agg.aggregate(&ps, &clip(&[&b, &a])).unwrap();
        let abab = agg.aggregate(&ps, &clip(&[&a, &b, &a, &b])).unwrap();
        for i in 0..4 {
            assert!((ab.y_tilde[i] - ba.y_tilde[i]).abs() < 1e-12);
            assert!((ab.y_tilde[i] - abab.y_tilde[i]).abs() < 1e-12);
        }

        let neg = [-0.5f32, 1.0, -2.0];
        let sym = agg.aggregate(&ps, &clip(&[&a, &neg])).unwrap();
        let zero = agg.aggregate(&ps, &clip(&[&[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(sym, zero);

        let null = agg.null_condition(&ps).unwrap();
        assert!(null.is_null);
        assert_eq!(null.y_tilde.len(), one.y_tilde.len());
        assert!(ps.get(agg.null_y().unwrap()).data().iter().any(|&v| v != 0.0));
        assert!(agg.aggregate(&ps, &clip(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn null_vector_receives_gradient_when_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::<f64>::new();
        let agg = Aggregator::register(&mut ps, 3, 4, true, false, &mut rng);
        let c = clip(&[&[1.0, 0.0, 0.0]]);
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let y = agg.mlp(&b, agg.inputs(&b, &[Some(&c), None]).unwrap());
        let g = tape.backward(y.mean_all());
        let gn = g.get_or_zeros(b.var(agg.null_y().unwrap()));
        assert!(gn.data().iter().any(|&v| v != 0.0));

        let tape = Tape::new();
        let b = ps.bind(&tape);
        let y = agg.mlp(&b, agg.inputs(&b, &[Some(&c)]).unwrap());
        let g = tape.backward(y.mean_all());
        assert!(g.get_or_zeros(b.var(agg.null_y().unwrap())).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_null_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f32>::new();
        let agg = Aggregator::register(&mut ps, 3, 4, false, false, &mut rng);
        assert!(agg.null_condition(&ps).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let c = EmbeddingClip::from_flat(3, 4, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect(), "x").unwrap();
        let meta = EmbeddingMeta { source_id: Some("vid7".into()), timestamps: Some(vec![0.0, 0.5, 1.0]) };
        c.save(&p, Some(&meta)).unwrap();
        let (back, m) = load_embedding_clip_with_meta(&p).unwrap();
        assert_eq!(back.frames, c.frames);
        assert_eq!(back.source_id, "vid7");
        assert_eq!(m, Some(meta));
        assert_eq!(back.to_bytes(m.as_ref()), std::fs::read(&p).unwrap());

        let bytes = c.to_bytes(None);
        let cut = dir.path().join("cut.emb");
        std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_embedding_clip(&cut), Err(Error::Format { .. })));

        let mut nan = bytes.clone();
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&cut, &nan).unwrap();
        assert!(load_embedding_clip(&cut).is_err());

        let mut magic = bytes.clone();
        magic[7] = b'2';
        std::fs::write(&cut, &magic).unwrap();
        assert!(load_embedding_clip(&cut).is_err());

        let mut zero_d = bytes.clone();
        zero_d[12..16].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&cut, &zero_d).unwrap();
        assert!(load_embedding_clip(&cut).is_err());
        assert!(matches!(load_embedding_clip(&dir.path().join("none.emb")), Err(Error::MissingFile(_))));
    }
}
