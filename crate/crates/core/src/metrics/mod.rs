//! Evaluation metrics: Fréchet audio distance, Clip-Score, paired KL over
//! class posteriors and classification accuracy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::codec::Waveform;
use crate::conditioning::EmbeddingClip;
use crate::error::{Error, Result};

mod classifier;

pub use classifier::{train_toy_classifier, ClassifierConfig, LabeledClip, ToyClassifier};

pub const DEFAULT_GAMMA: f64 = 100.0;
pub const KL_FLOOR: f64 = 1e-10;
/// Eigenvalues below `-PSD_TOL` (scaled by the largest magnitude when that exceeds one) are rejected.
pub const PSD_TOL: f64 = 1e-8;

/// Maps a waveform to a fixed-size feature vector. Must be deterministic.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Features for every waveform, in input order.
pub fn extract_all(fe: &dyn FeatureExtractor, waves: &[Waveform]) -> Result<Vec<Vec<f64>>> {
    let out: Vec<Vec<f64>> = waves.par_iter().map(|w| fe.extract(w)).collect::<Result<_>>()?;
    if let Some(f) = out.iter().find(|f| f.len() != fe.dim()) {
        return Err(Error::Shape(format!("extractor {} returned {} features, declared {}", fe.name(), f.len(), fe.dim())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased, symmetrised covariance. Adds `1e-6 I` when the
/// dimension exceeds the sample count.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share a nonzero dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut sigma = centred.transpose() * &centred / (n - 1) as f64;
    sigma = (&sigma + sigma.transpose()) * 0.5;
    if d > n {
        sigma += DMatrix::identity(d, d) * 1e-6;
    }
    Ok(GaussianStats { mu, sigma, n })
}

fn clipped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<(SymmetricEigen<f64, nalgebra::Dyn>, Vec<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut vals = Vec::with_capacity(eig.eigenvalues.len());
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOL * scale {
            return Err(Error::Invalid(format!("{what} is not positive semi-definite (eigenvalue {v:e})")));
        }
        vals.push(v.max(0.0));
    }
    Ok((eig, vals))
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let (eig, vals) = clipped_eigenvalues(m, what)?;
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())));
    Ok(q * d * q.transpose())
}

/// `‖μ_r − μ_g‖² + tr(Σ_r + Σ_g − 2 (Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`.
pub fn frechet_distance(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.dim() != g.dim() || r.sigma.shape() != (r.dim(), r.dim()) || g.sigma.shape() != (g.dim(), g.dim()) {
        return Err(Error::Shape(format!("Gaussian dimensions {} and {} differ", r.dim(), g.dim())));
    }
    let root_r = psd_sqrt(&r.sigma, "real covariance")?;
    clipped_eigenvalues(&g.sigma, "generated covariance")?;
    let inner = &root_r * &g.sigma * &root_r;
    let (_, vals) = clipped_eigenvalues(&inner, "covariance product")?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let mean_term = (&r.mu - &g.mu).norm_squared();
    Ok(mean_term + r.sigma.trace() + g.sigma.trace() - 2.0 * tr_sqrt)
}

/// Fréchet distance between Gaussians fitted to extracted features.
pub fn fad(real: &[Waveform], generated: &[Waveform], fe: &dyn FeatureExtractor) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Invalid("fad needs at least two waveforms per set".into()));
    }
    let r = fit_gaussian(&extract_all(fe, real)?)?;
    let g = fit_gaussian(&extract_all(fe, generated)?)?;
    frechet_distance(&r, &g)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Invalid("cosine similarity of a zero or non-finite vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean over image frames of `gamma · cos(frame, audio_emb)`.
pub fn clip_score(clip: &EmbeddingClip, audio_emb: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::Invalid(format!("gamma must be positive, got {gamma}")));
    }
    if audio_emb.len() != clip.dim() {
        return Err(Error::Shape(format!("audio embedding of {} against frames of {}", audio_emb.len(), clip.dim())));
    }
    let mut total = 0.0;
    for m in 0..clip.frame_count() {
        let f: Vec<f64> = clip.frame(m).iter().map(|&v| v as f64).collect();
        total += cosine(&f, audio_emb)?;
    }
    Ok(gamma * total / clip.frame_count() as f64)
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    probs: Vec<f64>,
}

impl ClassPosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Invalid("empty posterior".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Invalid("posterior entries must be finite and nonnegative".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("posterior sums to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        self.probs.iter().enumerate().fold(0, |b, (i, &p)| if p > self.probs[b] { i } else { b })
    }

    fn floored(&self) -> Vec<f64> {
        let v: Vec<f64> = self.probs.iter().map(|p| p.max(KL_FLOOR)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|p| p / s).collect()
    }
}

/// Mean over aligned pairs of `KL(real_i ‖ gen_i)`, after flooring at
/// [`KL_FLOOR`] and renormalising.
pub fn paired_kl(real: &[ClassPosterior], generated: &[ClassPosterior]) -> Result<f64> {
    if real.len() != generated.len() {
        return Err(Error::Shape(format!("{} real posteriors against {} generated", real.len(), generated.len())));
    }
    if real.is_empty() {
        return Err(Error::Invalid("no posteriors".into()));
    }
    let mut total = 0.0;
    for (r, g) in real.iter().zip(generated) {
        if r.probs.len() != g.probs.len() {
            return Err(Error::Shape("posteriors over different class counts".into()));
        }
        let (p, q) = (r.floored(), g.floored());
        total += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0);
    }
    Ok(total / real.len() as f64)
}

/// Fraction of posteriors whose argmax equals the label.
pub fn accuracy(posteriors: &[ClassPosterior], labels: &[usize]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    if posteriors.len() != labels.len() {
        return Err(Error::Shape(format!("{} posteriors against {} labels", posteriors.len(), labels.len())));
    }
    let hits = posteriors.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests;
