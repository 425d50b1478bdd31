//! Multi-resolution STFT magnitude loss.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    /// Hann window lengths, one per resolution.
    pub windows: Vec<usize>,
    /// Fraction of each window shared with the next frame.
    pub overlap: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { windows: vec![256, 512, 1024], overlap: 0.75 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.iter().any(|&w| w < 4) {
            return Err(Error::Config("stft windows must be non-empty and at least 4 samples".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("stft overlap must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hop(&self, win: usize) -> usize {
        ((win as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }
}

/// Frame count covering `len` samples; the tail is zero-padded.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len <= win {
        1
    } else {
        1 + (len - win).div_ceil(hop)
    }
}

pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Magnitude spectrogram `[frames][win/2 + 1]`.
pub fn magnitudes<T: Scalar>(x: &[T], win: usize, hop: usize) -> Vec<Vec<T>> {
    let fft = FftPlanner::<T>::new().plan_fft_forward(win);
    let w = hann::<T>(win);
    let bins = win / 2 + 1;
    let mut buf = vec![Complex::new(T::zero(), T::zero()); win];
    (0..frame_count(x.len(), win, hop))
        .map(|f| {
            frame_into(x, f * hop, &w, &mut buf);
            fft.process(&mut buf);
            buf[..bins].iter().map(|c| (c.norm_sqr() + T::of(MAG_EPS)).sqrt()).collect()
        })
        .collect()
}

fn frame_into<T: Scalar>(x: &[T], start: usize, w: &[T], buf: &mut [Complex<T>]) {
    for (n, (b, &wn)) in buf.iter_mut().zip(w).enumerate() {
        let v = x.get(start + n).copied().unwrap_or(T::zero());
        *b = Complex::new(v * wn, T::zero());
    }
}

/// Loss between `pred` and `target` plus its gradient with respect to `pred`.
///
/// The loss is the mean over resolutions of the mean absolute difference of
/// magnitude spectrograms.
pub fn loss_and_grad<T: Scalar>(pred: &[T], target: &[T], cfg: &StftConfig) -> (T, Vec<T>) {
    assert_eq!(pred.len(), target.len());
    let mut planner = FftPlanner::<T>::new();
    let mut grad = vec![T::zero(); pred.len()];
    let mut total = T::zero();
    let n_res = T::of(cfg.windows.len() as f64);
    for &win in &cfg.windows {
        let hop = cfg.hop(win);
        let fwd = planner.plan_fft_forward(win);
        let inv = planner.plan_fft_inverse(win);
        let w = hann::<T>(win);
        let bins = win / 2 + 1;
        let frames = frame_count(pred.len(), win, hop);
        let count = T::of((frames * bins) as f64);
        let mut bp = vec![Complex::new(T::zero(), T::zero()); win];
        let mut bt = bp.clone();
        let mut res_loss = T::zero();
        for f in 0..frames {
            frame_into(pred, f * hop, &w, &mut bp);
            frame_into(target, f * hop, &w, &mut bt);
            fwd.process(&mut bp);
            fwd.process(&mut bt);
            for k in 0..win {
                if k < bins {
                    let mp = (bp[k].norm_sqr() + T::of(MAG_EPS)).sqrt();
                    let mt = (bt[k].norm_sqr() + T::of(MAG_EPS)).sqrt();
                    let diff = mp - mt;
                    res_loss += diff.abs();
                    let sign = if diff > T::zero() {
                        T::one()
                    } else if diff < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    // d|X_k| / d a_n = Re(X_k e^{i 2 pi k n / N}) / |X_k|
                    bp[k] = bp[k] * (sign / (count * n_res * mp));
                } else {
                    bp[k] = Complex::new(T::zero(), T::zero());
                }
            }
            inv.process(&mut bp);
            for n in 0..win {
                if let Some(g) = grad.get_mut(f * hop + n) {
                    *g += bp[n].re * w[n];
                }
            }
        }
        total += res_loss / count;
    }
    (total / n_res, grad)
}

/// Spectral loss between two equal-length waveforms.
pub fn spectral_loss<T: Scalar>(x: &[T], x_hat: &[T], cfg: &StftConfig) -> Result<T> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("spectral loss lengths differ: {} vs {}", x.len(), x_hat.len())));
    }
    if x.is_empty() {
        return Err(Error::Invalid("spectral loss of empty waveform".into()));
    }
    Ok(loss_and_grad(x_hat, x, cfg).0)
}

/// Batched tape op: `pred` is `[batch, 1, time]` (or `[batch, time]`), `target`
/// has the same layout. Returns the batch mean.
pub fn spectral_loss_var<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>, cfg: &StftConfig) -> Var<'t, T> {
    let tape = pred.tape();
    let batch = pred.shape()[0];
    let (value, grad) = tape.with_value(pred, |p| {
        assert_eq!(p.len(), target.len(), "spectral loss shape mismatch");
        let len = p.len() / batch;
        let mut total = T::zero();
        let mut grad = vec![T::zero(); p.len()];
        for b in 0..batch {
            let r = b * len..(b + 1) * len;
            let (l, g) = loss_and_grad(&p.data()[r.clone()], &target.data()[r.clone()], cfg);
            total += l;
            grad[r].iter_mut().zip(g).for_each(|(o, v)| *o = v / T::of(batch as f64));
        }
        (Tensor::scalar(total / T::of(batch as f64)), Tensor::new(p.shape(), grad))
    });
    tape.custom(&[pred], value, Box::new(move |g, _, _, _| vec![Some(grad.map(|v| v * g.data()[0]))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> StftConfig {
        StftConfig { windows: vec![16, 32], overlap: 0.75 }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn identity_and_sign_invariance() {
        let x = noise(300, 1);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cfg = StftConfig::default();
        assert_eq!(spectral_loss(&x, &x, &cfg).unwrap(), 0.0);
        assert!(spectral_loss(&x, &neg, &cfg).unwrap().abs() < 1e-12);
        assert!(spectral_loss(&x, &x[..299], &cfg).is_err());
    }

    #[test]
    fn noise_farther_from_tone_than_perturbed_tone() {
        let n = 2048;
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()).collect();
        let rms_tone = (tone.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let wn = noise(n, 2);
        let rms_noise = (wn.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let matched: Vec<f64> = wn.iter().map(|v| v * rms_tone / rms_noise).collect();
        let perturbed: Vec<f64> = tone.iter().zip(&wn).map(|(a, b)| a + 0.01 * b).collect();
        let cfg = StftConfig::default();
        let far = spectral_loss(&tone, &matched, &cfg).unwrap();
        let near = spectral_loss(&tone, &perturbed, &cfg).unwrap();
        assert!(far > near, "far {far} near {near}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let target = Tensor::new(&[2, 1, 40], noise(80, 3));
        let cfg = small();
        let err = max_rel_error(&[Tensor::new(&[2, 1, 40], noise(80, 4))], &|_, v| spectral_loss_var(v[0], &target, &cfg), 1e-7);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(100, 256, 64), 1);
        assert_eq!(frame_count(256, 256, 64), 1);
        assert_eq!(frame_count(257, 256, 64), 2);
        assert_eq!(frame_count(1024, 256, 64), 13);
    }
}
