use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn gauss(mu: &[f64], sigma: DMatrix<f64>) -> GaussianStats {
    GaussianStats { mu: DVector::from_column_slice(mu), sigma, n: 100 }
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d + 2, |_, _| StandardNormal.sample(rng));
    &a * a.transpose() / (d + 2) as f64
}

/// Independent path: eigenvalues of the non-symmetric product Σ_r Σ_g.
fn oracle_frechet(r: &GaussianStats, g: &GaussianStats) -> f64 {
    let prod = &r.sigma * &g.sigma;
    let tr_sqrt: f64 = prod.complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
    (&r.mu - &g.mu).norm_squared() + r.sigma.trace() + g.sigma.trace() - 2.0 * tr_sqrt
}

#[test]
fn fit_gaussian_examples() {
    let g = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
    assert_eq!(g.mu[0], 1.0);
    assert_eq!(g.sigma[(0, 0)], 2.0);
    let same = fit_gaussian(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert_eq!(same.sigma, DMatrix::zeros(2, 2));
    assert!(fit_gaussian(&[vec![1.0]]).is_err());
    assert!(fit_gaussian(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn fit_gaussian_regularises_wide_features() {
    let g = fit_gaussian(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
    assert!((g.sigma[(0, 1)] - 0.5).abs() < 1e-15);
    assert!((g.sigma[(0, 0)] - 0.5 - 1e-6).abs() < 1e-15);
}

#[test]
fn fit_gaussian_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mu = [1.0, -2.0, 0.5];
    let xs: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            vec![mu[0] + z[0], mu[1] + 0.5 * z[0] + z[1], mu[2] + 2.0 * z[2]]
        })
        .collect();
    let g = fit_gaussian(&xs).unwrap();
    for j in 0..3 {
        assert!((g.mu[j] - mu[j]).abs() < 0.05);
    }
    assert!((g.sigma[(1, 0)] - 0.5).abs() < 0.1);
    assert_eq!(g.sigma, g.sigma.transpose());
}

#[test]
fn frechet_examples() {
    let one = DMatrix::from_element(1, 1, 1.0);
    assert!((frechet_distance(&gauss(&[0.0], one.clone()), &gauss(&[1.0], one.clone())).unwrap() - 1.0).abs() < 1e-12);
    let four = DMatrix::from_element(1, 1, 4.0);
    assert!((frechet_distance(&gauss(&[0.0], one.clone()), &gauss(&[0.0], four)).unwrap() - 1.0).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = random_psd(5, &mut rng);
    let p = gauss(&[0.3, 0.1, -1.0, 2.0, 0.0], s);
    assert!(frechet_distance(&p, &p).unwrap().abs() < 1e-9);
}

#[test]
fn frechet_errors() {
    let a = gauss(&[0.0], DMatrix::from_element(1, 1, 1.0));
    let b = gauss(&[0.0, 0.0], DMatrix::identity(2, 2));
    assert!(frechet_distance(&a, &b).is_err());
    let neg = gauss(&[0.0], DMatrix::from_element(1, 1, -1.0));
    assert!(frechet_distance(&a, &neg).is_err());
    assert!(frechet_distance(&neg, &a).is_err());
}

#[test]
fn frechet_agrees_with_non_symmetric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let r = gauss(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(), random_psd(4, &mut rng));
        let g = gauss(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(), random_psd(4, &mut rng));
        let f = frechet_distance(&r, &g).unwrap();
        assert!((f - oracle_frechet(&r, &g)).abs() < 1e-6);
        assert!((f - frechet_distance(&g, &r).unwrap()).abs() < 1e-9);
        assert!(f >= -1e-9);
    }
}

proptest! {
    #[test]
    fn one_dimensional_closed_form(mr in -5.0f64..5.0, mg in -5.0f64..5.0, sr in 0.01f64..4.0, sg in 0.01f64..4.0) {
        let r = gauss(&[mr], DMatrix::from_element(1, 1, sr * sr));
        let g = gauss(&[mg], DMatrix::from_element(1, 1, sg * sg));
        let expect = (mr - mg).powi(2) + (sr - sg).powi(2);
        prop_assert!((frechet_distance(&r, &g).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn clip_score_scale_invariant(a in prop::collection::vec(-1.0f32..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4), s in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 0.05) && b.iter().any(|v| v.abs() > 0.05));
        let clip = EmbeddingClip::new(vec![a.clone()], "c").unwrap();
        let scaled = EmbeddingClip::new(vec![a.iter().map(|v| v * s as f32).collect()], "c").unwrap();
        let base = clip_score(&clip, &b, DEFAULT_GAMMA).unwrap();
        let bs: Vec<f64> = b.iter().map(|v| v * s).collect();
        prop_assert!((base - clip_score(&clip, &bs, DEFAULT_GAMMA).unwrap()).abs() < 1e-9);
        prop_assert!((base - clip_score(&scaled, &b, DEFAULT_GAMMA).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn paired_kl_nonnegative(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 2..6)) {
        let norm = |v: &Vec<f64>| {
            let s: f64 = v.iter().sum::<f64>() + 3e-3;
            ClassPosterior::new(v.iter().map(|x| (x + 1e-3) / s).collect()).unwrap()
        };
        let ps: Vec<ClassPosterior> = raw.iter().map(norm).collect();
        let mut qs = ps.clone();
        qs.rotate_left(1);
        prop_assert!(paired_kl(&ps, &qs).unwrap() >= 0.0);
        prop_assert_eq!(paired_kl(&ps, &ps).unwrap(), 0.0);
    }
}

#[test]
fn clip_score_examples() {
    let clip = EmbeddingClip::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], "c").unwrap();
    assert!((clip_score(&clip, &[1.0, 0.0], DEFAULT_GAMMA).unwrap() - 50.0).abs() < 1e-12);
    let par = EmbeddingClip::new(vec![vec![2.0, 0.0], vec![0.5, 0.0]], "c").unwrap();
    assert!((clip_score(&par, &[3.0, 0.0], DEFAULT_GAMMA).unwrap() - 100.0).abs() < 1e-12);
    let orth = EmbeddingClip::new(vec![vec![0.0, 1.0]], "c").unwrap();
    assert_eq!(clip_score(&orth, &[1.0, 0.0], DEFAULT_GAMMA).unwrap(), 0.0);
    assert!(clip_score(&orth, &[0.0, 0.0], DEFAULT_GAMMA).is_err());
    assert!(clip_score(&orth, &[1.0, 0.0], 0.0).is_err());
    assert!(clip_score(&orth, &[1.0], 1.0).is_err());
}

#[test]
fn paired_kl_examples() {
    let p = |v: &[f64]| ClassPosterior::new(v.to_vec()).unwrap();
    let real = [p(&[1.0, 0.0])];
    let gen = [p(&[0.5, 0.5])];
    assert!((paired_kl(&real, &gen).unwrap() - std::f64::consts::LN_2).abs() < 1e-8);
    assert!((paired_kl(&gen, &real).unwrap() - paired_kl(&real, &gen).unwrap()).abs() > 1.0);
    assert_eq!(paired_kl(&gen, &gen).unwrap(), 0.0);
    assert!(paired_kl(&real, &[]).is_err());
    assert!(ClassPosterior::new(vec![0.5, 0.6]).is_err());
    assert!(ClassPosterior::new(vec![-0.1, 1.1]).is_err());
}

#[test]
fn accuracy_examples() {
    let p = |v: &[f64]| ClassPosterior::new(v.to_vec()).unwrap();
    let one_hot = [p(&[1.0, 0.0, 0.0]), p(&[0.0, 0.0, 1.0])];
    assert_eq!(accuracy(&one_hot, &[0, 2]).unwrap(), 1.0);
    let third = 1.0 / 3.0;
    let uniform = vec![p(&[third, third, third]); 4];
    assert_eq!(accuracy(&uniform, &[1, 2, 1, 2]).unwrap(), 0.0);
    assert_eq!(accuracy(&uniform, &[0, 2, 1, 2]).unwrap(), 0.25);
    assert!(accuracy(&[], &[]).is_err());
    assert!(accuracy(&one_hot, &[0]).is_err());
}

struct Moments;

impl FeatureExtractor for Moments {
    fn name(&self) -> &str {
        "moments"
    }
    fn dim(&self) -> usize {
        2
    }
    fn extract(&self, w: &Waveform) -> Result<Vec<f64>> {
        let x = w.samples();
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let e = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64;
        Ok(vec![m, e])
    }
}

#[test]
fn fad_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut set = |scale: f32| -> Vec<Waveform> {
        (0..20).map(|_| Waveform::new((0..64).map(|_| rng.gen_range(-scale..scale)).collect(), 1000).unwrap()).collect()
    };
    let a = set(0.5);
    let b = set(0.9);
    assert!(fad(&a, &a, &Moments).unwrap().abs() < 1e-8);
    assert!((fad(&a, &b, &Moments).unwrap() - fad(&b, &a, &Moments).unwrap()).abs() < 1e-12);
    assert!(fad(&a, &b, &Moments).unwrap() > 0.0);
    assert!(fad(&a[..1], &b, &Moments).is_err());
}
