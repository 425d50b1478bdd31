use im2wav::conditioning::EmbeddingClip;
use im2wav::datasets::orthonormal_anchors;
use im2wav::lm::{conditional_gain, train_lm, LMConfig, Level, LmExample, LmModel, LmTrainConfig};
use im2wav::nn::OptimConfig;
use im2wav::sampler::{sample_up, GuidanceConfig};
use im2wav::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 12;
const DIM: usize = 16;

fn small(level: Level) -> LMConfig {
    LMConfig {
        context_len: 16,
        n_layers: 1,
        hidden_dim: 32,
        n_heads: 2,
        emb_dim: DIM,
        cond_dim: 32,
        ..LMConfig::toy(level, K)
    }
}

/// Class `c` draws its tokens uniformly from `{4c, .., 4c + 3}`.
fn class_examples(n: usize, anchors: &[Vec<f32>], rng: &mut ChaCha8Rng) -> Vec<LmExample> {
    (0..n)
        .map(|i| {
            let c = i % anchors.len();
            let tokens = (0..16).map(|_| 4 * c + rng.gen_range(0..4)).collect();
            let clip = EmbeddingClip::new(vec![anchors[c].clone(); 2], format!("c{c}")).unwrap();
            LmExample { tokens, clip, low_tokens: None }
        })
        .collect()
}

fn train(data: &[LmExample], cfg: LMConfig, low_codes: Option<&Tensor<f32>>, steps: usize) -> LmModel<f32> {
    let mut m = LmModel::<f32>::new(cfg, 1, low_codes).unwrap();
    let tc = LmTrainConfig { steps, batch_size: 8, optim: OptimConfig { lr: 3e-3, warmup_steps: 20, ..OptimConfig::default() }, seed: 2 };
    train_lm(&mut m, data, &tc, None).unwrap();
    m
}

#[test]
fn shuffled_conditions_carry_no_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let anchors = orthonormal_anchors(3, DIM, 4).unwrap();
    let matched = class_examples(90, &anchors, &mut rng);
    let held_out = class_examples(30, &anchors, &mut rng);
    let mut clips: Vec<EmbeddingClip> = matched.iter().map(|e| e.clip.clone()).collect();
    clips.shuffle(&mut rng);
    let shuffled: Vec<LmExample> = matched.iter().zip(clips).map(|(e, clip)| LmExample { clip, ..e.clone() }).collect();

    let real = train(&matched, small(Level::Low), None, 1500);
    let control = train(&shuffled, small(Level::Low), None, 1500);
    let g_real = conditional_gain(&real, &held_out).unwrap();
    let g_control = conditional_gain(&control, &held_out).unwrap();
    // Past the first few tokens the context reveals the class on its own, so
    // the per-token gain is well below ln 3.
    assert!(g_real > 0.1, "matched gain {g_real}");
    assert!(g_control.abs() < 0.05, "shuffled gain {g_control}");
}

#[test]
fn up_tokens_follow_low_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors = orthonormal_anchors(1, DIM, 6).unwrap();
    let clip = EmbeddingClip::new(vec![anchors[0].clone(); 2], "c").unwrap();
    // Each Low token fixes its four Up tokens up to a coin flip.
    let up_of = |low: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        low.iter().flat_map(|&l| (0..4).map(move |j| (3 * l + j) % K)).map(|t| if rng.gen_bool(0.1) { (t + 1) % K } else { t }).collect()
    };
    let data: Vec<LmExample> = (0..120)
        .map(|_| {
            let low: Vec<usize> = (0..8).map(|_| rng.gen_range(0..K)).collect();
            LmExample { tokens: up_of(&low, &mut rng), clip: clip.clone(), low_tokens: Some(low) }
        })
        .collect();
    let codes = Tensor::<f32>::randn(&[K, 8], 1.0, &mut rng);
    let m = train(&data, small(Level::Up), Some(&codes), 600);

    let a: Vec<usize> = (0..8).collect();
    let b: Vec<usize> = (0..8).map(|i| (i + 5) % K).collect();
    let g = GuidanceConfig { seed: 9, ..GuidanceConfig::default() };
    let ua = sample_up(&m, &a, &clip, &g).unwrap();
    let ub = sample_up(&m, &b, &clip, &g).unwrap();
    let differ = ua.iter().zip(&ub).filter(|(x, y)| x != y).count() as f64 / ua.len() as f64;
    assert!(differ > 0.5, "only {differ} of positions differ");
}
