//! One pass/fail line per acceptance criterion. Run with
//! `cargo test -p im2wav-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use im2wav::autograd::gradcheck::max_rel_error;
use im2wav::autograd::Tape;
use im2wav::codec::{Codebook, CodecConfig, CodecModel, LatentSequence, QuantMode, StftConfig, Waveform};
use im2wav::conditioning::EmbeddingClip;
use im2wav::datasets::DatasetConfig;
use im2wav::lm::{ConditioningBundle, LMConfig, Level, LmModel, LmTrainConfig};
use im2wav::metrics::{fad, fit_gaussian, frechet_distance, FeatureExtractor, GaussianStats};
use im2wav::nn::Bound;
use im2wav::pipeline::{self, CodecRun, EvaluateRun, GenerateRun, JudgeConfig, LmRun, CLASSIFIER_FILE, CODEC_FILE, GENERATED_MANIFEST};
use im2wav::sampler::{guide, token_plan, GuidanceConfig};
use im2wav::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FAD_1D_TOL: f64 = 1e-9;
const FAD_4D_TOL: f64 = 1e-6;
const FAD_SELF_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-4;
const RELEVANCE_MIN: f64 = 0.80;
const JUDGE_MIN: f64 = 0.95;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const SEEDS: u64 = 5;
const MIN_WINS: usize = 4;

type Check = Result<(bool, String), String>;

fn run(name: &str, failures: &mut Vec<String>, f: impl FnOnce() -> Check) {
    let t = Instant::now();
    let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {name}: {detail} ({:.1} s)", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    if !ok {
        failures.push(name.to_string());
    }
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// sqrt of a matrix with positive real spectrum by Denman-Beavers iteration.
fn sqrtm_db(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = m.clone();
    let mut z = DMatrix::<f64>::identity(m.nrows(), m.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    y
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(d, d, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::<f64>::identity(d, d) * 0.1
}

struct Moments;

impl FeatureExtractor for Moments {
    fn name(&self) -> &str {
        "moments"
    }
    fn dim(&self) -> usize {
        3
    }
    fn extract(&self, w: &Waveform) -> im2wav::error::Result<Vec<f64>> {
        let s = w.samples();
        let n = s.len() as f64;
        let m = s.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v = s.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
        let d = s.windows(2).map(|p| (p[1] - p[0]).abs() as f64).sum::<f64>() / n;
        Ok(vec![m, v, d])
    }
}

fn fad_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut err1 = 0.0f64;
    for _ in 0..100 {
        let (mr, mg) = (3.0 * normal(&mut rng), 3.0 * normal(&mut rng));
        let (sr, sg) = (rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
        let stats = |m: f64, s: f64| GaussianStats { mu: DVector::from_element(1, m), sigma: DMatrix::from_element(1, 1, s * s), n: 10 };
        let got = frechet_distance(&stats(mr, sr), &stats(mg, sg)).map_err(e)?;
        err1 = err1.max((got - ((mr - mg).powi(2) + (sr - sg).powi(2))).abs());
    }
    let mut err4 = 0.0f64;
    for _ in 0..100 {
        let (sr, sg) = (random_spd(4, &mut rng), random_spd(4, &mut rng));
        let (mr, mg) = (DVector::from_fn(4, |_, _| normal(&mut rng)), DVector::from_fn(4, |_, _| normal(&mut rng)));
        let oracle = (&mr - &mg).norm_squared() + (&sr + &sg - sqrtm_db(&(&sr * &sg)) * 2.0).trace();
        let got = frechet_distance(&GaussianStats { mu: mr, sigma: sr, n: 10 }, &GaussianStats { mu: mg, sigma: sg, n: 10 }).map_err(e)?;
        err4 = err4.max((got - oracle).abs());
    }
    let feats: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| normal(&mut rng)).collect()).collect();
    let s = fit_gaussian(&feats).map_err(e)?;
    let self_fd = frechet_distance(&s, &s).map_err(e)?.abs();
    let waves: Vec<Waveform> = (0..20)
        .map(|_| Waveform::new((0..300).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), 1000).unwrap())
        .collect();
    let self_fad = fad(&waves, &waves, &Moments).map_err(e)?.abs();
    let ok = err1 < FAD_1D_TOL && err4 < FAD_4D_TOL && self_fd < FAD_SELF_TOL && self_fad < FAD_SELF_TOL;
    Ok((ok, format!("1-D max err {err1:.1e} (tol {FAD_1D_TOL:e}); 4-D max err vs Denman-Beavers {err4:.1e} (tol {FAD_4D_TOL:e}); self {self_fd:.1e} / fad(X,X) {self_fad:.1e} (tol {FAD_SELF_TOL:e})")))
}

fn quantizer_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, d) = (64, 8);
    // Small integer coordinates make distances exact and ties common.
    let mut codes: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-3..=3) as f32).collect();
    let dup: Vec<f32> = codes[5 * d..6 * d].to_vec();
    codes[40 * d..41 * d].copy_from_slice(&dup);
    let book = Codebook::from_codes(1, Tensor::new(&[k, d], codes.clone()));
    let vectors: Vec<f32> = (0..1000 * d).map(|_| rng.gen_range(-4..=4) as f32).collect();
    let h = LatentSequence { level: 1, vectors: Tensor::new(&[1000, d], vectors.clone()) };
    let (tokens, _) = book.quantize(&h, 32).map_err(e)?;
    let (mut mismatches, mut ties) = (0, 0);
    for (i, &got) in tokens.ids.iter().enumerate() {
        let x = &vectors[i * d..(i + 1) * d];
        let dist: Vec<i64> = (0..k)
            .map(|c| x.iter().zip(&codes[c * d..(c + 1) * d]).map(|(&a, &b)| ((a - b) as i64).pow(2)).sum())
            .collect();
        let best = *dist.iter().min().unwrap();
        let winners: Vec<usize> = (0..k).filter(|&c| dist[c] == best).collect();
        ties += usize::from(winners.len() > 1);
        mismatches += usize::from(got != winners[0]);
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 1000 vectors ({ties} with tied nearest codes, lowest index expected)")))
}

fn jitter<T: im2wav::scalar::Scalar>(params: &mut im2wav::nn::ParamSet<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        let id = params.find(&n).unwrap();
        let noise = Tensor::<T>::randn(params.get(id).shape(), scale, &mut rng);
        params.get_mut(id).add_assign(&noise);
    }
}

fn gradient_checks() -> Check {
    let cfg = CodecConfig {
        sample_rate: 1000,
        channels: 1,
        layers_per_level: vec![1, 1],
        res_blocks: 1,
        codebook_size: 4,
        code_dim: 2,
        stft: StftConfig { windows: vec![8], overlap: 0.5 },
        ..CodecConfig::paper()
    };
    let mut codec = CodecModel::<f64>::new(cfg, 7).map_err(e)?;
    jitter(codec.params_mut(), 0.2, 11);
    let x = Tensor::new(&[1, 1, 16], (0..16).map(|i| 0.5 * (i as f64 * 0.9).sin()).collect());
    // Quantization offsets are frozen at the base point so finite
    // differences follow the straight-through path.
    let tape = Tape::new();
    let b = codec.params().bind(&tape);
    let out = codec.forward_loss(&tape, &b, &x, &QuantMode::Nearest, None).map_err(e)?;
    let offsets: Vec<Tensor<f64>> = out
        .latents
        .iter()
        .zip(&out.quantized)
        .map(|(h, q)| Tensor::new(h.shape(), q.data().iter().zip(h.data()).map(|(a, b)| a - b).collect()))
        .collect();
    let mode = QuantMode::FrozenOffsets(offsets);
    let inputs: Vec<Tensor<f64>> = codec.params().iter().map(|(_, t)| t.clone()).collect();
    let codec_err = max_rel_error(
        &inputs,
        &|tape, vars| codec.forward_loss(tape, &Bound::from_vars(vars.to_vec()), &x, &mode, None).unwrap().total,
        1e-6,
    );

    let lm_cfg = LMConfig {
        context_len: 12,
        n_layers: 2,
        hidden_dim: 8,
        n_heads: 2,
        emb_dim: 4,
        cond_dim: 6,
        mlp_ratio: 2,
        ..LMConfig::toy(Level::Low, 5)
    };
    let mut lm = LmModel::<f64>::new(lm_cfg, 9, None).map_err(e)?;
    jitter(lm.params_mut(), 0.1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let clip = EmbeddingClip::from_flat(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(), "g").map_err(e)?;
    let toks: Vec<usize> = (0..9).map(|_| rng.gen_range(0..5)).collect();
    let real = ConditioningBundle::low(Some(&clip), 9);
    let null = ConditioningBundle::low(None, 9);
    let inputs: Vec<Tensor<f64>> = lm.params().iter().map(|(_, t)| t.clone()).collect();
    let lm_err = max_rel_error(
        &inputs,
        &|_, vars| {
            let b = Bound::from_vars(vars.to_vec());
            lm.loss_graph(&b, &toks, &real).unwrap().add(lm.loss_graph(&b, &toks[..6], &null).unwrap())
        },
        1e-6,
    );
    let ok = codec.num_params() <= 100 && lm.num_params() <= 2000 && codec_err < GRAD_TOL && lm_err < GRAD_TOL;
    Ok((
        ok,
        format!(
            "codec ({} params) rel err {codec_err:.1e}; LM ({} params) rel err {lm_err:.1e} (tol {GRAD_TOL:e})",
            codec.num_params(),
            lm.num_params()
        ),
    ))
}

fn guidance_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Dyadic logits and scales keep every operation exact in f64.
    let dyadic = |rng: &mut ChaCha8Rng| rng.gen_range(-512i32..=512) as f64 / 8.0;
    let mut bad = [0usize; 4];
    for _ in 0..1000 {
        let a: Vec<f64> = (0..16).map(|_| dyadic(&mut rng)).collect();
        let b: Vec<f64> = (0..16).map(|_| dyadic(&mut rng)).collect();
        let (e1, e2) = (rng.gen_range(0..=16) as f64 / 4.0, rng.gen_range(0..=16) as f64 / 4.0);
        let c = dyadic(&mut rng);
        let g = |x: &[f64], y: &[f64], eta: f64| guide(x, y, eta).unwrap();
        bad[0] += usize::from(g(&a, &b, 1.0) != a);
        bad[1] += usize::from(g(&a, &b, 0.0) != b);
        let lhs: Vec<f64> = g(&a, &b, e1 + e2).iter().zip(g(&a, &b, 0.0)).map(|(x, y)| x + y).collect();
        let rhs: Vec<f64> = g(&a, &b, e1).iter().zip(g(&a, &b, e2)).map(|(x, y)| x + y).collect();
        bad[2] += usize::from(lhs != rhs);
        let argmax = |v: &[f64]| (0..v.len()).fold(0, |m, i| if v[i] > v[m] { i } else { m });
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        bad[3] += usize::from(argmax(&g(&shift(&a), &shift(&b), e1)) != argmax(&g(&a, &b, e1)));
    }
    Ok((bad == [0; 4], format!("violations over 1000 pairs: eta=1 {}, eta=0 {}, linearity {}, shift-argmax {}", bad[0], bad[1], bad[2], bad[3])))
}

fn shape_laws() -> Check {
    let codec = CodecModel::<f32>::new(CodecConfig::toy(), 3).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = Vec::new();
    for _ in 0..20 {
        let t = 32 * rng.gen_range(1..=64);
        let w = Waveform::new((0..t).map(|_| rng.gen_range(-0.5f32..0.5)).collect(), 1000).map_err(e)?;
        let lens: Vec<usize> = codec.tokenize(&w).map_err(e)?.iter().map(|s| s.ids.len()).collect();
        if lens != [t / 8, t / 32] {
            bad.push(format!("T={t}: {lens:?}"));
        }
    }
    let paper = CodecConfig::paper();
    let lens = paper.token_lengths(4 * 16_000);
    let plan = token_plan(&CodecModel::<f32>::new(paper, 0).map_err(e)?, 4.0).map_err(e)?;
    let ok = bad.is_empty() && lens == [8000, 2000] && (plan.up, plan.low, plan.samples) == (8000, 2000, 64_000);
    Ok((ok, format!("20 random T: {} violations {bad:?}; 4 s @ 16 kHz -> Up {} / Low {} tokens", bad.len(), plan.up, plan.low)))
}

struct ToyRun {
    dir: PathBuf,
    train_time: Duration,
    judge_accuracy: f64,
}

impl ToyRun {
    fn path(&self, p: &str) -> PathBuf {
        self.dir.join(p)
    }

    fn train(dir: &Path, data: &DatasetConfig, steps: Option<(usize, usize, usize)>) -> Result<Self, String> {
        let t = Instant::now();
        pipeline::cmd_synth(data, &dir.join("data")).map_err(e)?;
        let train = dir.join("data/train.json");
        let mut codec = CodecRun { dataset: train.clone(), seed: data.seed, ..CodecRun::default() };
        let mut low_train = LmTrainConfig::toy(Level::Low);
        let mut up_train = LmTrainConfig::toy(Level::Up);
        if let Some((c, l, u)) = steps {
            codec.train.steps = c;
            low_train.steps = l;
            up_train.steps = u;
        }
        pipeline::cmd_train_codec(&codec, &dir.join("codec")).map_err(e)?;
        for (level, tc) in [(Level::Low, low_train), (Level::Up, up_train)] {
            let run = LmRun { dataset: train.clone(), codec: dir.join("codec").join(CODEC_FILE), level, train: Some(tc), seed: data.seed, model: None };
            pipeline::cmd_train_lm(&run, &dir.join(level.to_string())).map_err(e)?;
        }
        // Training the judge also reports its accuracy on the real test clips.
        let probe = dir.join("probe");
        let gen = GenerateRun { limit: Some(2), ..Self::generate_run(dir, 3.0, true, 0) };
        pipeline::cmd_generate(&gen, &probe).map_err(e)?;
        let eval = EvaluateRun {
            real: dir.join("data/test.json"),
            generated: probe.join(GENERATED_MANIFEST),
            judge: JudgeConfig { train: Some(train), ..JudgeConfig::default() },
            seed: data.seed,
        };
        let report = pipeline::cmd_evaluate(&eval, &dir.join("judge")).map_err(e)?;
        Ok(Self { dir: dir.to_path_buf(), train_time: t.elapsed(), judge_accuracy: report.judge_accuracy })
    }

    fn generate_run(dir: &Path, eta: f64, up: bool, seed: u64) -> GenerateRun {
        GenerateRun {
            dataset: dir.join("data/test.json"),
            codec: dir.join("codec").join(CODEC_FILE),
            low: dir.join("low/low.ckpt"),
            up: up.then(|| dir.join("up/up.ckpt")),
            guidance: GuidanceConfig { eta, ..GuidanceConfig::default() },
            duration: 1.0,
            limit: None,
            seed,
        }
    }

    /// Generate and score; returns (class-match rate, FAD).
    fn score(&self, tag: &str, eta: f64, up: bool, seed: u64, limit: usize) -> Result<(f64, f64), String> {
        let out = self.path(&format!("gen/{tag}"));
        let run = GenerateRun { limit: Some(limit), ..Self::generate_run(&self.dir, eta, up, seed) };
        pipeline::cmd_generate(&run, &out).map_err(e)?;
        let eval = EvaluateRun {
            real: self.path("data/test.json"),
            generated: out.join(GENERATED_MANIFEST),
            judge: JudgeConfig { checkpoint: Some(self.path("judge").join(CLASSIFIER_FILE)), train: None, ..JudgeConfig::default() },
            seed,
        };
        let r = pipeline::cmd_evaluate(&eval, &self.path(&format!("eval/{tag}"))).map_err(e)?;
        Ok((r.metrics.accuracy, r.metrics.fad))
    }
}

fn toy_relevance(toy: &ToyRun) -> Check {
    let (acc, _) = toy.score("relevance", 3.0, true, 0, 120)?;
    let ok = acc >= RELEVANCE_MIN && toy.judge_accuracy >= JUDGE_MIN && toy.train_time <= TRAIN_BUDGET;
    Ok((
        ok,
        format!(
            "class-match at eta=3 over 120 samples {acc:.3} (min {RELEVANCE_MIN}); judge accuracy {:.3} (min {JUDGE_MIN}); training {:.0} s (budget {} s)",
            toy.judge_accuracy,
            toy.train_time.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    ))
}

fn cfg_and_up_direction(toy: &ToyRun) -> Result<(Check, Check), String> {
    let t = Instant::now();
    let mut cfg_rows = Vec::new();
    let mut up_rows = Vec::new();
    for seed in 1..=SEEDS {
        let (acc3, fad_up) = toy.score(&format!("s{seed}-eta3"), 3.0, true, seed, 100)?;
        let (acc1, _) = toy.score(&format!("s{seed}-eta1"), 1.0, true, seed, 100)?;
        let (_, fad_low) = toy.score(&format!("s{seed}-noup"), 3.0, false, seed, 100)?;
        cfg_rows.push((acc3, acc1));
        up_rows.push((fad_up, fad_low));
    }
    let cfg_wins = cfg_rows.iter().filter(|(a3, a1)| a3 >= a1).count();
    let up_wins = up_rows.iter().filter(|(u, l)| u <= l).count();
    let fmt = |rows: &[(f64, f64)]| {
        let cells: Vec<String> = rows.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
        format!("{}; both measured in one {:.0} s sweep", cells.join(" "), t.elapsed().as_secs_f64())
    };
    Ok((
        Ok((cfg_wins >= MIN_WINS, format!("eta=3 >= eta=1 in {cfg_wins}/{SEEDS} seeds (min {MIN_WINS}); class-match eta3/eta1: {}", fmt(&cfg_rows)))),
        Ok((up_wins >= MIN_WINS, format!("FAD with Up <= without in {up_wins}/{SEEDS} seeds (min {MIN_WINS}); FAD up/no-up: {}", fmt(&up_rows)))),
    ))
}

fn determinism() -> Check {
    let data = DatasetConfig { clips_per_class: 12, test_clips_per_class: 2, seed: 9, ..DatasetConfig::default() };
    let mut wavs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(e)?;
        let toy = ToyRun::train(dir.path(), &data, Some((40, 40, 40)))?;
        let out = dir.path().join("gen");
        pipeline::cmd_generate(&ToyRun::generate_run(&toy.dir, 3.0, true, 4), &out).map_err(e)?;
        let files: Vec<Vec<u8>> = (0..6).map(|i| std::fs::read(out.join(format!("{i:05}.wav")))).collect::<Result<_, _>>().map_err(e)?;
        wavs.push(files);
    }
    let same = wavs[0] == wavs[1];
    let bytes: usize = wavs[0].iter().map(Vec::len).sum();
    Ok((same, format!("two seeded end-to-end runs (synth, codec, Low, Up, generate): {} of {bytes} WAV bytes differ", wavs[0].iter().flatten().zip(wavs[1].iter().flatten()).filter(|(a, b)| a != b).count())))
}

fn main() {
    let mut failures = Vec::new();
    run("fad-oracle", &mut failures, fad_oracle);
    run("quantizer-oracle", &mut failures, quantizer_oracle);
    run("gradient-checks", &mut failures, gradient_checks);
    run("guidance-identities", &mut failures, guidance_identities);
    run("shape-laws", &mut failures, shape_laws);

    let dir = tempfile::tempdir().expect("temp dir");
    let data = DatasetConfig { clips_per_class: 600, test_clips_per_class: 40, ..DatasetConfig::default() };
    let t = Instant::now();
    match ToyRun::train(dir.path(), &data, None) {
        Ok(toy) => {
            println!("     toy pipeline trained in {:.0} s", t.elapsed().as_secs_f64());
            run("toy-relevance", &mut failures, || toy_relevance(&toy));
            match cfg_and_up_direction(&toy) {
                Ok((cfg, up)) => {
                    run("cfg-direction", &mut failures, || cfg);
                    run("up-direction", &mut failures, || up);
                }
                Err(msg) => {
                    run("cfg-direction", &mut failures, || Err(msg.clone()));
                    run("up-direction", &mut failures, || Err(msg));
                }
            }
        }
        Err(msg) => {
            for name in ["toy-relevance", "cfg-direction", "up-direction"] {
                run(name, &mut failures, || Err(msg.clone()));
            }
        }
    }
    run("determinism", &mut failures, determinism);

    if failures.is_empty() {
        println!("all acceptance criteria passed");
    } else {
        println!("failed: {}", failures.join(", "));
        std::process::exit(1);
    }
}
