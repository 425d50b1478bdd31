use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use im2wav::datasets::DatasetConfig;
use im2wav::error::{Error, Result};
use im2wav::lm::Level;
use im2wav::pipeline::{self, AblateRun, CodecRun, EvaluateRun, GenerateRun, LmRun};
use serde::Deserialize;

const THREADS_VAR: &str = "IM2WAV_THREADS";

/// Image-conditioned audio generation on a toy scale.
#[derive(Parser)]
#[command(name = "im2wav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; receives every output and the echoed config.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Low,
    Up,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clips_per_class: Option<usize>,
        #[arg(long)]
        test_clips_per_class: Option<usize>,
    },
    /// Train the two-level codec.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the Low or Up token model.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        level: Option<LevelArg>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate audio for every condition of a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        low: Option<PathBuf>,
        #[arg(long, conflicts_with = "no_up")]
        up: Option<PathBuf>,
        /// Decode the Low tokens directly.
        #[arg(long)]
        no_up: bool,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score generated audio against the real clips it was conditioned on.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Pretrained judge; otherwise one is trained.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// The eight-row {CFG, Up, Every} ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
}

fn load<C: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<C> {
    path.map_or_else(|| Ok(C::default()), pipeline::read_config)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<String> {
    configure_threads()?;
    match cli.command {
        Command::Synth { common, clips_per_class, test_clips_per_class } => {
            let mut cfg: DatasetConfig = load(common.config.as_deref())?;
            set(&mut cfg.seed, common.seed);
            set(&mut cfg.clips_per_class, clips_per_class);
            set(&mut cfg.test_clips_per_class, test_clips_per_class);
            let [train, test] = pipeline::cmd_synth(&cfg, &common.out_dir)?;
            Ok(format!("wrote {} train and {} test clips to {}", train.len(), test.len(), common.out_dir.display()))
        }
        Command::TrainCodec { common, dataset, steps } => {
            let mut run: CodecRun = load(common.config.as_deref())?;
            set(&mut run.seed, common.seed);
            set(&mut run.dataset, dataset);
            set(&mut run.train.steps, steps);
            let s = pipeline::cmd_train_codec(&run, &common.out_dir)?;
            Ok(format!("codec: {} params, final loss {:.4}, utilization {:?}", s.params, s.final_loss, s.utilization))
        }
        Command::TrainLm { common, level, dataset, codec, steps } => {
            let mut run: LmRun = load(common.config.as_deref())?;
            set(&mut run.seed, common.seed);
            set(&mut run.level, level.map(|l| match l {
                LevelArg::Low => Level::Low,
                LevelArg::Up => Level::Up,
            }));
            set(&mut run.dataset, dataset);
            set(&mut run.codec, codec);
            if let Some(steps) = steps {
                run.train.get_or_insert_with(|| im2wav::lm::LmTrainConfig::toy(run.level)).steps = steps;
            }
            let s = pipeline::cmd_train_lm(&run, &common.out_dir)?;
            Ok(format!("{} model: {} params, final nll {:.4}", s.level, s.params, s.final_nll))
        }
        Command::Generate { common, dataset, codec, low, up, no_up, eta, temperature, top_k, duration, limit } => {
            let mut run: GenerateRun = load(common.config.as_deref())?;
            set(&mut run.seed, common.seed);
            set(&mut run.dataset, dataset);
            set(&mut run.codec, codec);
            set(&mut run.low, low);
            if no_up {
                run.up = None;
            } else if up.is_some() {
                run.up = up;
            }
            set(&mut run.guidance.eta, eta);
            set(&mut run.guidance.temperature, temperature);
            if top_k.is_some() {
                run.guidance.top_k = top_k;
            }
            set(&mut run.duration, duration);
            if limit.is_some() {
                run.limit = limit;
            }
            let m = pipeline::cmd_generate(&run, &common.out_dir)?;
            Ok(format!("generated {} clips in {}", m.len(), common.out_dir.display()))
        }
        Command::Evaluate { common, real, generated, classifier } => {
            let mut run: EvaluateRun = load(common.config.as_deref())?;
            set(&mut run.seed, common.seed);
            set(&mut run.real, real);
            set(&mut run.generated, generated);
            if classifier.is_some() {
                run.judge.checkpoint = classifier;
            }
            let r = pipeline::cmd_evaluate(&run, &common.out_dir)?;
            Ok(serde_json::to_string(&r)?)
        }
        Command::Ablate { common, eta, limit, classifier } => {
            let mut run: AblateRun = load(common.config.as_deref())?;
            set(&mut run.seed, common.seed);
            set(&mut run.eta, eta);
            if limit.is_some() {
                run.limit = limit;
            }
            if classifier.is_some() {
                run.judge.checkpoint = classifier;
            }
            let r = pipeline::cmd_ablate(&run, &common.out_dir)?;
            Ok(format!("{} ablation rows over {} samples in {}", r.rows.len(), r.samples, common.out_dir.display()))
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e.exit_code() {
        2 => "config",
        3 => "missing-checkpoint",
        4 => "dataset",
        _ => "runtime",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("im2wav: error[{}]: {msg}", kind(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
