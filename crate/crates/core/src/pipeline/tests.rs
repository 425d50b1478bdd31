use super::*;
use crate::nn::OptimConfig;

#[test]
fn unknown_keys_are_config_errors() {
    let err = parse_config::<CodecRun>(r#"{"dataset": "x.json", "stpes": 3}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let err = parse_config::<GenerateRun>(r#"{"guidance": {"eta": 2, "tau": 1}}"#).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn partial_configs_fill_defaults() {
    let run: LmRun = parse_config(r#"{"level": "up", "train": {"steps": 7, "optim": {"lr": 0.01}}}"#).unwrap();
    assert_eq!(run.level, Level::Up);
    let t = run.train.unwrap();
    assert_eq!(t.steps, 7);
    assert_eq!(t.optim.lr, 0.01);
    assert_eq!(t.optim.warmup_steps, OptimConfig::default().warmup_steps);
    assert_eq!(run.dataset, LmRun::default().dataset);
}

#[test]
fn config_hash_tracks_content() {
    let a = GenerateRun::default();
    let mut b = a.clone();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 64);
    b.guidance.eta = 1.0;
    assert_ne!(config_hash(&a), config_hash(&b));
}

#[test]
fn sample_seeds_are_distinct_and_stable() {
    let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| sample_seed(7, i)).collect();
    assert_eq!(seeds.len(), 1000);
    assert_eq!(sample_seed(7, 3), sample_seed(7, 3));
    assert_ne!(sample_seed(7, 3), sample_seed(8, 3));
}

#[test]
fn missing_checkpoint_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let run = GenerateRun { codec: dir.path().join("nope.ckpt"), ..GenerateRun::default() };
    let err = cmd_generate(&run, &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn codec_run_rejects_rate_mismatch_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = DatasetConfig { clips_per_class: 2, test_clips_per_class: 1, max_duration: 1.0, ..DatasetConfig::default() };
    cmd_synth(&data, dir.path()).unwrap();
    let run = CodecRun { dataset: dir.path().join("train.json"), codec: CodecConfig { sample_rate: 2000, ..CodecConfig::toy() }, ..CodecRun::default() };
    let err = cmd_train_codec(&run, &dir.path().join("codec")).unwrap_err();
    assert!(matches!(err, Error::DatasetMismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(!dir.path().join("codec").exists());
}
