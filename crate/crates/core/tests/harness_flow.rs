use std::time::Instant;

use pulse_ssm::dsp::Wave;
use pulse_ssm::harness::{
    evaluate, evaluate_waves, infer, load_clip_dir, save_clip_dir, train, write_metrics_csv, write_wave_csv, HarnessError,
    RunConfig, RunManifest, SHORT_CLIP_NOTE,
};
use pulse_ssm::model::{Model, ModelConfig};
use pulse_ssm::synth::{gen_dataset, DatasetSpec, VideoClip};
use pulse_ssm::tensor::Tensor;

fn toy_run(frames: usize) -> RunConfig {
    let mut cfg = RunConfig { model: ModelConfig::toy(), ..RunConfig::default() };
    cfg.set_frames_per_segment(frames);
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

fn clips(count: usize, frames: usize, seed: u64) -> Vec<VideoClip> {
    gen_dataset(&DatasetSpec { count, frames, seed, ..DatasetSpec::default() }).unwrap().into_iter().map(|(_, c)| c).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut cfg = toy_run(32);
    cfg.train.lr = 0.0;
    let out = train(&cfg, &clips(4, 32, 5), None).unwrap();
    let fresh = Model::new(cfg.model.clone(), cfg.train.seed).unwrap();
    for (name, (a, b)) in out.model.params.names().iter().zip(out.model.params.values().iter().zip(fresh.params.values())) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} moved");
    }
}

#[test]
fn same_seed_reproduces_the_manifest() {
    let cfg = toy_run(32);
    let data = clips(4, 64, 6);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.model, b.model);
    let mut other = cfg.clone();
    other.train.seed = 1;
    assert_ne!(train(&other, &data, None).unwrap().manifest.step_losses, a.manifest.step_losses);
}

#[test]
fn one_epoch_lowers_the_loss_for_most_seeds() {
    let data = clips(4, 160, 7);
    let mut decreased = 0;
    for seed in 0..5 {
        let mut cfg = toy_run(160);
        cfg.train.seed = seed;
        let losses = train(&cfg, &data, None).unwrap().manifest.step_losses;
        assert!(losses.iter().all(|l| l.is_finite()));
        decreased += usize::from(losses.last() < losses.first());
    }
    assert!(decreased >= 4, "loss fell in {decreased} of 5 runs");
}

#[test]
fn non_finite_input_aborts_with_step_index() {
    let mut data = clips(4, 32, 8);
    data[1].frames.data_mut()[17] = f64::NAN;
    let mut cfg = toy_run(32);
    cfg.train.batch_size = 4;
    let err = train(&cfg, &data, None).unwrap_err();
    assert!(matches!(err, HarnessError::Numeric { step: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn training_writes_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_run(32);
    cfg.train.epochs = 2;
    let out = train(&cfg, &clips(4, 32, 9), Some(dir.path())).unwrap();
    assert!(dir.path().join("epoch_001.ckpt").exists());
    let last = dir.path().join("epoch_002.ckpt");
    assert_eq!(Model::load(&last).unwrap(), out.model);
    let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, out.manifest);
    assert_eq!(manifest.epoch_losses.len(), 2);
    assert_eq!(manifest.config_hash, cfg.hash());
}

#[test]
fn training_rejects_bad_inputs() {
    let cfg = toy_run(32);
    assert!(matches!(train(&cfg, &clips(1, 64, 1), None), Err(HarnessError::Config(_))));
    let mut unlabeled = clips(2, 32, 1);
    unlabeled[0].gt_wave = None;
    assert!(matches!(train(&cfg, &unlabeled, None), Err(HarnessError::Data(_))));
    let mut big = cfg.clone();
    big.model.input_hw = (64, 64);
    assert!(matches!(train(&big, &clips(2, 32, 1), None), Err(HarnessError::Config(_))));
}

#[test]
fn oracle_waves_score_zero_error() {
    let items: Vec<(String, f64, Wave)> = clips(5, 300, 10)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let gt = c.gt().unwrap();
            let hr = pulse_ssm::dsp::hr_from_wave(&gt).unwrap().bpm;
            (format!("c{i}"), hr, gt)
        })
        .collect();
    let report = evaluate_waves(&items).unwrap();
    assert_eq!(report.metrics.mae, 0.0);
    assert_eq!(report.metrics.rmse, 0.0);
}

#[test]
fn checkpoint_round_trip_evaluates_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::toy(), 11).unwrap();
    let test = gen_dataset(&DatasetSpec { count: 3, frames: 90, seed: 12, ..DatasetSpec::default() }).unwrap();
    save_clip_dir(&dir.path().join("test"), &test).unwrap();
    let loaded_clips = load_clip_dir(&dir.path().join("test")).unwrap();
    assert_eq!(loaded_clips, test);

    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let a = evaluate(&model, &test).unwrap();
    let b = evaluate(&Model::load(&path).unwrap(), &loaded_clips).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.pred_hr.to_bits(), y.pred_hr.to_bits());
    }
}

#[test]
fn csv_outputs_start_with_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(ModelConfig::toy(), 1).unwrap();
    let test = gen_dataset(&DatasetSpec { count: 2, frames: 60, seed: 3, ..DatasetSpec::default() }).unwrap();
    let report = evaluate(&model, &test).unwrap();
    let hash = RunConfig::default().hash();
    let metrics = dir.path().join("metrics.csv");
    write_metrics_csv(&metrics, &report, &hash).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_hash={hash}"));
    assert_eq!(lines.next().unwrap(), "clip_id,gt_hr,pred_hr,mae_contrib,snr_db,low_confidence");
    assert_eq!(lines.count(), 2);

    let wave = dir.path().join("wave.csv");
    write_wave_csv(&wave, &Wave::sine(1.0, 30.0, 4, 1.0, 0.0), &hash).unwrap();
    let text = std::fs::read_to_string(&wave).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "t,bvp");
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn one_second_clip_is_flagged() {
    let model = Model::new(ModelConfig::toy(), 2).unwrap();
    let clip = &clips(1, 30, 13)[0];
    let out = infer(&model, clip).unwrap();
    assert_eq!(out.wave.len(), 30);
    assert!(out.notes.iter().any(|n| n == SHORT_CLIP_NOTE));
    let long = infer(&model, &clips(1, 90, 13)[0]).unwrap();
    assert!(!long.notes.iter().any(|n| n == SHORT_CLIP_NOTE));
}

#[test]
fn static_clip_runs_with_low_snr() {
    let model = Model::new(ModelConfig::toy(), 3).unwrap();
    let clip = VideoClip::new(Tensor::from_fn([3, 64, 32, 32], |i| 0.3 + 0.1 * ((i / 1024) / 64) as f64), 30.0).unwrap();
    let out = infer(&model, &clip).unwrap();
    assert!(out.wave.samples.iter().all(|v| v.is_finite()));
    assert!(out.snr_db < 0.0, "snr {}", out.snr_db);
}

#[test]
fn long_clip_inference_scales_linearly() {
    let model = Model::new(ModelConfig::toy(), 4).unwrap();
    let long = &clips(1, 1800, 14)[0];
    let short = long.window(0, 160);
    let time = |c: &VideoClip| {
        (0..3)
            .map(|_| {
                let t0 = Instant::now();
                infer(&model, c).unwrap();
                t0.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let ratio = time(long) / time(&short);
    assert!(ratio <= 12.0 * 1.3, "1800/160 wall-clock ratio {ratio:.2}");
}
