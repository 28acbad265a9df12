use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pulse_ssm::harness::{
    self, bench_scan, config_hash, evaluate, fit_loglog_slope, infer, load_clip_dir, save_clip_dir, train, write_bench_csv,
    write_metrics_csv, write_wave_csv, BenchOptions, HarnessError, RunConfig,
};
use pulse_ssm::model::{Model, ModelError};
use pulse_ssm::synth::{gen_dataset, load_clip, DatasetSpec, VideoClip};

#[global_allocator]
static ALLOC: harness::alloc::CountingAlloc = harness::alloc::CountingAlloc;

/// Remote heart-rate estimation from face video with a selective state-space network.
#[derive(Parser)]
#[command(name = "pulse-ssm", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic labelled clip set.
    Synth(SynthArgs),
    /// Train from a directory of clips; writes a checkpoint per epoch and manifest.json.
    Train(TrainArgs),
    /// Score a checkpoint on a directory of labelled clips.
    Evaluate(EvalArgs),
    /// Predict the pulse wave and heart rate of one clip.
    Infer(InferArgs),
    /// Time the sequential, parallel and convolutional scans across lengths.
    BenchScan(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML dataset spec; flags override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hr_min: Option<f64>,
    #[arg(long)]
    hr_max: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config with [model] and [train] tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Held-out clips scored after the last epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames_per_segment: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-clip metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    /// `t,bvp` CSV of the predicted wave.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 2000, 4000, 8000, 16000, 32000, 64000, 128000, 256000])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    state: usize,
    #[arg(long, default_value_t = 256)]
    chunk: usize,
    #[arg(long, default_value_t = 8192)]
    kernel_max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_dataset_spec(path: &Path) -> Result<DatasetSpec, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, HarnessError> {
    Model::load(path).map_err(|e| match e {
        ModelError::Io(io) => HarnessError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other.into(),
    })
}

fn synth(a: SynthArgs) -> Result<(), HarnessError> {
    let mut spec = match &a.spec {
        Some(p) => read_dataset_spec(p)?,
        None => DatasetSpec::default(),
    };
    spec.count = a.count.unwrap_or(spec.count);
    spec.frames = a.frames.unwrap_or(spec.frames);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.hr_range = (a.hr_min.unwrap_or(spec.hr_range.0), a.hr_max.unwrap_or(spec.hr_range.1));
    spec.hr_jitter_pct = a.jitter.unwrap_or(spec.hr_jitter_pct);
    spec.scene.sensor_noise_std = a.noise.unwrap_or(spec.scene.sensor_noise_std);
    let clips = gen_dataset(&spec)?;
    save_clip_dir(&a.out, &clips)?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), HarnessError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.seed = a.seed.unwrap_or(t.seed);
    t.augment = a.augment.unwrap_or(t.augment);
    if let Some(f) = a.frames_per_segment {
        cfg.set_frames_per_segment(f);
    }
    cfg.validate()?;
    let clips: Vec<VideoClip> = load_clip_dir(&a.data)?.into_iter().map(|(_, c)| c).collect();
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let mut outcome = train(&cfg, &clips, Some(&a.out))?;
    for (e, l) in outcome.manifest.epoch_losses.iter().enumerate() {
        println!("epoch {:3}  loss {l:.5}", e + 1);
    }
    if let Some(dir) = &a.eval_data {
        let report = evaluate(&outcome.model, &load_clip_dir(dir)?)?;
        write_metrics_csv(&a.out.join("metrics.csv"), &report, &outcome.manifest.config_hash)?;
        print_metrics(&report.metrics);
        outcome.manifest.eval = Some(report.metrics);
        outcome.manifest.save(&a.out.join("manifest.json"))?;
    }
    Ok(())
}

fn print_metrics(m: &pulse_ssm::dsp::Metrics) {
    println!("MAE {:.3}  RMSE {:.3}  MAPE {:.3}  r {:.4}  SNR {:.2} dB", m.mae, m.rmse, m.mape, m.pearson, m.snr_db);
}

fn run_evaluate(a: EvalArgs) -> Result<(), HarnessError> {
    let model = load_model(&a.checkpoint)?;
    let report = evaluate(&model, &load_clip_dir(&a.data)?)?;
    write_metrics_csv(&a.out, &report, &config_hash(&model.config.to_toml()))?;
    print_metrics(&report.metrics);
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<(), HarnessError> {
    let model = load_model(&a.checkpoint)?;
    let clip = load_clip(&a.clip)?;
    let out = infer(&model, &clip)?;
    write_wave_csv(&a.out, &out.wave, &config_hash(&model.config.to_toml()))?;
    println!("HR {:.2} bpm  SNR {:.2} dB", out.hr.bpm, out.snr_db);
    for note in &out.notes {
        println!("note: {note}");
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), HarnessError> {
    let opts = BenchOptions {
        channels: a.channels,
        state: a.state,
        reps: a.reps,
        chunk: a.chunk,
        kernel_max_len: a.kernel_max_len,
        seed: a.seed,
    };
    let rows = bench_scan(&a.lengths, &opts)?;
    let hash = config_hash(&format!("{opts:?}"));
    write_bench_csv(&a.out, &rows, &hash)?;
    for mode in ["sequential", "parallel", "kernel"] {
        if let Some(s) = fit_loglog_slope(&rows, mode) {
            println!("{mode:<10} log-log slope {s:.3}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let result = match Cli::parse().cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::BenchScan(a) => run_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
