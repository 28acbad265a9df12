use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{write_hash_line, HarnessError, Result};
use crate::dsp::{hr_from_wave, metrics, snr_db, HrEstimate, Metrics, Wave};
use crate::model::Model;
use crate::synth::VideoClip;

/// Clips shorter than this many seconds hold about one beat at resting rates.
pub const SHORT_CLIP_SECONDS: f64 = 2.0;
pub const SHORT_CLIP_NOTE: &str = "near-single-beat, reduced reliability";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub clip_id: String,
    pub gt_hr: f64,
    pub pred_hr: f64,
    pub mae_contrib: f64,
    pub snr_db: f64,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metrics: Metrics,
}

fn reference_hr(id: &str, clip: &VideoClip) -> Result<f64> {
    if let Some(hr) = clip.hr_bpm {
        return Ok(hr);
    }
    let gt =
        clip.gt().ok_or_else(|| HarnessError::Data(format!("clip {id} has neither a heart-rate label nor a reference wave")))?;
    Ok(hr_from_wave(&gt)?.bpm)
}

/// Scores predicted waves against reference heart rates.
pub fn evaluate_waves(items: &[(String, f64, Wave)]) -> Result<EvalReport> {
    let rows = items
        .iter()
        .map(|(id, gt_hr, wave)| {
            let est = hr_from_wave(wave)?;
            Ok(EvalRow {
                clip_id: id.clone(),
                gt_hr: *gt_hr,
                pred_hr: est.bpm,
                mae_contrib: (est.bpm - gt_hr).abs(),
                snr_db: snr_db(wave, *gt_hr),
                low_confidence: est.low_confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pred: Vec<f64> = rows.iter().map(|r| r.pred_hr).collect();
    let gt: Vec<f64> = rows.iter().map(|r| r.gt_hr).collect();
    let waves: Vec<Wave> = items.iter().map(|(_, _, w)| w.clone()).collect();
    Ok(EvalReport { metrics: metrics(&pred, &gt, &waves)?, rows })
}

/// Model prediction, bandpass, Welch and peak picking per clip, in parallel
/// across clips.
pub fn evaluate(model: &Model, clips: &[(String, VideoClip)]) -> Result<EvalReport> {
    if let Some((id, c)) = clips.iter().find(|(_, c)| c.hw() != model.config.input_hw) {
        return Err(HarnessError::Config(format!("clip {id} is {:?}, model expects {:?}", c.hw(), model.config.input_hw)));
    }
    let items = clips
        .par_iter()
        .map(|(id, clip)| {
            let wave = Wave::new(model.predict(clip)?, clip.fs)?;
            Ok((id.clone(), reference_hr(id, clip)?, wave))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_waves(&items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    pub wave: Wave,
    pub hr: HrEstimate,
    /// SNR of the wave around its own estimated rate.
    pub snr_db: f64,
    pub notes: Vec<String>,
}

/// Wave and heart rate for a clip of any length of at least 5 frames.
pub fn infer(model: &Model, clip: &VideoClip) -> Result<InferResult> {
    if clip.hw() != model.config.input_hw {
        return Err(HarnessError::Config(format!("clip is {:?}, model expects {:?}", clip.hw(), model.config.input_hw)));
    }
    let wave = Wave::new(model.predict(clip)?, clip.fs)?;
    let hr = hr_from_wave(&wave)?;
    let mut notes = Vec::new();
    if wave.duration() < SHORT_CLIP_SECONDS {
        notes.push(SHORT_CLIP_NOTE.to_string());
    }
    if hr.low_confidence {
        notes.push("strongest spectral peak lies outside the heart-rate band".to_string());
    }
    Ok(InferResult { snr_db: snr_db(&wave, hr.bpm), wave, hr, notes })
}

fn csv_writer(path: &Path, hash: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    write_hash_line(&mut file, hash)?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_metrics_csv(path: &Path, report: &EvalReport, hash: &str) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}

/// `t,bvp` rows with `t` in seconds.
pub fn write_wave_csv(path: &Path, wave: &Wave, hash: &str) -> Result<()> {
    let mut w = csv_writer(path, hash)?;
    w.write_record(["t", "bvp"])?;
    for (i, v) in wave.samples.iter().enumerate() {
        w.write_record([format!("{}", i as f64 / wave.fs), format!("{v}")])?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}
