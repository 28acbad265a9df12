use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{alloc, write_hash_line, HarnessError, Result};
use crate::ssm::selective::{forward, SelectiveDims};
use crate::ssm::{apply_kernel, ssm_kernel, DiscreteSsm, ScanMode};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub channels: usize,
    pub state: usize,
    /// Timed repetitions per point; the minimum is reported.
    pub reps: usize,
    pub chunk: usize,
    /// The quadratic convolution mode is skipped above this length.
    pub kernel_max_len: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { channels: 2, state: 16, reps: 3, chunk: 256, kernel_max_len: 8192, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub len: usize,
    pub wall_ns: u64,
    /// Peak live heap above the pre-run level; 0 without the counting allocator.
    pub peak_bytes: usize,
}

fn timed<T>(reps: usize, mut f: impl FnMut() -> T) -> (u64, usize, T) {
    let mut best = u64::MAX;
    let mut peak = 0;
    let mut out = None;
    for _ in 0..reps.max(1) {
        drop(out.take());
        let base = alloc::current_bytes();
        alloc::reset_peak();
        let t0 = Instant::now();
        let r = f();
        best = best.min(t0.elapsed().as_nanos() as u64);
        peak = peak.max(alloc::peak_bytes().saturating_sub(base));
        out = Some(r);
    }
    (best, peak, out.expect("at least one rep"))
}

/// Times the selective scan in sequential and parallel mode at each length,
/// checking that both agree, plus the quadratic convolution form of an LTI
/// system up to `kernel_max_len`.
pub fn bench_scan(lengths: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (ch, n) = (opts.channels, opts.state);
    let a: Vec<f64> = (0..ch * n).map(|_| -rng.random_range(0.1..2.0)).collect();
    let d: Vec<f64> = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::new();
    for &len in lengths {
        let mut draw = |k: usize, lo: f64, hi: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(lo..hi)).collect() };
        let u = draw(len * ch, -1.0, 1.0);
        let delta = draw(len * ch, 0.01, 0.1);
        let b = draw(len * n, -1.0, 1.0);
        let c = draw(len * n, -1.0, 1.0);
        let dims = SelectiveDims { len, ch, state: n };
        let run = |mode| forward(dims, &u, &delta, &a, &b, &c, &d, mode).0;

        let (ns, peak, seq) = timed(opts.reps, || run(ScanMode::Sequential));
        rows.push(BenchRow { mode: "sequential".into(), len, wall_ns: ns, peak_bytes: peak });
        let (ns, peak, par) = timed(opts.reps, || run(ScanMode::Parallel { chunk: opts.chunk }));
        rows.push(BenchRow { mode: "parallel".into(), len, wall_ns: ns, peak_bytes: peak });
        let scale = seq.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let gap = seq.iter().zip(&par).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if gap > 1e-8 * scale {
            return Err(HarnessError::Numeric { step: len, detail: format!("parallel scan differs from sequential by {gap}") });
        }

        if len <= opts.kernel_max_len {
            let disc = DiscreteSsm { a_bar: a[..n].iter().map(|x| (0.05 * x).exp()).collect(), b_bar: vec![0.05; n] };
            let x = &u[..len];
            let (ns, peak, _) = timed(opts.reps, || apply_kernel(&ssm_kernel(&disc, &c[..n], len), x, None));
            rows.push(BenchRow { mode: "kernel".into(), len, wall_ns: ns, peak_bytes: peak });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln wall_ns` against `ln len` for one mode.
pub fn fit_loglog_slope(rows: &[BenchRow], mode: &str) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.mode == mode && r.wall_ns > 0).map(|r| ((r.len as f64).ln(), (r.wall_ns as f64).ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow], hash: &str) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    write_hash_line(&mut file, hash)?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| e.into_error())?.flush()?;
    Ok(())
}
