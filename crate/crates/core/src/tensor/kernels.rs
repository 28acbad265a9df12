//! Raw numeric kernels behind the tape operations. Everything here works on
//! plain slices; shape validation happens in the tape layer.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// `c = beta * c + a · b` where `a` is `m×k` and `b` is `k×n`, either operand
/// optionally read transposed from its row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, k, stride, pad, ho, wo })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let npos = self.col_cols();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let npos = self.col_cols();
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..self.ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Frames are split into this many fixed groups for parameter-gradient
/// reduction, so the summation order never depends on the worker count.
const REDUCE_GROUPS: usize = 16;

pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let in_frame = g.cin * g.h * g.w;
    let out_frame = cout * g.col_cols();
    let mut out = vec![0.0; n * out_frame];
    out.par_chunks_mut(out_frame).enumerate().for_each(|(i, y)| {
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        g.im2col(&x[i * in_frame..(i + 1) * in_frame], &mut cols);
        for (co, row) in y.chunks_mut(g.col_cols()).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        gemm(cout, g.col_rows(), g.col_cols(), weight, false, &cols, false, y, 1.0);
    });
    out
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    cout: usize,
    gy: &[f64],
    need_gx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_frame = g.cin * g.h * g.w;
    let npos = g.col_cols();
    let out_frame = cout * npos;
    let wlen = cout * g.col_rows();
    let per_group = n.div_ceil(REDUCE_GROUPS).max(1);

    let mut gx = vec![0.0; n * in_frame];
    let partial: Vec<(Vec<f64>, Vec<f64>)> = gx
        .par_chunks_mut(per_group * in_frame)
        .enumerate()
        .map(|(grp, gx_grp)| {
            let mut gw = vec![0.0; wlen];
            let mut gb = vec![0.0; cout];
            let mut cols = vec![0.0; g.col_rows() * npos];
            let mut gcols = vec![0.0; g.col_rows() * npos];
            for (j, gx_frame) in gx_grp.chunks_mut(in_frame).enumerate() {
                let i = grp * per_group + j;
                let gy_i = &gy[i * out_frame..(i + 1) * out_frame];
                for (co, row) in gy_i.chunks(npos).enumerate() {
                    gb[co] += row.iter().sum::<f64>();
                }
                g.im2col(&x[i * in_frame..(i + 1) * in_frame], &mut cols);
                gemm(cout, npos, g.col_rows(), gy_i, false, &cols, true, &mut gw, 1.0);
                if need_gx {
                    gemm(g.col_rows(), cout, npos, weight, true, gy_i, false, &mut gcols, 0.0);
                    g.col2im(&gcols, gx_frame);
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = vec![0.0; wlen];
    let mut gb = vec![0.0; cout];
    for (pw, pb) in partial {
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    (gx, gw, gb)
}

/// Causal depthwise convolution over `[len, ch]`; `w` is `[ch, k]` and the
/// last tap multiplies the current step.
pub fn depthwise_conv1d_forward(x: &[f64], len: usize, ch: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; len * ch];
    for t in 0..len {
        for d in 0..ch {
            let mut acc = b[d];
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src >= 0 {
                    acc += w[d * k + j] * x[src as usize * ch + d];
                }
            }
            y[t * ch + d] = acc;
        }
    }
    y
}

pub fn depthwise_conv1d_backward(
    x: &[f64],
    len: usize,
    ch: usize,
    w: &[f64],
    k: usize,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; len * ch];
    let mut gw = vec![0.0; ch * k];
    let mut gb = vec![0.0; ch];
    for t in 0..len {
        for d in 0..ch {
            let g = gy[t * ch + d];
            gb[d] += g;
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src >= 0 {
                    let s = src as usize * ch + d;
                    gw[d * k + j] += g * x[s];
                    gx[s] += g * w[d * k + j];
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel `(mean, biased variance)` over `(batch, h, w)` of `[n, c, hw]`.
pub fn channel_moments(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += x[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

pub fn maxpool2d_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let mut y = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(src[(oy * k + dy) * w + ox * k + dx]);
                    }
                }
                y[(p * ho + oy) * wo + ox] = m;
            }
        }
    }
    y
}

/// Gradient flows to the first maximal element of each window.
pub fn maxpool2d_backward(x: &[f64], planes: usize, h: usize, w: usize, k: usize, gy: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let mut gx = vec![0.0; x.len()];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (oy * k) * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = (oy * k + dy) * w + ox * k + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                gx[p * h * w + best] += gy[(p * ho + oy) * wo + ox];
            }
        }
    }
    gx
}

fn fft_columns(x: &[Complex64], len: usize, ch: usize, inverse: bool) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
    let mut out = vec![Complex64::default(); len * ch];
    let mut buf = vec![Complex64::default(); len];
    for c in 0..ch {
        for t in 0..len {
            buf[t] = x[t * ch + c];
        }
        fft.process(&mut buf);
        for t in 0..len {
            out[t * ch + c] = buf[t];
        }
    }
    out
}

pub fn half_bins(len: usize) -> usize {
    len / 2 + 1
}

/// Real `[len, ch]` to one-sided spectrum `[len/2+1, ch, 2]` (re, im).
pub fn rfft_time(x: &[f64], len: usize, ch: usize) -> Vec<f64> {
    let cx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let full = fft_columns(&cx, len, ch, false);
    let bins = half_bins(len);
    let mut out = vec![0.0; bins * ch * 2];
    for f in 0..bins {
        for c in 0..ch {
            let z = full[f * ch + c];
            out[(f * ch + c) * 2] = z.re;
            out[(f * ch + c) * 2 + 1] = z.im;
        }
    }
    out
}

/// Weight with which bin `f` appears in the real reconstruction: the DC bin
/// and (for even lengths) the Nyquist bin appear once, the rest twice.
pub fn bin_weight(f: usize, len: usize) -> f64 {
    if f == 0 || (len.is_multiple_of(2) && f == len / 2) {
        1.0
    } else {
        2.0
    }
}

/// One-sided spectrum `[len/2+1, ch, 2]` to the real signal `[len, ch]`.
/// Imaginary parts of the self-conjugate bins are ignored.
pub fn irfft_time(spec: &[f64], len: usize, ch: usize) -> Vec<f64> {
    let bins = half_bins(len);
    let mut full = vec![Complex64::default(); len * ch];
    for f in 0..bins {
        for c in 0..ch {
            let mut z = Complex64::new(spec[(f * ch + c) * 2], spec[(f * ch + c) * 2 + 1]);
            if bin_weight(f, len) == 1.0 {
                z.im = 0.0;
            }
            full[f * ch + c] = z;
            if f > 0 && f < len - f {
                full[(len - f) * ch + c] = z.conj();
            }
        }
    }
    let time = fft_columns(&full, len, ch, true);
    let scale = 1.0 / len as f64;
    time.iter().map(|z| z.re * scale).collect()
}

/// Adjoint of [`rfft_time`]: maps a spectrum cotangent back to the signal.
pub fn rfft_time_adjoint(gspec: &[f64], len: usize, ch: usize) -> Vec<f64> {
    let bins = half_bins(len);
    let mut corrected = gspec.to_vec();
    for f in 0..bins {
        let wgt = bin_weight(f, len);
        for c in 0..ch {
            corrected[(f * ch + c) * 2] /= wgt;
            corrected[(f * ch + c) * 2 + 1] /= wgt;
        }
    }
    // irfft drops the imaginary part of self-conjugate bins, but their
    // sine terms vanish on the integer grid anyway, so nothing is lost.
    let mut out = irfft_time(&corrected, len, ch);
    out.iter_mut().for_each(|v| *v *= len as f64);
    out
}

/// Adjoint of [`irfft_time`].
pub fn irfft_time_adjoint(gx: &[f64], len: usize, ch: usize) -> Vec<f64> {
    let mut spec = rfft_time(gx, len, ch);
    let bins = half_bins(len);
    for f in 0..bins {
        let wgt = bin_weight(f, len) / len as f64;
        for c in 0..ch {
            spec[(f * ch + c) * 2] *= wgt;
            spec[(f * ch + c) * 2 + 1] *= if bin_weight(f, len) == 1.0 { 0.0 } else { wgt };
        }
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_arithmetic() {
        let g = ConvGeom::new(3, 128, 128, 7, 2, 3).unwrap();
        assert_eq!((g.ho, g.wo), (64, 64));
        let g = ConvGeom::new(8, 16, 16, 5, 1, 2).unwrap();
        assert_eq!((g.ho, g.wo), (16, 16));
    }

    #[test]
    fn rfft_round_trip_odd_and_even() {
        for len in [7usize, 8, 15, 16] {
            let x: Vec<f64> = (0..len * 3).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let back = irfft_time(&rfft_time(&x, len, 3), len, 3);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12, "len {len}");
            }
        }
    }

    #[test]
    fn fft_adjoints_satisfy_inner_product_identity() {
        for len in [6usize, 9] {
            let ch = 2;
            let bins = half_bins(len);
            let x: Vec<f64> = (0..len * ch).map(|i| (i as f64 * 1.3).sin()).collect();
            let s: Vec<f64> = (0..bins * ch * 2).map(|i| (i as f64 * 0.9).cos()).collect();
            // <rfft(x), s> == <x, rfft*(s)>
            let lhs: f64 = rfft_time(&x, len, ch).iter().zip(&s).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&rfft_time_adjoint(&s, len, ch)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "rfft adjoint len {len}: {lhs} vs {rhs}");
            // <irfft(s), x> == <s, irfft*(x)>
            let lhs: f64 = irfft_time(&s, len, ch).iter().zip(&x).map(|(a, b)| a * b).sum();
            let rhs: f64 = s.iter().zip(&irfft_time_adjoint(&x, len, ch)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "irfft adjoint len {len}: {lhs} vs {rhs}");
        }
    }
}
