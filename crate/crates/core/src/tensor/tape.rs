use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{shape_err, Result, Tensor, TensorError};
use crate::ssm::selective::{self, ScanMode, SelectiveDims};

/// The recorded operation set. Attribute-carrying kinds hold exactly what
/// their backward rule needs besides the input and output values.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    MatMul,
    Relu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Sum,
    Reshape,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    DepthwiseConv1d,
    BatchNorm2d {
        train: bool,
        eps: f64,
    },
    MaxPool2d {
        k: usize,
    },
    GlobalAvgPoolSpatial,
    L1NormalizeSpatial {
        scale: f64,
    },
    RfftTime,
    IrfftTime {
        len: usize,
    },
    ComplexLinear,
    LayerNormChannels {
        eps: f64,
    },
    Standardize {
        eps: f64,
    },
    SliceTime {
        start: usize,
        end: usize,
    },
    ConcatTime,
    SelectiveScan,
    /// A scalar function of one tensor whose gradient was computed alongside
    /// its value (the signal-domain losses).
    ScalarFn,
}

#[derive(Debug)]
enum Saved {
    None,
    /// Per-channel mean and `1/sqrt(var + eps)` used by batch norm.
    Moments {
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Hidden(Vec<f64>),
    Grad(Tensor),
}

#[derive(Debug)]
struct Input {
    node: Option<usize>,
    value: Rc<Tensor>,
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    inputs: Vec<Input>,
    output: Rc<Tensor>,
    saved: Saved,
}

/// A straight-line record of operations for one forward pass.
///
/// Only operations with at least one gradient-requiring input are recorded;
/// everything else is evaluated eagerly and dropped with its `Var`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A tensor value, optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<usize>,
    value: Rc<Tensor>,
}

/// Batch-norm statistics mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed in train mode, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.by_node.get(&id))
    }

    /// Gradient for `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Clears the record so the tape can be reused. Requires that no `Var`
    /// borrowed from it is still alive.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A leaf that requires grad.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.check_live()?;
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind: OpKind::Leaf, inputs: vec![], output: value.clone(), saved: Saved::None });
        Ok(Var { tape: self, node: Some(nodes.len() - 1), value })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var { tape: self, node: None, value: Rc::new(value) }
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed.get() {
            Err(TensorError::Consumed)
        } else {
            Ok(())
        }
    }

    fn record(&self, kind: OpKind, op: &'static str, inputs: &[&Var<'_>], output: Tensor, saved: Saved) -> Result<Var<'_>> {
        self.check_live()?;
        if !output.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let output = Rc::new(output);
        if inputs.iter().all(|v| v.node.is_none()) {
            return Ok(Var { tape: self, node: None, value: output });
        }
        let inputs = inputs.iter().map(|v| Input { node: v.node, value: v.value.clone() }).collect();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { kind, inputs, output: output.clone(), saved });
        Ok(Var { tape: self, node: Some(nodes.len() - 1), value: output })
    }

    /// Reverse pass from a scalar `loss`. Each recorded node is visited once,
    /// in reverse recording order; afterwards the tape is consumed.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        self.check_live()?;
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let root = loss.node.ok_or(TensorError::Detached)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape().to_vec(), 1.0));
        let mut out = Gradients::default();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.kind == OpKind::Leaf {
                out.by_node.insert(id, g);
                continue;
            }
            let input_grads = backward_node(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(src), Some(ig)) = (inp.node, ig) {
                    match &mut grads[src] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        self.consumed.set(true);
        Ok(out)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, kind: OpKind, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        self.tape.record(kind, op, &[self], self.value.map(f), Saved::None)
    }

    fn binary(&self, other: &Var<'t>, kind: OpKind, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        same_shape(op, &self.value, &other.value)?;
        self.tape.record(kind, op, &[self, other], self.value.zip_map(&other.value, f), Saved::None)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Mul, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.unary(OpKind::Scale(s), "scale", |v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        self.unary(OpKind::AddScalar(s), "add_scalar", |v| v + s)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(OpKind::Relu, "relu", |v| v.max(0.0))
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.unary(OpKind::Silu, "silu", |v| v * sigmoid(v))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(OpKind::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(OpKind::Softplus, "softplus", softplus)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(OpKind::Exp, "exp", f64::exp)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.tape.record(OpKind::Sum, "sum", &[self], Tensor::scalar(self.value.sum()), Saved::None)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value).clone().reshape(shape)?;
        self.tape.record(OpKind::Reshape, "reshape", &[self], out, Saved::None)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let [m, k] = self.value.dims::<2>("matmul")?;
        let [k2, n] = rhs.value.dims::<2>("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value.data(), false, rhs.value.data(), false, &mut out, 0.0);
        self.tape.record(OpKind::MatMul, "matmul", &[self, rhs], Tensor::new([m, n], out)?, Saved::None)
    }

    /// 2-D convolution of `[n, cin, h, w]` with `[cout, cin, k, k]` weights and
    /// `[cout]` bias. Output side is `(h + 2 pad - k) / stride + 1`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let [n, cin, h, w] = self.value.dims::<4>("conv2d")?;
        let [cout, wcin, kh, kw] = weight.value.dims::<4>("conv2d")?;
        if wcin != cin || kh != kw || bias.value.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, bias {:?}", self.shape(), weight.shape(), bias.shape()),
            ));
        }
        let geom = ConvGeom::new(cin, h, w, kh, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {kh} does not fit {h}x{w} with pad {pad}")))?;
        let out = kernels::conv2d_forward(self.value.data(), n, &geom, weight.value.data(), bias.value.data(), cout);
        let out = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        self.tape.record(OpKind::Conv2d { stride, pad }, "conv2d", &[self, weight, bias], out, Saved::None)
    }

    /// Causal depthwise convolution over time of `[len, ch]` with `[ch, k]`
    /// taps and `[ch]` bias.
    pub fn depthwise_conv1d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let [len, ch] = self.value.dims::<2>("depthwise_conv1d")?;
        let [wch, k] = weight.value.dims::<2>("depthwise_conv1d")?;
        if wch != ch || bias.value.shape() != [ch] {
            return Err(shape_err("depthwise_conv1d", format!("{:?} with {:?}", self.shape(), weight.shape())));
        }
        let y = kernels::depthwise_conv1d_forward(self.value.data(), len, ch, weight.value.data(), k, bias.value.data());
        self.tape.record(
            OpKind::DepthwiseConv1d,
            "depthwise_conv1d",
            &[self, weight, bias],
            Tensor::new([len, ch], y)?,
            Saved::None,
        )
    }

    /// Per-channel batch norm over `(n, h, w)` of `[n, c, h, w]`.
    pub fn batchnorm2d(&self, gamma: &Var<'t>, beta: &Var<'t>, mode: BnMode<'_>, eps: f64) -> Result<(Var<'t>, Option<BnStats>)> {
        let [n, c, h, w] = self.value.dims::<4>("batchnorm2d")?;
        if gamma.value.shape() != [c] || beta.value.shape() != [c] {
            return Err(shape_err("batchnorm2d", format!("{c} channels, gamma {:?}", gamma.shape())));
        }
        let hw = h * w;
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(TensorError::BatchTooSmall(n));
                }
                let (mean, var) = kernels::channel_moments(self.value.data(), n, c, hw);
                let m = (n * hw) as f64;
                let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
                let stats = BnStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batchnorm2d", "running stats length"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (gamma.value.data(), beta.value.data());
        let x = self.value.data();
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for j in 0..hw {
                    y[off + j] = g[ch] * (x[off + j] - mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let out = Tensor::new([n, c, h, w], y)?;
        let var = self.tape.record(
            OpKind::BatchNorm2d { train, eps },
            "batchnorm2d",
            &[self, gamma, beta],
            out,
            Saved::Moments { mean, inv_std },
        )?;
        Ok((var, stats))
    }

    /// Non-overlapping `k×k` max pooling (stride `k`, no padding).
    pub fn maxpool2d(&self, k: usize) -> Result<Var<'t>> {
        let [n, c, h, w] = self.value.dims::<4>("maxpool2d")?;
        if k == 0 || h < k || w < k {
            return Err(shape_err("maxpool2d", format!("window {k} on {h}x{w}")));
        }
        let y = kernels::maxpool2d_forward(self.value.data(), n * c, h, w, k);
        self.tape.record(OpKind::MaxPool2d { k }, "maxpool2d", &[self], Tensor::new([n, c, h / k, w / k], y)?, Saved::None)
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avgpool_spatial(&self) -> Result<Var<'t>> {
        let [n, c, h, w] = self.value.dims::<4>("global_avgpool_spatial")?;
        let hw = (h * w) as f64;
        let y: Vec<f64> = self.value.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        self.tape.record(OpKind::GlobalAvgPoolSpatial, "global_avgpool_spatial", &[self], Tensor::new([n, c], y)?, Saved::None)
    }

    /// `scale · x / ‖x‖₁` with the norm taken over each `(n, c)` spatial plane.
    pub fn l1_normalize_spatial(&self, scale: f64) -> Result<Var<'t>> {
        let [_, _, h, w] = self.value.dims::<4>("l1_normalize_spatial")?;
        let mut y = self.value.data().to_vec();
        for plane in y.chunks_mut(h * w) {
            let norm: f64 = plane.iter().map(|v| v.abs()).sum();
            plane.iter_mut().for_each(|v| *v *= scale / norm);
        }
        let out = Tensor::new(self.shape().to_vec(), y)?;
        self.tape.record(OpKind::L1NormalizeSpatial { scale }, "l1_normalize_spatial", &[self], out, Saved::None)
    }

    /// Real `[len, ch]` to its one-sided spectrum `[len/2 + 1, ch, 2]`.
    pub fn rfft_time(&self) -> Result<Var<'t>> {
        let [len, ch] = self.value.dims::<2>("rfft_time")?;
        let spec = kernels::rfft_time(self.value.data(), len, ch);
        let out = Tensor::new([kernels::half_bins(len), ch, 2], spec)?;
        self.tape.record(OpKind::RfftTime, "rfft_time", &[self], out, Saved::None)
    }

    /// One-sided spectrum `[len/2 + 1, ch, 2]` back to a real `[len, ch]` signal.
    pub fn irfft_time(&self, len: usize) -> Result<Var<'t>> {
        let [bins, ch, two] = self.value.dims::<3>("irfft_time")?;
        if two != 2 || bins != kernels::half_bins(len) {
            return Err(shape_err("irfft_time", format!("{:?} for length {len}", self.shape())));
        }
        let x = kernels::irfft_time(self.value.data(), len, ch);
        self.tape.record(OpKind::IrfftTime { len }, "irfft_time", &[self], Tensor::new([len, ch], x)?, Saved::None)
    }

    /// Complex channel mixing of a `[bins, cin, 2]` spectrum with weights
    /// shared across bins: `H' = H·W + B` in complex arithmetic.
    pub fn complex_linear(&self, w_re: &Var<'t>, w_im: &Var<'t>, b_re: &Var<'t>, b_im: &Var<'t>) -> Result<Var<'t>> {
        let [bins, cin, two] = self.value.dims::<3>("complex_linear")?;
        let [wc, cout] = w_re.value.dims::<2>("complex_linear")?;
        if two != 2 || wc != cin || w_im.shape() != w_re.shape() || b_re.shape() != [cout] || b_im.shape() != [cout] {
            return Err(shape_err("complex_linear", format!("{:?} with weights {:?}", self.shape(), w_re.shape())));
        }
        let (h_re, h_im) = split_complex(self.value.data());
        let mut o_re = vec![0.0; bins * cout];
        let mut o_im = vec![0.0; bins * cout];
        let (wr, wi) = (w_re.value.data(), w_im.value.data());
        kernels::gemm(bins, cin, cout, &h_re, false, wr, false, &mut o_re, 0.0);
        let neg_im: Vec<f64> = h_im.iter().map(|v| -v).collect();
        kernels::gemm(bins, cin, cout, &neg_im, false, wi, false, &mut o_re, 1.0);
        kernels::gemm(bins, cin, cout, &h_re, false, wi, false, &mut o_im, 0.0);
        kernels::gemm(bins, cin, cout, &h_im, false, wr, false, &mut o_im, 1.0);
        let (br, bi) = (b_re.value.data(), b_im.value.data());
        let mut out = vec![0.0; bins * cout * 2];
        for f in 0..bins {
            for c in 0..cout {
                out[(f * cout + c) * 2] = o_re[f * cout + c] + br[c];
                out[(f * cout + c) * 2 + 1] = o_im[f * cout + c] + bi[c];
            }
        }
        let out = Tensor::new([bins, cout, 2], out)?;
        self.tape.record(OpKind::ComplexLinear, "complex_linear", &[self, w_re, w_im, b_re, b_im], out, Saved::None)
    }

    /// Normalizes each row of `[len, ch]` over its channels, then applies
    /// `gamma`/`beta` (`[ch]` each).
    pub fn layernorm_channels(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let [_, ch] = self.value.dims::<2>("layernorm_channels")?;
        if gamma.shape() != [ch] || beta.shape() != [ch] {
            return Err(shape_err("layernorm_channels", format!("{ch} channels, gamma {:?}", gamma.shape())));
        }
        let (g, b) = (gamma.value.data(), beta.value.data());
        let mut y = self.value.data().to_vec();
        for row in y.chunks_mut(ch) {
            let (mean, inv) = row_moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * (*v - mean) * inv + b[j];
            }
        }
        let out = Tensor::new(self.shape().to_vec(), y)?;
        self.tape.record(OpKind::LayerNormChannels { eps }, "layernorm_channels", &[self, gamma, beta], out, Saved::None)
    }

    /// Zero mean, unit variance over all elements; `eps` guards constant input.
    pub fn standardize(&self, eps: f64) -> Result<Var<'t>> {
        let mut y = self.value.data().to_vec();
        let (mean, inv) = row_moments(&y, eps);
        y.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        let out = Tensor::new(self.shape().to_vec(), y)?;
        self.tape.record(OpKind::Standardize { eps }, "standardize", &[self], out, Saved::None)
    }

    /// Rows `start..end` along the leading (time) axis.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value.slice_rows(start, end)?;
        self.tape.record(OpKind::SliceTime { start, end }, "slice_time", &[self], out, Saved::None)
    }

    /// Concatenation along the leading (time) axis.
    pub fn concat_time(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err("concat_time", "no parts"))?;
        let values: Vec<&Tensor> = parts.iter().map(|p| &*p.value).collect();
        let out = Tensor::concat_rows(&values)?;
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        first.tape.record(OpKind::ConcatTime, "concat_time", &refs, out, Saved::None)
    }

    /// Selective (input-dependent) diagonal state-space scan.
    ///
    /// `self` is the input `u: [len, ch]`, `delta: [len, ch]` the positive time
    /// steps, `a: [ch, state]` the continuous diagonal evolution, `b`, `c`:
    /// `[len, state]`, and `d: [ch]` the skip coefficients. Discretization is
    /// zero-order hold; the state starts at zero.
    pub fn selective_scan(
        &self,
        delta: &Var<'t>,
        a: &Var<'t>,
        b: &Var<'t>,
        c: &Var<'t>,
        d: &Var<'t>,
        mode: ScanMode,
    ) -> Result<Var<'t>> {
        let [len, ch] = self.value.dims::<2>("selective_scan")?;
        let [ach, state] = a.value.dims::<2>("selective_scan")?;
        if delta.shape() != [len, ch] || ach != ch || b.shape() != [len, state] || c.shape() != [len, state] || d.shape() != [ch]
        {
            return Err(shape_err(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                    self.shape(),
                    delta.shape(),
                    a.shape(),
                    b.shape(),
                    c.shape(),
                    d.shape()
                ),
            ));
        }
        let dims = SelectiveDims { len, ch, state };
        let (y, hidden) = selective::forward(
            dims,
            self.value.data(),
            delta.value.data(),
            a.value.data(),
            b.value.data(),
            c.value.data(),
            d.value.data(),
            mode,
        );
        let out = Tensor::new([len, ch], y)?;
        let saved = if [self, delta, a, b, c, d].iter().any(|v| v.requires_grad()) { Saved::Hidden(hidden) } else { Saved::None };
        self.tape.record(OpKind::SelectiveScan, "selective_scan", &[self, delta, a, b, c, d], out, saved)
    }

    /// Records a scalar function of `self` whose value and gradient are
    /// computed together by `f`.
    pub fn scalar_fn<E>(&self, f: impl FnOnce(&Tensor) -> Result<(f64, Tensor), E>) -> Result<Var<'t>, E>
    where
        E: From<TensorError>,
    {
        let (value, grad) = f(&self.value)?;
        same_shape("scalar_fn", &self.value, &grad)?;
        Ok(self.tape.record(OpKind::ScalarFn, "scalar_fn", &[self], Tensor::scalar(value), Saved::Grad(grad))?)
    }
}

fn split_complex(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (z.iter().step_by(2).copied().collect(), z.iter().skip(1).step_by(2).copied().collect())
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Backward of `y = (x - mean) · inv` for one normalization group, given
/// `gxhat = dL/dxhat`.
fn norm_group_backward(x: &[f64], gxhat: &[f64], eps: f64, gx: &mut [f64]) {
    let (mean, inv) = row_moments(x, eps);
    let n = x.len() as f64;
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv).collect();
    let mg = gxhat.iter().sum::<f64>() / n;
    let mgx = gxhat.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / n;
    for i in 0..x.len() {
        gx[i] = inv * (gxhat[i] - mg - xhat[i] * mgx);
    }
}

fn backward_node(node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &*i.value).collect();
    let want = |i: usize| node.inputs[i].node.is_some();
    let gd = g.data();
    let t = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data);
    let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Result<Vec<Option<Tensor>>> {
        let x = ins[0].data();
        let y = node.output.data();
        Ok(vec![Some(t(ins[0].shape(), (0..x.len()).map(|i| f(x[i], y[i], gd[i])).collect())?)])
    };

    Ok(match &node.kind {
        OpKind::Leaf => vec![],
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
        OpKind::Mul => vec![want(0).then(|| g.zip_map(ins[1], |a, b| a * b)), want(1).then(|| g.zip_map(ins[0], |a, b| a * b))],
        OpKind::Scale(s) => vec![Some(g.map(|v| v * s))],
        OpKind::AddScalar(_) | OpKind::Reshape => vec![Some(t(ins[0].shape(), gd.to_vec())?)],
        OpKind::Relu => elementwise(&|x, _, g| if x > 0.0 { g } else { 0.0 })?,
        OpKind::Silu => elementwise(&|x, _, g| {
            let s = sigmoid(x);
            g * (s + x * s * (1.0 - s))
        })?,
        OpKind::Sigmoid => elementwise(&|_, y, g| g * y * (1.0 - y))?,
        OpKind::Softplus => elementwise(&|x, _, g| g * sigmoid(x))?,
        OpKind::Exp => elementwise(&|_, y, g| g * y)?,
        OpKind::Sum => vec![Some(Tensor::full(ins[0].shape().to_vec(), gd[0]))],
        OpKind::MatMul => {
            let [m, k] = ins[0].dims::<2>("matmul")?;
            let [_, n] = ins[1].dims::<2>("matmul")?;
            let ga = want(0).then(|| {
                let mut out = vec![0.0; m * k];
                kernels::gemm(m, n, k, gd, false, ins[1].data(), true, &mut out, 0.0);
                out
            });
            let gb = want(1).then(|| {
                let mut out = vec![0.0; k * n];
                kernels::gemm(k, m, n, ins[0].data(), true, gd, false, &mut out, 0.0);
                out
            });
            vec![ga.map(|d| t(&[m, k], d)).transpose()?, gb.map(|d| t(&[k, n], d)).transpose()?]
        }
        OpKind::Conv2d { stride, pad } => {
            let [n, cin, h, w] = ins[0].dims::<4>("conv2d")?;
            let [cout, _, k, _] = ins[1].dims::<4>("conv2d")?;
            let geom = ConvGeom::new(cin, h, w, k, *stride, *pad).expect("validated in forward");
            let (gx, gw, gb) = kernels::conv2d_backward(ins[0].data(), n, &geom, ins[1].data(), cout, gd, want(0));
            vec![want(0).then(|| t(ins[0].shape(), gx)).transpose()?, Some(t(ins[1].shape(), gw)?), Some(t(ins[2].shape(), gb)?)]
        }
        OpKind::DepthwiseConv1d => {
            let [len, ch] = ins[0].dims::<2>("depthwise_conv1d")?;
            let [_, k] = ins[1].dims::<2>("depthwise_conv1d")?;
            let (gx, gw, gb) = kernels::depthwise_conv1d_backward(ins[0].data(), len, ch, ins[1].data(), k, gd);
            vec![Some(t(ins[0].shape(), gx)?), Some(t(ins[1].shape(), gw)?), Some(t(ins[2].shape(), gb)?)]
        }
        OpKind::BatchNorm2d { train, .. } => {
            let Saved::Moments { mean, inv_std } = &node.saved else { unreachable!("batchnorm saves moments") };
            let [n, c, h, w] = ins[0].dims::<4>("batchnorm2d")?;
            let hw = h * w;
            let m = (n * hw) as f64;
            let x = ins[0].data();
            let gamma = ins[1].data();
            let mut gx = vec![0.0; x.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in 0..hw {
                        let xhat = (x[off + j] - mean[ch]) * inv_std[ch];
                        sg += gd[off + j];
                        sgx += gd[off + j] * xhat;
                    }
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
                let scale = gamma[ch] * inv_std[ch];
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in 0..hw {
                        gx[off + j] = if *train {
                            let xhat = (x[off + j] - mean[ch]) * inv_std[ch];
                            scale * (gd[off + j] - sg / m - xhat * sgx / m)
                        } else {
                            scale * gd[off + j]
                        };
                    }
                }
            }
            vec![Some(t(ins[0].shape(), gx)?), Some(t(&[c], ggamma)?), Some(t(&[c], gbeta)?)]
        }
        OpKind::MaxPool2d { k } => {
            let [n, c, h, w] = ins[0].dims::<4>("maxpool2d")?;
            vec![Some(t(ins[0].shape(), kernels::maxpool2d_backward(ins[0].data(), n * c, h, w, *k, gd))?)]
        }
        OpKind::GlobalAvgPoolSpatial => {
            let [_, _, h, w] = ins[0].dims::<4>("global_avgpool_spatial")?;
            let hw = h * w;
            let gx: Vec<f64> = (0..ins[0].numel()).map(|i| gd[i / hw] / hw as f64).collect();
            vec![Some(t(ins[0].shape(), gx)?)]
        }
        OpKind::L1NormalizeSpatial { scale } => {
            let [_, _, h, w] = ins[0].dims::<4>("l1_normalize_spatial")?;
            let hw = h * w;
            let x = ins[0].data();
            let mut gx = vec![0.0; x.len()];
            for p in 0..x.len() / hw {
                let xs = &x[p * hw..(p + 1) * hw];
                let gs = &gd[p * hw..(p + 1) * hw];
                let norm: f64 = xs.iter().map(|v| v.abs()).sum();
                let dot: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..hw {
                    gx[p * hw + j] = scale * (gs[j] / norm - xs[j].signum() * dot / (norm * norm));
                }
            }
            vec![Some(t(ins[0].shape(), gx)?)]
        }
        OpKind::RfftTime => {
            let [len, ch] = ins[0].dims::<2>("rfft_time")?;
            vec![Some(t(ins[0].shape(), kernels::rfft_time_adjoint(gd, len, ch))?)]
        }
        OpKind::IrfftTime { len } => {
            let [_, ch, _] = ins[0].dims::<3>("irfft_time")?;
            vec![Some(t(ins[0].shape(), kernels::irfft_time_adjoint(gd, *len, ch))?)]
        }
        OpKind::ComplexLinear => {
            let [bins, cin, _] = ins[0].dims::<3>("complex_linear")?;
            let [_, cout] = ins[1].dims::<2>("complex_linear")?;
            let (h_re, h_im) = split_complex(ins[0].data());
            let (g_re, g_im) = split_complex(gd);
            let (wr, wi) = (ins[1].data(), ins[2].data());
            let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
            // dH_re = g_re W_reᵀ + g_im W_imᵀ ; dH_im = -g_re W_imᵀ + g_im W_reᵀ
            let mut gh_re = vec![0.0; bins * cin];
            let mut gh_im = vec![0.0; bins * cin];
            kernels::gemm(bins, cout, cin, &g_re, false, wr, true, &mut gh_re, 0.0);
            kernels::gemm(bins, cout, cin, &g_im, false, wi, true, &mut gh_re, 1.0);
            kernels::gemm(bins, cout, cin, &neg(&g_re), false, wi, true, &mut gh_im, 0.0);
            kernels::gemm(bins, cout, cin, &g_im, false, wr, true, &mut gh_im, 1.0);
            let mut gh = vec![0.0; bins * cin * 2];
            for i in 0..bins * cin {
                gh[2 * i] = gh_re[i];
                gh[2 * i + 1] = gh_im[i];
            }
            // dW_re = H_reᵀ g_re + H_imᵀ g_im ; dW_im = -H_imᵀ g_re + H_reᵀ g_im
            let mut gw_re = vec![0.0; cin * cout];
            let mut gw_im = vec![0.0; cin * cout];
            kernels::gemm(cin, bins, cout, &h_re, true, &g_re, false, &mut gw_re, 0.0);
            kernels::gemm(cin, bins, cout, &h_im, true, &g_im, false, &mut gw_re, 1.0);
            kernels::gemm(cin, bins, cout, &neg(&h_im), true, &g_re, false, &mut gw_im, 0.0);
            kernels::gemm(cin, bins, cout, &h_re, true, &g_im, false, &mut gw_im, 1.0);
            let mut gb_re = vec![0.0; cout];
            let mut gb_im = vec![0.0; cout];
            for f in 0..bins {
                for c in 0..cout {
                    gb_re[c] += g_re[f * cout + c];
                    gb_im[c] += g_im[f * cout + c];
                }
            }
            vec![
                Some(t(ins[0].shape(), gh)?),
                Some(t(ins[1].shape(), gw_re)?),
                Some(t(ins[2].shape(), gw_im)?),
                Some(t(&[cout], gb_re)?),
                Some(t(&[cout], gb_im)?),
            ]
        }
        OpKind::LayerNormChannels { eps } => {
            let [_, ch] = ins[0].dims::<2>("layernorm_channels")?;
            let x = ins[0].data();
            let gamma = ins[1].data();
            let mut gx = vec![0.0; x.len()];
            let mut ggamma = vec![0.0; ch];
            let mut gbeta = vec![0.0; ch];
            let mut gxhat = vec![0.0; ch];
            for (r, row) in x.chunks(ch).enumerate() {
                let grow = &gd[r * ch..(r + 1) * ch];
                let (mean, inv) = row_moments(row, *eps);
                for j in 0..ch {
                    ggamma[j] += grow[j] * (row[j] - mean) * inv;
                    gbeta[j] += grow[j];
                    gxhat[j] = grow[j] * gamma[j];
                }
                norm_group_backward(row, &gxhat, *eps, &mut gx[r * ch..(r + 1) * ch]);
            }
            vec![Some(t(ins[0].shape(), gx)?), Some(t(&[ch], ggamma)?), Some(t(&[ch], gbeta)?)]
        }
        OpKind::Standardize { eps } => {
            let mut gx = vec![0.0; gd.len()];
            norm_group_backward(ins[0].data(), gd, *eps, &mut gx);
            vec![Some(t(ins[0].shape(), gx)?)]
        }
        OpKind::SliceTime { start, end } => {
            let rows = ins[0].shape()[0];
            let stride = ins[0].numel() / rows;
            let mut gx = vec![0.0; ins[0].numel()];
            gx[start * stride..end * stride].copy_from_slice(gd);
            vec![Some(t(ins[0].shape(), gx)?)]
        }
        OpKind::ConcatTime => {
            let mut off = 0;
            ins.iter()
                .map(|p| {
                    let n = p.numel();
                    let part = t(p.shape(), gd[off..off + n].to_vec());
                    off += n;
                    part.map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        }
        OpKind::SelectiveScan => {
            let Saved::Hidden(hidden) = &node.saved else { unreachable!("selective scan saves states") };
            let [len, ch] = ins[0].dims::<2>("selective_scan")?;
            let [_, state] = ins[2].dims::<2>("selective_scan")?;
            let dims = SelectiveDims { len, ch, state };
            let gr = selective::backward(
                dims,
                ins[0].data(),
                ins[1].data(),
                ins[2].data(),
                ins[3].data(),
                ins[4].data(),
                ins[5].data(),
                hidden,
                gd,
            );
            vec![
                Some(t(ins[0].shape(), gr.u)?),
                Some(t(ins[1].shape(), gr.delta)?),
                Some(t(ins[2].shape(), gr.a)?),
                Some(t(ins[3].shape(), gr.b)?),
                Some(t(ins[4].shape(), gr.c)?),
                Some(t(ins[5].shape(), gr.d)?),
            ]
        }
        OpKind::ScalarFn => {
            let Saved::Grad(grad) = &node.saved else { unreachable!("scalar_fn saves its gradient") };
            vec![Some(grad.map(|v| v * gd[0]))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 - 2.5));
        let eye = tape.constant(Tensor::eye(3));
        assert_eq!(eye.matmul(&x).unwrap().value(), x.value());
    }

    #[test]
    fn linear_and_square_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let loss = w.scale(2.0).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).item(), 2.0);

        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        assert_eq!(tape.backward(&loss).unwrap().wrt(&w).item(), 6.0);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([2])).unwrap();
        let y = w.scale(2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(TensorError::NonScalarLoss(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(&c), Err(TensorError::Detached)));
        let loss = y.sum().unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(TensorError::Consumed)));
        assert!(matches!(w.relu(), Err(TensorError::Consumed)));
    }

    #[test]
    fn reset_makes_tape_reusable() {
        let mut tape = Tape::new();
        {
            let w = tape.leaf(Tensor::scalar(1.0)).unwrap();
            let loss = w.sum().unwrap();
            tape.backward(&loss).unwrap();
        }
        tape.reset();
        assert!(tape.is_empty() && !tape.is_consumed());
        let w = tape.leaf(Tensor::scalar(1.0)).unwrap();
        assert!(w.requires_grad());
    }

    #[test]
    fn constants_are_not_recorded() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones([4]));
        let b = a.scale(3.0).unwrap().relu().unwrap();
        assert!(!b.requires_grad());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full([2], 800.0));
        assert!(matches!(a.exp(), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(x.batchnorm2d(&g, &b, BnMode::Train, 1e-5), Err(TensorError::BatchTooSmall(1))));
    }

    #[test]
    fn conv2d_output_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 128, 128]));
        let w = tape.constant(Tensor::zeros([4, 3, 7, 7]));
        let b = tape.constant(Tensor::zeros([4]));
        assert_eq!(x.conv2d(&w, &b, 2, 3).unwrap().shape(), &[1, 4, 64, 64]);
    }
}
