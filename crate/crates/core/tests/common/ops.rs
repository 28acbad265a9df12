use pulse_ssm::ssm::ScanMode;
use pulse_ssm::tensor::{grad_check_at, BnMode, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Op = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, so kinks at the origin stay out of reach.
pub fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with the last input as the weight tensor.
pub fn weighted<'t>(y: Var<'t>, inputs: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let w = inputs.last().unwrap();
    let w = y.tape().constant(w.value().clone());
    y.mul(&w)?.sum()
}

pub struct Case {
    pub name: &'static str,
    pub op: Op,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    /// number of leading inputs to check; the weight tensor is never checked
    pub checked: usize,
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            op: |_, v| weighted(v[0].add(&v[1])?, v),
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            checked: 2,
        },
        Case {
            name: "sub",
            op: |_, v| weighted(v[0].sub(&v[1])?, v),
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            checked: 2,
        },
        Case {
            name: "mul",
            op: |_, v| weighted(v[0].mul(&v[1])?, v),
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)],
            checked: 2,
        },
        Case {
            name: "scale_add_scalar",
            op: |_, v| weighted(v[0].scale(-1.7)?.add_scalar(0.3)?, v),
            inputs: |r| vec![uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "matmul",
            op: |_, v| weighted(v[0].matmul(&v[1])?, v),
            inputs: |r| vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5, 2], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0)],
            checked: 2,
        },
        Case {
            name: "relu",
            op: |_, v| weighted(v[0].relu()?, v),
            inputs: |r| vec![signed_away_from_zero(r, &[12]), uniform(r, &[12], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "silu",
            op: |_, v| weighted(v[0].silu()?, v),
            inputs: |r| vec![uniform(r, &[10], -3.0, 3.0), uniform(r, &[10], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "sigmoid",
            op: |_, v| weighted(v[0].sigmoid()?, v),
            inputs: |r| vec![uniform(r, &[10], -3.0, 3.0), uniform(r, &[10], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "softplus",
            op: |_, v| weighted(v[0].softplus()?, v),
            inputs: |r| vec![uniform(r, &[10], -3.0, 3.0), uniform(r, &[10], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "exp",
            op: |_, v| weighted(v[0].exp()?, v),
            inputs: |r| vec![uniform(r, &[10], -2.0, 2.0), uniform(r, &[10], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "reshape",
            op: |_, v| weighted(v[0].reshape([2, 6])?, v),
            inputs: |r| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 6], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "conv2d",
            op: |_, v| weighted(v[0].conv2d(&v[1], &v[2], 2, 1)?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[2, 2, 6, 6], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(r, &[3], -0.5, 0.5),
                    uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
                ]
            },
            checked: 3,
        },
        Case {
            name: "depthwise_conv1d",
            op: |_, v| weighted(v[0].depthwise_conv1d(&v[1], &v[2])?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[7, 3], -1.0, 1.0),
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                    uniform(r, &[7, 3], -1.0, 1.0),
                ]
            },
            checked: 3,
        },
        Case {
            name: "batchnorm2d_train",
            op: |_, v| weighted(v[0].batchnorm2d(&v[1], &v[2], BnMode::Train, 1e-5)?.0, v),
            inputs: |r| {
                vec![
                    uniform(r, &[4, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                    uniform(r, &[4, 2, 3, 3], -1.0, 1.0),
                ]
            },
            checked: 3,
        },
        Case {
            name: "batchnorm2d_eval",
            op: |_, v| {
                let y = v[0].batchnorm2d(&v[1], &v[2], BnMode::Eval { mean: &[0.1, -0.2], var: &[0.5, 2.0] }, 1e-5)?.0;
                weighted(y, v)
            },
            inputs: |r| {
                vec![
                    uniform(r, &[1, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                    uniform(r, &[1, 2, 3, 3], -1.0, 1.0),
                ]
            },
            checked: 3,
        },
        Case {
            name: "maxpool2d",
            op: |_, v| weighted(v[0].maxpool2d(2)?, v),
            inputs: |r| vec![uniform(r, &[2, 2, 4, 4], -1.0, 1.0), uniform(r, &[2, 2, 2, 2], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "global_avgpool_spatial",
            op: |_, v| weighted(v[0].global_avgpool_spatial()?, v),
            inputs: |r| vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "l1_normalize_spatial",
            op: |_, v| weighted(v[0].l1_normalize_spatial(4.5)?, v),
            inputs: |r| vec![uniform(r, &[2, 1, 3, 3], 0.1, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "rfft_time_even",
            op: |_, v| weighted(v[0].rfft_time()?, v),
            inputs: |r| vec![uniform(r, &[8, 2], -1.0, 1.0), uniform(r, &[5, 2, 2], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "rfft_time_odd",
            op: |_, v| weighted(v[0].rfft_time()?, v),
            inputs: |r| vec![uniform(r, &[7, 2], -1.0, 1.0), uniform(r, &[4, 2, 2], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "irfft_time_even",
            op: |_, v| weighted(v[0].irfft_time(8)?, v),
            inputs: |r| vec![uniform(r, &[5, 2, 2], -1.0, 1.0), uniform(r, &[8, 2], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "irfft_time_odd",
            op: |_, v| weighted(v[0].irfft_time(7)?, v),
            inputs: |r| vec![uniform(r, &[4, 2, 2], -1.0, 1.0), uniform(r, &[7, 2], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "complex_linear",
            op: |_, v| weighted(v[0].complex_linear(&v[1], &v[2], &v[3], &v[4])?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[4, 3, 2], -1.0, 1.0),
                    uniform(r, &[3, 2], -1.0, 1.0),
                    uniform(r, &[3, 2], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[4, 2, 2], -1.0, 1.0),
                ]
            },
            checked: 5,
        },
        Case {
            name: "layernorm_channels",
            op: |_, v| weighted(v[0].layernorm_channels(&v[1], &v[2], 1e-5)?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[4, 5], -1.0, 1.0),
                    uniform(r, &[5], 0.5, 1.5),
                    uniform(r, &[5], -0.5, 0.5),
                    uniform(r, &[4, 5], -1.0, 1.0),
                ]
            },
            checked: 3,
        },
        Case {
            name: "standardize",
            op: |_, v| weighted(v[0].standardize(1e-8)?, v),
            inputs: |r| vec![uniform(r, &[9], -1.0, 1.0), uniform(r, &[9], -1.0, 1.0)],
            checked: 1,
        },
        Case {
            name: "slice_concat_time",
            op: |_, v| {
                let parts = [v[0].slice_time(3, 6)?, v[0].slice_time(0, 3)?, v[1].slice_time(1, 2)?];
                weighted(Var::concat_time(&parts)?, v)
            },
            inputs: |r| vec![uniform(r, &[6, 2], -1.0, 1.0), uniform(r, &[3, 2], -1.0, 1.0), uniform(r, &[7, 2], -1.0, 1.0)],
            checked: 2,
        },
        Case {
            name: "selective_scan",
            op: |_, v| weighted(v[0].selective_scan(&v[1], &v[2], &v[3], &v[4], &v[5], ScanMode::Sequential)?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[6, 2], -1.0, 1.0),
                    uniform(r, &[6, 2], 0.1, 1.0),
                    uniform(r, &[2, 3], -2.0, -0.3),
                    uniform(r, &[6, 3], -1.0, 1.0),
                    uniform(r, &[6, 3], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[6, 2], -1.0, 1.0),
                ]
            },
            checked: 6,
        },
        Case {
            name: "selective_scan_parallel",
            op: |_, v| weighted(v[0].selective_scan(&v[1], &v[2], &v[3], &v[4], &v[5], ScanMode::Parallel { chunk: 2 })?, v),
            inputs: |r| {
                vec![
                    uniform(r, &[7, 2], -1.0, 1.0),
                    uniform(r, &[7, 2], 0.1, 1.0),
                    uniform(r, &[2, 2], -2.0, -0.3),
                    uniform(r, &[7, 2], -1.0, 1.0),
                    uniform(r, &[7, 2], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                    uniform(r, &[7, 2], -1.0, 1.0),
                ]
            },
            checked: 6,
        },
    ]
}

/// Worst relative error of each op over five seeds, checking every
/// coordinate of the checked inputs.
pub fn worst_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|case| {
            let worst = (0..5u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 11);
                    let inputs = (case.inputs)(&mut rng);
                    assert!(case.checked < inputs.len());
                    let coords: Vec<(usize, usize)> =
                        (0..case.checked).flat_map(|i| (0..inputs[i].numel()).map(move |j| (i, j))).collect();
                    grad_check_at(case.op, &inputs, 1e-5, &coords).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
