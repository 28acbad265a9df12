mod common;

use common::ops::{uniform, weighted, worst_errors};
use pulse_ssm::tensor::{grad_check, grad_check_at, BnMode, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_passes_grad_check_on_five_seeds() {
    let failures: Vec<String> =
        worst_errors().into_iter().filter(|(_, e)| e.is_nan() || *e > 1e-5).map(|(n, e)| format!("{n}: {e:.3e}")).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn linear_layer_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs =
        vec![uniform(&mut rng, &[4, 4], -1.0, 1.0), uniform(&mut rng, &[4, 4], -1.0, 1.0), uniform(&mut rng, &[1, 4], -1.0, 1.0)];
    let err = grad_check::<TensorError>(
        |t, v| {
            let ones = t.constant(Tensor::ones([4, 1]));
            let y = v[0].matmul(&v[1])?.add(&ones.matmul(&v[2])?)?;
            y.mul(&y)?.sum()
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn spectral_chain_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        uniform(&mut rng, &[16, 3], -1.0, 1.0),
        uniform(&mut rng, &[3, 3], -1.0, 1.0),
        uniform(&mut rng, &[3, 3], -1.0, 1.0),
        uniform(&mut rng, &[3], -1.0, 1.0),
        uniform(&mut rng, &[3], -1.0, 1.0),
        uniform(&mut rng, &[16, 3], -1.0, 1.0),
    ];
    let coords: Vec<(usize, usize)> = (0..5).flat_map(|i| (0..inputs[i].numel()).map(move |j| (i, j))).collect();
    let err = grad_check_at::<TensorError>(
        |_, v| weighted(v[0].rfft_time()?.complex_linear(&v[1], &v[2], &v[3], &v[4])?.irfft_time(16)?, v),
        &inputs,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn rfft_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for len in [2, 8, 30, 160] {
        let x = uniform(&mut rng, &[len, 4], -3.0, 3.0);
        let tape = Tape::new();
        let back = tape.constant(x.clone()).rfft_time().unwrap().irfft_time(len).unwrap();
        assert!(back.value().max_abs_diff(&x) <= 1e-9, "len {len}");
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mean, var) = ([0.3, -1.0, 2.0], [1.5, 0.2, 4.0]);
    let gamma = uniform(&mut rng, &[3], 0.5, 2.0);
    let beta = uniform(&mut rng, &[3], -1.0, 1.0);
    let x1 = uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let x2 = uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let tape = Tape::new();
    let bn = |x: &Tensor| {
        tape.constant(x.clone())
            .batchnorm2d(
                &tape.constant(gamma.clone()),
                &tape.constant(beta.clone()),
                BnMode::Eval { mean: &mean, var: &var },
                1e-5,
            )
            .unwrap()
            .0
            .value()
            .clone()
    };
    let (a, b) = (0.3, 0.7);
    let mix = x1.zip_map(&x2, |p, q| a * p + b * q);
    let lhs = bn(&mix);
    let rhs = bn(&x1).zip_map(&bn(&x2), |p, q| a * p + b * q);
    assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
}

#[test]
fn concat_of_slices_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = uniform(&mut rng, &[23, 3], -1.0, 1.0);
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    for cuts in [vec![0, 23], vec![0, 1, 23], vec![0, 5, 6, 17, 23], (0..=23).collect::<Vec<_>>()] {
        let parts: Vec<_> = cuts.windows(2).map(|w| v.slice_time(w[0], w[1]).unwrap()).collect();
        assert_eq!(Var::concat_time(&parts).unwrap().value(), &x);
    }
}
