//! Finite-difference checks of every differentiable operation in 64-bit.

use pulsemae::params::{Bound, ParamStore};
use pulsemae::ssm::{scan_core, selective_scan, Direction, MambaBlock, SsmParams};
use pulsemae::tensor::gradcheck::{finite_diff_check, random_input};
use pulsemae::{RngStream, Tensor};

const TOL: f64 = 1e-4;
const SCAN_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn dims(rng: &mut RngStream, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(5)).collect()
}

#[test]
fn elementwise_binary_with_broadcast() {
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, 1);
        let shape = dims(&mut rng, 3);
        let tail = shape[1..].to_vec();
        let a = random_input(&shape, -2.0, 2.0, &mut rng);
        let b = random_input(&tail, 0.5, 2.0, &mut rng);
        let r = finite_diff_check(
            |_, v| v[0].add(v[1])?.mul(v[0])?.sub(v[1])?.div(v[1]),
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn unary_ops() {
    for seed in 0..4 {
        let mut rng = RngStream::new(seed, 2);
        let shape = dims(&mut rng, 2);
        let x = random_input(&shape, -3.0, 3.0, &mut rng);
        let pos = random_input(&shape, 0.2, 3.0, &mut rng);
        for (name, r) in [
            ("exp", finite_diff_check(|_, v| Ok(v[0].exp()), &[x.clone()], EPS)),
            ("log", finite_diff_check(|_, v| Ok(v[0].log()), &[pos.clone()], EPS)),
            ("sqrt", finite_diff_check(|_, v| Ok(v[0].sqrt()), &[pos.clone()], EPS)),
            ("sigmoid", finite_diff_check(|_, v| Ok(v[0].sigmoid()), &[x.clone()], EPS)),
            ("silu", finite_diff_check(|_, v| Ok(v[0].silu()), &[x.clone()], EPS)),
            ("softplus", finite_diff_check(|_, v| Ok(v[0].softplus()), &[x.clone()], EPS)),
            ("tanh", finite_diff_check(|_, v| Ok(v[0].tanh()), &[x.clone()], EPS)),
            ("sqr", finite_diff_check(|_, v| Ok(v[0].sqr()), &[x.clone()], EPS)),
            (
                "clamp",
                finite_diff_check(|_, v| Ok(v[0].scale(4.0).clamp(-10.0, 10.0)), &[x.clone()], EPS),
            ),
        ] {
            let r = r.unwrap();
            assert!(r.max_rel_err < TOL, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn matmul_plain_and_batched() {
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, 3);
        let (m, k, n) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let a = random_input(&[2, m, k], -1.0, 1.0, &mut rng);
        let w = random_input(&[k, n], -1.0, 1.0, &mut rng);
        let r = finite_diff_check(|_, v| v[0].matmul(v[1]), &[a.clone(), w], EPS).unwrap();
        assert!(r.max_rel_err < TOL, "2d rhs seed {seed}: {r:?}");
        let b = random_input(&[2, k, n], -1.0, 1.0, &mut rng);
        let r = finite_diff_check(|_, v| v[0].matmul(v[1]), &[a.clone(), b], EPS).unwrap();
        assert!(r.max_rel_err < TOL, "batched seed {seed}: {r:?}");
        let bb = random_input(&[1, k, n], -1.0, 1.0, &mut rng);
        let r = finite_diff_check(|_, v| v[0].matmul(v[1]), &[a, bb], EPS).unwrap();
        assert!(r.max_rel_err < TOL, "broadcast batch seed {seed}: {r:?}");
    }
}

#[test]
fn reductions_and_shapes() {
    for seed in 0..4 {
        let mut rng = RngStream::new(seed, 4);
        let shape = dims(&mut rng, 3);
        let x = random_input(&shape, -1.0, 1.0, &mut rng);
        let checks = [
            finite_diff_check(|_, v| v[0].sum_axes(&[1], false), &[x.clone()], EPS),
            finite_diff_check(|_, v| v[0].mean_axes(&[0, 2], true), &[x.clone()], EPS),
            finite_diff_check(|_, v| Ok(v[0].mean()), &[x.clone()], EPS),
            finite_diff_check(|_, v| v[0].narrow(2, 0, 1), &[x.clone()], EPS),
            finite_diff_check(
                |_, v| pulsemae::Var::concat(&[v[0], v[0].sqr()], 1),
                &[x.clone()],
                EPS,
            ),
            finite_diff_check(
                |_, v| {
                    let s = v[0].shape();
                    v[0].sum_axes(&[0], true)?.broadcast_to(&s)
                },
                &[x.clone()],
                EPS,
            ),
        ];
        for r in checks {
            let r = r.unwrap();
            assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn softmax_log_softmax_layer_norm() {
    for seed in 0..5 {
        let mut rng = RngStream::new(seed, 5);
        let shape = [1 + rng.below(4), 2 + rng.below(6)];
        let x = random_input(&shape, -2.0, 2.0, &mut rng);
        for axis in 0..2 {
            let r = finite_diff_check(|_, v| v[0].softmax(axis), &[x.clone()], EPS).unwrap();
            assert!(r.max_rel_err < TOL, "softmax seed {seed}: {r:?}");
            let r = finite_diff_check(|_, v| v[0].log_softmax(axis), &[x.clone()], EPS).unwrap();
            assert!(r.max_rel_err < TOL, "log_softmax seed {seed}: {r:?}");
        }
        let gain = random_input(&[shape[1]], 0.5, 1.5, &mut rng);
        let bias = random_input(&[shape[1]], -0.5, 0.5, &mut rng);
        let r = finite_diff_check(
            |_, v| v[0].layer_norm(1, v[1], v[2], 1e-5),
            &[x.clone(), gain, bias],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_err < TOL, "layer_norm seed {seed}: {r:?}");
        let gain0 = random_input(&[shape[0]], 0.5, 1.5, &mut rng);
        let bias0 = random_input(&[shape[0]], -0.5, 0.5, &mut rng);
        if shape[0] > 2 {
            let r = finite_diff_check(
                |_, v| v[0].layer_norm(0, v[1], v[2], 1e-5),
                &[x, gain0, bias0],
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_err < TOL, "layer_norm axis0 seed {seed}: {r:?}");
        }
    }
}

#[test]
fn softmax_cross_entropy_composite() {
    let mut rng = RngStream::new(9, 6);
    let logits = random_input(&[3, 5], -2.0, 2.0, &mut rng);
    let target = Tensor::from_fn(&[3, 5], |i| if i % 5 == i / 5 { 1.0 } else { 0.0 });
    let r = finite_diff_check(
        |g, v| {
            let t = g.constant(target.clone());
            Ok(v[0].log_softmax(1)?.mul(t)?.sum().neg())
        },
        &[logits],
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn pearson_gradient() {
    for seed in 0..6 {
        let mut rng = RngStream::new(seed, 7);
        let n = 2 + rng.below(7);
        let a = random_input(&[2, n], -1.0, 1.0, &mut rng);
        let b = random_input(&[2, n], -1.0, 1.0, &mut rng);
        let r = finite_diff_check(|_, v| v[0].pearson(v[1], 1e-8), &[a, b], EPS).unwrap();
        assert!(r.max_rel_err < TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn gather_scatter_gradient() {
    let mut rng = RngStream::new(3, 8);
    let x = random_input(&[2, 5, 3], -1.0, 1.0, &mut rng);
    let src = random_input(&[2, 2, 3], -1.0, 1.0, &mut rng);
    let idx = vec![vec![4, 1], vec![0, 2]];
    let r = finite_diff_check(
        |_, v| v[0].scatter_rows(v[1], &idx)?.sqr().gather_rows(&[vec![1, 2, 3], vec![0, 1, 4]]),
        &[x, src],
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn scan_core_gradient() {
    for (seed, dir) in [(0, Direction::Forward), (1, Direction::Backward), (2, Direction::Forward)] {
        let mut rng = RngStream::new(seed, 9);
        let (b, l, e, s) = (1 + rng.below(2), 2 + rng.below(6), 1 + rng.below(4), 1 + rng.below(3));
        let x = random_input(&[b, l, e], -1.0, 1.0, &mut rng);
        let delta = random_input(&[b, l, e], 0.05, 1.0, &mut rng);
        let a = random_input(&[e, s], -2.0, -0.2, &mut rng);
        let bm = random_input(&[b, l, s], -1.0, 1.0, &mut rng);
        let cm = random_input(&[b, l, s], -1.0, 1.0, &mut rng);
        let r = finite_diff_check(
            |_, v| scan_core(v[0], v[1], v[2], v[3], v[4], dir),
            &[x, delta, a, bm, cm],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_err < SCAN_TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn selective_scan_gradient_wrt_params() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngStream::new(4, 10);
    let ssm = SsmParams::init(&mut store, "s", 3, 2, &mut rng);
    let x = random_input(&[2, 5, 3], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let r = finite_diff_check(
        |_, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            selective_scan(v[0], &ssm, &bound, Direction::Forward)
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_err < SCAN_TOL, "{r:?}");
}

#[test]
fn mamba_block_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = RngStream::new(6, 11);
    let block = MambaBlock::init(&mut store, "b", 4, 4, 2, &mut rng);
    let x = random_input(&[1, 4, 4], -1.0, 1.0, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    let r = finite_diff_check(
        |_, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            block.forward(&bound, v[0])
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_err < SCAN_TOL, "{r:?}");
}
