//! The registry of finite-difference gradient checks: every differentiable
//! primitive of the tape plus the model-level composites.

use crate::amn::{mask_log_prob, policy_loss, Amn, AmnConfig};
use crate::error::Result;
use crate::mask::VisibilityMask;
use crate::params::{Bound, ParamStore};
use crate::ssm::{scan_core, selective_scan, Direction, MambaBlock, SsmParams};
use crate::student::{Student, StudentConfig};
use crate::tensor::gradcheck::{finite_diff_check, random_input, GradCheckReport};
use crate::tensor::{RngStream, Tensor, Var};
use crate::trainer::losses::{distill_loss, recon_loss};
use crate::video::TubeletConfig;

/// Tolerance for plain operations.
pub const TOL: f64 = 1e-4;
/// Tolerance for anything containing a selective scan.
pub const SCAN_TOL: f64 = 1e-3;
/// Central-difference step.
pub const EPS: f64 = 1e-5;

type Check = fn(u64) -> Result<GradCheckReport>;

/// A named check with its acceptance threshold.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub check: Check,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rng(seed: u64, case: u64) -> RngStream {
    RngStream::new(seed, 0x6_0000 + case)
}

fn dims(rng: &mut RngStream, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

/// Values bounded away from zero, with random sign.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.range(0.2, 2.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

fn unary(seed: u64, case: u64, positive: bool, op: for<'g> fn(Var<'g, f64>) -> Var<'g, f64>) -> Result<GradCheckReport> {
    let mut r = rng(seed, case);
    let shape = dims(&mut r, 2);
    let x = if positive {
        random_input(&shape, 0.2, 3.0, &mut r)
    } else {
        random_input(&shape, -3.0, 3.0, &mut r)
    };
    finite_diff_check(move |_, v| Ok(op(v[0])), &[x], EPS)
}

fn binary(seed: u64, case: u64, op: for<'g> fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>) -> Result<GradCheckReport> {
    let mut r = rng(seed, case);
    let shape = dims(&mut r, 3);
    let a = random_input(&shape, -2.0, 2.0, &mut r);
    // the second operand broadcasts over the leading axis
    let b = random_input(&shape[1..], 0.5, 2.0, &mut r);
    finite_diff_check(move |_, v| op(v[0], v[1]), &[a, b], EPS)
}

fn with_params(store: &ParamStore<f64>, first: Vec<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut inputs = first;
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    inputs
}

fn tiny_tubelet() -> TubeletConfig {
    TubeletConfig {
        t: 2,
        h: 2,
        w: 2,
        channels: 1,
        frames: 8,
        height: 4,
        width: 4,
    }
}

fn tiny_student(seed: u64, store: &mut ParamStore<f64>) -> Result<Student> {
    let cfg = StudentConfig {
        tubelet: tiny_tubelet(),
        embed_dim: 8,
        encoder_blocks: 2,
        decoder_dim: 4,
        decoder_blocks: 1,
        state: 2,
        mlp_hidden: 6,
        dropout: 0.1,
    };
    Student::init(&cfg, store, &mut rng(seed, 100))
}

fn case_add(s: u64) -> Result<GradCheckReport> {
    binary(s, 1, |a, b| a.add(b))
}
fn case_sub(s: u64) -> Result<GradCheckReport> {
    binary(s, 2, |a, b| a.sub(b))
}
fn case_mul(s: u64) -> Result<GradCheckReport> {
    binary(s, 3, |a, b| a.mul(b))
}
fn case_div(s: u64) -> Result<GradCheckReport> {
    binary(s, 4, |a, b| a.div(b))
}
fn case_neg(s: u64) -> Result<GradCheckReport> {
    unary(s, 5, false, |x| x.neg())
}
fn case_exp(s: u64) -> Result<GradCheckReport> {
    unary(s, 6, false, |x| x.exp())
}
fn case_log(s: u64) -> Result<GradCheckReport> {
    unary(s, 7, true, |x| x.log())
}
fn case_sqrt(s: u64) -> Result<GradCheckReport> {
    unary(s, 8, true, |x| x.sqrt())
}
fn case_sqr(s: u64) -> Result<GradCheckReport> {
    unary(s, 9, false, |x| x.sqr())
}
fn case_sigmoid(s: u64) -> Result<GradCheckReport> {
    unary(s, 10, false, |x| x.sigmoid())
}
fn case_silu(s: u64) -> Result<GradCheckReport> {
    unary(s, 11, false, |x| x.silu())
}
fn case_softplus(s: u64) -> Result<GradCheckReport> {
    unary(s, 12, false, |x| x.softplus())
}
fn case_tanh(s: u64) -> Result<GradCheckReport> {
    unary(s, 13, false, |x| x.tanh())
}
fn case_scale(s: u64) -> Result<GradCheckReport> {
    unary(s, 14, false, |x| x.scale(-1.7).add_scalar(0.3))
}

fn kinked(seed: u64, case: u64, op: for<'g> fn(Var<'g, f64>) -> Var<'g, f64>) -> Result<GradCheckReport> {
    let mut r = rng(seed, case);
    let shape = dims(&mut r, 2);
    let x = away_from_zero(&shape, &mut r);
    finite_diff_check(move |_, v| Ok(op(v[0])), &[x], EPS)
}
fn case_abs(s: u64) -> Result<GradCheckReport> {
    kinked(s, 15, |x| x.abs())
}
fn case_relu(s: u64) -> Result<GradCheckReport> {
    kinked(s, 16, |x| x.relu())
}
fn case_clamp(s: u64) -> Result<GradCheckReport> {
    // bounds at ±1.1 sit between the sampled magnitudes ±[0.2, 2]
    kinked(s, 17, |x| x.clamp(-1.1, 1.1))
}

fn case_matmul(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 18);
    let (m, k, n) = (1 + r.below(5), 1 + r.below(5), 1 + r.below(5));
    let a = random_input(&[2, m, k], -1.0, 1.0, &mut r);
    let w = random_input(&[k, n], -1.0, 1.0, &mut r);
    let b = random_input(&[2, k, n], -1.0, 1.0, &mut r);
    finite_diff_check(|_, v| v[0].matmul(v[1])?.add(v[0].matmul(v[2])?), &[a, w, b], EPS)
}

fn case_reduce(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 19);
    let shape = dims(&mut r, 3);
    let x = random_input(&shape, -1.0, 1.0, &mut r);
    finite_diff_check(
        |_, v| {
            let a = v[0].sum_axes(&[1], true)?.broadcast_to(&v[0].shape())?;
            let b = v[0].mean_axes(&[0, 2], true)?.broadcast_to(&v[0].shape())?;
            a.mul(b)?.add(v[0].sqr())?.sum().add(v[0].mean().sqr())
        },
        &[x],
        EPS,
    )
}

fn case_shape(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 20);
    let shape = [1 + r.below(3), 2 + r.below(3), 1 + r.below(3)];
    let x = random_input(&shape, -1.0, 1.0, &mut r);
    finite_diff_check(
        |_, v| {
            let s = v[0].shape();
            let n = v[0].narrow(1, 1, s[1] - 1)?;
            let c = Var::concat(&[v[0], n.sqr()], 1)?;
            c.reshape(&[s[0], (2 * s[1] - 1) * s[2]])
        },
        &[x],
        EPS,
    )
}

fn case_softmax(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 21);
    let x = random_input(&[1 + r.below(4), 2 + r.below(5)], -2.0, 2.0, &mut r);
    finite_diff_check(|_, v| v[0].softmax(1)?.add(v[0].softmax(0)?), &[x], EPS)
}

fn case_log_softmax(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 22);
    let x = random_input(&[1 + r.below(4), 2 + r.below(5)], -2.0, 2.0, &mut r);
    finite_diff_check(|_, v| v[0].log_softmax(1)?.add(v[0].log_softmax(0)?), &[x], EPS)
}

fn case_layer_norm(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 23);
    let shape = [1 + r.below(3), 2 + r.below(3), 3 + r.below(4)];
    let x = random_input(&shape, -2.0, 2.0, &mut r);
    let gain = random_input(&[shape[2]], 0.5, 1.5, &mut r);
    let bias = random_input(&[shape[2]], -0.5, 0.5, &mut r);
    finite_diff_check(|_, v| v[0].layer_norm(2, v[1], v[2], 1e-5), &[x, gain, bias], EPS)
}

fn case_dropout(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 24);
    let x = random_input(&dims(&mut r, 2), -1.0, 1.0, &mut r);
    finite_diff_check(
        move |_, v| v[0].sqr().dropout(0.3, &mut RngStream::new(s, 77), true),
        &[x],
        EPS,
    )
}

fn case_pearson(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 25);
    let n = 3 + r.below(8);
    let a = random_input(&[2, n], -1.0, 1.0, &mut r);
    let b = random_input(&[2, n], -1.0, 1.0, &mut r);
    finite_diff_check(|_, v| v[0].pearson(v[1], 1e-8), &[a, b], EPS)
}

fn case_gather_scatter(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 26);
    let n = 3 + r.below(4);
    let x = random_input(&[2, n, 3], -1.0, 1.0, &mut r);
    let src = random_input(&[2, 2, 3], -1.0, 1.0, &mut r);
    let pick = |r: &mut RngStream, k: usize| -> Vec<Vec<usize>> {
        (0..2)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    p.swap(i, r.below(i + 1));
                }
                let mut v = p[..k].to_vec();
                v.sort_unstable();
                v
            })
            .collect()
    };
    let (into, out) = (pick(&mut r, 2), pick(&mut r, n - 1));
    finite_diff_check(
        move |_, v| v[0].scatter_rows(v[1], &into)?.sqr().gather_rows(&out),
        &[x, src],
        EPS,
    )
}

fn case_scan_core(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 27);
    let dir = if s % 2 == 0 { Direction::Forward } else { Direction::Backward };
    let (b, l, e, n) = (1 + r.below(2), 2 + r.below(5), 1 + r.below(3), 1 + r.below(3));
    let x = random_input(&[b, l, e], -1.0, 1.0, &mut r);
    let delta = random_input(&[b, l, e], 0.05, 1.0, &mut r);
    let a = random_input(&[e, n], -2.0, -0.2, &mut r);
    let bm = random_input(&[b, l, n], -1.0, 1.0, &mut r);
    let cm = random_input(&[b, l, n], -1.0, 1.0, &mut r);
    finite_diff_check(
        move |_, v| scan_core(v[0], v[1], v[2], v[3], v[4], dir),
        &[x, delta, a, bm, cm],
        EPS,
    )
}

fn case_selective_scan(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 28);
    let mut store = ParamStore::<f64>::new();
    let ssm = SsmParams::init(&mut store, "s", 3, 2, &mut r);
    let x = random_input(&[2, 2 + r.below(4), 3], -1.0, 1.0, &mut r);
    finite_diff_check(
        |_, v| selective_scan(v[0], &ssm, &Bound::from_vars(v[1..].to_vec()), Direction::Forward),
        &with_params(&store, vec![x]),
        EPS,
    )
}

fn case_mamba_block(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 29);
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::init(&mut store, "b", 4, 4, 2, &mut r);
    let x = random_input(&[1, 2 + r.below(3), 4], -1.0, 1.0, &mut r);
    finite_diff_check(
        |_, v| block.forward(&Bound::from_vars(v[1..].to_vec()), v[0]),
        &with_params(&store, vec![x]),
        EPS,
    )
}

fn case_recon_loss(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 30);
    let shape = [1 + r.below(3), 1 + r.below(4), 2 + r.below(4)];
    let pred = random_input(&shape, -1.0, 1.0, &mut r);
    let target = random_input(&shape, -1.0, 1.0, &mut r);
    finite_diff_check(
        move |g, v| recon_loss(v[0], g.constant(target.clone()))?.total(1.0),
        &[pred],
        EPS,
    )
}

fn case_distill_loss(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 31);
    let shape = [1 + r.below(3), 4 + r.below(12)];
    let pred = random_input(&shape, -1.0, 1.0, &mut r);
    let teacher = random_input(&shape, -1.0, 1.0, &mut r);
    finite_diff_check(
        move |g, v| distill_loss(v[0], g.constant(teacher.clone())),
        &[pred],
        EPS,
    )
}

fn random_visibility(batch: usize, n: usize, visible: usize, r: &mut RngStream) -> Result<VisibilityMask> {
    crate::amn::gumbel_top_k(&Tensor::<f64>::zeros(&[batch, n]), visible, r)
}

fn case_mask_log_prob(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 32);
    let (b, n) = (1 + r.below(3), 3 + r.below(6));
    let logits = random_input(&[b, n], -3.0, 3.0, &mut r);
    let mask = random_visibility(b, n, 1 + r.below(n - 1), &mut r)?;
    finite_diff_check(move |_, v| mask_log_prob(v[0], &mask), &[logits], EPS)
}

fn case_policy_loss(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 33);
    let (b, n) = (2 + r.below(3), 4 + r.below(4));
    let logits = random_input(&[b, n], -3.0, 3.0, &mut r);
    let mask = random_visibility(b, n, 1 + r.below(n - 1), &mut r)?;
    let rewards: Vec<f64> = (0..b).map(|_| r.range(0.0, 2.0)).collect();
    finite_diff_check(
        move |_, v| Ok(policy_loss(mask_log_prob(v[0], &mask)?, &rewards, 2.0, 1.0)?.loss),
        &[logits],
        EPS,
    )
}

fn case_student(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 34);
    let mut store = ParamStore::<f64>::new();
    let student = tiny_student(s, &mut store)?;
    let tub = tiny_tubelet();
    let (b, n) = (2, tub.tokens());
    let patches = random_input(&[b, n, tub.patch_len()], 0.0, 1.0, &mut r);
    let teacher = random_input(&[b, tub.frames], -1.0, 1.0, &mut r);
    let mask = random_visibility(b, n, n / 4, &mut r)?;
    finite_diff_check(
        // the reconstruction target is built from the patches, so the check
        // differentiates with respect to the parameters only
        move |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let x = g.constant(patches.clone());
            let out = student.forward_pretrain(&p, x, &mask, &mut RngStream::new(0, 0), false)?;
            let recon = recon_loss(out.reconstruction, out.target)?.total(1.0)?;
            recon.add(distill_loss(out.waveform, g.constant(teacher.clone()))?.mean())
        },
        &with_params(&store, Vec::new()),
        EPS,
    )
}

fn case_amn(s: u64) -> Result<GradCheckReport> {
    let mut r = rng(s, 35);
    let mut store = ParamStore::<f64>::new();
    let tub = tiny_tubelet();
    let cfg = AmnConfig {
        dim: 4,
        blocks: 1,
        state: 2,
        ..AmnConfig::default()
    };
    let amn = Amn::init(&cfg, &tub, &mut store, &mut r)?;
    // a non-zero head so gradients reach the blocks
    let head = store.find("amn.head.w").expect("head registered");
    *store.get_mut(head) = random_input(&[cfg.dim, 1], -0.5, 0.5, &mut r);
    let patches = random_input(&[1, tub.tokens(), tub.patch_len()], 0.0, 1.0, &mut r);
    finite_diff_check(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            amn.importance_scores(&p, g.constant(patches.clone()))
        },
        &with_params(&store, Vec::new()),
        EPS,
    )
}

/// Every registered check.
pub fn cases() -> Vec<GradCase> {
    let plain: [(&'static str, Check); 31] = [
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("div", case_div),
        ("neg", case_neg),
        ("exp", case_exp),
        ("log", case_log),
        ("sqrt", case_sqrt),
        ("sqr", case_sqr),
        ("sigmoid", case_sigmoid),
        ("silu", case_silu),
        ("softplus", case_softplus),
        ("tanh", case_tanh),
        ("scale", case_scale),
        ("abs", case_abs),
        ("relu", case_relu),
        ("clamp", case_clamp),
        ("matmul", case_matmul),
        ("reduce", case_reduce),
        ("narrow_concat_reshape", case_shape),
        ("softmax", case_softmax),
        ("log_softmax", case_log_softmax),
        ("layer_norm", case_layer_norm),
        ("dropout", case_dropout),
        ("pearson", case_pearson),
        ("gather_scatter", case_gather_scatter),
        ("recon_loss", case_recon_loss),
        ("distill_loss", case_distill_loss),
        ("mask_log_prob", case_mask_log_prob),
        ("policy_loss", case_policy_loss),
        ("scan_core", case_scan_core),
    ];
    let scans: [(&'static str, Check); 4] = [
        ("selective_scan", case_selective_scan),
        ("mamba_block", case_mamba_block),
        ("student_forward", case_student),
        ("amn_scores", case_amn),
    ];
    plain
        .into_iter()
        .map(|(name, check)| GradCase {
            name,
            tolerance: if name == "scan_core" { SCAN_TOL } else { TOL },
            check,
        })
        .chain(scans.into_iter().map(|(name, check)| GradCase {
            name,
            tolerance: SCAN_TOL,
            check,
        }))
        .collect()
}

/// Runs each case whose name contains `filter` for every seed in `seeds`.
pub fn run_suite(seeds: std::ops::Range<u64>, filter: Option<&str>) -> Result<Vec<CaseOutcome>> {
    let mut out = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        for seed in seeds.clone() {
            let rep = (case.check)(seed)?;
            out.push(CaseOutcome {
                name: case.name,
                seed,
                max_rel_err: rep.max_rel_err,
                tolerance: case.tolerance,
                coordinates: rep.coordinates,
            });
        }
    }
    Ok(out)
}
