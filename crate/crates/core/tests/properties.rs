use proptest::prelude::*;

use pulsemae::amn::{gumbel_top_k, random_mask};
use pulsemae::mask::{visible_count, VisibilityMask};
use pulsemae::params::ParamStore;
use pulsemae::ssm::{selective_scan, Direction, MambaBlock, SsmParams};
use pulsemae::student::{Student, StudentConfig};
use pulsemae::trainer::losses::recon_loss;
use pulsemae::signal::{estimate_hr, metrics};
use pulsemae::synthdata::{apply_occlusions, gen_clip, occlusion_rng, CurriculumSchedule, SceneSpec};
use pulsemae::teacher::{chrom, pos, RgbTrace};
use pulsemae::trainer::{clip_global_norm, global_norm, lr_at};
use pulsemae::{Graph, RngStream, Tensor, Var};

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed, 99);
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed: u64, scale in 0.1f64..50.0) {
        let g = Graph::new();
        let x = g.constant(tensor(&[rows, cols], seed, scale));
        let y = x.softmax(1).unwrap().value();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_accumulate_over_summed_losses(n in 1usize..9, seed: u64) {
        let xv = tensor(&[n], seed, 1.0);
        let wv = tensor(&[n], seed ^ 1, 1.0);
        fn losses<'g>(g: &'g Graph<f64>, x: Var<'g, f64>, w: &Tensor<f64>) -> (Var<'g, f64>, Var<'g, f64>) {
            let w = g.constant(w.clone());
            (x.mul(x).unwrap().sum(), x.tanh().mul(w).unwrap().sum())
        }
        let g = Graph::new();
        let x = g.param(xv.clone());
        let (l1, l2) = losses(&g, x, &wv);
        let joint = g.backward(l1.add(l2).unwrap()).unwrap().wrt(x);
        let g1 = Graph::new();
        let x1 = g1.param(xv.clone());
        let a = g1.backward(losses(&g1, x1, &wv).0).unwrap().wrt(x1);
        let g2 = Graph::new();
        let x2 = g2.param(xv.clone());
        let b = g2.backward(losses(&g2, x2, &wv).1).unwrap().wrt(x2);
        for i in 0..n {
            prop_assert!((joint.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rng_streams_are_reproducible(seed: u64, stream: u64, counter in 0u64..1000) {
        let draw = |mut r: RngStream| (0..16).map(|_| r.uniform().to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(draw(RngStream::new(seed, stream)), draw(RngStream::new(seed, stream)));
        prop_assert_eq!(draw(RngStream::at(seed, stream, counter)), draw(RngStream::at(seed, stream, counter)));
    }

    #[test]
    fn mask_cardinality_is_exact(n in 1usize..300, step in 0usize..10, b in 1usize..4, seed: u64) {
        let ratio = 0.50 + 0.05 * step as f64;
        let k = visible_count(n, ratio);
        prop_assume!(k > 0);
        prop_assert_eq!(k, n * (100 - (50 + 5 * step)) / 100);
        let logits = tensor(&[b, n], seed, 2.0);
        let mut rng = RngStream::new(seed, 1);
        for m in [gumbel_top_k(&logits, k, &mut rng).unwrap(), random_mask(b, n, ratio, &mut rng).unwrap()] {
            for s in 0..b {
                prop_assert_eq!(m.visible()[s].len(), k);
                prop_assert_eq!(m.masked()[s].len(), n - k);
                let mut all: Vec<usize> = m.visible()[s].iter().chain(&m.masked()[s]).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn sampler_ignores_a_constant_shift(n in 2usize..40, seed: u64, shift in -5.0f64..5.0) {
        let logits = tensor(&[2, n], seed, 1.0);
        let shifted = logits.map(|v| v + shift);
        let k = visible_count(n, 0.75).max(1);
        let a = gumbel_top_k(&logits, k, &mut RngStream::at(seed, 3, 17)).unwrap();
        let b = gumbel_top_k(&shifted, k, &mut RngStream::at(seed, 3, 17)).unwrap();
        prop_assert_eq!(a.bits(), b.bits());
    }

    #[test]
    fn clipped_norm_is_bounded(seed: u64, scale in 1e-3f64..1e3, max_norm in 0.1f64..5.0) {
        let mut grads = vec![tensor(&[3, 4], seed, scale), tensor(&[5], seed ^ 7, scale)];
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, max_norm);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= max_norm + 1e-6);
    }

    #[test]
    fn learning_rate_stays_in_range(epoch in 0.0f64..60.0, warmup in 0.0f64..5.0, base in 1e-6f64..1e-2) {
        let lr = lr_at(epoch, base, warmup, 50.0);
        prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((40.0f64..200.0, 40.0f64..200.0), 1..20)) {
        let (p, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&p, &r, &[], &[]).unwrap();
        prop_assert!(m.rmse + 1e-12 >= m.mae);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hr_estimate_ignores_gain_and_offset(bpm in 45.0f64..200.0, gain in 0.01f64..100.0, offset in -50.0f64..50.0, phase in 0.0f64..6.28) {
        let x: Vec<f64> = (0..128)
            .map(|i| (2.0 * std::f64::consts::PI * bpm / 60.0 * i as f64 / 30.0 + phase).sin())
            .collect();
        let y: Vec<f64> = x.iter().map(|v| gain * v + offset).collect();
        let a = estimate_hr(&x, 30.0).unwrap();
        let b = estimate_hr(&y, 30.0).unwrap();
        prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
    }

    // A 16-frame period has zero mean over every CHROM and POS window, so an
    // offset common to the (equal) channel means only rescales the pulse.
    // Channels weight two such harmonics differently (skin-like gains for
    // the fundamental) so that neither projection cancels the pulse.
    #[test]
    fn classical_extractors_ignore_common_offset(
        mean in 0.2f64..0.8,
        offset in -0.15f64..1.0,
        amp in 0.0005f64..0.01,
        phase in 0.0f64..6.28,
    ) {
        let trace = |c: f64| RgbTrace {
            rgb: (0..128)
                .map(|t| {
                    let w = 2.0 * std::f64::consts::PI * t as f64 / 16.0;
                    let (s1, s2) = ((w + phase).sin(), (2.0 * w).sin());
                    let (g1, g2) = ([0.33, 0.77, 0.53], [0.5, 0.2, 0.9]);
                    [0, 1, 2].map(|k| mean + c + amp * (g1[k] * s1 + g2[k] * s2))
                })
                .collect(),
            fs: 30.0,
        };
        for f in [chrom, pos] {
            let a = f(&trace(0.0)).unwrap().samples;
            let b = f(&trace(offset)).unwrap().samples;
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(worst < 1e-6, "max deviation {}", worst);
            let m = a.iter().sum::<f64>() / a.len() as f64;
            let sd = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            prop_assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-4, "mean {} sd {}", m, sd);
        }
    }

    #[test]
    fn occlusion_is_deterministic_and_bounded(seed in 0u64..10_000, epoch in 0u64..300) {
        let spec = SceneSpec { frames: 64, ..SceneSpec::default() };
        let sched = CurriculumSchedule { prob_max: 1.0, ..CurriculumSchedule::default() };
        let (clip, meta) = gen_clip(seed, &spec).unwrap();
        let e = epoch as f64;
        let a = apply_occlusions(&clip, &meta, e, &sched, &mut occlusion_rng(seed, epoch)).unwrap();
        let b = apply_occlusions(&clip, &meta, e, &sched, &mut occlusion_rng(seed, epoch)).unwrap();
        prop_assert!(a == b);
        prop_assert!(a.1.bvp == meta.bvp);
        for ep in &a.1.occlusions {
            let frac = ep.duration as f64 / spec.frames as f64;
            prop_assert!((0.2..=0.8).contains(&frac), "duration fraction {}", frac);
        }
    }
}

fn reverse_time(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    let (l, e) = (s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (b, t, c) = (i / (l * e), (i / e) % l, i % e);
        x.at(&[b, l - 1 - t, c])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn bidirectional_scan_is_time_reversal_equivariant(l in 1usize..24, seed: u64) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(seed, 0);
        let block = MambaBlock::init(&mut store, "m", 4, 6, 3, &mut rng);
        let x = tensor(&[2, l, 6], seed, 1.0);
        let g = Graph::new();
        let p = store.bind(&g);
        // swapping the two directions' parameters is what makes reversal an exact symmetry
        let mut swapped = block.clone();
        std::mem::swap(&mut swapped.forward, &mut swapped.backward);
        let y = block.scan_sum(&p, g.constant(x.clone())).unwrap().value();
        let yr = swapped.scan_sum(&p, g.constant(reverse_time(&x))).unwrap().value();
        let back = reverse_time(&yr);
        for (a, b) in y.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scan_output_stays_bounded_on_unit_input(seed: u64) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(seed, 0);
        let ssm = SsmParams::init(&mut store, "s", 4, 8, &mut rng);
        let x = Tensor::from_fn(&[1, 512, 4], |_| rng.range(-1.0, 1.0));
        let g = Graph::new();
        let p = store.bind(&g);
        for dir in [Direction::Forward, Direction::Backward] {
            let y = selective_scan(g.constant(x.clone()), &ssm, &p, dir).unwrap().value();
            prop_assert!(y.is_finite() && y.max_abs() < 1e3, "max |y| {}", y.max_abs());
        }
    }

    #[test]
    fn rppg_head_ignores_token_order(seed: u64, n in 2usize..12) {
        let cfg = StudentConfig { embed_dim: 8, mlp_hidden: 8, ..StudentConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let student = Student::init(&cfg, &mut store, &mut RngStream::new(seed, 0)).unwrap();
        let tokens = tensor(&[2, n, 8], seed, 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = RngStream::new(seed, 1);
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let permuted = Tensor::from_fn(&[2, n, 8], |i| {
            let (b, t, c) = (i / (n * 8), (i / 8) % n, i % 8);
            tokens.at(&[b, order[t], c])
        });
        let g = Graph::new();
        let p = store.bind(&g);
        let mut r = RngStream::new(0, 0);
        let a = student.rppg_head(&p, g.constant(tokens), &mut r, false).unwrap().value();
        let b = student.rppg_head(&p, g.constant(permuted), &mut r, false).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_ignores_visible_targets(n in 4usize..20, dim in 1usize..6, seed: u64) {
        let k = visible_count(n, 0.75).max(1);
        let logits = tensor(&[2, n], seed, 1.0);
        let mask: VisibilityMask = gumbel_top_k(&logits, k, &mut RngStream::new(seed, 2)).unwrap();
        let g = Graph::new();
        let full = g.param(tensor(&[2, n, dim], seed, 1.0));
        let pred = g.constant(tensor(&[2, n - k, dim], seed ^ 3, 1.0));
        let target = full.gather_rows(mask.masked()).unwrap();
        let l = recon_loss(pred, target).unwrap();
        let grad = g.backward(l.pixel.add(l.corr).unwrap()).unwrap().wrt(full);
        for b in 0..2 {
            for &v in &mask.visible()[b] {
                for c in 0..dim {
                    prop_assert_eq!(grad.at(&[b, v, c]), 0.0);
                }
            }
        }
    }
}
