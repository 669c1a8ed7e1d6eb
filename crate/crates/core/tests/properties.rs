use autoopt::controller::{
    autoopt_step, build_g, clamp_and_convert, compute_a_hat, compute_v_hat, ewma_update, Clamps, ControllerConfig,
    GammaState, GroupState,
};
use autoopt::data::{load_idx, write_idx, Dataset, MiniBatchSampler, Split};
use autoopt::nn::BatchGradStats;
use autoopt::optim::{hessian_diag, momentum_gradient, OptimizerKind, OptimizerState};
use autoopt::{solve2, Mat2, Rng, Vec2};
use proptest::prelude::*;

fn vec_pair(p: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0..10.0f64, p),
        prop::collection::vec(-10.0..10.0f64, p),
        prop::collection::vec(0.05..20.0f64, p),
    )
}

fn samples(n: usize, p: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, p), n)
}

fn optimizer() -> impl Strategy<Value = OptimizerKind> {
    prop_oneof![
        Just(OptimizerKind::Sgd),
        Just(OptimizerKind::Adam { beta2: 0.999, eps: 1e-8 }),
        Just(OptimizerKind::AdaGrad { eps: 1e-8 }),
    ]
}

proptest! {
    #[test]
    fn same_seed_same_stream(seed in any::<u64>(), stream in 0u64..100) {
        let mut a = Rng::with_stream(seed, stream);
        let mut b = Rng::with_stream(seed, stream);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn permutation_is_a_bijection(seed in any::<u64>(), n in 0usize..200) {
        let mut p = Rng::new(seed).permutation(n);
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn solve2_residual(a11 in 0.1..10.0f64, a22 in 0.1..10.0f64, c in -0.95..0.95f64, b1 in -5.0..5.0f64, b2 in -5.0..5.0f64, ridge in 0.0..1.0f64) {
        let a12 = c * (a11 * a22).sqrt();
        let a = Mat2::symmetric(a11, a12, a22);
        let x = solve2(&a, Vec2::new(b1, b2), ridge).unwrap();
        let r = a.mul_vec(x) + ridge * x - Vec2::new(b1, b2);
        prop_assert!(r.norm() <= 1e-9 * (1.0 + x.norm()));
    }

    #[test]
    fn a_hat_is_symmetric_psd_and_matches_explicit_product((g, prev, h) in (1usize..40).prop_flat_map(vec_pair)) {
        let cols = build_g(&g, &prev).unwrap();
        let a = compute_a_hat(&cols, &h).unwrap();
        let second: Vec<f64> = g.iter().zip(&prev).map(|(x, y)| x - y).collect();
        let ip = |u: &[f64], v: &[f64]| u.iter().zip(v).zip(&h).map(|((x, y), hi)| x * y / hi).sum::<f64>();
        let explicit = [ip(&g, &g), ip(&g, &second), ip(&second, &second)];
        let scale = 1.0 + explicit[0].abs() + explicit[2].abs();
        prop_assert!((a.get(0, 0) - explicit[0]).abs() <= 1e-12 * scale);
        prop_assert!((a.get(0, 1) - explicit[1]).abs() <= 1e-12 * scale);
        prop_assert!((a.get(1, 1) - explicit[2]).abs() <= 1e-12 * scale);
        prop_assert_eq!(a.get(0, 1), a.get(1, 0));
        prop_assert!(a.get(0, 0) >= 0.0 && a.get(1, 1) >= 0.0);
        prop_assert!(a.det() >= -1e-10 * scale * scale);
    }

    #[test]
    fn v_hat_nonnegative_and_sumsq_bounded(s in (2usize..12, 1usize..12).prop_flat_map(|(n, p)| samples(n, p)), hscale in 0.1..10.0f64) {
        let n = s.len();
        let stats = BatchGradStats::<f64>::from_samples(&s).unwrap();
        let h = vec![hscale; stats.batch_grad.len()];
        let sumsq = stats.per_sample_sumsq(&h);
        let mean_sq: f64 = stats.batch_grad.iter().map(|g| g * g / hscale).sum();
        prop_assert!(sumsq >= n as f64 * mean_sq - 1e-9 * (1.0 + sumsq));
        let v = compute_v_hat(sumsq, &stats.batch_grad, &h, n).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn clamp_lands_in_the_box(g1 in -1e6..1e6f64, g2 in -1e6..1e6f64, amax in 0.5..10.0f64, amin in 1e-9..1e-3f64, bmax in 0.0..0.9999f64) {
        let clamps = Clamps { alpha_min: amin, alpha_max: amax, beta_max: bmax };
        let c = clamp_and_convert(Vec2::new(g1, g2), &clamps);
        prop_assert!(c.alpha > 0.0 && c.alpha <= amax * (1.0 + 1e-12));
        prop_assert!(c.alpha >= amin * (1.0 - 1e-6));
        prop_assert!((0.0..=bmax).contains(&c.beta));
        prop_assert!((c.gamma.x() - (1.0 - c.alpha)).abs() <= 1e-12 * (1.0 + amax));
        prop_assert!((c.gamma.y() - c.alpha * c.beta).abs() <= 1e-12 * (1.0 + amax));
        let again = clamp_and_convert(c.gamma, &clamps);
        prop_assert!((again.alpha - c.alpha).abs() <= 1e-9 * c.alpha.max(1e-9));
    }

    #[test]
    fn ewma_contracts_by_upsilon(u in 0.0..0.999f64, o1 in -3.0..3.0f64, o2 in -3.0..3.0f64, steps in 1usize..50) {
        let mut state = GammaState::new(&ControllerConfig::for_optimizer(&OptimizerKind::Sgd));
        let target = Vec2::new(o1, o2);
        let start = (state.gamma_ewma - target).norm();
        for _ in 0..steps {
            ewma_update(&mut state, target, u);
        }
        let expected = start * u.powi(steps as i32);
        prop_assert!(((state.gamma_ewma - target).norm() - expected).abs() <= 1e-12 * (1.0 + start));
    }

    #[test]
    fn momentum_gradient_matches_formula(g in prop::collection::vec(-5.0..5.0f64, 1..20), g1 in -1.0..1.0f64, g2 in -1.0..1.0f64, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut state = OptimizerState::<f64>::new(g.len());
        state.momentum = (0..g.len()).map(|_| rng.normal()).collect();
        let prev = state.momentum.clone();
        let out = momentum_gradient(&g, &mut state, Vec2::new(g1, g2));
        for i in 0..g.len() {
            let want = (1.0 - g1 - g2) * g[i] + g2 * prev[i];
            prop_assert!((out[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
        prop_assert_eq!(state.momentum, out);
    }

    #[test]
    fn preconditioner_is_positive(kind in optimizer(), grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..10), beta in 0.0..0.99f64) {
        let mut state = OptimizerState::<f64>::new(6);
        for g in &grads {
            let h = hessian_diag(&kind, &mut state, g, beta).unwrap();
            prop_assert!(h.iter().all(|&v| v > 0.0 && v.is_finite()));
            prop_assert!(state.second_moment.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn controller_keeps_alpha_and_beta_legal(kind in optimizer(), seed in any::<u64>(), n in 2usize..16, p in 1usize..10, upsilon in 0.0..0.999f64) {
        let mut rng = Rng::new(seed);
        let mut cfg = ControllerConfig::for_optimizer(&kind);
        cfg.upsilon = upsilon;
        cfg.warmup_steps = 1;
        let mut group = GroupState::<f64>::new("g", p, &cfg);
        let mut w: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        for _ in 0..10 {
            let s: Vec<Vec<f64>> = (0..n).map(|_| w.iter().map(|wi| wi + rng.normal()).collect()).collect();
            let stats = BatchGradStats::from_samples(&s).unwrap();
            let rec = autoopt_step(&mut group, &mut w, &stats, &kind, &cfg).unwrap();
            prop_assert!(rec.alpha > 0.0 && rec.alpha <= cfg.clamps.alpha_max);
            prop_assert!((0.0..=cfg.clamps.beta_max).contains(&rec.beta));
            prop_assert!(rec.vhat >= 0.0);
        }
    }

    #[test]
    fn sampler_epochs_partition_the_data(len in 1usize..300, batch in 1usize..64, seed in any::<u64>()) {
        prop_assume!(batch <= len);
        let mut a = MiniBatchSampler::new(len, batch, Rng::new(seed)).unwrap();
        let mut b = MiniBatchSampler::new(len, batch, Rng::new(seed)).unwrap();
        for _ in 0..2 {
            let epoch = a.epoch();
            prop_assert_eq!(&epoch, &b.epoch());
            prop_assert_eq!(epoch.len(), len / batch);
            prop_assert!(epoch.iter().all(|bt| bt.len() == batch));
            let mut seen: Vec<usize> = epoch.concat();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), (len / batch) * batch);
            prop_assert!(seen.iter().all(|&i| i < len));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 3 * 4 * 5), labels in prop::collection::vec(0usize..10, 3)) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        let data = Dataset::from_raw(pixels.clone(), labels.clone(), [1, 4, 5], Split::Test).unwrap();
        write_idx(&img, &lab, &data).unwrap();
        let back = load_idx(&img, &lab, Split::Test).unwrap();
        prop_assert_eq!(back.raw_pixels(), &pixels[..]);
        prop_assert_eq!(back.labels(), &labels[..]);
        prop_assert_eq!(back.sample_shape(), [1, 4, 5]);
    }
}
