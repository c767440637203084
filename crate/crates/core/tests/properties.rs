use conjflow_core::contrastive::{build_sampling_distribution, pair_scores, sample_coords, ContrastiveParams, SampleSet};
use conjflow_core::evalkit::{classify, color_wheel, flow_color, Template, TemplateMemory};
use conjflow_core::optim::ema_update;
use conjflow_core::warp::{charbonnier_mean, warp, CHARBONNIER_EPS};
use conjflow_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, c * h * w).prop_map(move |d| Tensor::from_vec(&[c, h, w], d).unwrap())
}

fn sized() -> impl Strategy<Value = (usize, usize)> {
    (2usize..9, 2usize..9)
}

proptest! {
    #[test]
    fn zero_flow_warp_is_identity((h, w) in sized(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        prop_assert_eq!(warp(&field, &Tensor::zeros(&[2, h, w])).unwrap(), field);
    }

    #[test]
    fn warp_stays_within_field_range(field in tensor(1, 5, 6), flow in tensor(2, 5, 6)) {
        let out = warp(&field, &flow.scale(3.0)).unwrap();
        let lo = field.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = field.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn charbonnier_is_bounded_below(r in tensor(3, 4, 4)) {
        let floor = CHARBONNIER_EPS.sqrt();
        prop_assert!(charbonnier_mean(&r) >= floor - 1e-15);
    }

    #[test]
    fn pair_scores_are_exclusive(flow in tensor(2, 6, 6), picks in prop::collection::vec((0usize..6, 0usize..6), 2..10), tau_m in 0.1f64..3.0) {
        let params = ContrastiveParams {
            tau: 0.2,
            tau_p: 0.6,
            tau_n: 0.1,
            tau_m,
            adaptive_tau_m: false,
            eta: picks.len(),
            keep_fraction: 1.0,
        };
        let set = SampleSet { coords: picks.clone(), t: 0 };
        let s = pair_scores(&set, &flow, &params);
        for i in 0..picks.len() {
            for k in 0..picks.len() {
                prop_assert!(s.p(i, k) * s.n(i, k) == 0.0);
                prop_assert!((0.0..=1.0).contains(&s.p(i, k)));
                prop_assert!((0.0..=1.0).contains(&s.n(i, k)));
            }
        }
    }

    #[test]
    fn sampled_coordinates_are_distinct(flow in tensor(2, 6, 6), feats in tensor(3, 6, 6), eta in 1usize..20, seed in any::<u64>()) {
        let dist = build_sampling_distribution(&flow, &feats, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = dist.prob.iter().filter(|p| **p > 0.0).count();
        let s = sample_coords(&dist, eta.min(support), 0, &mut rng).unwrap();
        let mut seen = s.coords.clone();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), s.coords.len());
        prop_assert!(s.coords.len() <= eta.min(36));
        let total: f64 = dist.prob.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ema_moves_a_fixed_fraction(a in tensor(2, 3, 3), b in tensor(2, 3, 3), xi in 0.0f64..1.0) {
        let mut ema = vec![a.clone()];
        ema_update(&mut ema, std::slice::from_ref(&b), xi);
        for i in 0..a.len() {
            let expected = xi * a.data()[i] + (1.0 - xi) * b.data()[i];
            prop_assert!((ema[0].data()[i] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn flow_colors_darken_beyond_the_maximum(u in -5.0f64..5.0, v in -5.0f64..5.0) {
        let wheel = color_wheel();
        prop_assert_eq!(flow_color(0.0, 0.0, 1.0, &wheel), [255, 255, 255]);
        let m = u.hypot(v);
        prop_assume!(m > 1e-6);
        prop_assert!(flow_color(u, v, m / 2.0, &wheel).iter().all(|x| *x <= 191));
        prop_assert!(flow_color(u, v, m * 2.0, &wheel).iter().any(|x| *x >= 127));
    }

    #[test]
    fn classification_abstains_above_threshold(q in prop::collection::vec(-1.0f64..1.0, 4), tau in 0.0f64..2.0) {
        let memory = TemplateMemory {
            entries: vec![Template { levels: vec![vec![1.0, 0.0, 0.0, 0.0]], class: 2, frame: 0, y: 0, x: 0 }],
        };
        let (class, similarity) = classify(&[q], &memory, tau).unwrap();
        prop_assert!(class == 0 || class == 2);
        prop_assert_eq!(class == 0, similarity < 1.0 - tau);
    }
}
