//! Randomized property suites over the attack, losses, and formats.

use greedyfool::attack::{self, AttackConfig};
use greedyfool::data::{self, LabeledImageSet};
use greedyfool::loss;
use greedyfool::nn::{Arch, InputSpec, Model};
use greedyfool::tensor::Tensor;
use proptest::prelude::*;

/// A 2-class linear model on 1x4x4 inputs with the given per-pixel score
/// difference (class 0 minus class 1).
fn linear_model(diff: &[f64]) -> Model {
    let mut m = Model::new(
        InputSpec {
            channels: 1,
            height: 4,
            width: 4,
            scale: 1.0,
        },
        Arch::Linear { classes: 2 },
        0,
    );
    let mut w = Tensor::zeros(&[16, 2]);
    for i in 0..16 {
        w.data_mut()[i * 2] = diff[i] / 2.0;
        w.data_mut()[i * 2 + 1] = -diff[i] / 2.0;
    }
    m.params.insert("fc.w".into(), w);
    m.params.insert("fc.b".into(), Tensor::zeros(&[2]));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn margin_loss_floor_and_consistency(
        scores in prop::collection::vec(-50.0..50.0f64, 2..10),
        kappa in 0.0..10.0f64,
    ) {
        let y = 0usize;
        let l = loss::margin_loss(&scores, y, kappa);
        prop_assert!(l >= -kappa - 1e-12);
        let raw = loss::raw_margin(&scores, y);
        prop_assert!((l - raw.max(-kappa)).abs() < 1e-12);
    }

    #[test]
    fn percentile_bounds_and_monotonicity(
        vals in prop::collection::vec(-100.0..100.0f64, 1..50),
        q1 in 0.0..100.0f64,
        q2 in 0.0..100.0f64,
    ) {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p1 = attack::percentile(&vals, q1);
        prop_assert!(p1 >= lo - 1e-12 && p1 <= hi + 1e-12);
        let (qa, qb) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(attack::percentile(&vals, qa) <= attack::percentile(&vals, qb) + 1e-12);
    }

    #[test]
    fn direction_ablation_stays_in_unit_box_and_keeps_signs(
        vals in prop::collection::vec(-10.0..10.0f64, 1..64),
        q in 0.0..100.0f64,
    ) {
        prop_assume!(vals.iter().any(|v| *v != 0.0));
        let r = Tensor::from_vec(vals.clone());
        let out = attack::direction_ablation(&r, q).unwrap();
        for (a, b) in vals.iter().zip(out.data()) {
            prop_assert!((-1.0..=1.0).contains(b));
            prop_assert!(a * b >= 0.0, "sign flip: {a} -> {b}");
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }

    #[test]
    fn attack_invariants_on_random_linear_models(
        diff in prop::collection::vec(-2.0..2.0f64, 16),
        pixels in prop::collection::vec(0.0..255.0f64, 16),
        eps in prop::sample::select(vec![10.0, 64.0, 255.0]),
    ) {
        prop_assume!(diff.iter().any(|v| v.abs() > 1e-3));
        let model = linear_model(&diff);
        let x = Tensor::new(vec![1, 4, 4], pixels).unwrap();
        let y = model.predict(&x).unwrap();
        let cfg = AttackConfig { epsilon: eps, max_iterations: 40, ..Default::default() };
        let res = attack::greedyfool(&model, &x, y, &cfg, None).unwrap();
        prop_assert!(res.check_invariants(&x, y, &cfg).is_ok());
        // stage-2 termination bound: iterations never exceed the stage-1
        // perturbed pixel budget (here at most 16)
        prop_assert!(res.reduce_iterations <= 16);
        // determinism
        let res2 = attack::greedyfool(&model, &x, y, &cfg, None).unwrap();
        prop_assert_eq!(res.adversarial.data(), res2.adversarial.data());
    }

    #[test]
    fn idx_round_trip_random_images(
        n in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Tensor> = (0..n)
            .map(|_| {
                Tensor::new(
                    vec![1, h, w],
                    (0..h * w).map(|_| rng.gen_range(0u8..=255) as f64).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let set = LabeledImageSet::new(images, labels, 10, "test", "prop").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        data::write_idx(&set, &ip, &lp).unwrap();
        let back = data::load_idx(&ip, &lp, "test").unwrap();
        prop_assert_eq!(back.len(), set.len());
        for i in 0..set.len() {
            prop_assert_eq!(back.images[i].data(), set.images[i].data());
            prop_assert_eq!(back.labels[i], set.labels[i]);
        }
    }
}
