use proptest::prelude::*;
use rrld_core::augment::{default_policy, AugmentOp, OpName};
use rrld_core::backbone::sample_block_index;
use rrld_core::data::{batch_plan, build_protocol, corrupt_image, NoiseKind, NoiseSpec};
use rrld_core::losses::{agsd_loss, cross_entropy, ibsd_loss, kl_div, one_hot, softmax_rows, softmax_temp, Logits};
use rrld_core::pixels::ImageShape;
use rrld_core::{rng, MultiDomainDataset, Sample};

fn logits(rows: usize, classes: usize) -> impl Strategy<Value = Logits> {
    prop::collection::vec(-30.0f64..30.0, rows * classes).prop_map(move |v| Logits::from_vec(rows, classes, v).unwrap())
}

fn logit_pair() -> impl Strategy<Value = (Logits, Logits, f64)> {
    (1usize..6, 2usize..17)
        .prop_flat_map(|(r, c)| (logits(r, c), logits(r, c), 0.1f64..10.0))
}

fn image(shape: ImageShape) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, shape.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn distillation_losses_are_nonnegative((a, b, t) in logit_pair()) {
        prop_assert!(ibsd_loss(&a, &b, t).unwrap() >= 0.0);
        prop_assert!(agsd_loss(&a, &b.detach(), t).unwrap() >= 0.0);
    }

    #[test]
    fn self_distillation_of_identical_logits_is_zero((a, _, t) in logit_pair()) {
        prop_assert!(ibsd_loss(&a, &a, t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_is_asymmetric_but_both_nonnegative((a, b, t) in logit_pair()) {
        let p = softmax_temp(a.row(0), t).unwrap();
        let q = softmax_temp(b.row(0), t).unwrap();
        prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_div(&q, &p).unwrap() >= 0.0);
    }

    #[test]
    fn cross_entropy_is_nonnegative((a, _, _) in logit_pair(), seed in any::<u64>()) {
        let labels: Vec<usize> = (0..a.rows()).map(|r| (seed as usize + r * 7) % a.classes()).collect();
        let y = one_hot(&labels, a.classes());
        let ce = cross_entropy(&y, softmax_rows(&a).unwrap().as_slice(), a.classes()).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-500.0f64..500.0, 2..20), t in 0.05f64..20.0) {
        let p = softmax_temp(&v, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn policy_preserves_range_and_shape(img in image(ImageShape::square(3, 8)), seed in any::<u64>()) {
        let shape = ImageShape::square(3, 8);
        let out = default_policy().apply(&img, shape, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_op_preserves_range(img in image(ImageShape::square(3, 6)), mag in 0u8..=9, negate in any::<bool>()) {
        let shape = ImageShape::square(3, 6);
        for op in OpName::ALL {
            let out = AugmentOp::new(op, 1.0, mag).unwrap().run(&img, shape, negate);
            prop_assert_eq!(out.len(), img.len());
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
        }
    }

    #[test]
    fn noise_preserves_range(img in image(ImageShape::square(1, 5)), seed in any::<u64>(), k in 0usize..4) {
        let kind = [NoiseKind::Gaussian, NoiseKind::Impulse, NoiseKind::Speckle, NoiseKind::Shot][k];
        let spec = NoiseSpec::with_default(kind, seed);
        let out = corrupt_image(&img, &spec, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(out.len(), img.len());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn block_index_stays_in_range(depth in 2usize..24, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        for _ in 0..32 {
            let i = sample_block_index(&mut r, depth).unwrap();
            prop_assert!((1..depth).contains(&i));
        }
    }

    #[test]
    fn batches_cover_ids_once(n in 1usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let plan = batch_plan(&ids, bs, seed).unwrap();
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut flat: Vec<usize> = plan.into_iter().flatten().collect();
        flat.sort_unstable();
        prop_assert_eq!(flat, ids);
    }

    #[test]
    fn protocol_partitions(sizes in prop::collection::vec(5usize..40, 2..5), target in 0usize..4, seed in any::<u64>()) {
        let target = target % sizes.len();
        let mut samples = Vec::new();
        for (d, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample { image: vec![0.5], label: i % 2, domain: d });
            }
        }
        let names: Vec<String> = (0..sizes.len()).map(|d| format!("d{d}")).collect();
        let ds = MultiDomainDataset::new(ImageShape { channels: 1, height: 1, width: 1 }, vec!["a".into(), "b".into()], names.clone(), samples).unwrap();
        let split = build_protocol(&ds, &names[target], seed).unwrap();
        let dom = |i: &usize| ds.samples()[*i].domain;
        prop_assert!(split.test.iter().all(|i| dom(i) == target));
        prop_assert_eq!(split.test.len(), sizes[target]);
        prop_assert!(split.train.iter().chain(&split.unified_val).all(|i| dom(i) != target));
        for (d, &n) in sizes.iter().enumerate().filter(|(d, _)| *d != target) {
            prop_assert_eq!(split.train.iter().filter(|i| dom(i) == d).count(), n * 4 / 5);
            prop_assert_eq!(split.unified_val.iter().filter(|i| dom(i) == d).count(), n - n * 4 / 5);
        }
        let mut all: Vec<usize> = split.train.iter().chain(&split.unified_val).chain(&split.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), ds.len());
    }
}
