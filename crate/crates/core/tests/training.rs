use rrld_core::augment::default_policy;
use rrld_core::backbone::{BackboneConfig, Model};
use rrld_core::data::{build_protocol, generate_synthetic, ProtocolView, SynthConfig};
use rrld_core::trainer::{evaluate, fit, run_protocol, select_best, AugGradient, TrainConfig, Variant};
use rrld_core::MultiDomainDataset;

fn tiny_backbone(classes: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 3,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: classes,
        ..BackboneConfig::default()
    }
}

fn tiny_data(domains: usize) -> MultiDomainDataset {
    generate_synthetic(&SynthConfig {
        classes: 3,
        domains,
        per_domain: 10,
        image_size: 8,
        channels: 3,
        seed: 5,
    })
    .unwrap()
}

fn quick(variant: Variant, steps: usize, seeds: Vec<u64>) -> TrainConfig {
    TrainConfig {
        variant,
        max_steps: steps,
        batch_size: 8,
        eval_every: Some(3),
        learning_rate: 1e-3,
        seeds,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_step_budget_tests_the_initial_model() {
    let ds = tiny_data(2);
    let split = build_protocol(&ds, "domain1", 0).unwrap();
    let view = ProtocolView::new(&ds, &split);
    let r = fit(&view, &tiny_backbone(3), &quick(Variant::Rrld, 0, vec![4]), &default_policy(), 4, AugGradient::Halted).unwrap();
    assert_eq!(r.best_step, 0);
    let init = Model::init(BackboneConfig { seed: 4, ..tiny_backbone(3) }).unwrap();
    let expect = evaluate(&init, split.test.iter().map(|&i| &ds.samples()[i])).unwrap();
    assert_eq!(r.test_acc, expect);
    assert_eq!(r.best_model.params(), init.params());
}

#[test]
fn reported_test_accuracy_belongs_to_the_selected_checkpoint() {
    let ds = tiny_data(3);
    let split = build_protocol(&ds, "domain0", 1).unwrap();
    let view = ProtocolView::new(&ds, &split);
    let r = fit(&view, &tiny_backbone(3), &quick(Variant::Rrld, 15, vec![1]), &default_policy(), 1, AugGradient::Halted).unwrap();
    let curve: Vec<f64> = r.val_curve.iter().map(|&(_, v)| v).collect();
    let chosen = select_best(&curve).unwrap();
    assert_eq!(r.best_step, r.val_curve[chosen].0);
    assert_eq!(r.best_val_acc, curve[chosen]);
    let val = evaluate(&r.best_model, split.unified_val.iter().map(|&i| &ds.samples()[i])).unwrap();
    assert_eq!(val, r.best_val_acc);
    let test = evaluate(&r.best_model, split.test.iter().map(|&i| &ds.samples()[i])).unwrap();
    assert_eq!(test, r.test_acc);
    // evaluations at 0, 3, 6, 9, 12, 15
    assert_eq!(r.val_curve.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 3, 6, 9, 12, 15]);
    assert_eq!(view.early_target_reads(), 0);
    assert_eq!(view.target_reads(), split.test.len());
}

#[test]
fn metrics_stream_shape() {
    let ds = tiny_data(2);
    let split = build_protocol(&ds, "domain0", 0).unwrap();
    let view = ProtocolView::new(&ds, &split);
    let r = fit(&view, &tiny_backbone(3), &quick(Variant::Erm, 4, vec![0]), &default_policy(), 0, AugGradient::Halted).unwrap();
    let steps: Vec<_> = r.metrics.iter().filter(|m| m.total.is_some()).collect();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().all(|m| m.ibsd == Some(0.0) && m.agsd == Some(0.0) && m.block_index.is_none()));
    assert_eq!(r.metrics.last().unwrap().test_acc, Some(r.test_acc));
}

#[test]
fn identical_seeds_give_zero_std_and_runs_reproduce() {
    let ds = tiny_data(2);
    let cfg = quick(Variant::Rrld, 6, vec![1, 1, 1]);
    let a = run_protocol(&ds, &tiny_backbone(3), &cfg, &default_policy(), |_| Ok(())).unwrap();
    assert_eq!(a.targets.len(), 2);
    for t in &a.targets {
        assert_eq!(t.std, 0.0);
        assert_eq!(t.runs.len(), 3);
    }
    let b = run_protocol(&ds, &tiny_backbone(3), &cfg, &default_policy(), |_| Ok(())).unwrap();
    assert_eq!(a, b);
    let bits = |r: &rrld_core::RunResult| {
        r.targets
            .iter()
            .flat_map(|t| t.runs.iter().flat_map(|s| s.metrics.iter().filter_map(|m| m.total.map(f64::to_bits))))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert!((a.average - (a.targets[0].mean + a.targets[1].mean) / 2.0).abs() < 1e-15);
}

#[test]
fn random_init_is_near_chance() {
    // Balanced set of 4 x 3 x 100 = 1200; chance accuracy 1/4 within 3 binomial sigma.
    let ds = generate_synthetic(&SynthConfig {
        per_domain: 100,
        image_size: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let n = ds.len() as f64;
    let p = 0.25;
    let sigma = (p * (1.0 - p) / n).sqrt();
    for seed in 0..3 {
        let m = Model::init(BackboneConfig { seed, ..tiny_backbone(4) }).unwrap();
        let acc = evaluate(&m, ds.samples()).unwrap();
        assert!((acc - p).abs() <= 3.0 * sigma, "seed {seed}: {acc}");
    }
}

#[test]
fn unknown_target_is_rejected() {
    let ds = tiny_data(2);
    let cfg = TrainConfig {
        targets: Some(vec!["nope".into()]),
        ..quick(Variant::Erm, 1, vec![0])
    };
    assert!(run_protocol(&ds, &tiny_backbone(3), &cfg, &default_policy(), |_| Ok(())).is_err());
}
