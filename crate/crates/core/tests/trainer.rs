use mtopt::aggregators::{Method, RlwDistribution};
use mtopt::grad::Space;
use mtopt::net::{MultiTaskModel, OptimizerKind, Targets};
use mtopt::tasks::{make_blob_classification, make_scale_imbalanced_regression, BlobConfig, RegressionConfig, SplitKind, TaskSuite};
use mtopt::trainer::{build_model, evaluate, run, train, Architecture, RunRecord, Stepper, TrainConfig};
use mtopt::Error;

fn small_suite(tasks: usize, seed: u64) -> TaskSuite {
    make_blob_classification(
        &BlobConfig {
            tasks,
            classes: 3,
            input_dim: 6,
            samples: 400,
            separation: 6.0,
            label_noise: 0.0,
            clusters_per_class: 2,
        },
        seed,
    )
    .unwrap()
}

fn small_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::new(method);
    cfg.architecture = Architecture {
        trunk: vec![16, 12],
        ..Architecture::default()
    };
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.lr = 3e-3;
    cfg.seed = 11;
    cfg
}

// every task sees the labels of task 0 and the heads start equal
fn duplicated(suite: &TaskSuite) -> TaskSuite {
    let mut s = suite.clone();
    for split in [&mut s.train, &mut s.val, &mut s.test] {
        let first = split.targets[0].clone();
        split.targets.iter_mut().for_each(|t| *t = first.clone());
    }
    s
}

fn equal_heads(mut model: MultiTaskModel) -> MultiTaskModel {
    let head = model.head_params(0);
    for i in 1..model.task_count() {
        model.set_head_params(i, &head).unwrap();
    }
    model
}

fn without_times(mut r: RunRecord) -> RunRecord {
    r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    r
}

#[test]
fn fast_unitary_path_matches_the_per_task_sum() {
    let suite = small_suite(3, 1);
    for l2 in [0.0, 1e-3] {
        let mut fast_cfg = small_config(Method::Unitary);
        fast_cfg.dropout = 0.3;
        fast_cfg.l2 = l2;
        let mut slow_cfg = fast_cfg.clone();
        slow_cfg.unitary_fast_path = false;
        let mut model = build_model(&suite, &fast_cfg).unwrap();
        let mut driver = Stepper::new(fast_cfg.clone(), &model, suite.kinds()).unwrap();
        for start in (0..160).step_by(32) {
            let idx: Vec<usize> = (start..start + 32).collect();
            let batch = suite.train.select(&idx);
            // fresh steppers draw the same dropout masks
            let mut fast = Stepper::new(fast_cfg.clone(), &model, suite.kinds()).unwrap();
            let mut slow = Stepper::new(slow_cfg.clone(), &model, suite.kinds()).unwrap();
            let (a, _) = fast.direction(&model, &batch, false).unwrap();
            let (b, _) = slow.direction(&model, &batch, false).unwrap();
            for (x, y) in a.direction.iter().zip(&b.direction) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
            assert_eq!((fast.counter.trunk, slow.counter.trunk), (1, 3));
            driver.step(&mut model, &batch, 1e-2, false).unwrap();
        }
    }
}

#[test]
fn runs_are_reproducible() {
    let suite = small_suite(2, 3);
    for method in [Method::Unitary, Method::Pcgrad, Method::Graddrop { flip_indicator: false }, Method::Rlw {
        distribution: RlwDistribution::Dirichlet,
        mass: 1.0,
    }] {
        let mut cfg = small_config(method);
        cfg.dropout = 0.2;
        let (m1, a) = run(&suite, &cfg).unwrap();
        let (m2, b) = run(&suite, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(without_times(a.record), without_times(b.record));
    }
}

#[test]
fn degenerate_methods_reproduce_the_unitary_trajectory() {
    let suite = duplicated(&small_suite(3, 5));
    let mut base_cfg = small_config(Method::Unitary);
    base_cfg.unitary_fast_path = false;
    base_cfg.dropout = 0.1;
    let init = equal_heads(build_model(&suite, &base_cfg).unwrap());
    let mut base_model = init.clone();
    let base = train(&mut base_model, &suite, &base_cfg).unwrap();
    for method in [
        Method::Rgd { p: 1.0 },
        Method::Rlw {
            distribution: RlwDistribution::Uniform,
            mass: 3.0,
        },
        Method::Pcgrad,
    ] {
        let mut cfg = base_cfg.clone();
        cfg.method = method.clone();
        let mut model = init.clone();
        let out = train(&mut model, &suite, &cfg).unwrap();
        assert_eq!(model, base_model, "{method}");
        for (a, b) in out.record.epochs.iter().zip(&base.record.epochs) {
            assert_eq!(a.train_losses, b.train_losses, "{method}");
        }
    }
}

#[test]
fn single_task_methods_match_unitary() {
    let suite = small_suite(1, 8);
    let mut base_cfg = small_config(Method::Unitary);
    base_cfg.unitary_fast_path = false;
    let (base_model, _) = run(&suite, &base_cfg).unwrap();
    for method in [
        Method::Imtl,
        Method::Pcgrad,
        Method::Mgda { rescale: false },
        Method::Graddrop { flip_indicator: false },
        Method::Rlw {
            distribution: RlwDistribution::Normal,
            mass: 1.0,
        },
        Method::Rgd { p: 1.0 },
        Method::SignAgnosticGraddrop { p: 1.0 },
    ] {
        let mut cfg = base_cfg.clone();
        cfg.method = method.clone();
        let (model, _) = run(&suite, &cfg).unwrap();
        assert_eq!(model, base_model, "{method}");
    }
}

#[test]
fn representation_unitary_matches_parameter_unitary() {
    let suite = small_suite(3, 9);
    let mut pcfg = small_config(Method::Unitary);
    pcfg.unitary_fast_path = false;
    pcfg.l2 = 1e-3;
    pcfg.dropout = 0.2;
    let mut rcfg = pcfg.clone();
    rcfg.space = Space::Representation;
    let model = build_model(&suite, &pcfg).unwrap();
    let mut p = Stepper::new(pcfg, &model, suite.kinds()).unwrap();
    let mut r = Stepper::new(rcfg, &model, suite.kinds()).unwrap();
    let batch = suite.train.select(&(0..40).collect::<Vec<_>>());
    let (a, ha) = p.direction(&model, &batch, false).unwrap();
    let (b, hb) = r.direction(&model, &batch, false).unwrap();
    for (x, y) in a.direction.iter().zip(&b.direction) {
        assert!((x - y).abs() <= 1e-10);
    }
    assert_eq!(ha, hb);
    assert_eq!(p.counter.trunk, 3);
    assert_eq!((r.counter.trunk, r.counter.head), (1, 3));
}

#[test]
fn backward_counts_per_step() {
    let suite = small_suite(4, 2);
    let steps_per_epoch = (suite.train.len() as u64).div_ceil(32);
    let cases = [
        (Method::Unitary, Space::Parameter, 1),
        (Method::Pcgrad, Space::Parameter, 4),
        (Method::Mgda { rescale: true }, Space::Parameter, 4),
        (Method::Imtl, Space::Representation, 1),
        (Method::Graddrop { flip_indicator: false }, Space::Representation, 1),
    ];
    for (method, space, per_step) in cases {
        let mut cfg = small_config(method.clone());
        cfg.space = space;
        cfg.epochs = 2;
        let (_, out) = run(&suite, &cfg).unwrap();
        let epochs = &out.record.epochs;
        assert_eq!(epochs[0].backwards, per_step * steps_per_epoch, "{method}");
        assert_eq!(epochs[1].backwards, 2 * per_step * steps_per_epoch, "{method}");
        assert_eq!(epochs[1].head_backwards, 2 * 4 * steps_per_epoch);
        assert!(epochs.windows(2).all(|w| w[0].backwards <= w[1].backwards));
    }
}

#[test]
fn divergence_is_reported_with_its_step() {
    let suite = make_scale_imbalanced_regression(&RegressionConfig::with_ratio(100.0), 1).unwrap();
    let mut cfg = small_config(Method::Unitary);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.lr = 1e6;
    cfg.epochs = 50;
    match run(&suite, &cfg) {
        Err(Error::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|(_, o)| o.record.epochs.len())),
    }
}

#[test]
fn evaluation_is_deterministic_and_untrained_accuracy_is_chance() {
    let suite = make_blob_classification(
        &BlobConfig {
            tasks: 2,
            classes: 4,
            samples: 6000,
            // labels independent of the inputs, so hits are binomial
            label_noise: 1.0,
            ..BlobConfig::default()
        },
        4,
    )
    .unwrap();
    let mut cfg = small_config(Method::Unitary);
    cfg.dropout = 0.5;
    let model = build_model(&suite, &cfg).unwrap();
    let a = evaluate(&model, &suite, SplitKind::Test).unwrap();
    let b = evaluate(&model, &suite, SplitKind::Test).unwrap();
    assert_eq!(a, b);
    let n = suite.test.len() as f64;
    let k = 4.0;
    let sigma = ((1.0 / k) * (1.0 - 1.0 / k) / n).sqrt();
    for acc in &a.metrics {
        assert!((acc - 1.0 / k).abs() <= 3.0 * sigma, "accuracy {acc}, sigma {sigma}");
    }
}

#[test]
fn separable_suite_is_learned() {
    let suite = make_blob_classification(&BlobConfig::default(), 7).unwrap();
    let mut cfg = small_config(Method::Unitary);
    cfg.architecture = Architecture::default();
    cfg.epochs = 20;
    let (_, out) = run(&suite, &cfg).unwrap();
    assert!(out.record.test_average > 0.99, "{}", out.record.test_average);
    let last = out.record.epochs.last().unwrap();
    assert!(last.update_norm.is_some());
    assert_eq!(out.record.epochs.len(), 20);
}

#[test]
fn regression_suite_trains_with_loss_scaling() {
    let suite = make_scale_imbalanced_regression(&RegressionConfig::with_ratio(10.0), 3).unwrap();
    let mut cfg = small_config(Method::Imtl);
    cfg.imtl_l = Some(0.05);
    cfg.epochs = 6;
    cfg.eval_every = 2;
    let (_, out) = run(&suite, &cfg).unwrap();
    let r = &out.record;
    assert_eq!(r.maximize, vec![false, false]);
    assert!(r.epochs[0].val_metrics.is_none() && r.epochs[1].val_metrics.is_some());
    assert!(r.selected_epoch % 2 == 1);
    assert!(r.epochs.last().unwrap().total_loss < r.epochs[0].total_loss * 2.0);
    assert!(matches!(&suite.train.targets[0], Targets::Values(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    let suite = small_suite(2, 1);
    let mut cfg = small_config(Method::Pcgrad);
    cfg.space = Space::Representation;
    assert!(matches!(run(&suite, &cfg), Err(Error::Config(_))));
    let mut cfg = small_config(Method::Unitary);
    cfg.batch_size = 0;
    assert!(run(&suite, &cfg).is_err());
    let mut cfg = small_config(Method::Rgd { p: 0.0 });
    cfg.epochs = 1;
    assert!(run(&suite, &cfg).is_err());
}
