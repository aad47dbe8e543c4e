use plmap_core::dataset::build_dataset;
use plmap_core::eval::{self, empirical_baseline_fit, make_cv_plan, metrics, Fold};
use plmap_core::oracle::generate_labels;
use plmap_core::preprocess::{FeatureConfig, FeatureOptions};
use plmap_core::trainer::TrainConfig;
use plmap_core::{generate_scene, Error, HeightField, MaskParams, NetConfig, OracleConfig, SceneSpec, Site};
use proptest::prelude::*;

/// Direct summation from the metric definitions, kept deliberately naive.
fn reference(pred: &[f64], truth: &[f64]) -> (f64, f64, f64, f64) {
    let n = pred.len() as f64;
    let mut sq = Vec::new();
    let mut abs = Vec::new();
    let mut pct = Vec::new();
    for i in 0..pred.len() {
        let e = pred[i] - truth[i];
        sq.push(e * e);
        abs.push(if e < 0.0 { -e } else { e });
        let r = e / truth[i];
        pct.push(if r < 0.0 { -r } else { r });
    }
    let mut mean_t = 0.0;
    for t in truth {
        mean_t += t / n;
    }
    let mut ss_tot = 0.0;
    for t in truth {
        ss_tot += (t - mean_t).powi(2);
    }
    let sum = |v: &[f64]| v.iter().fold(0.0, |a, b| a + b);
    let rmse = (sum(&sq) / n).sqrt();
    (rmse, sum(&abs) / n, 100.0 * sum(&pct) / n, 1.0 - sum(&sq) / ss_tot)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn samples(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(40.0f64..180.0, n),
            prop::collection::vec(40.0f64..180.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_direct_summation((pred, truth) in samples(10)) {
        let r = metrics(&pred, &truth).unwrap();
        let (rmse, mae, mape, r2) = reference(&pred, &truth);
        prop_assert!(close(r.rmse_db, rmse), "{} vs {}", r.rmse_db, rmse);
        prop_assert!(close(r.mae_db, mae));
        prop_assert!(close(r.mape, mape));
        prop_assert!((r.r2 - r2).abs() <= 1e-12 * r2.abs().max(1.0));
        prop_assert_eq!(r.n, pred.len());
    }

    #[test]
    fn metrics_are_order_free((pred, truth) in samples(40), rot in 0usize..40) {
        let k = rot % pred.len();
        let mut p2 = pred.clone();
        let mut t2 = truth.clone();
        p2.rotate_left(k);
        t2.rotate_left(k);
        p2.reverse();
        t2.reverse();
        let a = metrics(&pred, &truth).unwrap();
        let b = metrics(&p2, &t2).unwrap();
        prop_assert!(close(a.rmse_db, b.rmse_db));
        prop_assert!(close(a.mae_db, b.mae_db));
        prop_assert!(close(a.mape, b.mape));
        prop_assert!((a.r2 - b.r2).abs() <= 1e-9 * a.r2.abs().max(1.0));
    }

    #[test]
    fn rmse_bounds_mae((pred, truth) in samples(40)) {
        let r = metrics(&pred, &truth).unwrap();
        prop_assert!(r.rmse_db >= r.mae_db && r.mae_db >= 0.0);
        prop_assert!(r.r2 <= 1.0);
    }

    #[test]
    fn shifting_labels_moves_only_the_intercept(pl0 in 0.0f64..80.0, n_exp in 1.0f64..6.0, c in -30.0f64..30.0) {
        let d: Vec<f64> = (1..40).map(|i| 5.0 * f64::from(i)).collect();
        let pl: Vec<f64> = d.iter().map(|x| pl0 + 10.0 * n_exp * x.log10()).collect();
        let fit = empirical_baseline_fit(&d, &pl).unwrap();
        prop_assert!((fit.pl0 - pl0).abs() < 1e-9 && (fit.n_exp - n_exp).abs() < 1e-9);
        let shifted: Vec<f64> = pl.iter().map(|v| v + c).collect();
        let g = empirical_baseline_fit(&d, &shifted).unwrap();
        prop_assert!((g.pl0 - fit.pl0 - c).abs() < 1e-9);
        prop_assert!((g.n_exp - fit.n_exp).abs() < 1e-9);
    }
}

#[test]
fn hand_checked_metrics() {
    let r = metrics(&[12.0, 18.0], &[10.0, 20.0]).unwrap();
    assert_eq!((r.rmse_db, r.mae_db), (2.0, 2.0));
    assert!(close(r.mape, 15.0));
    let truth = [100.0, 110.0, 130.0, 140.0];
    let r = metrics(&[120.0; 4], &truth).unwrap();
    assert!(r.r2.abs() < 1e-12);
    assert!(close(r.rmse_db, 250f64.sqrt()));
}

#[test]
fn exact_log_distance_recovery() {
    let d = [1.0, 2.0, 5.0, 10.0, 100.0];
    let pl: Vec<f64> = d.iter().map(|x: &f64| 40.0 + 20.0 * x.log10()).collect();
    let fit = empirical_baseline_fit(&d, &pl).unwrap();
    assert!((fit.pl0 - 40.0).abs() < 1e-9 && (fit.n_exp - 2.0).abs() < 1e-9);
    assert!(matches!(empirical_baseline_fit(&[3.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::SingularFit(_))));
}

#[test]
fn free_space_labels_fit_a_square_law() {
    let field = HeightField::flat(200, 200, 2.0).unwrap();
    let mut sites = vec![Site::tx(200.0, 200.0, 15.0)];
    for i in 0..60 {
        let a = f64::from(i) * 0.7;
        let r = 10.0 + 3.0 * f64::from(i);
        sites.push(Site::rx(200.0 + r * a.cos(), 200.0 + r * a.sin(), 1.5));
    }
    let labels = generate_labels(&field, &sites, &OracleConfig::default()).unwrap();
    let d: Vec<f64> = labels.iter().map(|l| l.tx.distance(&l.rx)).collect();
    let pl: Vec<f64> = labels.iter().map(|l| l.pl_db).collect();
    let fit = empirical_baseline_fit(&d, &pl).unwrap();
    assert!((fit.n_exp - 2.0).abs() <= 0.05, "n_exp = {}", fit.n_exp);
}

#[test]
fn protocol_folds() {
    let p = make_cv_plan(&[1, 2, 3, 4]).unwrap();
    let expected = [
        (vec![2, 3, 4], 1),
        (vec![1, 3, 4], 2),
        (vec![1, 2, 4], 3),
        (vec![1, 2, 3], 4),
    ];
    assert_eq!(p.folds.len(), 4);
    for (f, (train, test)) in p.folds.iter().zip(expected) {
        assert_eq!(f, &Fold { train, test });
    }
    let tests: Vec<usize> = p.folds.iter().map(|f| f.test).collect();
    assert_eq!(tests, vec![1, 2, 3, 4]);
    assert_eq!(make_cv_plan(&[2, 1]).unwrap().folds.len(), 2);
    assert!(matches!(make_cv_plan(&[1, 2, 2]), Err(Error::DuplicateId(2))));
}

#[test]
fn cross_validation_on_a_tiny_scene() {
    let spec = SceneSpec {
        extent: 120.0,
        n_tx: 4,
        n_rx_per_tx: 15,
        ..Default::default()
    };
    let (field, sites) = generate_scene(&spec).unwrap();
    let features = FeatureConfig {
        h: 16,
        w: 16,
        mask: MaskParams { sigma: 8.0, kappa: 6.0 },
        ..Default::default()
    };
    let ds = build_dataset(&field, &sites, &OracleConfig::default(), &features, FeatureOptions::default(), 1).unwrap();
    let net = NetConfig {
        input_hw: (16, 16),
        ..NetConfig::compact()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    let plan = make_cv_plan(&ds.tx_ids()).unwrap();
    let mut seen = Vec::new();
    let a = eval::run_cv(&ds, &plan, &cfg, &net, false, |k, e| seen.push((k, e.epoch))).unwrap();
    assert_eq!(a.folds.len(), 4);
    assert_eq!(seen.len(), 8);
    for (k, f) in a.folds.iter().enumerate() {
        assert_eq!(f.fold, k + 1);
        assert_eq!(f.test_tx, k + 1);
        assert_eq!(f.model.n, 15);
        assert!(!f.train_tx.contains(&f.test_tx));
    }
    let mean = a.folds.iter().map(|f| f.model.rmse_db).sum::<f64>() / 4.0;
    assert!(close(a.avg.model.rmse_db, mean));
    let base_mean = a.folds.iter().map(|f| f.baseline.rmse_db).sum::<f64>() / 4.0;
    assert!(close(a.avg.baseline.rmse_db, base_mean));

    let b = eval::run_cv(&ds, &plan, &cfg, &net, false, |_, _| {}).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("avg,"));

    // a plan naming a transmitter without samples is reported with its fold
    let bad = plan_with_missing_tx();
    match eval::run_cv(&ds, &bad, &cfg, &net, false, |_, _| {}) {
        Err(Error::Fold { fold, .. }) => assert_eq!(fold, 1),
        other => panic!("expected a fold error, got {other:?}"),
    }
}

fn plan_with_missing_tx() -> eval::CvPlan {
    eval::CvPlan {
        folds: vec![Fold {
            train: vec![1, 2],
            test: 9,
        }],
    }
}

#[test]
fn leaked_training_samples_fail_the_audit() {
    let spec = SceneSpec {
        extent: 120.0,
        n_tx: 2,
        n_rx_per_tx: 3,
        ..Default::default()
    };
    let (field, sites) = generate_scene(&spec).unwrap();
    let features = FeatureConfig {
        h: 8,
        w: 8,
        ..Default::default()
    };
    let ds = build_dataset(&field, &sites, &OracleConfig::default(), &features, FeatureOptions::default(), 1).unwrap();
    let fold = Fold { train: vec![1], test: 2 };
    assert!(eval::audit_fold(&ds, &fold).is_err());
    assert!(eval::audit_fold(&ds.subset(|s| s.tx_id == 1), &fold).is_ok());
}
