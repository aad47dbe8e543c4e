use plmap_core::dataset::build_dataset;
use plmap_core::nnet::{Network, ParamStore};
use plmap_core::preprocess::{FeatureConfig, FeatureOptions};
use plmap_core::trainer::{self, TrainConfig};
use plmap_core::{generate_scene, Error, LabeledDataset, MaskParams, NetConfig, OracleConfig, SceneSpec, Split, NORMALIZATION};

const HW: usize = 32;

fn small_dataset() -> LabeledDataset {
    dataset(2, 100)
}

fn dataset(n_tx: usize, n_rx_per_tx: usize) -> LabeledDataset {
    let spec = SceneSpec {
        extent: 160.0,
        n_tx,
        n_rx_per_tx,
        ..Default::default()
    };
    let (field, sites) = generate_scene(&spec).unwrap();
    let s = HW as f64 / 80.0;
    let features = FeatureConfig {
        h: HW,
        w: HW,
        mask: MaskParams {
            sigma: 40.0 * s,
            kappa: 150.0 * s * s,
        },
        ..Default::default()
    };
    build_dataset(&field, &sites, &OracleConfig::default(), &features, FeatureOptions::default(), 3).unwrap()
}

fn net() -> NetConfig {
    NetConfig {
        input_hw: (HW, HW),
        ..NetConfig::compact()
    }
}

#[test]
fn constant_labels_are_learned() {
    let mut ds = dataset(4, 250);
    assert_eq!(ds.len(), 1000);
    ds.samples.iter_mut().for_each(|s| s.pl_db = 100.0);
    let cfg = TrainConfig {
        epochs: 30,
        ..Default::default()
    };
    let (_, log) = trainer::train(&ds, &cfg, &net()).unwrap();
    let last = log.epochs.last().unwrap();
    assert!(last.train_mse <= 1e-4, "final train MSE {}", last.train_mse);
}

#[test]
fn training_loss_settles() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        epochs: 40,
        seed: 5,
        ..Default::default()
    };
    let (_, log) = trainer::train(&ds, &cfg, &net()).unwrap();
    assert_eq!(log.epochs.len(), 40);
    let mse: Vec<f64> = log.epochs.iter().map(|e| e.train_mse).collect();
    assert_eq!(ds.len(), 200);
    for start in 20..mse.len() - 10 {
        let end = start + 10;
        assert!(
            mse[end] <= 1.05 * mse[start],
            "epoch {end} loss {} exceeds 105% of epoch {start} loss {}",
            mse[end],
            mse[start]
        );
    }
    assert!(mse[39] < mse[0]);
}

#[test]
fn same_seed_gives_identical_logs_and_params() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let (pa, la) = trainer::train(&ds, &cfg, &net()).unwrap();
    let (pb, lb) = trainer::train(&ds, &cfg, &net()).unwrap();
    assert_eq!(la.without_timing(), lb.without_timing());
    assert_eq!(bits(&pa), bits(&pb));
    let other = TrainConfig { seed: 10, ..cfg };
    let (pc, _) = trainer::train(&ds, &other, &net()).unwrap();
    assert_ne!(bits(&pa), bits(&pc));
}

fn bits(p: &ParamStore) -> Vec<u64> {
    p.values().iter().chain(p.running()).map(|v| v.to_bits()).collect()
}

#[test]
fn best_validation_epoch_is_returned() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        epochs: 6,
        ..Default::default()
    };
    let (params, log) = trainer::train(&ds, &cfg, &net()).unwrap();
    let best = log
        .epochs
        .iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse))
        .unwrap();
    assert_eq!(log.best_epoch, best.epoch);
    let n = Network::new(&net()).unwrap();
    let val = ds.indices(Split::Val);
    let pred = trainer::predict_normalized(&n, &params, val.iter().map(|&i| &ds.samples[i].stack)).unwrap();
    let mse = pred
        .iter()
        .zip(&val)
        .map(|(p, &i)| (p - ds.samples[i].pl_db / NORMALIZATION).powi(2))
        .sum::<f64>()
        / val.len() as f64;
    assert!((mse - best.val_mse).abs() <= 1e-12 * best.val_mse.max(1e-12));
}

#[test]
fn predictions_are_denormalized_forward_outputs() {
    let ds = small_dataset();
    let cfg = net();
    let n = Network::new(&cfg).unwrap();
    let params = n.init_params(4);
    let stacks: Vec<_> = ds.samples[..16].iter().map(|s| s.stack.clone()).collect();
    let raw = n.forward(&params, &stacks).unwrap();
    let batch = trainer::predict_pl_batch(&n, &params, stacks.iter()).unwrap();
    for (i, s) in stacks.iter().enumerate() {
        let alone = trainer::predict_pl(&params, &cfg, s).unwrap();
        assert_eq!(alone, 250.0 * raw[i]);
        assert_eq!(alone.to_bits(), batch[i].to_bits());
    }
}

#[test]
fn empty_training_split_is_a_configuration_error() {
    let ds = small_dataset();
    let empty = ds.subset(|_| false);
    assert!(matches!(
        trainer::train(&empty, &TrainConfig::default(), &net()),
        Err(Error::Config(_))
    ));
    let shape = FeatureConfig::default();
    let stack = &ds.samples[0].stack;
    assert_ne!((stack.h(), stack.w()), (shape.h, shape.w));
    assert!(matches!(
        trainer::predict_pl(&Network::new(&net()).unwrap().init_params(0), &NetConfig::compact(), stack),
        Err(Error::Config(_))
    ));
}

#[test]
fn diverging_runs_name_the_epoch() {
    let mut ds = small_dataset();
    ds.samples.iter_mut().for_each(|s| s.pl_db = f64::INFINITY);
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    match trainer::train(&ds, &cfg, &net()) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}
