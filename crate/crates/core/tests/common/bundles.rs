//! Randomized dataset bundles for serialization round trips.

use plmap_core::dataset::{Manifest, Provenance, PLDS_VERSION};
use plmap_core::preprocess::{FeatureConfig, FeatureOptions, FSTK_VERSION};
use plmap_core::{FeatureStack, LabeledDataset, OracleConfig, Sample, SceneSpec, Site, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_bundle(seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tx = rng.random_range(1..4);
    let n_rx = rng.random_range(1..6);
    let mut sites = Vec::new();
    for _ in 0..n_tx {
        sites.push(Site::tx(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0), rng.random_range(1.0..60.0)));
    }
    for _ in 0..n_rx {
        sites.push(Site::rx(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0), rng.random_range(1.0..3.0)));
    }
    let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for t in 0..n_tx {
        for r in 0..n_rx {
            let data = (0..4 * h * w).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let stack = FeatureStack::from_channels(h, w, data, rng.random_range(1e8..3e10), rng.random_range(1.0..800.0)).unwrap();
            samples.push(Sample {
                id: samples.len(),
                tx_id: t + 1,
                rx_id: r + 1,
                frequency: stack.frequency,
                pl_db: rng.random_range(1e-3..160.0),
                los: rng.random_bool(0.3),
                stack,
            });
            splits.push(if rng.random_bool(0.75) { Split::Train } else { Split::Val });
        }
    }
    let features = FeatureConfig {
        h,
        w,
        ..Default::default()
    };
    LabeledDataset {
        sites,
        samples,
        manifest: Manifest {
            splits,
            provenance: Provenance {
                scene: rng.random_bool(0.5).then(SceneSpec::default),
                oracle: OracleConfig::default(),
                features,
                options: FeatureOptions::default(),
                split_seed: rng.random(),
                train_fraction: 0.75,
                plds_version: PLDS_VERSION,
                fstk_version: FSTK_VERSION,
                generator: format!("test {seed}"),
            },
        },
    }
}
