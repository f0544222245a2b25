use std::collections::BTreeSet;

use exo2ego::corpus::Split;
use exo2ego::synthworld::{DatasetConfig, SynthDataset, World, WorldConfig, CLIP_FRAMES};
use proptest::prelude::*;

fn config(seed: u64, linear: bool) -> DatasetConfig {
    DatasetConfig {
        world: if linear { WorldConfig::linear() } else { WorldConfig::default() },
        n_episodes: 6,
        seed,
        split_ratios: [0.5, 0.25, 0.25],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn views_share_timestamps(seed in 0u64..10_000, linear in any::<bool>()) {
        let ds = SynthDataset::generate(&config(seed, linear)).unwrap();
        for split in Split::ALL {
            for p in ds.splits.get(split) {
                prop_assert_eq!(p.ego.timestamps.len(), CLIP_FRAMES);
                prop_assert_eq!(p.ego.frames.nrows(), CLIP_FRAMES);
                for exo in &p.exo {
                    prop_assert_eq!(&exo.timestamps, &p.ego.timestamps);
                }
            }
        }
    }

    #[test]
    fn linear_exo_frames_follow_the_ground_truth_map(seed in 0u64..10_000) {
        let cfg = config(seed, true);
        let world = World::new(cfg.world.clone()).unwrap();
        let ds = SynthDataset::generate(&cfg).unwrap();
        for cam in 0..cfg.world.n_exo {
            let t = world.ground_truth_map(cam).unwrap();
            for p in &ds.splits.train {
                let predicted = p.ego.frames.dot(&t.t());
                let err = (&predicted - &p.exo[cam].frames).iter().fold(0.0f64, |a, b| a.max(b.abs()));
                prop_assert!(err <= 1e-12, "camera {cam}: {err:e}");
            }
        }
    }

    #[test]
    fn generation_is_a_function_of_seed_and_config(seed in 0u64..10_000, linear in any::<bool>()) {
        let a = SynthDataset::generate(&config(seed, linear)).unwrap();
        let b = SynthDataset::generate(&config(seed, linear)).unwrap();
        prop_assert_eq!(&a.splits, &b.splits);
        prop_assert_eq!(&a.tracks, &b.tracks);
        prop_assert_eq!(a.map_digest, b.map_digest);
    }

    #[test]
    fn no_episode_spans_two_splits(seed in 0u64..10_000) {
        let ds = SynthDataset::generate(&config(seed, false)).unwrap();
        let mut seen: Vec<BTreeSet<&str>> = Vec::new();
        for split in Split::ALL {
            seen.push(ds.splits.get(split).iter().map(|p| p.episode_id.as_str()).collect());
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                prop_assert!(seen[i].is_disjoint(&seen[j]));
            }
        }
    }
}

#[test]
fn saved_dataset_digest_is_reproducible() {
    let ds = SynthDataset::generate(&config(3, true)).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = ds.save(a.path()).unwrap();
    let db = SynthDataset::generate(&config(3, true)).unwrap().save(b.path()).unwrap();
    assert_eq!(da, db);
    let manifest = std::fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read(b.path().join("manifest.json")).unwrap());
}
