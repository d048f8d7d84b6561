mod common;

use std::collections::BTreeSet;

use partseg_core::data::{
    build_splits, episode_from_id, generate_synthetic_dataset, ingest_dataset, read_splits,
    sample_episode, Category, Partition, SynthConfig, MANIFEST_FILE, SPLIT_COUNT,
};
use partseg_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generation_is_deterministic() {
    let a = common::synth(4, 5, 24, 3);
    let b = common::synth(4, 5, 24, 3);
    let read = |d: &common::Dataset, rel: &str| std::fs::read(d.root().join(rel)).unwrap();
    assert_eq!(read(&a, MANIFEST_FILE), read(&b, MANIFEST_FILE));
    for (cat, locs) in &a.index.samples_by_category {
        assert_eq!(locs, &b.index.samples_by_category[cat]);
        for l in locs {
            assert_eq!(read(&a, l.image.to_str().unwrap()), read(&b, l.image.to_str().unwrap()));
            assert_eq!(read(&a, l.mask.to_str().unwrap()), read(&b, l.mask.to_str().unwrap()));
        }
    }
    let c = common::synth(4, 5, 24, 4);
    assert_ne!(read(&a, MANIFEST_FILE), read(&c, MANIFEST_FILE));
}

#[test]
fn ingest_round_trips_the_generated_index() {
    let ds = common::synth(3, 4, 16, 1);
    let loaded = ingest_dataset(&ds.root()).unwrap();
    assert_eq!(&loaded, ds.index.as_ref());
    for cat in &loaded.categories {
        for s in loaded.samples(&cat.name) {
            assert_eq!(s.image.shape(), &[3, 16, 16]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.max_label() as usize <= cat.part_count());
        }
    }
}

#[test]
fn every_category_has_visible_parts() {
    let ds = common::synth(6, 6, 32, 2);
    for cat in &ds.index.categories {
        let mut seen = BTreeSet::new();
        for s in ds.index.samples(&cat.name) {
            seen.extend(s.mask.data().iter().copied());
        }
        for p in &cat.parts {
            assert!(seen.contains(&p.id), "{} never shows {}", cat.name, p.raw_name);
        }
    }
}

#[test]
fn part_names_are_normalized_against_the_category() {
    let c = Category::new("Car", &["Car body", "Car Wheel", "mirror"]).unwrap();
    let names: Vec<_> = c.parts.iter().map(|p| p.normalized_name.as_str()).collect();
    assert_eq!(names, ["body", "wheel", "mirror"]);
    assert_eq!(c.parts.iter().map(|p| p.id).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn splits_partition_and_cover_categories() {
    let ds = common::synth(6, 3, 16, 5);
    let all: BTreeSet<String> = ds.index.category_names().into_iter().collect();
    let mut covered = BTreeSet::new();
    for s in 0..SPLIT_COUNT {
        let spec = build_splits(&ds.index, s, 0).unwrap();
        assert!(spec.base.is_disjoint(&spec.novel));
        assert_eq!(spec.base.union(&spec.novel).cloned().collect::<BTreeSet<_>>(), all);
        assert_eq!(spec.novel.len(), 2);
        assert_eq!(spec, build_splits(&ds.index, s, 0).unwrap());
        covered.extend(spec.novel.iter().cloned());
    }
    assert_eq!(covered, all);
    assert!(build_splits(&ds.index, SPLIT_COUNT, 0).is_err());
}

#[test]
fn written_splits_match_built_splits() {
    let ds = common::synth(4, 3, 16, 6);
    let written = read_splits(&ds.root()).unwrap();
    assert_eq!(written.len(), SPLIT_COUNT);
    for (id, spec) in written {
        let built = build_splits(&ds.index, id, 0).unwrap();
        assert_eq!(spec.base, built.base);
        assert_eq!(spec.novel, built.novel);
    }
}

#[test]
fn episodes_draw_distinct_samples_from_one_category() {
    let ds = common::synth(6, 6, 16, 7);
    let split = build_splits(&ds.index, 1, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 1..=3 {
        for _ in 0..20 {
            let e = sample_episode(&ds.index, &split, Partition::Novel, k, &mut rng).unwrap();
            assert!(split.novel.contains(&e.category.name));
            assert_eq!(e.support.len(), k);
            let mut ids: BTreeSet<&str> = e.support.iter().map(|s| s.id.as_str()).collect();
            ids.insert(&e.query.id);
            assert_eq!(ids.len(), k + 1);
            let rebuilt = episode_from_id(&ds.index, &e.id).unwrap();
            assert_eq!(rebuilt.query.id, e.query.id);
            assert_eq!(rebuilt.support.len(), k);
        }
    }
    assert!(sample_episode(&ds.index, &split, Partition::Novel, 6, &mut rng).is_err());
}

#[test]
fn unknown_episode_ids_are_lookup_errors() {
    let ds = common::synth(3, 3, 16, 8);
    for id in ["nope", "Nope:a->b", "Car:zzz->yyy"] {
        let e = episode_from_id(&ds.index, id).unwrap_err();
        assert!(matches!(e, Error::Lookup(_)), "{id}: {e}");
    }
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::TempDir::new().unwrap();
    let e = ingest_dataset(dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn color_masks_are_rejected() {
    let ds = common::synth(3, 3, 16, 9);
    let loc = &ds.index.samples_by_category.values().next().unwrap()[0];
    image::RgbImage::new(16, 16).save(ds.root().join(&loc.mask)).unwrap();
    let e = ingest_dataset(&ds.root()).unwrap_err();
    assert!(matches!(e, Error::Validation { .. }), "{e}");
}

#[test]
fn out_of_range_mask_values_are_rejected() {
    let ds = common::synth(3, 3, 16, 10);
    let loc = &ds.index.samples_by_category.values().next().unwrap()[0];
    image::GrayImage::from_pixel(16, 16, image::Luma([200])).save(ds.root().join(&loc.mask)).unwrap();
    let e = ingest_dataset(&ds.root()).unwrap_err();
    assert!(e.to_string().contains("exceeds"), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn generator_rejects_bad_configs() {
    let dir = tempfile::TempDir::new().unwrap();
    for config in [
        SynthConfig { categories: 2, ..SynthConfig::default() },
        SynthConfig { categories: 99, ..SynthConfig::default() },
        SynthConfig { samples_per_category: 0, ..SynthConfig::default() },
    ] {
        let e = generate_synthetic_dataset(&config, 0, dir.path()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
