use egic::data::*;
use egic::image::ImagePlane;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pad_then_crop_is_identity(h in 1usize..40, w in 1usize..40, factor in 1usize..20) {
        let img = ImagePlane::from_fn(h, w, |c, y, x| (c * 7 + y * 3 + x) as f64 / 100.0);
        let (padded, size) = pad_to_factor(&img, factor);
        prop_assert_eq!(padded.height() % factor, 0);
        prop_assert_eq!(padded.width() % factor, 0);
        prop_assert!(padded.height() - h < factor && padded.width() - w < factor);
        prop_assert_eq!(crop_to_size(&padded, size).unwrap(), img);
    }

    #[test]
    fn batches_cover_each_epoch_exactly_once(n in 1usize..30, batch in 1usize..8, seed in any::<u64>()) {
        let b = Batcher::new(n, batch, seed).unwrap();
        let steps = (2 * n).div_ceil(batch) as u64;
        let stream: Vec<usize> = (0..steps).flat_map(|s| b.batch(s)).collect();
        for epoch in stream.chunks(n).filter(|c| c.len() == n) {
            let mut sorted = epoch.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
        prop_assert_eq!(b.batch(steps / 2), Batcher::new(n, batch, seed).unwrap().batch(steps / 2));
    }

    #[test]
    fn generated_labels_stay_in_range(seed in any::<u64>(), classes in 2usize..8) {
        let spec = DatasetSpec { num_samples: 2, image_size: 16, num_classes: classes, seed, ..DatasetSpec::default() };
        for s in generate_dataset(&spec).unwrap() {
            prop_assert!(s.labels.validate(classes).is_ok());
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn datasets_survive_a_disk_round_trip() {
    let spec = DatasetSpec {
        num_samples: 5,
        image_size: 24,
        num_classes: 5,
        ..DatasetSpec::default()
    };
    let samples = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &spec, &samples).unwrap();
    let (spec2, back) = load_dataset(dir.path()).unwrap();
    assert_eq!(spec2, spec);
    assert_eq!(back, samples);
}

#[test]
fn sample_seeds_are_distinct() {
    let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| sample_seed(7, i)).collect();
    assert_eq!(seeds.len(), 1000);
}
