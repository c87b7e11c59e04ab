use permbasin::data::{
    corrupt_labels, load_mnist_dir, normalize, parse_idx_labels, subsample, synth_blobs, IdxImages,
};
use proptest::prelude::*;

fn write_idx(dir: &std::path::Path, prefix: &str, n: usize, seed: u64) {
    let mut pixels = Vec::with_capacity(n * 4);
    let mut labels = Vec::with_capacity(n);
    let mut s = seed;
    for i in 0..n {
        for _ in 0..4 {
            s = permbasin::seed::splitmix64(s);
            pixels.push((s % 256) as u8);
        }
        labels.push((i % 3) as u8);
    }
    let img = IdxImages {
        count: n,
        rows: 2,
        cols: 2,
        pixels,
    };
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img.to_bytes()).unwrap();
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

#[test]
fn idx_round_trip_and_directory_loading() {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 30, 1);
    write_idx(dir.path(), "t10k", 9, 2);
    let ds = load_mnist_dir(dir.path()).unwrap();
    assert_eq!(ds.train.len(), 30);
    assert_eq!(ds.test.len(), 9);
    assert_eq!(ds.shape.numel(), 4);
    assert!(ds.train.x.iter().all(|&v| (0.0..=1.0).contains(&v)));

    let raw = std::fs::read(dir.path().join("train-images-idx3-ubyte")).unwrap();
    assert_eq!(IdxImages::parse(&raw).unwrap().to_bytes(), raw);
    let mut bad = raw.clone();
    bad[3] = 0x01;
    assert!(IdxImages::parse(&bad).is_err());
    assert!(IdxImages::parse(&raw[..raw.len() - 1]).is_err());
    let labels = std::fs::read(dir.path().join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!(parse_idx_labels(&labels).unwrap().len(), 30);
}

#[test]
fn normalisation_standardises_each_feature() {
    let ds = normalize(&synth_blobs(400, 3, 2, 4.0, 3).unwrap());
    for k in 0..3 {
        let vals: Vec<f64> = ds.train.x.iter().skip(k).step_by(3).map(|&v| f64::from(v)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stratified_quotas_are_within_one(n_train in 10usize..200, n_test in 5usize..60, seed in any::<u64>()) {
        let ds = synth_blobs(400, 2, 4, 3.0, 7).unwrap();
        let sub = subsample(&ds, n_train, n_test, seed).unwrap();
        prop_assert_eq!(sub.train.len(), n_train);
        prop_assert_eq!(sub.test.len(), n_test);
        for (full, part) in [(&ds.train, &sub.train), (&ds.test, &sub.test)] {
            let total = full.len() as f64;
            for (c, (&have, &avail)) in part.class_counts(4).iter().zip(&full.class_counts(4)).enumerate() {
                let ideal = avail as f64 * part.len() as f64 / total;
                prop_assert!((have as f64 - ideal).abs() <= 1.0, "class {}: {} vs {}", c, have, ideal);
            }
        }
    }

    #[test]
    fn corruption_changes_exactly_the_requested_share(fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = synth_blobs(120, 2, 3, 3.0, 1).unwrap();
        let noisy = corrupt_labels(&ds, fraction, seed).unwrap();
        let changed = ds.train.y.iter().zip(&noisy.train.y).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (fraction * ds.train.len() as f64).round() as usize);
        prop_assert_eq!(&noisy.test.y, &ds.test.y);
        prop_assert!(noisy.train.y.iter().all(|&y| y < 3));
    }
}
