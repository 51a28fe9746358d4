use std::fs;

use privgan::data::pnm::{self, Image};
use privgan::data::{
    channel_stddev, classifier_score, load_image_folder, split_train_holdout, synth_gaussian_ring, synth_patterns, Dataset, GaussianRingConfig,
    PatternConfig, Source,
};
use privgan::engine::{RngStream, Tensor};
use proptest::prelude::*;

#[test]
fn ring_mode_means_match_centers() {
    let cfg = GaussianRingConfig { n_modes: 8, radius: 0.75, stddev: 0.05, samples: 8000 };
    let data = synth_gaussian_ring(&cfg, &mut RngStream::new(3)).unwrap();
    let labels = data.labels().unwrap();
    for k in 0..cfg.n_modes {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == k).collect();
        let n = rows.len() as f64;
        assert!(n > 800.0, "mode {k} has {n} samples");
        let c = cfg.center(k);
        for axis in 0..2 {
            let mean = rows.iter().map(|&i| data.row(i)[axis]).sum::<f64>() / n;
            assert!((mean - c[axis]).abs() < 3.0 * cfg.stddev / n.sqrt(), "mode {k} axis {axis}");
        }
    }
}

#[test]
fn ring_centers_lie_on_circle() {
    let cfg = GaussianRingConfig::default();
    for k in 0..cfg.n_modes {
        let [x, y] = cfg.center(k);
        assert!(((x * x + y * y).sqrt() - cfg.radius).abs() < 1e-12);
    }
}

#[test]
fn patterns_are_normalized_images() {
    let data = synth_patterns(&PatternConfig { samples: 40, ..Default::default() }, &mut RngStream::new(1)).unwrap();
    assert_eq!(data.example_shape(), &[1, 8, 8]);
    assert!(data.in_unit_range());
}

#[test]
fn split_is_a_disjoint_partition() {
    let data = synth_gaussian_ring(&GaussianRingConfig { samples: 101, ..Default::default() }, &mut RngStream::new(0)).unwrap();
    let split = split_train_holdout(&data, 0.5, &mut RngStream::new(5)).unwrap();
    split.check_disjoint().unwrap();
    let mut all: Vec<usize> = split.train_idx.iter().chain(&split.holdout_idx).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
    assert_eq!(split.train.len() + split.holdout.len(), 101);
    assert!(split_train_holdout(&data, 1.0, &mut RngStream::new(5)).is_err());
}

fn gray(width: usize, height: usize, values: Vec<f64>) -> Image {
    Image { channels: 1, height, width, data: values }
}

#[test]
fn pnm_round_trip_within_one_level() {
    let mut rng = RngStream::new(12);
    for channels in [1, 3] {
        let img = Image { channels, height: 5, width: 7, data: (0..channels * 35).map(|_| rng.uniform()).collect() };
        let back = pnm::decode_pnm(&pnm::encode_pnm(&img).unwrap()).unwrap();
        assert_eq!((back.channels, back.height, back.width), (channels, 5, 7));
        for (a, b) in img.data.iter().zip(&back.data) {
            // one 8-bit level on the [0, 1] scale, i.e. 1/127.5 on [-1, 1]
            assert!((2.0 * a - 2.0 * b).abs() <= 1.0 / 127.5 + 1e-12);
        }
    }
}

#[test]
fn folder_loader_maps_black_and_white_to_the_ends() {
    let dir = tempfile::tempdir().unwrap();
    pnm::write_pnm(&dir.path().join("a_black.pgm"), &gray(4, 4, vec![0.0; 16])).unwrap();
    pnm::write_pnm(&dir.path().join("b_white.pgm"), &gray(4, 4, vec![1.0; 16])).unwrap();
    fs::write(dir.path().join("c_broken.pgm"), b"P5 4 4 255\n\x00").unwrap();
    fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let load = load_image_folder(dir.path(), 2).unwrap();
    assert_eq!(load.skipped.len(), 1);
    let d = load.dataset;
    assert_eq!(d.len(), 2);
    assert_eq!(d.example_shape(), &[1, 2, 2]);
    assert!(d.row(0).iter().all(|&v| v == -1.0));
    assert!(d.row(1).iter().all(|&v| v == 1.0));
    assert_eq!(d.ids(), &["a_black.pgm".to_string(), "b_white.pgm".to_string()]);
}

fn dataset_from(rows: Vec<Vec<f64>>, shape: Vec<usize>) -> Dataset {
    let n = rows.len();
    let dim = rows[0].len();
    Dataset::new(Tensor::new(vec![n, dim], rows.concat()).unwrap(), shape, Source::Synthetic("test".into())).unwrap()
}

#[test]
fn half_black_half_white_has_stddev_one_half() {
    let d = dataset_from(vec![vec![-1.0; 4], vec![1.0; 4]], vec![1, 2, 2]);
    let s = channel_stddev(&d).unwrap();
    assert!((s.stddev[0] - 0.5).abs() < 1e-12);
    assert!((s.mean[0] - 0.5).abs() < 1e-12);
}

#[test]
fn classifier_score_extremes() {
    let uniform = Tensor::full(&[10, 4], 0.25);
    assert!((classifier_score(&uniform).unwrap() - 1.0).abs() < 1e-9);
    let mut one_hot = Tensor::zeros(&[8, 4]);
    for i in 0..8 {
        one_hot.data_mut()[i * 4 + i % 4] = 1.0;
    }
    assert!((classifier_score(&one_hot).unwrap() - 4.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn stddev_ignores_order_and_duplication(seed in 0u64..1000, n in 2usize..20) {
        let mut rng = RngStream::new(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..12).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).collect();
        let base = channel_stddev(&dataset_from(rows.clone(), vec![3, 2, 2])).unwrap();
        let mut shuffled = rows.clone();
        rng.shuffle(&mut shuffled);
        let s = channel_stddev(&dataset_from(shuffled, vec![3, 2, 2])).unwrap();
        let doubled = channel_stddev(&dataset_from([rows.clone(), rows].concat(), vec![3, 2, 2])).unwrap();
        for c in 0..3 {
            prop_assert!((base.stddev[c] - s.stddev[c]).abs() < 1e-12);
            prop_assert!((base.stddev[c] - doubled.stddev[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_score_is_bounded(seed in 0u64..1000, n in 1usize..30, c in 2usize..8) {
        let mut rng = RngStream::new(seed);
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            let w: Vec<f64> = (0..c).map(|_| rng.uniform().powi(3)).collect();
            let s: f64 = w.iter().sum::<f64>().max(1e-12);
            data.extend(w.iter().map(|x| x / s));
        }
        let score = classifier_score(&Tensor::new(vec![n, c], data).unwrap()).unwrap();
        prop_assert!((1.0..=c as f64).contains(&score));
    }
}
