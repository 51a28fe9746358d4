use privgan::data::{split_train_holdout, synth_gaussian_ring, GaussianRingConfig};
use privgan::engine::RngStream;
use privgan::gan::{self, MeasuringFunction, TrainConfig};
use privgan::membership::{
    blackbox_attack, build_attack_testset, compute_auc, f1_at_mean_threshold, f1_at_threshold, roc_area, whitebox_attack, AttackerView,
    MinMax, ShadowConfig,
};
use proptest::prelude::*;

/// Direct count over all member/nonmember pairs, ties counted as one half.
fn all_pairs_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &b) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn random_set(rng: &mut RngStream) -> (Vec<f64>, Vec<bool>) {
    let n = 2 + rng.index(60);
    let levels = 1 + rng.index(12);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
    labels[0] = true;
    labels[1] = false;
    // coarse levels force ties
    let scores = (0..n).map(|_| rng.index(levels) as f64 / levels as f64).collect();
    (scores, labels)
}

#[test]
fn auc_matches_all_pairs_on_random_sets() {
    let mut rng = RngStream::new(77);
    for _ in 0..1000 {
        let (scores, labels) = random_set(&mut rng);
        let r = compute_auc(&scores, &labels).unwrap();
        let oracle = all_pairs_auc(&scores, &labels);
        assert!((r.auc - oracle).abs() < 1e-9);
        assert!((roc_area(&r.roc) - oracle).abs() < 1e-9);
    }
}

#[test]
fn roc_runs_from_origin_to_corner() {
    let mut rng = RngStream::new(78);
    for _ in 0..200 {
        let (scores, labels) = random_set(&mut rng);
        let roc = compute_auc(&scores, &labels).unwrap().roc;
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        assert!(roc.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
    }
}

#[test]
fn f1_hand_example() {
    let scores = [0.9, 0.8, 0.1, 0.2];
    let labels = [true, true, false, false];
    let r = f1_at_mean_threshold(&[0.9, 0.8], &scores, &labels).unwrap();
    // only 0.9 clears 0.85: TP 1, FP 0, FN 1
    assert!((r.threshold - 0.85).abs() < 1e-12);
    assert!((r.precision - 1.0).abs() < 1e-12);
    assert!((r.recall - 0.5).abs() < 1e-12);
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!(f1_at_threshold(&scores, &labels, 2.0).degenerate);
}

#[test]
fn single_class_input_is_rejected() {
    assert!(compute_auc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(compute_auc(&[0.1, f64::NAN], &[true, false]).is_err());
}

#[test]
fn attacks_run_end_to_end_without_touching_held_back_data() {
    let data = synth_gaussian_ring(&GaussianRingConfig { samples: 96, ..Default::default() }, &mut RngStream::new(1)).unwrap();
    let split = split_train_holdout(&data, 0.5, &mut RngStream::new(2)).unwrap();
    let mut cfg = TrainConfig::new(MeasuringFunction::Log, "original".parse().unwrap());
    cfg.epochs = 10;
    cfg.batch_size = 16;
    cfg.d_hidden = vec![16];
    cfg.g_hidden = vec![16];
    let model = gan::train(&cfg, &split.train, None).unwrap();
    let test = build_attack_testset(&split).unwrap();
    assert_eq!((test.n_members(), test.n_nonmembers()), (48, 48));

    let wb = whitebox_attack(&model.discriminator, &test, 0.3, &mut RngStream::new(3)).unwrap();
    assert!((0.0..=1.0).contains(&wb.auc));
    assert_eq!(wb.n_members + wb.n_nonmembers, 96);

    let mut shadow_cfg = ShadowConfig::new(cfg.clone());
    shadow_cfg.train.epochs = 5;
    shadow_cfg.train.batch_size = 8;
    let view = AttackerView::new(&test, split.train.example_shape(), &model.generator, &shadow_cfg, &mut RngStream::new(4)).unwrap();
    let (bb, _, audit) = blackbox_attack(&view, &shadow_cfg).unwrap();
    assert_eq!(audit.evaluation_reads_during_training, 0);
    assert!(audit.aux_member_reads > 0);
    assert_eq!(bb.n_members + bb.n_nonmembers, view.evaluation.len());
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in 0u64..10_000) {
        let (scores, labels) = random_set(&mut RngStream::new(seed));
        let base = compute_auc(&scores, &labels).unwrap().auc;
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
        prop_assert_eq!(compute_auc(&mapped, &labels).unwrap().auc, base);
        let mm = MinMax::fit(&scores);
        let rescaled: Vec<f64> = scores.iter().map(|&s| mm.apply(s)).collect();
        prop_assert_eq!(compute_auc(&rescaled, &labels).unwrap().auc, base);
    }

    #[test]
    fn flipping_labels_reflects_auc(seed in 0u64..10_000) {
        let (scores, labels) = random_set(&mut RngStream::new(seed));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = compute_auc(&scores, &labels).unwrap().auc;
        let b = compute_auc(&scores, &flipped).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_item_order(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed);
        let (scores, labels) = random_set(&mut rng);
        let perm = rng.permutation(scores.len());
        let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let l2: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(compute_auc(&s2, &l2).unwrap().auc, compute_auc(&scores, &labels).unwrap().auc);
    }
}
