use nalgebra::DMatrix;
use privgan::data::{synth_gaussian_ring, GaussianRingConfig};
use privgan::engine::{Parameter, ParamRole, RngStream, Tape, Tensor};
use privgan::gan::{self, Discriminator, MeasuringFunction, MlpSpec, OutputActivation, TrainConfig, TrainEvent};
use privgan::lipschitz::{self, PowerIterState, RegularizerKind, RegularizerSpec};
use proptest::prelude::*;

fn top_singular_value(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().max()
}

#[test]
fn power_iteration_matches_svd_on_random_matrices() {
    let mut rng = RngStream::new(77);
    for trial in 0..100 {
        let rows = 1 + rng.index(32);
        let cols = 1 + rng.index(32);
        let w = rng.normal_tensor(&[rows, cols], 1.0);
        let mut state = PowerIterState::warm_start(&w, &mut rng);
        let out = lipschitz::spectral_normalize(&w, &mut state, 1).unwrap();
        let exact = top_singular_value(&w);
        assert!((out.sigma - exact).abs() / exact < 0.01, "trial {trial}: {rows}x{cols} {} vs {exact}", out.sigma);
    }
}

#[test]
fn spectral_training_keeps_layers_near_unit_norm() {
    let data = synth_gaussian_ring(&GaussianRingConfig { samples: 128, ..Default::default() }, &mut RngStream::new(1)).unwrap();
    let mut cfg = TrainConfig::new(MeasuringFunction::Log, "spectral".parse().unwrap());
    cfg.epochs = 40;
    cfg.batch_size = 32;
    cfg.checkpoint_every = 20;
    cfg.d_hidden = vec![16, 16];
    cfg.g_hidden = vec![16, 16];
    cfg.keep_snapshots = true;
    let model = gan::train(&cfg, &data, None).unwrap();
    assert!(!model.outcome.is_failed());
    assert!(model.checkpoints.len() >= 3);
    for cp in &model.checkpoints {
        let d = cp.discriminator.as_ref().unwrap();
        for w in d.effective_weights().unwrap() {
            let s = top_singular_value(&w);
            assert!((0.99..=1.01).contains(&s), "iteration {}: sigma {s}", cp.losses.iteration);
        }
    }
}

#[test]
fn clip_training_bounds_every_step() {
    let data = synth_gaussian_ring(&GaussianRingConfig { samples: 64, ..Default::default() }, &mut RngStream::new(2)).unwrap();
    let mut cfg = TrainConfig::new(MeasuringFunction::Log, "clip".parse().unwrap());
    cfg.epochs = 20;
    cfg.batch_size = 16;
    cfg.d_hidden = vec![8];
    cfg.g_hidden = vec![8];
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    gan::train_observed(&cfg, &data, None, &mut |e| {
        if let TrainEvent::DiscriminatorStep { discriminator, .. } = e {
            steps += 1;
            for p in &discriminator.params {
                worst = worst.max(p.value.max_abs());
            }
        }
    })
    .unwrap();
    assert_eq!(steps, 80);
    assert!(worst <= 0.01);
}

#[test]
fn gradient_penalty_of_linear_critic() {
    // d(x) = 3x₁ + 4x₂ has ‖∇d‖ = 5 everywhere: λ(5 − 1)² = 160.
    let spec = MlpSpec::new(2, &[], 1, OutputActivation::Linear);
    let params = vec![
        Parameter::new(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(), ParamRole::Weight, 0),
        Parameter::new(Tensor::zeros(&[1]), ParamRole::Bias, 0),
    ];
    let mut rng = RngStream::new(0);
    let d = Discriminator::from_params(spec, params, &RegularizerKind::None, &mut rng);
    let tape = Tape::new();
    let bound = d.bind(&tape, true).unwrap();
    let real = rng.normal_tensor(&[6, 2], 1.0);
    let fake = rng.normal_tensor(&[6, 2], 1.0);
    let gp = lipschitz::gradient_penalty(&d, &bound, &real, &fake, 10.0, &mut rng).unwrap();
    assert!((gp.item() - 160.0).abs() < 1e-6);
}

#[test]
fn invalid_regularizer_parameters_are_rejected() {
    for kind in [
        RegularizerKind::WeightClip { c: -1.0 },
        RegularizerKind::SpectralNorm { n_iter: 0 },
        RegularizerKind::GradientPenalty { lambda: 0.0 },
        RegularizerKind::Orthonormal { beta: f64::NAN },
    ] {
        assert!(RegularizerSpec::new(kind).is_err());
    }
}

proptest! {
    #[test]
    fn clip_is_an_idempotent_projection(values in prop::collection::vec(-1.0f64..1.0, 1..40), c in 0.001f64..0.5) {
        let mut t = Tensor::vector(values.clone());
        lipschitz::weight_clip(&mut t, c);
        prop_assert!(t.max_abs() <= c);
        for (a, b) in t.data().iter().zip(&values) {
            if b.abs() <= c {
                prop_assert_eq!(a, b);
            }
        }
        let once = t.clone();
        lipschitz::weight_clip(&mut t, c);
        prop_assert_eq!(t, once);
    }

    #[test]
    fn power_iteration_keeps_unit_vector(seed in 0u64..1000, rows in 1usize..10, cols in 1usize..10, iters in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let w = rng.normal_tensor(&[rows, cols], 1.0);
        let mut state = PowerIterState::new((0..rows).map(|_| rng.normal()).collect());
        for _ in 0..3 {
            lipschitz::spectral_normalize(&w, &mut state, iters).unwrap();
            let norm = state.u.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_norm_rows_are_unit(seed in 0u64..1000, rows in 1usize..8, cols in 1usize..8) {
        let w = RngStream::new(seed).normal_tensor(&[rows, cols], 1.0);
        let (n, zero) = lipschitz::weight_norm_rows(&w);
        prop_assert_eq!(zero, 0);
        for i in 0..rows {
            let norm = n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
