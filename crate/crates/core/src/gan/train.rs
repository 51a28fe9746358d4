//! Alternating discriminator / generator training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{AdamConfig, AdamState, EngineError, RngStream, Tape, Tensor};
use crate::lipschitz::{self, RegularizerKind, RegularizerSpec};

use super::objective::{self, GeneratorLossForm, MeasuringFunction};
use super::{Discriminator, Generator, NoiseKind, NoisePrior};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset of {n} examples is smaller than the batch size {batch}")]
    DatasetTooSmall { n: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Adam settings per strategy and objective, as used for both networks.
pub fn default_adam(objective: MeasuringFunction, regularizer: &RegularizerSpec) -> AdamConfig {
    let lr = match objective {
        MeasuringFunction::Log => 0.0004,
        MeasuringFunction::Identity => 0.0002,
    };
    let beta1 = match regularizer.kind {
        RegularizerKind::None | RegularizerKind::WeightClip { .. } => 0.5,
        _ => 0.0,
    };
    AdamConfig::new(lr, beta1, 0.999)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: MeasuringFunction,
    pub regularizer: RegularizerSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_adam: AdamConfig,
    pub g_adam: AdamConfig,
    pub seed: u64,
    /// Discriminator steps per generator step.
    pub d_steps: usize,
    /// Iterations (discriminator steps) between checkpoints.
    pub checkpoint_every: usize,
    pub generator_loss: GeneratorLossForm,
    pub d_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub noise: NoisePrior,
    /// A loss whose magnitude exceeds this is treated as a divergence.
    pub divergence_limit: f64,
    /// Number of noise vectors used for checkpoint losses.
    pub eval_noise: usize,
    /// Keep a discriminator snapshot at every checkpoint.
    pub keep_snapshots: bool,
}

impl TrainConfig {
    pub fn new(objective: MeasuringFunction, regularizer: RegularizerSpec) -> Self {
        let adam = default_adam(objective, &regularizer);
        TrainConfig {
            objective,
            regularizer,
            batch_size: 64,
            epochs: 200,
            d_adam: adam,
            g_adam: adam,
            seed: 0,
            d_steps: 1,
            checkpoint_every: 50,
            generator_loss: GeneratorLossForm::Literal,
            d_hidden: vec![128, 128],
            g_hidden: vec![128, 128],
            noise: NoisePrior::new(NoiseKind::StandardNormal, 64),
            divergence_limit: 1e6,
            eval_noise: 256,
            keep_snapshots: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.d_steps == 0 {
            return bad("d_steps must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if self.noise.dim == 0 {
            return bad("noise dimension must be positive");
        }
        if self.eval_noise == 0 {
            return bad("eval_noise must be positive");
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be positive");
        }
        RegularizerSpec::new(self.regularizer.kind).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    /// The discriminator has a sigmoid output exactly under the log objective.
    pub fn sigmoid_output(&self) -> bool {
        self.objective == MeasuringFunction::Log
    }
}

/// Per-step settings shared by both training mechanisms.
#[derive(Clone, Copy, Debug)]
pub struct StepSettings<'a> {
    pub objective: MeasuringFunction,
    pub regularizer: &'a RegularizerSpec,
    pub adam: &'a AdamConfig,
    pub generator_loss: GeneratorLossForm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// The minimized loss (including any penalty).
    pub loss: f64,
    /// `Û` for a discriminator step, `V̂` for a generator step.
    pub objective: f64,
}

/// One ascent step of the discriminator on `Û` (descent on `−Û` plus any
/// penalty), followed by the projection when clipping is active. The
/// generator is held fixed.
pub fn train_step_discriminator(
    d: &mut Discriminator,
    g: &Generator,
    real: &Tensor,
    z: &Tensor,
    settings: StepSettings<'_>,
    opt: &mut AdamState,
    rng: &mut RngStream,
) -> Result<StepReport, EngineError> {
    if real.rows() != z.rows() {
        return Err(EngineError::ShapeMismatch {
            op: "train_step_discriminator",
            detail: format!("|S| = {} but |Z| = {}", real.rows(), z.rows()),
        });
    }
    let fake = g.generate(z)?;
    let tape = Tape::new();
    let bound = d.bind_for_step(&tape)?;
    let guard = objective::uses_guard(settings.objective, d);
    let d_real = d.forward(&bound, &tape.constant(real.clone()))?;
    let d_fake = d.forward(&bound, &tape.constant(fake.clone()))?;
    let u_hat = objective::discriminator_objective(settings.objective, &d_real, &d_fake, guard)?;
    let mut loss = u_hat.neg()?;
    match settings.regularizer.kind {
        RegularizerKind::GradientPenalty { lambda } => {
            loss = loss.add(&lipschitz::gradient_penalty(d, &bound, real, &fake, lambda, rng)?)?;
        }
        RegularizerKind::Orthonormal { beta } => {
            for w in bound.params.iter().step_by(2) {
                loss = loss.add(&lipschitz::orthonormal_penalty_var(w, beta)?)?;
            }
        }
        _ => {}
    }
    let grads: Vec<Tensor> = tape.grad(&loss, &bound.params, false)?.iter().map(|g| g.value()).collect();
    opt.step(&mut d.params, &grads, settings.adam)?;
    if let RegularizerKind::WeightClip { c } = settings.regularizer.kind {
        for p in &mut d.params {
            lipschitz::weight_clip(&mut p.value, c);
        }
    }
    Ok(StepReport { loss: loss.item(), objective: u_hat.item() })
}

/// One descent step of the generator on `V̂` with the discriminator fixed.
/// Takes no real data.
pub fn train_step_generator(
    d: &Discriminator,
    g: &mut Generator,
    z: &Tensor,
    settings: StepSettings<'_>,
    opt: &mut AdamState,
) -> Result<StepReport, EngineError> {
    let tape = Tape::new();
    let gb = g.bind(&tape, true);
    let fake = g.forward(&gb, &tape.constant(z.clone()))?;
    let db = d.bind(&tape, false)?;
    let d_fake = d.forward(&db, &fake)?;
    let v_hat = objective::generator_objective(settings.objective, &d_fake, settings.generator_loss, objective::uses_guard(settings.objective, d))?;
    let grads: Vec<Tensor> = tape.grad(&v_hat, &gb.params, false)?.iter().map(|g| g.value()).collect();
    opt.step(&mut g.params, &grads, settings.adam)?;
    let v = v_hat.item();
    Ok(StepReport { loss: v, objective: v })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    /// Training diverged or collapsed; reported as "N/A".
    Failed { iteration: usize, reason: String },
}

impl Outcome {
    pub fn is_failed(&self) -> bool {
        matches!(self, Outcome::Failed { .. })
    }
}

/// Losses recorded at a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// `Û` on the training set.
    pub train_loss_d: f64,
    /// `Û` on the held-out set, same fake term; NaN without held-out data.
    pub heldout_loss_d: f64,
    pub train_loss_g: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub losses: LossRecord,
    pub discriminator: Option<Discriminator>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub discriminator: Discriminator,
    pub generator: Generator,
    pub outcome: Outcome,
    pub checkpoints: Vec<Checkpoint>,
    pub iterations: usize,
}

impl TrainedModel {
    pub fn curve(&self) -> Vec<LossRecord> {
        self.checkpoints.iter().map(|c| c.losses.clone()).collect()
    }

    /// Loss curve as CSV: `iteration,train_loss_d,heldout_loss_d,train_loss_g`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iteration,train_loss_d,heldout_loss_d,train_loss_g\n");
        for r in self.curve() {
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.train_loss_d, r.heldout_loss_d, r.train_loss_g));
        }
        s
    }
}

/// Events reported to a training observer.
pub enum TrainEvent<'a> {
    DiscriminatorStep { iteration: usize, discriminator: &'a Discriminator, report: StepReport },
    GeneratorStep { iteration: usize, report: StepReport },
    Checkpoint { iteration: usize, discriminator: &'a Discriminator, generator: &'a Generator },
}

/// Evaluation losses for a checkpoint.
pub fn evaluate_losses(
    d: &Discriminator,
    g: &Generator,
    train: &Tensor,
    heldout: Option<&Tensor>,
    z: &Tensor,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossRecord, EngineError> {
    let phi = cfg.objective;
    let fake_term = {
        let fake = g.generate(z)?;
        let tape = Tape::new();
        let b = d.bind(&tape, false)?;
        let df = d.forward(&b, &tape.constant(fake))?;
        objective::fake_term(phi, &df, objective::uses_guard(phi, d))?.item()
    };
    let train_real = objective::real_loss(d, train, phi)?;
    let heldout_real = match heldout {
        Some(h) => objective::real_loss(d, h, phi)?,
        None => f64::NAN,
    };
    let train_loss_g = objective::generator_loss_empirical(d, g, z, phi, cfg.generator_loss)?;
    Ok(LossRecord {
        iteration,
        train_loss_d: train_real + fake_term,
        heldout_loss_d: heldout_real + fake_term,
        train_loss_g,
    })
}

/// Trains with [`train_observed`] and no observer.
pub fn train(cfg: &TrainConfig, train: &Dataset, heldout: Option<&Dataset>) -> Result<TrainedModel, TrainError> {
    train_observed(cfg, train, heldout, &mut |_| {})
}

fn engine_failure(e: &EngineError) -> Option<String> {
    match e {
        EngineError::NonFinite { op } => Some(format!("non-finite value in {op}")),
        EngineError::NonFiniteGradient { index } => Some(format!("non-finite gradient for parameter {index}")),
        EngineError::LogDomain { value } => Some(format!("log of {value}")),
        _ => None,
    }
}

/// Alternates discriminator and generator steps over `epochs` passes of the
/// training set. Non-finite values and divergent losses end the run with
/// [`Outcome::Failed`] instead of an error.
pub fn train_observed(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: Option<&Dataset>,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let n = train.len();
    if n < cfg.batch_size {
        return Err(TrainError::DatasetTooSmall { n, batch: cfg.batch_size });
    }
    let root = RngStream::new(cfg.seed);
    let mut init_rng = root.derive(0);
    let mut order_rng = root.derive(1);
    let mut noise_rng = root.derive(2);
    let mut penalty_rng = root.derive(3);
    let eval_z = cfg.noise.sample(cfg.eval_noise, &mut root.derive(4));

    let dim = train.dim();
    let mut d = Discriminator::new(dim, &cfg.d_hidden, cfg.sigmoid_output(), &cfg.regularizer.kind, &mut init_rng);
    let mut g = Generator::new(cfg.noise, &cfg.g_hidden, train.example_shape(), &mut init_rng);
    let mut d_opt = AdamState::new(&d.params);
    let mut g_opt = AdamState::new(&g.params);

    let train_all = train.examples().clone();
    let heldout_all = heldout.map(|h| h.examples().clone());
    // Checkpoint losses use the same number of fake and real examples.
    let mut checkpoints = Vec::new();
    let mut checkpoint = |iteration: usize, d: &Discriminator, g: &Generator, observer: &mut dyn FnMut(TrainEvent<'_>)| {
        let losses = evaluate_losses(d, g, &train_all, heldout_all.as_ref(), &eval_z, cfg, iteration)?;
        observer(TrainEvent::Checkpoint { iteration, discriminator: d, generator: g });
        checkpoints.push(Checkpoint { losses, discriminator: cfg.keep_snapshots.then(|| d.clone()) });
        Ok::<(), EngineError>(())
    };

    let d_settings = StepSettings {
        objective: cfg.objective,
        regularizer: &cfg.regularizer,
        adam: &cfg.d_adam,
        generator_loss: cfg.generator_loss,
    };
    let g_settings = StepSettings { adam: &cfg.g_adam, ..d_settings };

    let mut iteration = 0;
    let mut outcome = Outcome::Converged;
    if let Err(e) = checkpoint(0, &d, &g, observer) {
        outcome = fail_or_err(e, 0)?;
    }
    'outer: for _epoch in 0..cfg.epochs {
        if outcome.is_failed() {
            break;
        }
        let perm = order_rng.permutation(n);
        for chunk in perm.chunks_exact(cfg.batch_size) {
            let real = train.batch(chunk);
            let z = cfg.noise.sample(cfg.batch_size, &mut noise_rng);
            let step = train_step_discriminator(&mut d, &g, &real, &z, d_settings, &mut d_opt, &mut penalty_rng);
            iteration += 1;
            let report = match step {
                Ok(r) => r,
                Err(e) => {
                    outcome = fail_or_err(e, iteration)?;
                    break 'outer;
                }
            };
            if let Some(reason) = diverged(report.loss, cfg.divergence_limit) {
                outcome = Outcome::Failed { iteration, reason };
                break 'outer;
            }
            observer(TrainEvent::DiscriminatorStep { iteration, discriminator: &d, report });

            if iteration % cfg.d_steps == 0 {
                let z = cfg.noise.sample(cfg.batch_size, &mut noise_rng);
                match train_step_generator(&d, &mut g, &z, g_settings, &mut g_opt) {
                    Ok(report) => {
                        if let Some(reason) = diverged(report.loss, cfg.divergence_limit) {
                            outcome = Outcome::Failed { iteration, reason };
                            break 'outer;
                        }
                        observer(TrainEvent::GeneratorStep { iteration, report });
                    }
                    Err(e) => {
                        outcome = fail_or_err(e, iteration)?;
                        break 'outer;
                    }
                }
            }
            if iteration % cfg.checkpoint_every == 0 {
                if let Err(e) = checkpoint(iteration, &d, &g, observer) {
                    outcome = fail_or_err(e, iteration)?;
                    break 'outer;
                }
            }
        }
    }
    if !outcome.is_failed() && iteration % cfg.checkpoint_every != 0 {
        if let Err(e) = checkpoint(iteration, &d, &g, observer) {
            outcome = fail_or_err(e, iteration)?;
        }
    }
    Ok(TrainedModel { discriminator: d, generator: g, outcome, checkpoints, iterations: iteration })
}

fn fail_or_err(e: EngineError, iteration: usize) -> Result<Outcome, TrainError> {
    match engine_failure(&e) {
        Some(reason) => Ok(Outcome::Failed { iteration, reason }),
        None => Err(e.into()),
    }
}

fn diverged(loss: f64, limit: f64) -> Option<String> {
    (!loss.is_finite() || loss.abs() > limit).then(|| format!("loss {loss:e} beyond divergence limit {limit:e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;
    use crate::engine::Parameter;
    use crate::engine::ParamRole;
    use crate::gan::{MlpSpec, OutputActivation};

    fn ring(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed);
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let a = (i % 4) as f64 * std::f64::consts::FRAC_PI_2;
                [0.5 * a.cos() + 0.05 * rng.normal(), 0.5 * a.sin() + 0.05 * rng.normal()]
            })
            .collect();
        Dataset::new(Tensor::new(vec![n, 2], data).unwrap(), vec![2], Source::Synthetic("ring".into())).unwrap()
    }

    fn small_cfg(objective: MeasuringFunction, strategy: &str) -> TrainConfig {
        let mut cfg = TrainConfig::new(objective, strategy.parse().unwrap());
        cfg.batch_size = 16;
        cfg.d_hidden = vec![16];
        cfg.g_hidden = vec![16];
        cfg.noise = NoisePrior::new(NoiseKind::StandardNormal, 4);
        cfg.epochs = 3;
        cfg.checkpoint_every = 2;
        cfg
    }

    #[test]
    fn adam_defaults_follow_strategy_table() {
        let a = default_adam(MeasuringFunction::Log, &"original".parse().unwrap());
        assert_eq!((a.lr, a.beta1, a.beta2), (0.0004, 0.5, 0.999));
        let a = default_adam(MeasuringFunction::Log, &"spectral".parse().unwrap());
        assert_eq!((a.lr, a.beta1), (0.0004, 0.0));
        let a = default_adam(MeasuringFunction::Identity, &"clip".parse().unwrap());
        assert_eq!((a.lr, a.beta1), (0.0002, 0.5));
        let a = default_adam(MeasuringFunction::Identity, &"gp".parse().unwrap());
        assert_eq!((a.lr, a.beta1), (0.0002, 0.0));
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let data = ring(32, 1);
        let mut cfg = small_cfg(MeasuringFunction::Log, "original");
        cfg.epochs = 0;
        let a = train(&cfg, &data, None).unwrap();
        let mut init_rng = RngStream::new(cfg.seed).derive(0);
        let d0 = Discriminator::new(2, &cfg.d_hidden, true, &RegularizerKind::None, &mut init_rng);
        assert_eq!(a.discriminator.params, d0.params);
        assert_eq!(a.iterations, 0);
        assert_eq!(a.checkpoints.len(), 1);
    }

    #[test]
    fn too_small_dataset_is_error() {
        let data = ring(8, 1);
        let cfg = small_cfg(MeasuringFunction::Log, "original");
        assert!(matches!(train(&cfg, &data, None), Err(TrainError::DatasetTooSmall { .. })));
    }

    #[test]
    fn zero_learning_rate_freezes_both_networks() {
        let mut rng = RngStream::new(2);
        let reg: RegularizerSpec = "original".parse().unwrap();
        let mut d = Discriminator::new(2, &[8], true, &reg.kind, &mut rng);
        let mut g = Generator::new(NoisePrior::new(NoiseKind::StandardNormal, 3), &[8], &[2], &mut rng);
        let (d0, g0) = (d.params.clone(), g.params.clone());
        let adam = AdamConfig::new(0.0, 0.5, 0.999);
        let settings = StepSettings { objective: MeasuringFunction::Log, regularizer: &reg, adam: &adam, generator_loss: GeneratorLossForm::Literal };
        let real = rng.normal_tensor(&[4, 2], 0.5);
        let z = rng.normal_tensor(&[4, 3], 1.0);
        let mut dopt = AdamState::new(&d.params);
        let mut gopt = AdamState::new(&g.params);
        train_step_discriminator(&mut d, &g, &real, &z, settings, &mut dopt, &mut rng).unwrap();
        train_step_generator(&d, &mut g, &z, settings, &mut gopt).unwrap();
        assert_eq!(d.params, d0);
        assert_eq!(g.params, g0);
    }

    #[test]
    fn clipping_holds_after_every_step() {
        let data = ring(64, 3);
        let cfg = small_cfg(MeasuringFunction::Identity, "clip");
        let mut worst: f64 = 0.0;
        let model = train_observed(&cfg, &data, None, &mut |e| {
            if let TrainEvent::DiscriminatorStep { discriminator, .. } = e {
                for p in &discriminator.params {
                    worst = worst.max(p.value.max_abs());
                }
            }
        })
        .unwrap();
        assert!(!model.outcome.is_failed());
        assert!(worst <= 0.01);
    }

    #[test]
    fn linear_discriminator_moves_along_gradient() {
        // d(x) = w x with Identity φ: Û = mean(w x_real) + mean(1 - w x_fake),
        // dÛ/dw = mean x_real - mean x_fake.
        let mut rng = RngStream::new(0);
        let spec = MlpSpec::new(1, &[], 1, OutputActivation::Linear);
        let params = vec![
            Parameter::new(Tensor::new(vec![1, 1], vec![0.5]).unwrap(), ParamRole::Weight, 0),
            Parameter::new(Tensor::zeros(&[1]), ParamRole::Bias, 0),
        ];
        let reg: RegularizerSpec = "original".parse().unwrap();
        let mut d = Discriminator::from_params(spec, params, &reg.kind, &mut rng);
        // Generator whose output is tanh(0·z + b) = tanh(b) for any z.
        let g_spec = MlpSpec::new(1, &[], 1, OutputActivation::Tanh);
        let g = Generator {
            spec: g_spec,
            params: vec![
                Parameter::new(Tensor::zeros(&[1, 1]), ParamRole::Weight, 0),
                Parameter::new(Tensor::vector(vec![0.8f64.atanh()]), ParamRole::Bias, 0),
            ],
            noise: NoisePrior::new(NoiseKind::Uniform, 1),
            example_shape: vec![1],
        };
        let real = Tensor::new(vec![2, 1], vec![0.1, 0.3]).unwrap();
        let z = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let analytic: f64 = 0.2 - 0.8;
        let adam = AdamConfig::new(0.01, 0.5, 0.999);
        let settings = StepSettings { objective: MeasuringFunction::Identity, regularizer: &reg, adam: &adam, generator_loss: GeneratorLossForm::Literal };
        let mut opt = AdamState::new(&d.params);
        train_step_discriminator(&mut d, &g, &real, &z, settings, &mut opt, &mut rng).unwrap();
        let moved = d.params[0].value.item() - 0.5;
        assert!(moved.signum() == analytic.signum() && moved.abs() > 0.0);
    }
}
