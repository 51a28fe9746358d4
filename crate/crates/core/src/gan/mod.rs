//! Generator and discriminator models, the φ-parameterized objectives and
//! the alternating training mechanisms.

mod model;
pub mod objective;
mod train;

pub use model::{
    mlp_forward, BoundNet, Discriminator, Generator, MlpSpec, NoiseKind, NoisePrior, OutputActivation, Reparam,
    INIT_STD, LEAKY_SLOPE,
};
pub use objective::{
    discriminator_loss_empirical, generator_loss_empirical, measuring_apply, GeneratorLossForm, MeasuringFunction,
};
pub use train::{
    default_adam, evaluate_losses, train, train_observed, train_step_discriminator, train_step_generator, Checkpoint,
    LossRecord, Outcome, StepReport, StepSettings, TrainConfig, TrainError, TrainEvent, TrainedModel,
};
