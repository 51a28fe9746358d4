use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Tape, Tensor, Var};

use super::{Discriminator, Generator};

/// Clamp applied to sigmoid outputs before the logarithm.
pub const LOG_GUARD: f64 = 1e-7;

/// The scalar map φ applied to discriminator outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasuringFunction {
    /// `φ(t) = log t`, the Jensen-Shannon objective.
    Log,
    /// `φ(t) = t`, the Wasserstein-style objective.
    Identity,
}

impl MeasuringFunction {
    pub fn apply(self, t: f64) -> Result<f64, EngineError> {
        match self {
            MeasuringFunction::Identity => Ok(t),
            MeasuringFunction::Log if t > 0.0 => Ok(t.ln()),
            MeasuringFunction::Log => Err(EngineError::LogDomain { value: t }),
        }
    }

    pub fn apply_var(self, v: &Var) -> Result<Var, EngineError> {
        match self {
            MeasuringFunction::Identity => Ok(v.clone()),
            MeasuringFunction::Log => v.log(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasuringFunction::Log => "js",
            MeasuringFunction::Identity => "wasserstein",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "js" => Some(MeasuringFunction::Log),
            "wasserstein" => Some(MeasuringFunction::Identity),
            _ => None,
        }
    }
}

pub fn measuring_apply(phi: MeasuringFunction, t: f64) -> Result<f64, EngineError> {
    phi.apply(t)
}

/// Which generator objective is descended.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorLossForm {
    /// `mean φ(1 − d(g(z)))`
    #[default]
    Literal,
    /// `−mean φ(d(g(z)))`
    NonSaturating,
}

fn guarded(d_out: &Var, guard: bool) -> Result<Var, EngineError> {
    if guard {
        d_out.clamp(LOG_GUARD, 1.0 - LOG_GUARD)
    } else {
        Ok(d_out.clone())
    }
}

/// `mean φ(d(x))` over a batch of discriminator outputs.
pub fn real_term(phi: MeasuringFunction, d_real: &Var, guard: bool) -> Result<Var, EngineError> {
    phi.apply_var(&guarded(d_real, guard)?)?.mean()
}

/// `mean φ(1 − d(g(z)))` over a batch of discriminator outputs on fakes.
pub fn fake_term(phi: MeasuringFunction, d_fake: &Var, guard: bool) -> Result<Var, EngineError> {
    phi.apply_var(&guarded(d_fake, guard)?.neg()?.add_scalar(1.0)?)?.mean()
}

/// Empirical discriminator objective `Û` on recorded outputs.
pub fn discriminator_objective(phi: MeasuringFunction, d_real: &Var, d_fake: &Var, guard: bool) -> Result<Var, EngineError> {
    real_term(phi, d_real, guard)?.add(&fake_term(phi, d_fake, guard)?)
}

/// Empirical generator objective `V̂` on recorded outputs.
pub fn generator_objective(phi: MeasuringFunction, d_fake: &Var, form: GeneratorLossForm, guard: bool) -> Result<Var, EngineError> {
    match form {
        GeneratorLossForm::Literal => fake_term(phi, d_fake, guard),
        GeneratorLossForm::NonSaturating => phi.apply_var(&guarded(d_fake, guard)?)?.mean()?.neg(),
    }
}

/// `Û` from plain discriminator outputs (no guard).
pub fn discriminator_loss_from_outputs(phi: MeasuringFunction, real: &[f64], fake: &[f64]) -> Result<f64, EngineError> {
    let tape = Tape::new();
    let r = tape.constant(Tensor::vector(real.to_vec()));
    let f = tape.constant(Tensor::vector(fake.to_vec()));
    Ok(discriminator_objective(phi, &r, &f, false)?.item())
}

/// `V̂` from plain discriminator outputs on fakes (no guard).
pub fn generator_loss_from_outputs(phi: MeasuringFunction, fake: &[f64], form: GeneratorLossForm) -> Result<f64, EngineError> {
    let tape = Tape::new();
    let f = tape.constant(Tensor::vector(fake.to_vec()));
    Ok(generator_objective(phi, &f, form, false)?.item())
}

/// Whether outputs of `d` are clamped before `φ`.
pub fn uses_guard(phi: MeasuringFunction, d: &Discriminator) -> bool {
    phi == MeasuringFunction::Log && d.has_sigmoid()
}

fn check_batches(real: Option<&Tensor>, z: &Tensor) -> Result<(), EngineError> {
    if let Some(real) = real {
        if real.rows() != z.rows() {
            return Err(EngineError::ShapeMismatch {
                op: "objective",
                detail: format!("|S| = {} but |Z| = {}", real.rows(), z.rows()),
            });
        }
    }
    Ok(())
}

/// `Û(θ_d, θ_g)` for real batch `S` and noise batch `Z` of equal size.
pub fn discriminator_loss_empirical(
    d: &Discriminator,
    g: &Generator,
    real: &Tensor,
    z: &Tensor,
    phi: MeasuringFunction,
) -> Result<f64, EngineError> {
    check_batches(Some(real), z)?;
    let fake = g.generate(z)?;
    let tape = Tape::new();
    let b = d.bind(&tape, false)?;
    let dr = d.forward(&b, &tape.constant(real.clone()))?;
    let df = d.forward(&b, &tape.constant(fake))?;
    Ok(discriminator_objective(phi, &dr, &df, uses_guard(phi, d))?.item())
}

/// `V̂(θ_d, θ_g)` for a noise batch.
pub fn generator_loss_empirical(
    d: &Discriminator,
    g: &Generator,
    z: &Tensor,
    phi: MeasuringFunction,
    form: GeneratorLossForm,
) -> Result<f64, EngineError> {
    let fake = g.generate(z)?;
    let tape = Tape::new();
    let b = d.bind(&tape, false)?;
    let df = d.forward(&b, &tape.constant(fake))?;
    Ok(generator_objective(phi, &df, form, uses_guard(phi, d))?.item())
}

/// `mean φ(d(x))` over the rows of `x`.
pub fn real_loss(d: &Discriminator, x: &Tensor, phi: MeasuringFunction) -> Result<f64, EngineError> {
    let tape = Tape::new();
    let b = d.bind(&tape, false)?;
    let dr = d.forward(&b, &tape.constant(x.clone()))?;
    Ok(real_term(phi, &dr, uses_guard(phi, d))?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use MeasuringFunction::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn measuring_examples() {
        assert_eq!(measuring_apply(Identity, 0.7).unwrap(), 0.7);
        assert_eq!(measuring_apply(Log, 1.0).unwrap(), 0.0);
        assert!(close(measuring_apply(Log, 0.5).unwrap(), -0.693147));
        assert!(measuring_apply(Log, 0.0).is_err());
        assert!(measuring_apply(Log, -1.0).is_err());
    }

    #[test]
    fn discriminator_loss_examples() {
        assert!(close(discriminator_loss_from_outputs(Identity, &[0.8], &[0.3]).unwrap(), 1.5));
        assert!(close(discriminator_loss_from_outputs(Log, &[0.8], &[0.3]).unwrap(), -0.579818));
        assert!(close(discriminator_loss_from_outputs(Log, &[0.5], &[0.5]).unwrap(), -1.386294));
        assert!(discriminator_loss_from_outputs(Log, &[0.5], &[1.0]).is_err());
    }

    #[test]
    fn generator_loss_examples() {
        let lit = GeneratorLossForm::Literal;
        assert!(close(generator_loss_from_outputs(Identity, &[0.3], lit).unwrap(), 0.7));
        assert!(close(generator_loss_from_outputs(Log, &[0.5], lit).unwrap(), -0.693147));
        assert!(generator_loss_from_outputs(Identity, &[1.0 - 1e-12], lit).unwrap().abs() < 1e-9);
        let ns = generator_loss_from_outputs(Log, &[0.5], GeneratorLossForm::NonSaturating).unwrap();
        assert!(close(ns, 0.693147));
    }
}
