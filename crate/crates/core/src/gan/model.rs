//! Multilayer-perceptron discriminators and generators.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Parameter, ParamRole, RngStream, Tape, Tensor, Var};
use crate::lipschitz::{self, PowerIterState, RegularizerKind};

/// Slope of the hidden leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Stddev of the zero-mean normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
    Tanh,
}

/// Layer widths and activations of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// `[in, hidden..., out]`
    pub widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output_dim: usize, output: OutputActivation) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        MlpSpec { widths, output }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Parameters `[W0, b0, W1, b1, ...]` with `W: [out, in]`.
    pub fn init(&self, rng: &mut RngStream) -> Vec<Parameter> {
        let mut params = Vec::with_capacity(2 * self.layers());
        for (layer, pair) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            params.push(Parameter::new(rng.normal_tensor(&[fan_out, fan_in], INIT_STD), ParamRole::Weight, layer));
            params.push(Parameter::new(Tensor::zeros(&[fan_out]), ParamRole::Bias, layer));
        }
        params
    }
}

/// Forward pass of an MLP given per-layer weight and bias nodes.
pub fn mlp_forward(x: &Var, weights: &[Var], biases: &[Var], output: OutputActivation) -> Result<Var, EngineError> {
    let mut h = x.clone();
    let last = weights.len() - 1;
    for (i, (w, b)) in weights.iter().zip(biases).enumerate() {
        h = h.affine(w, b)?;
        if i < last {
            h = h.leaky_relu(LEAKY_SLOPE)?;
        }
    }
    match output {
        OutputActivation::Linear => Ok(h),
        OutputActivation::Sigmoid => h.sigmoid(),
        OutputActivation::Tanh => h.tanh(),
    }
}

/// Parameters of a network recorded on a tape.
pub struct BoundNet {
    /// Leaf nodes, one per parameter, in parameter order.
    pub params: Vec<Var>,
    /// Weights as used in the forward pass (after any reparameterization).
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// How the discriminator's raw weights become forward-pass weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reparam {
    None,
    Spectral { states: Vec<PowerIterState>, n_iter: usize },
    WeightNormRows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: MlpSpec,
    pub params: Vec<Parameter>,
    /// Declared bound `b` on the output.
    pub output_bound: f64,
    pub reparam: Reparam,
}

impl Discriminator {
    /// A discriminator with one scalar output. `sigmoid` selects a bounded
    /// output in (0, 1); without it the output is unbounded.
    pub fn new(input: usize, hidden: &[usize], sigmoid: bool, regularizer: &RegularizerKind, rng: &mut RngStream) -> Self {
        let output = if sigmoid { OutputActivation::Sigmoid } else { OutputActivation::Linear };
        let spec = MlpSpec::new(input, hidden, 1, output);
        let params = spec.init(rng);
        Self::from_params(spec, params, regularizer, rng)
    }

    /// Under spectral normalization each raw weight is rescaled to unit `σ̂`,
    /// which leaves the network function unchanged but keeps optimizer steps
    /// small relative to the weights so the persisted vectors can track them.
    pub fn from_params(spec: MlpSpec, mut params: Vec<Parameter>, regularizer: &RegularizerKind, rng: &mut RngStream) -> Self {
        let reparam = match *regularizer {
            RegularizerKind::SpectralNorm { n_iter } => {
                let mut states = Vec::new();
                for p in params.iter_mut().filter(|p| p.is_weight()) {
                    let mut state = PowerIterState::warm_start(&p.value, rng);
                    if let Ok(out) = lipschitz::spectral_normalize(&p.value, &mut state, 1) {
                        if !out.degenerate {
                            p.value = out.normalized;
                        }
                    }
                    states.push(state);
                }
                Reparam::Spectral { states, n_iter }
            }
            RegularizerKind::WeightNormRows => Reparam::WeightNormRows,
            _ => Reparam::None,
        };
        Discriminator { spec, params, output_bound: 1.0, reparam }
    }

    pub fn has_sigmoid(&self) -> bool {
        self.spec.output == OutputActivation::Sigmoid
    }

    /// Whether `output_bound` is guaranteed by the architecture.
    pub fn bound_verified(&self) -> bool {
        self.has_sigmoid()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().filter(|p| p.is_weight()).map(|p| &p.value)
    }

    /// Records the parameters on `tape` as leaves (`trainable`) or constants.
    /// Spectral state is read but not advanced.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<BoundNet, EngineError> {
        let mut scratch = self.reparam.clone();
        bind_params(&self.params, &mut scratch, tape, trainable, 1)
    }

    /// Like [`bind`](Self::bind) with trainable leaves, advancing the
    /// persisted power-iteration vectors as a training step does.
    pub fn bind_for_step(&mut self, tape: &Tape) -> Result<BoundNet, EngineError> {
        let n_iter = match self.reparam {
            Reparam::Spectral { n_iter, .. } => n_iter,
            _ => 1,
        };
        bind_params(&self.params, &mut self.reparam, tape, true, n_iter)
    }

    pub fn forward(&self, bound: &BoundNet, x: &Var) -> Result<Var, EngineError> {
        let out = mlp_forward(x, &bound.weights, &bound.biases, self.spec.output)?;
        let n = out.shape()[0];
        out.reshape(&[n])
    }

    /// Outputs `d(x)` for a `[n, dim]` batch, without touching training state.
    pub fn score(&self, x: &Tensor) -> Result<Tensor, EngineError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let xv = tape.constant(x.clone());
        Ok(self.forward(&bound, &xv)?.value())
    }

    /// Forward-pass weight matrices as seen by `score`.
    pub fn effective_weights(&self) -> Result<Vec<Tensor>, EngineError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        Ok(bound.weights.iter().map(Var::value).collect())
    }
}

fn bind_params(
    params: &[Parameter],
    reparam: &mut Reparam,
    tape: &Tape,
    trainable: bool,
    n_iter: usize,
) -> Result<BoundNet, EngineError> {
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if trainable { tape.var(p.value.clone()) } else { tape.constant(p.value.clone()) })
        .collect();
    let raw: Vec<Var> = vars.iter().step_by(2).cloned().collect();
    let biases: Vec<Var> = vars.iter().skip(1).step_by(2).cloned().collect();
    let weights = match reparam {
        Reparam::None => raw,
        Reparam::WeightNormRows => raw.iter().map(lipschitz::weight_norm_rows_var).collect::<Result<_, _>>()?,
        Reparam::Spectral { states, .. } => raw
            .iter()
            .zip(states.iter_mut())
            .map(|(w, state)| lipschitz::spectral_normalize_var(w, state, n_iter))
            .collect::<Result<_, _>>()?,
    };
    Ok(BoundNet { params: vars, weights, biases })
}

/// Distribution of the generator input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    StandardNormal,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePrior {
    pub kind: NoiseKind,
    pub dim: usize,
}

impl NoisePrior {
    pub fn new(kind: NoiseKind, dim: usize) -> Self {
        NoisePrior { kind, dim }
    }

    /// `[n, dim]` i.i.d. draws.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Tensor {
        match self.kind {
            NoiseKind::StandardNormal => rng.normal_tensor(&[n, self.dim], 1.0),
            NoiseKind::Uniform => rng.uniform_tensor(&[n, self.dim], -1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: MlpSpec,
    pub params: Vec<Parameter>,
    pub noise: NoisePrior,
    /// Shape of one generated example, e.g. `[2]` or `[1, 8, 8]`.
    pub example_shape: Vec<usize>,
}

impl Generator {
    pub fn new(noise: NoisePrior, hidden: &[usize], example_shape: &[usize], rng: &mut RngStream) -> Self {
        let out_dim = example_shape.iter().product();
        let spec = MlpSpec::new(noise.dim, hidden, out_dim, OutputActivation::Tanh);
        let params = spec.init(rng);
        Generator { spec, params, noise, example_shape: example_shape.to_vec() }
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundNet {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { tape.var(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        let weights = params.iter().step_by(2).cloned().collect();
        let biases = params.iter().skip(1).step_by(2).cloned().collect();
        BoundNet { params, weights, biases }
    }

    /// Generated batch `[n, out_dim]` for noise `z: [n, noise_dim]`.
    pub fn forward(&self, bound: &BoundNet, z: &Var) -> Result<Var, EngineError> {
        mlp_forward(z, &bound.weights, &bound.biases, self.spec.output)
    }

    pub fn generate(&self, z: &Tensor) -> Result<Tensor, EngineError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(self.forward(&bound, &tape.constant(z.clone()))?.value())
    }

    /// `n` i.i.d. samples `g(z)`, `z` drawn from the noise prior.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Tensor, EngineError> {
        let z = self.noise.sample(n, rng);
        self.generate(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_outputs_in_range_and_reproducible() {
        let mut rng = RngStream::new(5);
        let g = Generator::new(NoisePrior::new(NoiseKind::StandardNormal, 8), &[16], &[1, 2, 2], &mut rng);
        let a = g.sample(1, &mut RngStream::new(9)).unwrap();
        let b = g.sample(1, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 4]);
        let many = g.sample(200, &mut rng).unwrap();
        assert!(many.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn sigmoid_discriminator_is_bounded() {
        let mut rng = RngStream::new(1);
        let d = Discriminator::new(3, &[8, 8], true, &RegularizerKind::None, &mut rng);
        let x = rng.normal_tensor(&[10, 3], 5.0);
        let s = d.score(&x).unwrap();
        assert_eq!(s.shape(), &[10]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(d.bound_verified());
    }
}
