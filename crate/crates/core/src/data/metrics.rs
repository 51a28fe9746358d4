use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, AdamState, EngineError, Parameter, ParamRole, RngStream, Tape, Tensor};
use crate::gan::{mlp_forward, MlpSpec, OutputActivation};

use super::{DataError, Dataset};

/// Generalization gap between held-out and training losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `|heldout − train|`
    pub gap: f64,
    /// `heldout − train`
    pub signed: f64,
}

pub fn gap_from_losses(train_loss: f64, heldout_loss: f64) -> GapReport {
    let signed = heldout_loss - train_loss;
    GapReport { gap: signed.abs(), signed }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

/// Population mean and stddev per channel, on the `[0, 1]` pixel scale.
pub fn channel_stddev(dataset: &Dataset) -> Result<ChannelStats, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty("channel statistics of an empty dataset".into()));
    }
    let c = dataset.channels();
    let plane = dataset.dim() / c;
    let x = dataset.examples();
    let mut mean = vec![0.0; c];
    let mut stddev = vec![0.0; c];
    let count = (dataset.len() * plane) as f64;
    for ch in 0..c {
        let values = (0..x.rows()).flat_map(|i| x.row(i)[ch * plane..(ch + 1) * plane].iter().map(|v| (v + 1.0) / 2.0));
        let m = values.clone().sum::<f64>() / count;
        let var = values.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[ch] = m;
        stddev[ch] = var.sqrt();
    }
    Ok(ChannelStats { mean, stddev })
}

/// Exp of the mean KL divergence between the rows of `probs` (`[n, C]`) and
/// their average. Lies in `[1, C]`.
pub fn classifier_score(probs: &Tensor) -> Result<f64, DataError> {
    if probs.shape().len() != 2 || probs.rows() == 0 {
        return Err(DataError::Empty("classifier score needs at least one sample".into()));
    }
    let (n, c) = (probs.rows(), probs.cols());
    let mut marginal = vec![0.0; c];
    for i in 0..n {
        for (m, &p) in marginal.iter_mut().zip(probs.row(i)) {
            *m += p / n as f64;
        }
    }
    let mut kl = 0.0;
    for i in 0..n {
        for (&p, &q) in probs.row(i).iter().zip(&marginal) {
            if p > 0.0 {
                kl += p * (p / q).ln();
            }
        }
    }
    Ok((kl / n as f64).exp().clamp(1.0, c as f64))
}

/// Hyperparameters of [`ScoreClassifier::fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: vec![32], epochs: 30, batch_size: 32, lr: 1e-2 }
    }
}

/// A softmax MLP trained once on labeled data and frozen afterwards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreClassifier {
    spec: MlpSpec,
    params: Vec<Parameter>,
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![logits.rows(), c], out).expect("softmax of finite logits is finite")
}

impl ScoreClassifier {
    pub fn classes(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn fit(data: &Dataset, classes: usize, cfg: &ClassifierConfig, rng: &mut RngStream) -> Result<Self, DataError> {
        let labels = data.labels().ok_or_else(|| DataError::InvalidConfig("classifier needs labeled data".into()))?.to_vec();
        if classes < 2 || labels.iter().any(|&l| l >= classes) {
            return Err(DataError::InvalidConfig(format!("labels must lie in 0..{classes} with at least 2 classes")));
        }
        if cfg.batch_size == 0 || data.len() < cfg.batch_size {
            return Err(DataError::InvalidConfig(format!("{} examples for batch size {}", data.len(), cfg.batch_size)));
        }
        let spec = MlpSpec::new(data.dim(), &cfg.hidden, classes, OutputActivation::Linear);
        let mut params = Vec::new();
        for (layer, pair) in spec.widths.windows(2).enumerate() {
            let std = (2.0 / pair[0] as f64).sqrt();
            params.push(Parameter::new(rng.normal_tensor(&[pair[1], pair[0]], std), ParamRole::Weight, layer));
            params.push(Parameter::new(Tensor::zeros(&[pair[1]]), ParamRole::Bias, layer));
        }
        let adam = AdamConfig::new(cfg.lr, 0.9, 0.999);
        let mut opt = AdamState::new(&params);
        let x = data.examples().clone();
        for _ in 0..cfg.epochs {
            let perm = rng.permutation(data.len());
            for idx in perm.chunks_exact(cfg.batch_size) {
                let xb = x.select_rows(idx);
                let mut onehot = vec![0.0; idx.len() * classes];
                for (r, &i) in idx.iter().enumerate() {
                    onehot[r * classes + labels[i]] = 1.0;
                }
                let grads = cross_entropy_grads(&spec, &params, xb, Tensor::new(vec![idx.len(), classes], onehot)?)?;
                opt.step(&mut params, &grads, &adam)?;
            }
        }
        Ok(ScoreClassifier { spec, params })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor, EngineError> {
        let tape = Tape::new();
        let vars: Vec<_> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let (w, b): (Vec<_>, Vec<_>) = vars.chunks(2).map(|c| (c[0].clone(), c[1].clone())).unzip();
        Ok(mlp_forward(&tape.constant(x.clone()), &w, &b, OutputActivation::Linear)?.value())
    }

    /// Class probabilities `[n, C]`; every row sums to one.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor, DataError> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim() {
            return Err(DataError::Shape(format!("classifier expects [n, {}], got {:?}", self.spec.input_dim(), x.shape())));
        }
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Fraction of rows whose argmax matches `labels`.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64, DataError> {
        let p = self.predict_proba(x)?;
        let hits = (0..p.rows())
            .filter(|&i| {
                let row = p.row(i);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                arg == labels[i]
            })
            .count();
        Ok(hits as f64 / p.rows().max(1) as f64)
    }

    /// [`classifier_score`] of the predicted label distributions of `samples`.
    pub fn score(&self, samples: &Tensor) -> Result<f64, DataError> {
        if samples.rows() == 0 {
            return Err(DataError::Empty("classifier score of no samples".into()));
        }
        classifier_score(&self.predict_proba(samples)?)
    }
}

fn cross_entropy_grads(spec: &MlpSpec, params: &[Parameter], x: Tensor, onehot: Tensor) -> Result<Vec<Tensor>, EngineError> {
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.var(p.value.clone())).collect();
    let (w, b): (Vec<_>, Vec<_>) = vars.chunks(2).map(|c| (c[0].clone(), c[1].clone())).unzip();
    let logits = mlp_forward(&tape.constant(x), &w, &b, spec.output)?;
    let classes = spec.output_dim();
    let shift = logits.with_value(|l| (0..l.rows()).map(|i| l.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect::<Vec<_>>());
    let shifted = logits.sub(&tape.constant(Tensor::vector(shift)).broadcast_cols(classes)?)?;
    let lse = shifted.exp()?.sum_cols()?.log()?;
    let picked = shifted.mul(&tape.constant(onehot))?.sum_cols()?;
    let loss = lse.sub(&picked)?.mean()?;
    Ok(tape.grad(&loss, &vars, false)?.iter().map(|g| g.value()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_examples() {
        assert_eq!(gap_from_losses(0.3, 0.3).gap, 0.0);
        let g = gap_from_losses(-1.386, -0.805);
        assert!((g.gap - 0.581).abs() < 1e-12 && g.signed > 0.0);
        assert_eq!(gap_from_losses(1.0, 2.0).gap, gap_from_losses(2.0, 1.0).gap);
    }

    #[test]
    fn score_extremes() {
        let uniform = Tensor::full(&[10, 4], 0.25);
        assert!((classifier_score(&uniform).unwrap() - 1.0).abs() < 1e-9);
        let one_hot = Tensor::new(vec![4, 4], Tensor::identity(4).into_data()).unwrap();
        assert!((classifier_score(&one_hot).unwrap() - 4.0).abs() < 1e-9);
        let same = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((classifier_score(&same).unwrap() - 1.0).abs() < 1e-9);
        assert!(classifier_score(&Tensor::zeros(&[0, 3])).is_err());
    }
}
