//! Differentially private mechanisms, the bounds that follow from them, and
//! Monte Carlo estimators that check those bounds empirically.
//!
//! The estimators work on scalar examples (`f64`) and on learners whose loss
//! `ℓ(θ, x) = φ(d(x; θ))` lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::engine::RngStream;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrivacyError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite gradient at example {0}")]
    NonFiniteGradient(usize),
    #[error("missing checkpoints: {0}")]
    MissingCheckpoints(String),
}

fn domain(msg: impl Into<String>) -> PrivacyError {
    PrivacyError::Domain(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    ExponentialMechanism,
    NoisyGradLaplace,
}

/// Privacy cost of a mechanism under basic composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    /// Total ε over all `steps`.
    pub epsilon: f64,
    pub mechanism: Mechanism,
    pub sensitivity: f64,
    pub steps: usize,
}

impl DpParams {
    pub fn new(epsilon: f64, mechanism: Mechanism, sensitivity: f64, steps: usize) -> Result<Self, PrivacyError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(domain(format!("epsilon {epsilon} must be finite and nonnegative")));
        }
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(domain(format!("sensitivity {sensitivity} must be positive")));
        }
        Ok(DpParams { epsilon, mechanism, sensitivity, steps })
    }
}

/// `e^ε − 1`, the RO-stability rate implied by ε-DP.
pub fn dp_stability_bound(epsilon: f64) -> Result<f64, PrivacyError> {
    if !(epsilon >= 0.0) {
        return Err(domain(format!("epsilon {epsilon} is negative")));
    }
    Ok(epsilon.exp_m1())
}

/// Bound on `|F_U|` for an algorithm with stability rate `eps_stable`.
pub fn gap_bound_from_stability(eps_stable: f64) -> Result<f64, PrivacyError> {
    if !(eps_stable >= 0.0) {
        return Err(domain(format!("stability rate {eps_stable} is negative")));
    }
    Ok(eps_stable)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub raw: f64,
    /// `min(raw, 1)`
    pub capped: f64,
}

impl TailBound {
    pub fn vacuous(&self) -> bool {
        self.raw >= 1.0
    }
}

/// `P(|U − Û| ≥ t) ≤ 2·exp(−2t² / (m ε²))`.
pub fn mcdiarmid_tail(t: f64, m: usize, epsilon: f64) -> Result<TailBound, PrivacyError> {
    if !(t > 0.0 && t.is_finite()) || m < 1 || !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(domain(format!("tail bound needs t > 0, m ≥ 1, ε > 0 (got t={t}, m={m}, ε={epsilon})")));
    }
    let raw = 2.0 * (-2.0 * t * t / (m as f64 * epsilon * epsilon)).exp();
    Ok(TailBound { raw, capped: raw.min(1.0) })
}

/// A finite set of discriminators over a finite support: `table[h][j]` is
/// `d_h(support[j]) ∈ [0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisClass {
    pub support: Vec<f64>,
    pub table: Vec<Vec<f64>>,
}

impl HypothesisClass {
    pub fn new(support: Vec<f64>, table: Vec<Vec<f64>>) -> Result<Self, PrivacyError> {
        if table.is_empty() || table.len() > 64 {
            return Err(domain(format!("hypothesis class of size {} outside 1..=64", table.len())));
        }
        if table.iter().any(|row| row.len() != support.len() || row.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(domain("every hypothesis needs one value in [0, 1] per support point"));
        }
        Ok(HypothesisClass { support, table })
    }

    /// Eight hypotheses over the points `{0, 1}`.
    pub fn two_point_grid() -> Self {
        let mut table = Vec::new();
        for d0 in [0.1, 0.35, 0.65, 0.9] {
            for d1 in [0.2, 0.8] {
                table.push(vec![d0, d1]);
            }
        }
        HypothesisClass { support: vec![0.0, 1.0], table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// `d_h(x)`, using the nearest support point.
    pub fn eval(&self, h: usize, x: f64) -> f64 {
        let j = (0..self.support.len())
            .min_by(|&a, &b| (self.support[a] - x).abs().total_cmp(&(self.support[b] - x).abs()))
            .unwrap_or(0);
        self.table[h][j]
    }

    /// Empirical real-data term `mean_{x∈S} d_h(x)`.
    pub fn score(&self, h: usize, s: &[f64]) -> f64 {
        s.iter().map(|&x| self.eval(h, x)).sum::<f64>() / s.len().max(1) as f64
    }

    /// Largest change of [`HypothesisClass::score`] when one of `m` examples is replaced.
    pub fn score_sensitivity(&self, m: usize) -> f64 {
        let range = self
            .table
            .iter()
            .map(|row| {
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max);
        range / m.max(1) as f64
    }
}

/// Selection probabilities `∝ exp(ε·score / (2Δ))`.
pub fn exp_mechanism_probabilities(scores: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>, PrivacyError> {
    if scores.is_empty() {
        return Err(domain("no candidates"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) || !(sensitivity > 0.0) {
        return Err(domain(format!("need ε ≥ 0 and Δ > 0 (got {epsilon}, {sensitivity})")));
    }
    let logits: Vec<f64> = scores.iter().map(|s| epsilon * s / (2.0 * sensitivity)).collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / total).collect())
}

/// Index drawn from a discrete distribution by inverse CDF.
pub fn sample_index(probs: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a hypothesis index with the exponential mechanism.
pub fn exp_mechanism_select(
    class: &HypothesisClass,
    score: impl Fn(usize) -> f64,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut RngStream,
) -> Result<usize, PrivacyError> {
    let scores: Vec<f64> = (0..class.len()).map(score).collect();
    Ok(sample_index(&exp_mechanism_probabilities(&scores, epsilon, sensitivity)?, rng))
}

/// Running ε total under basic composition, kept as (per-step ε, count) runs
/// so that `n` equal steps total exactly `n·ε`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    runs: Vec<(f64, usize)>,
}

impl PrivacyAccountant {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn spend(&mut self, epsilon: f64) {
        match self.runs.last_mut() {
            Some((e, n)) if *e == epsilon => *n += 1,
            _ => self.runs.push((epsilon, 1)),
        }
    }

    pub fn steps(&self) -> usize {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn total(&self) -> f64 {
        self.runs.iter().map(|&(e, n)| n as f64 * e).sum()
    }
}

/// Privacy cost of one noisy step: replacing one of `m` examples moves the
/// mean of L2-clipped gradients by at most `2C/m` in L2, hence `2C√d/m` in L1.
pub fn noisy_step_epsilon(clip: f64, batch: usize, dim: usize, laplace_scale: f64) -> f64 {
    2.0 * clip * (dim as f64).sqrt() / (batch as f64 * laplace_scale)
}

/// Laplace scale that makes one step cost `epsilon`.
pub fn laplace_scale_for(epsilon: f64, clip: f64, batch: usize, dim: usize) -> f64 {
    2.0 * clip * (dim as f64).sqrt() / (batch as f64 * epsilon)
}

/// Rescales `g` to L2 norm at most `clip`.
pub fn clip_l2(g: &[f64], clip: f64) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= clip {
        g.to_vec()
    } else {
        g.iter().map(|v| v * clip / norm).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyStep {
    pub clipped_mean: Vec<f64>,
    pub noisy_mean: Vec<f64>,
    pub epsilon: f64,
}

/// One SGD descent step on the clipped, averaged, Laplace-noised gradient.
pub fn noisy_grad_step(
    params: &mut [f64],
    per_example_grads: &[Vec<f64>],
    clip: f64,
    laplace_scale: f64,
    lr: f64,
    accountant: &mut PrivacyAccountant,
    rng: &mut RngStream,
) -> Result<NoisyStep, PrivacyError> {
    if !(clip > 0.0 && clip.is_finite()) || !(laplace_scale > 0.0 && laplace_scale.is_finite()) {
        return Err(domain(format!("need C > 0 and b > 0 (got {clip}, {laplace_scale})")));
    }
    if per_example_grads.is_empty() {
        return Err(domain("empty batch"));
    }
    let d = params.len();
    for (i, g) in per_example_grads.iter().enumerate() {
        if g.len() != d {
            return Err(domain(format!("gradient {i} has {} entries for {d} parameters", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PrivacyError::NonFiniteGradient(i));
        }
    }
    let m = per_example_grads.len();
    let mut mean = vec![0.0; d];
    for g in per_example_grads {
        for (acc, v) in mean.iter_mut().zip(clip_l2(g, clip)) {
            *acc += v / m as f64;
        }
    }
    let noisy: Vec<f64> = mean.iter().map(|v| v + rng.laplace(laplace_scale)).collect();
    for (p, g) in params.iter_mut().zip(&noisy) {
        *p -= lr * g;
    }
    let epsilon = noisy_step_epsilon(clip, m, d, laplace_scale);
    accountant.spend(epsilon);
    Ok(NoisyStep { clipped_mean: mean, noisy_mean: noisy, epsilon })
}

/// A randomized training algorithm on scalar examples.
pub trait Learner {
    type Output: Clone;

    fn name(&self) -> String;

    /// `None` for mechanisms without a privacy guarantee.
    fn privacy(&self) -> Option<DpParams>;

    fn train(&self, s: &[f64], rng: &mut RngStream) -> Self::Output;

    /// `ℓ(θ, x) ∈ [0, 1]`.
    fn loss(&self, out: &Self::Output, x: f64) -> f64;
}

/// A learner whose output distribution can be listed exactly.
pub trait EnumerableLearner: Learner {
    fn distribution(&self, s: &[f64]) -> Vec<(Self::Output, f64)>;

    fn expected_loss(&self, s: &[f64], x: f64) -> f64 {
        self.distribution(s).iter().map(|(o, p)| p * self.loss(o, x)).sum()
    }
}

/// The exponential mechanism over a hypothesis class, scored by the empirical
/// real-data term.
#[derive(Clone, Debug)]
pub struct ExpMechanismLearner {
    pub class: HypothesisClass,
    pub epsilon: f64,
    /// Sample size the sensitivity is calibrated for.
    pub m: usize,
}

impl ExpMechanismLearner {
    pub fn new(class: HypothesisClass, epsilon: f64, m: usize) -> Result<Self, PrivacyError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) || m < 1 {
            return Err(domain(format!("need ε ≥ 0 and m ≥ 1 (got {epsilon}, {m})")));
        }
        Ok(ExpMechanismLearner { class, epsilon, m })
    }

    fn sensitivity(&self) -> f64 {
        self.class.score_sensitivity(self.m).max(f64::MIN_POSITIVE)
    }

    pub fn probabilities(&self, s: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = (0..self.class.len()).map(|h| self.class.score(h, s)).collect();
        exp_mechanism_probabilities(&scores, self.epsilon, self.sensitivity()).expect("validated at construction")
    }
}

impl Learner for ExpMechanismLearner {
    type Output = usize;

    fn name(&self) -> String {
        "exponential".into()
    }

    fn privacy(&self) -> Option<DpParams> {
        Some(DpParams { epsilon: self.epsilon, mechanism: Mechanism::ExponentialMechanism, sensitivity: self.sensitivity(), steps: 1 })
    }

    fn train(&self, s: &[f64], rng: &mut RngStream) -> usize {
        sample_index(&self.probabilities(s), rng)
    }

    fn loss(&self, h: &usize, x: f64) -> f64 {
        self.class.eval(*h, x)
    }
}

impl EnumerableLearner for ExpMechanismLearner {
    fn distribution(&self, s: &[f64]) -> Vec<(usize, f64)> {
        self.probabilities(s).into_iter().enumerate().collect()
    }
}

/// Non-private control: picks the best-scoring hypothesis (lowest index on ties).
#[derive(Clone, Debug)]
pub struct ArgmaxLearner {
    pub class: HypothesisClass,
}

impl ArgmaxLearner {
    fn best(&self, s: &[f64]) -> usize {
        let mut best = 0;
        for h in 1..self.class.len() {
            if self.class.score(h, s) > self.class.score(best, s) {
                best = h;
            }
        }
        best
    }
}

impl Learner for ArgmaxLearner {
    type Output = usize;

    fn name(&self) -> String {
        "argmax".into()
    }

    fn privacy(&self) -> Option<DpParams> {
        None
    }

    fn train(&self, s: &[f64], _rng: &mut RngStream) -> usize {
        self.best(s)
    }

    fn loss(&self, h: &usize, x: f64) -> f64 {
        self.class.eval(*h, x)
    }
}

impl EnumerableLearner for ArgmaxLearner {
    fn distribution(&self, s: &[f64]) -> Vec<(usize, f64)> {
        vec![(self.best(s), 1.0)]
    }
}

/// A mechanism followed by a data-independent random map on its output,
/// given as a row-stochastic transition matrix over hypothesis indices.
#[derive(Clone, Debug)]
pub struct PostProcessed<L> {
    pub inner: L,
    pub transition: Vec<Vec<f64>>,
}

impl<L: Learner<Output = usize>> Learner for PostProcessed<L> {
    type Output = usize;

    fn name(&self) -> String {
        format!("post({})", self.inner.name())
    }

    fn privacy(&self) -> Option<DpParams> {
        self.inner.privacy()
    }

    fn train(&self, s: &[f64], rng: &mut RngStream) -> usize {
        let h = self.inner.train(s, rng);
        sample_index(&self.transition[h], rng)
    }

    fn loss(&self, h: &usize, x: f64) -> f64 {
        self.inner.loss(h, x)
    }
}

impl<L: EnumerableLearner<Output = usize>> EnumerableLearner for PostProcessed<L> {
    fn distribution(&self, s: &[f64]) -> Vec<(usize, f64)> {
        let k = self.transition.first().map_or(0, Vec::len);
        let mut out = vec![0.0; k];
        for (h, p) in self.inner.distribution(s) {
            for (o, t) in out.iter_mut().zip(&self.transition[h]) {
                *o += p * t;
            }
        }
        out.into_iter().enumerate().collect()
    }
}

/// Ignores its data: returns a uniformly random hypothesis index.
#[derive(Clone, Debug)]
pub struct DataIndependentLearner {
    pub class: HypothesisClass,
}

impl Learner for DataIndependentLearner {
    type Output = usize;

    fn name(&self) -> String {
        "constant".into()
    }

    fn privacy(&self) -> Option<DpParams> {
        Some(DpParams { epsilon: 0.0, mechanism: Mechanism::ExponentialMechanism, sensitivity: 1.0, steps: 1 })
    }

    fn train(&self, _s: &[f64], rng: &mut RngStream) -> usize {
        rng.index(self.class.len())
    }

    fn loss(&self, h: &usize, x: f64) -> f64 {
        self.class.eval(*h, x)
    }
}

impl EnumerableLearner for DataIndependentLearner {
    fn distribution(&self, _s: &[f64]) -> Vec<(usize, f64)> {
        let p = 1.0 / self.class.len() as f64;
        (0..self.class.len()).map(|h| (h, p)).collect()
    }
}

/// Memorizing scorer: `d(x) = 1` within `radius` of a training example, else 0.
#[derive(Clone, Debug)]
pub struct NearestNeighborScorer {
    pub radius: f64,
}

impl Learner for NearestNeighborScorer {
    type Output = Vec<f64>;

    fn name(&self) -> String {
        "nearest-neighbor".into()
    }

    fn privacy(&self) -> Option<DpParams> {
        None
    }

    fn train(&self, s: &[f64], _rng: &mut RngStream) -> Vec<f64> {
        s.to_vec()
    }

    fn loss(&self, memory: &Vec<f64>, x: f64) -> f64 {
        if memory.iter().any(|m| (m - x).abs() <= self.radius) {
            1.0
        } else {
            0.0
        }
    }
}

/// A scalar data distribution the audit can sample without limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScalarDistribution {
    /// `P(x = 1) = p1`, `P(x = 0) = 1 − p1`.
    TwoPoint { p1: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl ScalarDistribution {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match *self {
            ScalarDistribution::TwoPoint { p1 } => {
                if rng.uniform() < p1 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarDistribution::Gaussian { mean, std } => mean + std * rng.normal(),
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Exact `(point, probability)` support when finite.
    pub fn support(&self) -> Option<Vec<(f64, f64)>> {
        match *self {
            ScalarDistribution::TwoPoint { p1 } => Some(vec![(0.0, 1.0 - p1), (1.0, p1)]),
            ScalarDistribution::Gaussian { .. } => None,
        }
    }
}

/// Sample mean and the half-width of its 95% normal interval.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Z95 * (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    /// Max over adjacent pairs and all probes.
    pub eps_stable: f64,
    pub half_width: f64,
    /// Max over probes taken from `S ∪ S'`.
    pub sample_probe_max: f64,
    /// Max over probes drawn independently of `S`.
    pub fresh_probe_max: f64,
    pub probes: usize,
    pub pairs: usize,
    /// 0 for exact enumeration.
    pub runs: usize,
}

/// An adjacent dataset: replace `s[index]` by `value`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replacement {
    pub index: usize,
    pub value: f64,
}

fn replaced(s: &[f64], r: Replacement) -> Vec<f64> {
    let mut out = s.to_vec();
    out[r.index] = r.value;
    out
}

/// Monte Carlo RO-stability. Both sides of a pair share the seed of each run.
pub fn estimate_ro_stability<L: Learner>(
    learner: &L,
    s: &[f64],
    replacements: &[Replacement],
    fresh_probes: &[f64],
    n_runs: usize,
    rng: &RngStream,
) -> Result<StabilityEstimate, PrivacyError> {
    if n_runs < 2 {
        return Err(domain(format!("n_runs = {n_runs} < 2")));
    }
    if replacements.iter().any(|r| r.index >= s.len()) {
        return Err(domain("replacement index out of range"));
    }
    let mut est = StabilityEstimate {
        eps_stable: 0.0,
        half_width: 0.0,
        sample_probe_max: 0.0,
        fresh_probe_max: 0.0,
        probes: 0,
        pairs: replacements.len(),
        runs: n_runs,
    };
    for (p, &r) in replacements.iter().enumerate() {
        let s2 = replaced(s, r);
        let mut sample_probes: Vec<f64> = s.iter().copied().chain([r.value]).collect();
        sample_probes.sort_by(f64::total_cmp);
        sample_probes.dedup();
        let probes: Vec<(f64, bool)> = sample_probes.iter().map(|&x| (x, true)).chain(fresh_probes.iter().map(|&x| (x, false))).collect();
        est.probes = est.probes.max(probes.len());
        let mut diffs = vec![Vec::with_capacity(n_runs); probes.len()];
        for run in 0..n_runs {
            let seed = rng.derive(p as u64).derive(run as u64);
            let a = learner.train(s, &mut seed.clone());
            let b = learner.train(&s2, &mut seed.clone());
            for (k, &(x, _)) in probes.iter().enumerate() {
                diffs[k].push(learner.loss(&a, x) - learner.loss(&b, x));
            }
        }
        for (k, &(_, from_sample)) in probes.iter().enumerate() {
            let (m, hw) = mean_ci(&diffs[k]);
            let v = m.abs();
            if from_sample {
                est.sample_probe_max = est.sample_probe_max.max(v);
            } else {
                est.fresh_probe_max = est.fresh_probe_max.max(v);
            }
            if v > est.eps_stable {
                est.eps_stable = v;
                est.half_width = hw;
            }
            if v == est.eps_stable {
                est.half_width = est.half_width.max(hw);
            }
        }
    }
    Ok(est)
}

/// Exact RO-stability of an order-invariant learner over every adjacent pair
/// of size-`m` samples from a finite support.
pub fn exact_ro_stability<L: EnumerableLearner>(learner: &L, support: &[f64], m: usize) -> Result<StabilityEstimate, PrivacyError> {
    if m < 1 || support.is_empty() {
        return Err(domain("need m ≥ 1 and a nonempty support"));
    }
    let mut est = StabilityEstimate {
        eps_stable: 0.0,
        half_width: 0.0,
        sample_probe_max: 0.0,
        fresh_probe_max: 0.0,
        probes: support.len(),
        pairs: 0,
        runs: 0,
    };
    for s in multisets(support, m) {
        for i in 0..m {
            for &z in support {
                if z == s[i] {
                    continue;
                }
                let s2 = replaced(&s, Replacement { index: i, value: z });
                est.pairs += 1;
                for &x in support {
                    let v = (learner.expected_loss(&s, x) - learner.expected_loss(&s2, x)).abs();
                    if s.contains(&x) || s2.contains(&x) {
                        est.sample_probe_max = est.sample_probe_max.max(v);
                    }
                    est.fresh_probe_max = est.fresh_probe_max.max(v);
                    est.eps_stable = est.eps_stable.max(v);
                }
            }
        }
    }
    Ok(est)
}

/// All sorted size-`m` multisets over `support`.
fn multisets(support: &[f64], m: usize) -> Vec<Vec<f64>> {
    fn rec(support: &[f64], m: usize, start: usize, cur: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for j in start..support.len() {
            cur.push(support[j]);
            rec(support, m, j, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(support, m, 0, &mut Vec::with_capacity(m), &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// Estimate of `F_U = E_S E_{θ∼A(S)} [Û − U]`.
    pub gap: f64,
    pub half_width: f64,
    pub m: usize,
    /// 0 for exact enumeration.
    pub runs: usize,
    /// Mean 95% half-width of the population-loss estimates (0 when exact).
    pub population_half_width: f64,
}

fn population_loss<L: Learner>(learner: &L, out: &L::Output, dist: &ScalarDistribution, fresh: &[f64]) -> (f64, f64) {
    match dist.support() {
        Some(support) => (support.iter().map(|&(x, p)| p * learner.loss(out, x)).sum(), 0.0),
        None => mean_ci(&fresh.iter().map(|&x| learner.loss(out, x)).collect::<Vec<_>>()),
    }
}

/// Monte Carlo `F̂_U`: draw `S`, then `θ ∼ A(S)`, then compare the empirical
/// loss on `S` with the population loss (exact on finite supports, otherwise
/// estimated from `eval_size ≥ 100·m` fresh draws).
pub fn estimate_generalization_gap<L: Learner>(
    learner: &L,
    dist: &ScalarDistribution,
    m: usize,
    n_runs: usize,
    eval_size: usize,
    rng: &RngStream,
) -> Result<GapEstimate, PrivacyError> {
    if m < 1 {
        return Err(domain("m must be at least 1"));
    }
    if n_runs < 2 {
        return Err(domain(format!("n_runs = {n_runs} < 2")));
    }
    if dist.support().is_none() && eval_size < 100 * m {
        return Err(domain(format!("evaluation sample {eval_size} smaller than 100·m")));
    }
    let fresh = if dist.support().is_none() { dist.sample_n(eval_size, &mut rng.derive(u64::MAX)) } else { Vec::new() };
    let mut diffs = Vec::with_capacity(n_runs);
    let mut pop_hw = 0.0;
    for run in 0..n_runs {
        let mut r = rng.derive(run as u64);
        let s = dist.sample_n(m, &mut r);
        let theta = learner.train(&s, &mut r);
        let emp = s.iter().map(|&x| learner.loss(&theta, x)).sum::<f64>() / m as f64;
        let (pop, hw) = population_loss(learner, &theta, dist, &fresh);
        pop_hw += hw / n_runs as f64;
        diffs.push(emp - pop);
    }
    let (gap, half_width) = mean_ci(&diffs);
    Ok(GapEstimate { gap, half_width, m, runs: n_runs, population_half_width: pop_hw })
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let lf = |x: usize| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
    lf(n) - lf(k) - lf(n - k)
}

/// Exact `F_U` for an order-invariant learner under a two-point distribution.
pub fn exact_generalization_gap<L: EnumerableLearner>(learner: &L, p1: f64, m: usize) -> Result<f64, PrivacyError> {
    if m < 1 || !(0.0..=1.0).contains(&p1) {
        return Err(domain("need m ≥ 1 and p1 in [0, 1]"));
    }
    let mut total = 0.0;
    for k in 0..=m {
        let w = (ln_binomial(m, k) + k as f64 * p1.ln() + (m - k) as f64 * (1.0 - p1).ln()).exp();
        if w == 0.0 || w.is_nan() {
            continue;
        }
        let s: Vec<f64> = std::iter::repeat_n(0.0, m - k).chain(std::iter::repeat_n(1.0, k)).collect();
        for (out, p) in learner.distribution(&s) {
            let emp = s.iter().map(|&x| learner.loss(&out, x)).sum::<f64>() / m as f64;
            let pop = (1.0 - p1) * learner.loss(&out, 0.0) + p1 * learner.loss(&out, 1.0);
            total += w * p * (emp - pop);
        }
    }
    Ok(total)
}

/// How the chain quantities are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainMethod {
    Exact,
    MonteCarlo { runs: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainLearner {
    Exponential,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub learner: ChainLearner,
    pub epsilons: Vec<f64>,
    pub m: usize,
    pub p1: f64,
    pub class: HypothesisClass,
    pub method: ChainMethod,
    pub seed: u64,
}

impl ChainConfig {
    pub fn exponential(epsilons: Vec<f64>) -> Self {
        ChainConfig {
            learner: ChainLearner::Exponential,
            epsilons,
            m: 10,
            p1: 0.3,
            class: HypothesisClass::two_point_grid(),
            method: ChainMethod::Exact,
            seed: 0,
        }
    }
}

/// One line of the audit table. `pass` is `None` for non-private mechanisms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub mechanism: String,
    pub epsilon: Option<f64>,
    pub stability_bound: Option<f64>,
    pub stability_measured: f64,
    pub stability_ci: f64,
    pub gap_measured: f64,
    pub gap_ci: f64,
    pub stability_pass: Option<bool>,
    pub gap_pass: Option<bool>,
    pub pass: Option<bool>,
}

pub const CHAIN_CSV_HEADER: &str = "mechanism,epsilon,stability_bound,stability_measured,stability_ci,gap_measured,gap_ci,pass";

impl ChainRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.9}"));
        let pass = match self.pass {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "N/A",
        };
        format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{}",
            self.mechanism,
            opt(self.epsilon),
            opt(self.stability_bound),
            self.stability_measured,
            self.stability_ci,
            self.gap_measured,
            self.gap_ci,
            pass
        )
    }
}

fn chain_row<L: EnumerableLearner>(learner: &L, cfg: &ChainConfig, index: u64) -> Result<ChainRow, PrivacyError> {
    let dist = ScalarDistribution::TwoPoint { p1: cfg.p1 };
    let (stab, gap) = match cfg.method {
        ChainMethod::Exact => {
            let st = exact_ro_stability(learner, &cfg.class.support, cfg.m)?;
            (st, GapEstimate { gap: exact_generalization_gap(learner, cfg.p1, cfg.m)?, half_width: 0.0, m: cfg.m, runs: 0, population_half_width: 0.0 })
        }
        ChainMethod::MonteCarlo { runs } => {
            let rng = RngStream::new(cfg.seed).derive(index);
            // one adjacent pair per count of ones, flipping a 0 to a 1
            let mut st: Option<StabilityEstimate> = None;
            for k in 0..cfg.m {
                let s: Vec<f64> = std::iter::repeat_n(0.0, cfg.m - k).chain(std::iter::repeat_n(1.0, k)).collect();
                let e = estimate_ro_stability(learner, &s, &[Replacement { index: 0, value: 1.0 }], &cfg.class.support, runs, &rng.derive(k as u64))?;
                st = Some(match st {
                    Some(prev) if prev.eps_stable >= e.eps_stable => StabilityEstimate { pairs: prev.pairs + 1, ..prev },
                    Some(prev) => StabilityEstimate { pairs: prev.pairs + 1, ..e },
                    None => e,
                });
            }
            let st = st.ok_or_else(|| domain("m must be at least 1"))?;
            (st, estimate_generalization_gap(learner, &dist, cfg.m, runs, 0, &rng.derive(u64::MAX - 1))?)
        }
    };
    let privacy = learner.privacy();
    let bound = privacy.map(|p| dp_stability_bound(p.epsilon)).transpose()?;
    let stability_pass = bound.map(|b| stab.eps_stable <= b + stab.half_width);
    let gap_pass = privacy.map(|_| gap.gap.abs() <= gap_bound_from_stability(stab.eps_stable).unwrap_or(0.0) + stab.half_width + gap.half_width);
    let pass = match (stability_pass, gap_pass) {
        (Some(a), Some(b)) => Some(a && b),
        _ => None,
    };
    Ok(ChainRow {
        mechanism: learner.name(),
        epsilon: privacy.map(|p| p.epsilon),
        stability_bound: bound,
        stability_measured: stab.eps_stable,
        stability_ci: stab.half_width,
        gap_measured: gap.gap,
        gap_ci: gap.half_width,
        stability_pass,
        gap_pass,
        pass,
    })
}

/// Checks `ε̂_stable ≤ e^ε − 1` and `|F̂_U| ≤ ε̂_stable` at every ε of the grid.
/// A non-private learner yields a single row with `pass = None`.
pub fn verify_dp_chain(cfg: &ChainConfig) -> Result<Vec<ChainRow>, PrivacyError> {
    if cfg.class.support.len() != 2 {
        return Err(domain("the chain audit uses a two-point support"));
    }
    match cfg.learner {
        ChainLearner::Argmax => Ok(vec![chain_row(&ArgmaxLearner { class: cfg.class.clone() }, cfg, 0)?]),
        ChainLearner::Exponential => cfg
            .epsilons
            .iter()
            .enumerate()
            .map(|(i, &eps)| chain_row(&ExpMechanismLearner::new(cfg.class.clone(), eps, cfg.m)?, cfg, i as u64))
            .collect(),
    }
}

/// A learner that reports its parameters at a fixed set of iterations.
pub trait CheckpointedLearner {
    type Output;

    /// Total ε accounted over the whole run.
    fn epsilon(&self) -> f64;

    /// `(iteration, θ)` pairs, iteration 0 first.
    fn train_checkpoints(&self, s: &[f64], rng: &mut RngStream) -> Vec<(usize, Self::Output)>;

    fn loss(&self, out: &Self::Output, x: f64) -> f64;
}

/// Logistic discriminator `d(x) = σ(w·x + b)` trained by noisy clipped
/// gradient descent on `−Û` with `φ = identity` against a fixed fake
/// distribution. Parameters are clamped to `[−bound, bound]` after every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyLogisticLearner {
    pub steps: usize,
    pub checkpoint_every: usize,
    pub clip: f64,
    pub laplace_scale: f64,
    pub lr: f64,
    pub m: usize,
    pub param_bound: f64,
    pub fake_mean: f64,
    pub fake_batch: usize,
}

impl NoisyLogisticLearner {
    /// Calibrates the noise so that `steps` steps on `m` examples cost `epsilon_total`.
    pub fn with_total_epsilon(epsilon_total: f64, m: usize, steps: usize, clip: f64) -> Result<Self, PrivacyError> {
        if !(epsilon_total > 0.0) || m < 1 || steps < 1 {
            return Err(domain("need ε > 0, m ≥ 1, steps ≥ 1"));
        }
        Ok(NoisyLogisticLearner {
            steps,
            checkpoint_every: (steps / 10).max(1),
            clip,
            laplace_scale: laplace_scale_for(epsilon_total / steps as f64, clip, m, 2),
            lr: 0.05,
            m,
            param_bound: 5.0,
            fake_mean: -1.0,
            fake_batch: 64,
        })
    }

    pub fn step_epsilon(&self) -> f64 {
        noisy_step_epsilon(self.clip, self.m, 2, self.laplace_scale)
    }

    fn d(theta: &[f64; 2], x: f64) -> f64 {
        crate::engine::sigmoid(theta[0] * x + theta[1])
    }
}

impl CheckpointedLearner for NoisyLogisticLearner {
    type Output = [f64; 2];

    fn epsilon(&self) -> f64 {
        self.steps as f64 * self.step_epsilon()
    }

    fn train_checkpoints(&self, s: &[f64], rng: &mut RngStream) -> Vec<(usize, [f64; 2])> {
        let mut theta = [0.0, 0.0];
        let mut acct = PrivacyAccountant::new();
        let mut out = vec![(0, theta)];
        for k in 1..=self.steps {
            let grads: Vec<Vec<f64>> = s
                .iter()
                .map(|&x| {
                    let d = Self::d(&theta, x);
                    let g = d * (1.0 - d);
                    vec![-g * x, -g]
                })
                .collect();
            // the fake term never touches S
            let mut fake = [0.0; 2];
            for _ in 0..self.fake_batch {
                let z = self.fake_mean + rng.normal();
                let d = Self::d(&theta, z);
                let g = d * (1.0 - d) / self.fake_batch as f64;
                fake[0] += g * z;
                fake[1] += g;
            }
            let mut params = theta.to_vec();
            noisy_grad_step(&mut params, &grads, self.clip, self.laplace_scale, self.lr, &mut acct, rng).expect("finite logistic gradients");
            for (i, p) in params.iter().enumerate() {
                theta[i] = (p - self.lr * fake[i]).clamp(-self.param_bound, self.param_bound);
            }
            if k % self.checkpoint_every == 0 || k == self.steps {
                out.push((k, theta));
            }
        }
        out
    }

    fn loss(&self, theta: &[f64; 2], x: f64) -> f64 {
        Self::d(theta, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iteration: usize,
    /// Mean of `Û − U` over runs with its 95% half-width.
    pub mean_gap: f64,
    pub mean_gap_ci: f64,
    /// `(t, exceedance frequency, bound)` for each `t` of the grid.
    pub tails: Vec<(f64, f64, TailBound)>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub epsilon: f64,
    pub m: usize,
    pub runs: usize,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Whether every row carries the same bound at each `t`.
    pub fn bound_constant_in_k(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].tails.iter().zip(&w[1].tails).all(|(a, b)| a.2 == b.2))
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("iteration,t,exceedance,bound_raw,bound_capped,mean_gap,mean_gap_ci,pass\n");
        for r in &self.rows {
            for (t, freq, b) in &r.tails {
                out.push_str(&format!(
                    "{},{t},{freq:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                    r.iteration,
                    b.raw,
                    b.capped,
                    r.mean_gap,
                    r.mean_gap_ci,
                    if freq <= &b.capped { "pass" } else { "fail" }
                ));
            }
        }
        out
    }
}

/// For each checkpoint `k`, the fraction of runs with `|Û − U| ≥ t` against
/// `2·exp(−2t² / (m ε²))`, where `ε` is the learner's total accounted cost
/// and `U` is estimated on `eval_size` fresh draws shared by all runs.
pub fn verify_uniform_convergence<L: CheckpointedLearner>(
    learner: &L,
    dist: &ScalarDistribution,
    m: usize,
    runs: usize,
    t_grid: &[f64],
    eval_size: usize,
    rng: &RngStream,
) -> Result<ConvergenceReport, PrivacyError> {
    if runs < 2 {
        return Err(domain(format!("runs = {runs} < 2")));
    }
    let epsilon = learner.epsilon();
    let bounds: Vec<TailBound> = t_grid.iter().map(|&t| mcdiarmid_tail(t, m, epsilon)).collect::<Result<_, _>>()?;
    let fresh = dist.sample_n(eval_size.max(100 * m), &mut rng.derive(u64::MAX));
    let mut gaps: Vec<Vec<f64>> = Vec::new();
    let mut iterations: Vec<usize> = Vec::new();
    for run in 0..runs {
        let mut r = rng.derive(run as u64);
        let s = dist.sample_n(m, &mut r);
        let cps = learner.train_checkpoints(&s, &mut r);
        let its: Vec<usize> = cps.iter().map(|c| c.0).collect();
        if run == 0 {
            iterations = its;
            gaps = vec![Vec::with_capacity(runs); iterations.len()];
        } else if its != iterations {
            return Err(PrivacyError::MissingCheckpoints(format!("run {run} reported {:?}, expected {:?}", its, iterations)));
        }
        for (k, (_, theta)) in cps.iter().enumerate() {
            let emp = s.iter().map(|&x| learner.loss(theta, x)).sum::<f64>() / m as f64;
            let pop = fresh.iter().map(|&x| learner.loss(theta, x)).sum::<f64>() / fresh.len() as f64;
            gaps[k].push(emp - pop);
        }
    }
    if iterations.is_empty() {
        return Err(PrivacyError::MissingCheckpoints("learner produced no checkpoints".into()));
    }
    let rows = iterations
        .iter()
        .zip(&gaps)
        .map(|(&iteration, g)| {
            let (mean_gap, mean_gap_ci) = mean_ci(g);
            let tails: Vec<(f64, f64, TailBound)> = t_grid
                .iter()
                .zip(&bounds)
                .map(|(&t, &b)| (t, g.iter().filter(|v| v.abs() >= t).count() as f64 / g.len() as f64, b))
                .collect();
            let pass = tails.iter().all(|(_, f, b)| *f <= b.capped);
            ConvergenceRow { iteration, mean_gap, mean_gap_ci, tails, pass }
        })
        .collect();
    Ok(ConvergenceReport { epsilon, m, runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_bound_values() {
        assert_eq!(dp_stability_bound(0.0).unwrap(), 0.0);
        assert!((dp_stability_bound(0.1).unwrap() - 0.1051709).abs() < 1e-7);
        assert!((dp_stability_bound(1.0).unwrap() - 1.7182818).abs() < 1e-7);
        assert!(dp_stability_bound(-0.1).is_err());
        assert_eq!(gap_bound_from_stability(0.105).unwrap(), 0.105);
    }

    #[test]
    fn tail_example_is_vacuous() {
        let b = mcdiarmid_tail(0.5, 100, 0.1).unwrap();
        assert!((b.raw - 1.2131).abs() < 1e-4);
        assert_eq!(b.capped, 1.0);
        assert!(b.vacuous());
        assert!(mcdiarmid_tail(0.0, 1, 1.0).is_err());
    }

    #[test]
    fn exponential_mechanism_examples() {
        let p = exp_mechanism_probabilities(&[1.0, 0.0, 0.0], 2.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 2.0)).abs() < 1e-12);
        assert!((p[0] - 0.576).abs() < 1e-3 && (p[1] - 0.212).abs() < 1e-3);
        assert_eq!(exp_mechanism_probabilities(&[0.3, 0.3], 1.0, 1.0).unwrap(), vec![0.5, 0.5]);
        assert_eq!(exp_mechanism_probabilities(&[5.0, 0.0, 1.0, 2.0], 0.0, 1.0).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn clipping_example() {
        let mut params = vec![0.0];
        let mut acct = PrivacyAccountant::new();
        let step = noisy_grad_step(&mut params, &[vec![10.0], vec![-10.0]], 1.0, 1.0, 0.1, &mut acct, &mut RngStream::new(1)).unwrap();
        assert_eq!(step.clipped_mean, vec![0.0]);
        assert_eq!(clip_l2(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let bad = noisy_grad_step(&mut params, &[vec![f64::NAN]], 1.0, 1.0, 0.1, &mut acct, &mut RngStream::new(1));
        assert_eq!(bad.unwrap_err(), PrivacyError::NonFiniteGradient(0));
    }

    #[test]
    fn huge_noise_costs_little() {
        assert!(noisy_step_epsilon(1.0, 10, 4, 1e12) < 1e-12);
    }

    #[test]
    fn zero_epsilon_mechanism_is_perfectly_stable() {
        let l = ExpMechanismLearner::new(HypothesisClass::two_point_grid(), 0.0, 5).unwrap();
        assert_eq!(exact_ro_stability(&l, &[0.0, 1.0], 5).unwrap().eps_stable, 0.0);
        assert!(exact_generalization_gap(&l, 0.3, 5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn argmax_chain_is_not_applicable() {
        let mut cfg = ChainConfig::exponential(vec![0.1]);
        cfg.learner = ChainLearner::Argmax;
        let rows = verify_dp_chain(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].pass, None);
        assert!(rows[0].csv().ends_with("N/A"));
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        assert!(verify_dp_chain(&ChainConfig::exponential(vec![])).unwrap().is_empty());
    }

    #[test]
    fn multisets_count() {
        // C(m + 1, 1) multisets of size m over two points
        assert_eq!(multisets(&[0.0, 1.0], 4).len(), 5);
    }
}
