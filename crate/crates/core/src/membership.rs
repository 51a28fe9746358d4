//! Membership inference against trained discriminators.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Source, SplitDataset};
use crate::engine::{EngineError, RngStream, Tensor};
use crate::gan::{self, Discriminator, Generator, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("single-class input: {0}")]
    SingleClass(String),
    #[error("score {0} outside [0, 1]")]
    ScoreRange(f64),
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// `1` (member) iff `score ≥ t`.
pub fn attack_decide(score: f64, t: f64) -> u8 {
    u8::from(score >= t)
}

/// Monotone map of raw scores onto `[0, 1]` fitted on a visible score range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub lo: f64,
    pub hi: f64,
}

impl MinMax {
    pub fn fit(scores: &[f64]) -> Self {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MinMax { lo, hi }
    }

    /// Constant ranges map to 0.5; values outside the fitted range are clamped.
    pub fn apply(&self, v: f64) -> f64 {
        if !(self.hi > self.lo) {
            0.5
        } else {
            ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
        }
    }
}

/// Raw `d(x)/b` for every row of `x`.
pub fn raw_scores(d: &Discriminator, x: &Tensor, b: f64) -> Result<Vec<f64>, AttackError> {
    if !(b > 0.0) {
        return Err(AttackError::InvalidConfig(format!("bound {b} must be positive")));
    }
    Ok(d.score(x)?.data().iter().map(|v| v / b).collect())
}

/// `d(x)/b` for a bounded (sigmoid) discriminator.
pub fn whitebox_score(d: &Discriminator, x: &Tensor, b: f64) -> Result<Vec<f64>, AttackError> {
    let s = raw_scores(d, x, b)?;
    if let Some(&v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AttackError::ScoreRange(v));
    }
    Ok(s)
}

/// Scores on `[0, 1]` for the attack set: `d(x)/b` when the discriminator is
/// bounded, otherwise min-max rescaled over the attack set. Also returns the
/// map so that other points can be scored consistently.
pub fn attack_scores(d: &Discriminator, x: &Tensor, b: f64) -> Result<(Vec<f64>, Option<MinMax>), AttackError> {
    if d.has_sigmoid() {
        return Ok((whitebox_score(d, x, b)?, None));
    }
    let raw = raw_scores(d, x, b)?;
    let mm = MinMax::fit(&raw);
    Ok((raw.iter().map(|&v| mm.apply(v)).collect(), Some(mm)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Result {
    pub f1: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when no item was predicted member or no member exists.
    pub degenerate: bool,
}

/// F1 of `attack_decide(·, t)` with members as the positive class.
pub fn f1_at_threshold(scores: &[f64], labels: &[bool], t: f64) -> F1Result {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&s, &member) in scores.iter().zip(labels) {
        match (attack_decide(s, t) == 1, member) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if tp + fp == 0 || tp + fnn == 0 {
        return F1Result { f1: 0.0, threshold: t, precision: 0.0, recall: 0.0, degenerate: true };
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fnn) as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    F1Result { f1, threshold: t, precision, recall, degenerate: false }
}

/// F1 at `t = mean(member_scores)`.
pub fn f1_at_mean_threshold(member_scores: &[f64], scores: &[f64], labels: &[bool]) -> Result<F1Result, AttackError> {
    if member_scores.is_empty() {
        return Err(AttackError::InvalidConfig("no member scores for the threshold".into()));
    }
    let t = member_scores.iter().sum::<f64>() / member_scores.len() as f64;
    Ok(f1_at_threshold(scores, labels, t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize), AttackError> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AttackError::SingleClass(format!("{pos} members, {neg} nonmembers")));
    }
    Ok((pos, neg))
}

/// AUC as the rank statistic `P(member score > nonmember score)`, ties ½,
/// and the ROC from a sweep over distinct thresholds.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<AucResult, AttackError> {
    if scores.len() != labels.len() {
        return Err(AttackError::InvalidConfig(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(&v) = scores.iter().find(|v| v.is_nan()) {
        return Err(AttackError::ScoreRange(v));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups (ascending order)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let auc = (rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);

    let mut roc = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(AucResult { auc, roc })
}

/// Trapezoidal area under a ROC polyline.
pub fn roc_area(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Members and nonmembers mixed into one labeled set.
#[derive(Clone, Debug)]
pub struct AttackTestSet {
    pub examples: Tensor,
    /// `true` for members of the training split.
    pub labels: Vec<bool>,
    pub ids: Vec<String>,
    pub provenance: String,
}

impl AttackTestSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_members(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nonmembers(&self) -> usize {
        self.len() - self.n_members()
    }

    /// Fraction of members.
    pub fn balance(&self) -> f64 {
        self.n_members() as f64 / self.len().max(1) as f64
    }

    pub fn member_examples(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i]).collect();
        self.examples.select_rows(&idx)
    }

    pub fn subset(&self, idx: &[usize], provenance: &str) -> AttackTestSet {
        AttackTestSet {
            examples: self.examples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            provenance: provenance.to_string(),
        }
    }
}

/// Union of the training split (members) and the holdout split (nonmembers).
pub fn build_attack_testset(split: &SplitDataset) -> Result<AttackTestSet, AttackError> {
    split.check_disjoint()?;
    if split.holdout.is_empty() || split.train.is_empty() {
        return Err(AttackError::InvalidConfig("both splits must be nonempty".into()));
    }
    let train_ids: HashSet<&String> = split.train.ids().iter().collect();
    if let Some(id) = split.holdout.ids().iter().find(|id| train_ids.contains(id)) {
        return Err(AttackError::Data(DataError::Overlap(format!("id {id} in both splits"))));
    }
    let examples = Tensor::concat_rows(&[split.train.examples(), split.holdout.examples()])?;
    let labels = std::iter::repeat_n(true, split.train.len()).chain(std::iter::repeat_n(false, split.holdout.len())).collect();
    let ids = split.train.ids().iter().chain(split.holdout.ids()).cloned().collect();
    Ok(AttackTestSet { examples, labels, ids, provenance: "train+holdout".into() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackMode {
    Whitebox,
    Blackbox,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Whitebox => "whitebox",
            AttackMode::Blackbox => "blackbox",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize(v: impl Iterator<Item = f64> + Clone) -> ScoreSummary {
    let n = v.clone().count().max(1) as f64;
    ScoreSummary {
        mean: v.clone().sum::<f64>() / n,
        min: v.clone().fold(f64::INFINITY, f64::min),
        max: v.fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub mode: AttackMode,
    /// F1 at the mean score of the target's training members.
    pub f1: F1Result,
    /// F1 at the mean score of the attacker's auxiliary members.
    pub f1_estimated: F1Result,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub member_scores: ScoreSummary,
    pub nonmember_scores: ScoreSummary,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Scores were min-max rescaled (unbounded discriminator).
    pub rescaled: bool,
}

impl AttackResult {
    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.roc {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

fn evaluate(mode: AttackMode, scores: &[f64], labels: &[bool], oracle_members: &[f64], aux_members: &[f64], rescaled: bool) -> Result<AttackResult, AttackError> {
    let auc = compute_auc(scores, labels)?;
    let f1 = f1_at_mean_threshold(oracle_members, scores, labels)?;
    let f1_estimated = f1_at_mean_threshold(aux_members, scores, labels)?;
    let pick = |want: bool| scores.iter().zip(labels).filter(move |(_, &l)| l == want).map(|(&s, _)| s);
    Ok(AttackResult {
        mode,
        f1,
        f1_estimated,
        auc: auc.auc,
        roc: auc.roc,
        member_scores: summarize(pick(true)),
        nonmember_scores: summarize(pick(false)),
        n_members: labels.iter().filter(|&&l| l).count(),
        n_nonmembers: labels.iter().filter(|&&l| !l).count(),
        rescaled,
    })
}

/// Indices of a random `fraction` of the members and of the nonmembers.
fn auxiliary_indices(test: &AttackTestSet, fraction: f64, rng: &mut RngStream) -> Result<Vec<usize>, AttackError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AttackError::InvalidConfig(format!("auxiliary fraction {fraction} not in (0, 1)")));
    }
    let mut out = Vec::new();
    for want in [true, false] {
        let mut idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] == want).collect();
        rng.shuffle(&mut idx);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Scores the whole attack set with the target discriminator. The oracle
/// threshold is the mean member score; the estimated one uses a random
/// `aux_fraction` of the members.
pub fn whitebox_attack(d: &Discriminator, test: &AttackTestSet, aux_fraction: f64, rng: &mut RngStream) -> Result<AttackResult, AttackError> {
    class_counts(&test.labels)?;
    let (scores, mm) = attack_scores(d, &test.examples, d.output_bound)?;
    let members: Vec<f64> = (0..test.len()).filter(|&i| test.labels[i]).map(|i| scores[i]).collect();
    let aux: Vec<usize> = auxiliary_indices(test, aux_fraction, rng)?.into_iter().filter(|&i| test.labels[i]).collect();
    let aux_scores: Vec<f64> = aux.iter().map(|&i| scores[i]).collect();
    evaluate(AttackMode::Whitebox, &scores, &test.labels, &members, &aux_scores, mm.is_some())
}

/// Auxiliary knowledge of the black-box attacker.
#[derive(Clone, Debug)]
pub struct ShadowConfig {
    pub aux_fraction: f64,
    /// Generator samples requested from the target.
    pub generator_samples: usize,
    pub train: TrainConfig,
}

impl ShadowConfig {
    pub fn new(train: TrainConfig) -> Self {
        ShadowConfig { aux_fraction: 0.3, generator_samples: 0, train }
    }
}

/// Everything the black-box attacker may touch. It is built from the attack
/// set and generator samples only; the target discriminator is never part of it.
#[derive(Debug)]
pub struct AttackerView {
    pub aux_members: Dataset,
    pub aux_nonmembers: Dataset,
    pub generator_samples: Tensor,
    /// The non-auxiliary remainder, read only when scoring.
    pub evaluation: Dataset,
    pub evaluation_labels: Vec<bool>,
}

impl AttackerView {
    pub fn new(test: &AttackTestSet, example_shape: &[usize], generator: &Generator, cfg: &ShadowConfig, rng: &mut RngStream) -> Result<Self, AttackError> {
        class_counts(&test.labels)?;
        let aux = auxiliary_indices(test, cfg.aux_fraction, rng)?;
        let aux_set: HashSet<usize> = aux.iter().copied().collect();
        let rest: Vec<usize> = (0..test.len()).filter(|i| !aux_set.contains(i)).collect();
        let to_dataset = |idx: &[usize], tag: &str| -> Result<Dataset, AttackError> {
            let d = Dataset::new(test.examples.select_rows(idx), example_shape.to_vec(), Source::Synthetic(tag.into()))?;
            Ok(d.with_ids(idx.iter().map(|&i| test.ids[i].clone()).collect())?)
        };
        let aux_m: Vec<usize> = aux.iter().copied().filter(|&i| test.labels[i]).collect();
        let aux_n: Vec<usize> = aux.iter().copied().filter(|&i| !test.labels[i]).collect();
        let n_gen = if cfg.generator_samples == 0 { aux_m.len() } else { cfg.generator_samples };
        Ok(AttackerView {
            aux_members: to_dataset(&aux_m, "aux-members")?,
            aux_nonmembers: to_dataset(&aux_n, "aux-nonmembers")?,
            generator_samples: generator.sample(n_gen, rng)?,
            evaluation: to_dataset(&rest, "evaluation")?,
            evaluation_labels: rest.iter().map(|&i| test.labels[i]).collect(),
        })
    }
}

/// Access counts recorded while the shadow model was trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationAudit {
    pub evaluation_reads_during_training: usize,
    pub aux_member_reads: usize,
}

/// Trains a shadow GAN on the auxiliary members plus target generator
/// samples and attacks the evaluation remainder with its discriminator.
pub fn blackbox_attack(view: &AttackerView, cfg: &ShadowConfig) -> Result<(AttackResult, Discriminator, IsolationAudit), AttackError> {
    let before = view.evaluation.reads();
    let real = Tensor::concat_rows(&[view.aux_members.examples(), &view.generator_samples])?;
    let shadow_data = Dataset::new(real, view.aux_members.example_shape().to_vec(), Source::Synthetic("shadow".into()))?;
    if shadow_data.len() < cfg.train.batch_size {
        return Err(AttackError::InvalidConfig(format!(
            "{} shadow training examples for batch size {}",
            shadow_data.len(),
            cfg.train.batch_size
        )));
    }
    let shadow = gan::train(&cfg.train, &shadow_data, None)?;
    let audit = IsolationAudit {
        evaluation_reads_during_training: view.evaluation.reads() - before,
        aux_member_reads: view.aux_members.reads(),
    };
    let d = shadow.discriminator;
    // the rescaling range comes from attacker-visible points only
    let visible = Tensor::concat_rows(&[view.aux_members.examples(), view.aux_nonmembers.examples()])?;
    let b = d.output_bound;
    let eval_raw = raw_scores(&d, view.evaluation.examples(), b)?;
    let aux_raw = raw_scores(&d, view.aux_members.examples(), b)?;
    let (scores, aux_scores, rescaled) = if d.has_sigmoid() {
        (eval_raw, aux_raw, false)
    } else {
        let mm = MinMax::fit(&raw_scores(&d, &visible, b)?);
        (eval_raw.iter().map(|&v| mm.apply(v)).collect(), aux_raw.iter().map(|&v| mm.apply(v)).collect(), true)
    };
    let members: Vec<f64> = scores.iter().zip(&view.evaluation_labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let result = evaluate(AttackMode::Blackbox, &scores, &view.evaluation_labels, &members, &aux_scores, rescaled)?;
    Ok((result, d, audit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_is_inclusive() {
        assert_eq!(attack_decide(0.9, 0.5), 1);
        assert_eq!(attack_decide(0.5, 0.5), 1);
        assert_eq!(attack_decide(0.1, 0.5), 0);
    }

    #[test]
    fn f1_worked_example() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        let r = f1_at_mean_threshold(&[0.9, 0.8], &scores, &labels).unwrap();
        assert!((r.threshold - 0.85).abs() < 1e-12);
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_identical_scores() {
        let labels = [true, false, false, false, true];
        let r = f1_at_mean_threshold(&[0.4], &[0.4; 5], &labels).unwrap();
        let p = 0.4;
        assert!((r.f1 - 2.0 * p / (p + 1.0)).abs() < 1e-12);
        let none = f1_at_threshold(&[0.1, 0.2], &[true, false], 0.9);
        assert!(none.degenerate && none.f1 == 0.0);
    }

    #[test]
    fn auc_examples() {
        let labels = [true, true, false, false];
        let r = compute_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc.last(), Some(&(1.0, 1.0)));
        let swapped = compute_auc(&[0.9, 0.8, 0.2, 0.1], &[false, true, true, false]).unwrap();
        assert_eq!(swapped.auc, 0.5);
        assert_eq!(compute_auc(&[0.3; 4], &labels).unwrap().auc, 0.5);
        assert!(compute_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn minmax_is_monotone() {
        let mm = MinMax::fit(&[-3.0, 5.0]);
        assert_eq!(mm.apply(-3.0), 0.0);
        assert_eq!(mm.apply(5.0), 1.0);
        assert!(mm.apply(0.0) < mm.apply(1.0));
        assert_eq!(MinMax::fit(&[2.0, 2.0]).apply(2.0), 0.5);
    }
}
