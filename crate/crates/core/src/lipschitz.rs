//! Lipschitz regularizers for the discriminator: weight clipping, spectral
//! normalization, gradient penalty, row-wise weight normalization and the
//! orthonormal penalty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, RngStream, Tape, Tensor, Var};
use crate::gan::{BoundNet, Discriminator};

pub const DEFAULT_CLIP: f64 = 0.01;
pub const DEFAULT_GP_LAMBDA: f64 = 10.0;
pub const DEFAULT_ORTHO_BETA: f64 = 1e-4;
/// Cap on the power iterations used to initialize the persisted singular vectors.
pub const WARM_START_ITERS: usize = 1000;
/// Relative change in `σ̂` at which the warm start stops.
pub const WARM_START_TOL: f64 = 1e-12;
/// Number of left vectors tracked per weight matrix during training.
pub const BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RegularizerKind {
    None,
    WeightClip { c: f64 },
    SpectralNorm { n_iter: usize },
    GradientPenalty { lambda: f64 },
    WeightNormRows,
    Orthonormal { beta: f64 },
}

/// Where a regularizer acts in the training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApplicationMode {
    None,
    PostStepProjection,
    LossPenalty,
    Reparameterization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegularizerError {
    #[error("unknown strategy '{0}' (expected original, clip, spectral, gp, weightnorm or orthonormal)")]
    UnknownStrategy(String),
    #[error("invalid regularizer parameter: {0}")]
    InvalidParameter(String),
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind) -> Result<Self, RegularizerError> {
        let bad = |what: String| Err(RegularizerError::InvalidParameter(what));
        match kind {
            RegularizerKind::WeightClip { c } if !(c > 0.0) => bad(format!("clip c = {c}")),
            RegularizerKind::SpectralNorm { n_iter: 0 } => bad("spectral n_iter = 0".into()),
            RegularizerKind::GradientPenalty { lambda } if !(lambda > 0.0) => bad(format!("gp lambda = {lambda}")),
            RegularizerKind::Orthonormal { beta } if !(beta > 0.0) => bad(format!("orthonormal beta = {beta}")),
            _ => Ok(RegularizerSpec { kind }),
        }
    }

    /// Default settings for a strategy name.
    pub fn from_strategy(name: &str) -> Result<Self, RegularizerError> {
        let kind = match name {
            "original" => RegularizerKind::None,
            "clip" => RegularizerKind::WeightClip { c: DEFAULT_CLIP },
            "spectral" => RegularizerKind::SpectralNorm { n_iter: 1 },
            "gp" => RegularizerKind::GradientPenalty { lambda: DEFAULT_GP_LAMBDA },
            "weightnorm" => RegularizerKind::WeightNormRows,
            "orthonormal" => RegularizerKind::Orthonormal { beta: DEFAULT_ORTHO_BETA },
            other => return Err(RegularizerError::UnknownStrategy(other.to_string())),
        };
        Self::new(kind)
    }

    pub fn strategy_name(&self) -> &'static str {
        match self.kind {
            RegularizerKind::None => "original",
            RegularizerKind::WeightClip { .. } => "clip",
            RegularizerKind::SpectralNorm { .. } => "spectral",
            RegularizerKind::GradientPenalty { .. } => "gp",
            RegularizerKind::WeightNormRows => "weightnorm",
            RegularizerKind::Orthonormal { .. } => "orthonormal",
        }
    }

    pub fn mode(&self) -> ApplicationMode {
        match self.kind {
            RegularizerKind::None => ApplicationMode::None,
            RegularizerKind::WeightClip { .. } => ApplicationMode::PostStepProjection,
            RegularizerKind::SpectralNorm { .. } | RegularizerKind::WeightNormRows => ApplicationMode::Reparameterization,
            RegularizerKind::GradientPenalty { .. } | RegularizerKind::Orthonormal { .. } => ApplicationMode::LossPenalty,
        }
    }
}

impl FromStr for RegularizerSpec {
    type Err = RegularizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_strategy(s)
    }
}

impl fmt::Display for RegularizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.strategy_name())
    }
}

/// Projects every entry into `[-c, c]`.
pub fn weight_clip(t: &mut Tensor, c: f64) {
    for w in t.data_mut() {
        *w = w.clamp(-c, c);
    }
}

/// Left singular vector estimate persisted across training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    /// Orthonormal left basis for [`track`](Self::track); empty until first used.
    #[serde(default)]
    pub basis: Vec<Vec<f64>>,
    /// Set when the last update met a zero matrix and left it unnormalized.
    pub degenerate: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

impl PowerIterState {
    pub fn new(mut u: Vec<f64>) -> Self {
        if !normalize(&mut u) {
            u = vec![0.0; u.len()];
            if let Some(first) = u.first_mut() {
                *first = 1.0;
            }
        }
        PowerIterState { u, basis: Vec::new(), degenerate: false }
    }

    /// Random start refined by block rounds until `σ̂` settles, at most
    /// [`WARM_START_ITERS`] of them.
    pub fn warm_start(w: &Tensor, rng: &mut RngStream) -> Self {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let mut state = Self::new((0..rows).map(|_| rng.normal()).collect());
        state.basis = (1..BLOCK.min(rows).min(cols)).map(|_| (0..rows).map(|_| rng.normal()).collect()).collect();
        let mut prev = 0.0;
        for _ in 0..WARM_START_ITERS {
            // A zero matrix leaves `u` as is.
            let Ok(Some((_, sigma))) = state.block_round(w) else { break };
            if (sigma - prev).abs() <= WARM_START_TOL * sigma {
                break;
            }
            prev = sigma;
        }
        state
    }

    /// Runs `n_iter` rounds `v ← Wᵀu/‖Wᵀu‖, u ← Wv/‖Wv‖` and returns the final
    /// right vector, or `None` for a zero matrix.
    pub fn iterate(&mut self, w: &Tensor, n_iter: usize) -> Result<Option<Vec<f64>>, EngineError> {
        let mut v = Vec::new();
        for _ in 0..n_iter.max(1) {
            v = w.tmatvec(&self.u)?;
            if !normalize(&mut v) {
                self.degenerate = true;
                return Ok(None);
            }
            let mut u = w.matvec(&v)?;
            if !normalize(&mut u) {
                self.degenerate = true;
                return Ok(None);
            }
            self.u = u;
        }
        self.degenerate = false;
        Ok(Some(v))
    }

    /// `n_iter` rounds of block power iteration on the span of `u` and
    /// [`BLOCK`]` − 1` further persisted vectors, followed by a Rayleigh-Ritz
    /// step that picks the top singular pair inside that span. Unlike the
    /// single-vector rounds this follows a crossing of the leading singular
    /// values without waiting for `u` to drift off a stale direction.
    pub fn track(&mut self, w: &Tensor, n_iter: usize) -> Result<Option<Vec<f64>>, EngineError> {
        let mut out = None;
        for _ in 0..n_iter.max(1) {
            out = self.block_round(w)?;
            if out.is_none() {
                return Ok(None);
            }
        }
        Ok(out.map(|(v, _)| v))
    }

    /// One block round; returns the top right vector and `σ̂`.
    fn block_round(&mut self, w: &Tensor) -> Result<Option<(Vec<f64>, f64)>, EngineError> {
        let mut left = Vec::with_capacity(self.basis.len() + 1);
        left.push(self.u.clone());
        left.extend(self.basis.iter().cloned());
        let mut right = Vec::with_capacity(left.len());
        for u in &left {
            right.push(w.tmatvec(u)?);
        }
        let right = orthonormalize(right);
        if right.is_empty() {
            self.degenerate = true;
            return Ok(None);
        }
        let mut images = Vec::with_capacity(right.len());
        for v in &right {
            images.push(w.matvec(v)?);
        }
        // Rayleigh-Ritz: top eigenvector of the Gram matrix of W·V.
        let k = right.len();
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let g = dot(&images[i], &images[j]);
                gram[i * k + j] = g;
                gram[j * k + i] = g;
            }
        }
        let coef = top_eigenvector(&mut gram, k);
        let mut v = vec![0.0; right[0].len()];
        let mut u = vec![0.0; images[0].len()];
        for (c, (r, im)) in coef.iter().zip(right.iter().zip(&images)) {
            v.iter_mut().zip(r).for_each(|(a, b)| *a += c * b);
            u.iter_mut().zip(im).for_each(|(a, b)| *a += c * b);
        }
        let sigma = dot(&u, &u).sqrt();
        if !normalize(&mut u) || !normalize(&mut v) {
            self.degenerate = true;
            return Ok(None);
        }
        let mut next = vec![u.clone()];
        next.extend(images);
        let mut next = orthonormalize(next);
        next.remove(0);
        next.truncate(BLOCK - 1);
        self.basis = next;
        self.u = u;
        self.degenerate = false;
        Ok(Some((v, sigma)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt with one reorthogonalization pass; dependent vectors are dropped.
fn orthonormalize(vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for mut v in vectors {
        let scale = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for q in &out {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        if dot(&v, &v).sqrt() > 1e-10 * scale && normalize(&mut v) {
            out.push(v);
        }
    }
    out
}

/// Eigenvector of the largest eigenvalue of a small symmetric matrix, by
/// cyclic Jacobi rotations. `a` is overwritten.
fn top_eigenvector(a: &mut [f64], n: usize) -> Vec<f64> {
    let mut vecs = vec![0.0; n * n];
    for i in 0..n {
        vecs[i * n + i] = 1.0;
    }
    for _ in 0..64 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (vecs[k * n + p], vecs[k * n + q]);
                    vecs[k * n + p] = c * vkp - s * vkq;
                    vecs[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let top = (0..n).max_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j])).unwrap_or(0);
    (0..n).map(|k| vecs[k * n + top]).collect()
}

/// Result of [`spectral_normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralOutput {
    pub normalized: Tensor,
    pub sigma: f64,
    /// `W` was zero and was returned unchanged.
    pub degenerate: bool,
}

/// `W / σ̂` with `σ̂ = uᵀWv` estimated by `n_iter` power iterations from the
/// persisted `u`.
pub fn spectral_normalize(w: &Tensor, state: &mut PowerIterState, n_iter: usize) -> Result<SpectralOutput, EngineError> {
    match state.iterate(w, n_iter)? {
        None => Ok(SpectralOutput { normalized: w.clone(), sigma: 0.0, degenerate: true }),
        Some(v) => {
            let wv = w.matvec(&v)?;
            let sigma: f64 = state.u.iter().zip(&wv).map(|(a, b)| a * b).sum();
            Ok(SpectralOutput { normalized: w.map(|x| x / sigma), sigma, degenerate: false })
        }
    }
}

/// Tape version of [`spectral_normalize`]: `u` and `v` are constants, so the
/// gradient flows through `σ̂ = uᵀWv` as well as through `W`.
pub fn spectral_normalize_var(w: &Var, state: &mut PowerIterState, n_iter: usize) -> Result<Var, EngineError> {
    let wt = w.value();
    let Some(v) = state.track(&wt, n_iter)? else {
        return Ok(w.clone());
    };
    let tape = w.tape();
    let (rows, cols) = (wt.shape()[0], wt.shape()[1]);
    let vcol = tape.constant(Tensor::from_parts(vec![cols, 1], v));
    let ucol = tape.constant(Tensor::from_parts(vec![rows, 1], state.u.clone()));
    let sigma = w.matmul(&vcol)?.mul(&ucol)?.sum()?;
    w.mul_scalar(&sigma.recip()?)
}

/// Each row divided by its Euclidean norm. Zero rows pass through and are
/// reported in the returned count.
pub fn weight_norm_rows(w: &Tensor) -> (Tensor, usize) {
    let cols = w.cols();
    let mut out = w.clone();
    let mut zero_rows = 0;
    for row in out.data_mut().chunks_mut(cols) {
        if !normalize(row) {
            zero_rows += 1;
        }
    }
    (out, zero_rows)
}

const NORM_FLOOR: f64 = 1e-12;

/// Tape version of [`weight_norm_rows`].
pub fn weight_norm_rows_var(w: &Var) -> Result<Var, EngineError> {
    let cols = w.shape()[1];
    let norms = w.square()?.sum_cols()?.add_scalar(NORM_FLOOR)?.sqrt()?;
    w.mul(&norms.recip()?.broadcast_cols(cols)?)
}

/// Gram matrix of the smaller side: `WᵀW` when `W` has at least as many rows
/// as columns, else `WWᵀ`.
fn gram(w: &Var) -> Result<Var, EngineError> {
    let shape = w.shape();
    if shape[0] >= shape[1] {
        w.transpose()?.matmul(w)
    } else {
        w.matmul(&w.transpose()?)
    }
}

/// `β ‖WᵀW − I‖²_F` as a differentiable scalar.
pub fn orthonormal_penalty_var(w: &Var, beta: f64) -> Result<Var, EngineError> {
    let g = gram(w)?;
    let n = g.shape()[0];
    let eye = w.tape().constant(Tensor::identity(n));
    g.sub(&eye)?.square()?.sum()?.scale(beta)
}

pub fn orthonormal_penalty(w: &Tensor, beta: f64) -> Result<f64, EngineError> {
    let tape = Tape::new();
    Ok(orthonormal_penalty_var(&tape.constant(w.clone()), beta)?.item())
}

/// `λ · mean (‖∇ d(x̂)‖₂ − 1)²` over interpolates `x̂ = αx + (1−α)x̃`,
/// `α ~ U[0,1]` per example. The result is differentiable with respect to
/// the discriminator parameters in `bound`.
pub fn gradient_penalty(
    d: &Discriminator,
    bound: &BoundNet,
    real: &Tensor,
    fake: &Tensor,
    lambda: f64,
    rng: &mut RngStream,
) -> Result<Var, EngineError> {
    if real.shape() != fake.shape() {
        return Err(EngineError::ShapeMismatch {
            op: "gradient_penalty",
            detail: format!("{:?} vs {:?}", real.shape(), fake.shape()),
        });
    }
    let n = real.rows();
    let cols = real.cols();
    let mut mixed = Vec::with_capacity(real.len());
    for i in 0..n {
        let a = rng.uniform();
        mixed.extend(real.row(i).iter().zip(fake.row(i)).map(|(x, y)| a * x + (1.0 - a) * y));
    }
    let tape = bound.params.first().map(|p| p.tape().clone()).ok_or(EngineError::DetachedTape)?;
    let x_hat = tape.var(Tensor::from_parts(vec![n, cols], mixed));
    penalty_at(d, bound, &x_hat, lambda)
}

/// Gradient penalty at given interpolates (a leaf on the bound tape).
pub fn penalty_at(d: &Discriminator, bound: &BoundNet, x_hat: &Var, lambda: f64) -> Result<Var, EngineError> {
    let tape = x_hat.tape().clone();
    let out = d.forward(bound, x_hat)?.sum()?;
    let g = tape.grad(&out, std::slice::from_ref(x_hat), true)?.remove(0);
    let norms = g.square()?.sum_cols()?.add_scalar(NORM_FLOOR)?.sqrt()?;
    norms.add_scalar(-1.0)?.square()?.mean()?.scale(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_example() {
        let mut w = Tensor::vector(vec![-0.5, 0.005, 0.2]);
        weight_clip(&mut w, 0.01);
        assert_eq!(w.data(), &[-0.01, 0.005, 0.01]);
        let before = w.clone();
        weight_clip(&mut w, 0.01);
        assert_eq!(w, before);
    }

    #[test]
    fn spectral_diag_one_iteration() {
        let w = Tensor::matrix(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut state = PowerIterState::new(vec![1.0, 0.0]);
        let out = spectral_normalize(&w, &mut state, 1).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-12);
        assert!((out.normalized.at(0, 0) - 1.0).abs() < 1e-12);
        assert!((out.normalized.at(1, 1) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_fixed_point_and_zero_matrix() {
        let w = Tensor::matrix(&[vec![0.6, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut state = PowerIterState::new(vec![0.3, 0.7]);
        let out = spectral_normalize(&w, &mut state, 30).unwrap();
        for (a, b) in out.normalized.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let z = Tensor::zeros(&[2, 2]);
        let out = spectral_normalize(&z, &mut state, 1).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.normalized, z);
        assert!(state.degenerate);
    }

    #[test]
    fn weight_norm_examples() {
        let w = Tensor::matrix(&[vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (n, zero) = weight_norm_rows(&w);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(zero, 1);
    }

    #[test]
    fn orthonormal_examples() {
        let q = Tensor::matrix(&[vec![0.6, -0.8], vec![0.8, 0.6]]).unwrap();
        assert!(orthonormal_penalty(&q, 1.0).unwrap() < 1e-24);
        let w = Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((orthonormal_penalty(&w, 1.0).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn strategy_strings_roundtrip() {
        for name in ["original", "clip", "spectral", "gp", "weightnorm", "orthonormal"] {
            let spec: RegularizerSpec = name.parse().unwrap();
            assert_eq!(spec.to_string(), name);
        }
        assert!("dropout".parse::<RegularizerSpec>().is_err());
        assert!(RegularizerSpec::new(RegularizerKind::WeightClip { c: 0.0 }).is_err());
    }
}
