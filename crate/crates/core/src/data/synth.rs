use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::engine::{RngStream, Tensor};

use super::{DataError, Dataset, Source};

/// A mixture of isotropic 2-d Gaussians equally spaced on a circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRingConfig {
    pub n_modes: usize,
    pub radius: f64,
    pub stddev: f64,
    pub samples: usize,
}

impl Default for GaussianRingConfig {
    /// Sized so that samples stay inside the tanh range of the generator.
    fn default() -> Self {
        GaussianRingConfig { n_modes: 8, radius: 0.75, stddev: 0.05, samples: 512 }
    }
}

impl GaussianRingConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_modes < 1 {
            return Err(DataError::InvalidConfig("n_modes must be at least 1".into()));
        }
        if !(self.stddev > 0.0 && self.stddev.is_finite()) {
            return Err(DataError::InvalidConfig(format!("stddev {} must be positive", self.stddev)));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(DataError::InvalidConfig(format!("radius {} must be nonnegative", self.radius)));
        }
        Ok(())
    }

    /// Center of mode `k`.
    pub fn center(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.n_modes as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }
}

/// Samples a labeled ring mixture; label = mode index, modes chosen uniformly.
pub fn synth_gaussian_ring(cfg: &GaussianRingConfig, rng: &mut RngStream) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut data = Vec::with_capacity(2 * cfg.samples);
    let mut labels = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let k = rng.index(cfg.n_modes);
        let [cx, cy] = cfg.center(k);
        data.push(cx + cfg.stddev * rng.normal());
        data.push(cy + cfg.stddev * rng.normal());
        labels.push(k);
    }
    let examples = Tensor::new(vec![cfg.samples, 2], data)?;
    Dataset::new(examples, vec![2], Source::Synthetic("ring".into()))?.with_labels(labels)
}

/// Number of classes produced by [`synth_patterns`].
pub const PATTERN_CLASSES: usize = 4;

/// Small single-channel images of one of four textures with pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub size: usize,
    pub noise: f64,
    pub samples: usize,
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig { size: 8, noise: 0.15, samples: 512 }
    }
}

fn pattern_value(class: usize, i: usize, j: usize, phase: usize) -> f64 {
    let on = match class {
        0 => (i + phase) % 2 == 0,
        1 => (j + phase) % 2 == 0,
        2 => (i + j + phase) % 4 < 2,
        _ => ((i / 2) + (j / 2) + phase) % 2 == 0,
    };
    if on {
        0.8
    } else {
        -0.8
    }
}

/// Images of shape `[1, size, size]`, values clamped to `[-1, 1]`; label = texture.
pub fn synth_patterns(cfg: &PatternConfig, rng: &mut RngStream) -> Result<Dataset, DataError> {
    if cfg.size < 2 {
        return Err(DataError::InvalidConfig("pattern size must be at least 2".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(DataError::InvalidConfig(format!("noise {} must be nonnegative", cfg.noise)));
    }
    let s = cfg.size;
    let mut data = Vec::with_capacity(cfg.samples * s * s);
    let mut labels = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let class = rng.index(PATTERN_CLASSES);
        let phase = rng.index(4);
        for i in 0..s {
            for j in 0..s {
                let v = pattern_value(class, i, j, phase) + cfg.noise * rng.normal();
                data.push(v.clamp(-1.0, 1.0));
            }
        }
        labels.push(class);
    }
    let examples = Tensor::new(vec![cfg.samples, s * s], data)?;
    Dataset::new(examples, vec![1, s, s], Source::Synthetic("patterns".into()))?.with_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_ring_is_centered() {
        let cfg = GaussianRingConfig { n_modes: 1, radius: 0.0, stddev: 0.1, samples: 4000 };
        let d = synth_gaussian_ring(&cfg, &mut RngStream::new(1)).unwrap();
        let x = d.examples();
        let mx = (0..x.rows()).map(|i| x.at(i, 0)).sum::<f64>() / x.rows() as f64;
        let my = (0..x.rows()).map(|i| x.at(i, 1)).sum::<f64>() / x.rows() as f64;
        let tol = 4.0 * 0.1 / (4000f64).sqrt();
        assert!(mx.abs() < tol && my.abs() < tol);
    }

    #[test]
    fn invalid_ring_rejected() {
        let mut cfg = GaussianRingConfig::default();
        cfg.n_modes = 0;
        assert!(synth_gaussian_ring(&cfg, &mut RngStream::new(1)).is_err());
        cfg.n_modes = 3;
        cfg.stddev = 0.0;
        assert!(synth_gaussian_ring(&cfg, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn seeds_are_deterministic() {
        let cfg = GaussianRingConfig::default();
        let a = synth_gaussian_ring(&cfg, &mut RngStream::new(5)).unwrap();
        let b = synth_gaussian_ring(&cfg, &mut RngStream::new(5)).unwrap();
        let c = synth_gaussian_ring(&cfg, &mut RngStream::new(6)).unwrap();
        assert_eq!(a.examples(), b.examples());
        assert_ne!(a.examples(), c.examples());
    }

    #[test]
    fn patterns_in_range() {
        let d = synth_patterns(&PatternConfig::default(), &mut RngStream::new(3)).unwrap();
        assert!(d.in_unit_range());
        assert_eq!(d.example_shape(), &[1, 8, 8]);
        assert!(d.labels().unwrap().iter().all(|&l| l < PATTERN_CLASSES));
    }
}
