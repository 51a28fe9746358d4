//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use privgan::gan::{GeneratorLossForm, MeasuringFunction};
use privgan::lipschitz::RegularizerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Ring,
    Patterns,
    Folder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackSelection {
    Whitebox,
    Blackbox,
    Both,
}

impl AttackSelection {
    pub fn whitebox(self) -> bool {
        matches!(self, AttackSelection::Whitebox | AttackSelection::Both)
    }

    pub fn blackbox(self) -> bool {
        matches!(self, AttackSelection::Blackbox | AttackSelection::Both)
    }
}

/// Every knob of a suite run. Together with a seed it determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub image_size: usize,
    pub samples: usize,
    pub split: f64,
    pub ring_modes: usize,
    pub ring_radius: f64,
    pub ring_stddev: f64,
    pub pattern_size: usize,
    pub pattern_noise: f64,
    pub strategies: Vec<RegularizerSpec>,
    pub objectives: Vec<MeasuringFunction>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub d_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub noise_dim: usize,
    pub d_lr: Option<f64>,
    pub g_lr: Option<f64>,
    pub d_steps: usize,
    pub generator_loss: GeneratorLossForm,
    pub checkpoint_every: usize,
    pub attack: AttackSelection,
    pub aux_fraction: f64,
    pub shadow_epochs: Option<usize>,
    pub eval_samples: usize,
    pub classifier_samples: usize,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Ring,
            data_path: None,
            image_size: 32,
            samples: 256,
            split: 0.5,
            ring_modes: 8,
            ring_radius: 0.75,
            ring_stddev: 0.05,
            pattern_size: 8,
            pattern_noise: 0.15,
            strategies: ["original", "clip", "spectral"].iter().map(|s| RegularizerSpec::from_strategy(s).unwrap()).collect(),
            objectives: vec![MeasuringFunction::Log, MeasuringFunction::Identity],
            seeds: vec![0, 1, 2],
            epochs: 200,
            batch_size: 64,
            d_hidden: vec![128, 128],
            g_hidden: vec![128, 128],
            noise_dim: 64,
            d_lr: None,
            g_lr: None,
            d_steps: 1,
            generator_loss: GeneratorLossForm::Literal,
            checkpoint_every: 50,
            attack: AttackSelection::Both,
            aux_fraction: 0.3,
            shadow_epochs: None,
            eval_samples: 512,
            classifier_samples: 1024,
            workers: 1,
            out: PathBuf::from("out"),
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse '{s}': {e}")))
        .collect()
}

fn one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key}: cannot parse '{v}': {e}"))
}

fn objective(s: &str) -> Result<MeasuringFunction> {
    MeasuringFunction::from_name(s).ok_or_else(|| anyhow!("objective '{s}' is not js or wasserstein"))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => {
                self.dataset = match v {
                    "ring" => DatasetKind::Ring,
                    "patterns" => DatasetKind::Patterns,
                    "folder" => DatasetKind::Folder,
                    other => bail!("dataset '{other}' is not ring, patterns or folder"),
                }
            }
            "data_path" => self.data_path = Some(PathBuf::from(v)),
            "image_size" => self.image_size = one(key, v)?,
            "samples" => self.samples = one(key, v)?,
            "split" => self.split = one(key, v)?,
            "ring_modes" => self.ring_modes = one(key, v)?,
            "ring_radius" => self.ring_radius = one(key, v)?,
            "ring_stddev" => self.ring_stddev = one(key, v)?,
            "pattern_size" => self.pattern_size = one(key, v)?,
            "pattern_noise" => self.pattern_noise = one(key, v)?,
            "strategies" | "strategy" => self.strategies = list(key, v)?,
            "objectives" | "objective" => self.objectives = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(objective).collect::<Result<_>>()?,
            "seeds" => self.seeds = list(key, v)?,
            "epochs" => self.epochs = one(key, v)?,
            "batch_size" => self.batch_size = one(key, v)?,
            "d_hidden" => self.d_hidden = list(key, v)?,
            "g_hidden" => self.g_hidden = list(key, v)?,
            "noise_dim" => self.noise_dim = one(key, v)?,
            "d_lr" => self.d_lr = Some(one(key, v)?),
            "g_lr" => self.g_lr = Some(one(key, v)?),
            "d_steps" => self.d_steps = one(key, v)?,
            "generator_loss" => {
                self.generator_loss = match v {
                    "literal" => GeneratorLossForm::Literal,
                    "nonsaturating" => GeneratorLossForm::NonSaturating,
                    other => bail!("generator_loss '{other}' is not literal or nonsaturating"),
                }
            }
            "checkpoint_every" => self.checkpoint_every = one(key, v)?,
            "attack" => {
                self.attack = match v {
                    "whitebox" => AttackSelection::Whitebox,
                    "blackbox" => AttackSelection::Blackbox,
                    "both" => AttackSelection::Both,
                    other => bail!("attack '{other}' is not whitebox, blackbox or both"),
                }
            }
            "aux_fraction" => self.aux_fraction = one(key, v)?,
            "shadow_epochs" => self.shadow_epochs = Some(one(key, v)?),
            "eval_samples" => self.eval_samples = one(key, v)?,
            "classifier_samples" => self.classifier_samples = one(key, v)?,
            "workers" => self.workers = one(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            cfg.set(k, v).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.objectives.is_empty() {
            bail!("at least one strategy and one objective are required");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            bail!("split {} not in (0, 1)", self.split);
        }
        if !(self.aux_fraction > 0.0 && self.aux_fraction < 1.0) {
            bail!("aux_fraction {} not in (0, 1)", self.aux_fraction);
        }
        if self.dataset == DatasetKind::Folder && self.data_path.is_none() {
            bail!("dataset = folder needs data_path");
        }
        if self.batch_size == 0 || self.workers == 0 || self.eval_samples == 0 {
            bail!("batch_size, workers and eval_samples must be positive");
        }
        Ok(())
    }

    /// The config as `key = value` text that [`ExperimentConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let dataset = match self.dataset {
            DatasetKind::Ring => "ring",
            DatasetKind::Patterns => "patterns",
            DatasetKind::Folder => "folder",
        };
        let _ = writeln!(s, "dataset = {dataset}");
        if let Some(p) = &self.data_path {
            let _ = writeln!(s, "data_path = {}", p.display());
        }
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "split = {}", self.split);
        let _ = writeln!(s, "ring_modes = {}", self.ring_modes);
        let _ = writeln!(s, "ring_radius = {}", self.ring_radius);
        let _ = writeln!(s, "ring_stddev = {}", self.ring_stddev);
        let _ = writeln!(s, "pattern_size = {}", self.pattern_size);
        let _ = writeln!(s, "pattern_noise = {}", self.pattern_noise);
        let _ = writeln!(s, "strategies = {}", self.strategies.iter().map(|r| r.strategy_name()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "objectives = {}", self.objectives.iter().map(|o| o.name()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "seeds = {}", self.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "d_hidden = {}", join(&self.d_hidden));
        let _ = writeln!(s, "g_hidden = {}", join(&self.g_hidden));
        let _ = writeln!(s, "noise_dim = {}", self.noise_dim);
        if let Some(lr) = self.d_lr {
            let _ = writeln!(s, "d_lr = {lr}");
        }
        if let Some(lr) = self.g_lr {
            let _ = writeln!(s, "g_lr = {lr}");
        }
        let _ = writeln!(s, "d_steps = {}", self.d_steps);
        let gl = match self.generator_loss {
            GeneratorLossForm::Literal => "literal",
            GeneratorLossForm::NonSaturating => "nonsaturating",
        };
        let _ = writeln!(s, "generator_loss = {gl}");
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let attack = match self.attack {
            AttackSelection::Whitebox => "whitebox",
            AttackSelection::Blackbox => "blackbox",
            AttackSelection::Both => "both",
        };
        let _ = writeln!(s, "attack = {attack}");
        let _ = writeln!(s, "aux_fraction = {}", self.aux_fraction);
        if let Some(e) = self.shadow_epochs {
            let _ = writeln!(s, "shadow_epochs = {e}");
        }
        let _ = writeln!(s, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(s, "classifier_samples = {}", self.classifier_samples);
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("epochs = 3\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("epochs 3").is_err());
        assert!(ExperimentConfig::parse("strategies = original,nope").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = ExperimentConfig::parse("# desk\nstrategies = clip, gp\nobjectives = wasserstein\nseeds = 4,5\nd_lr = 0.001\n").unwrap();
        cfg.shadow_epochs = Some(7);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
