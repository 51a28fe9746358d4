//! One (strategy, objective, seed) run: train, attack, measure, write artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use privgan::data::{
    self, channel_stddev, gap_from_losses, pnm, split_train_holdout, synth_gaussian_ring, synth_patterns, ClassifierConfig, Dataset, GapReport,
    GaussianRingConfig, PatternConfig, ScoreClassifier, SplitDataset, PATTERN_CLASSES,
};
use privgan::engine::{RngStream, Tensor};
use privgan::gan::{self, Discriminator, Generator, MeasuringFunction, NoiseKind, NoisePrior, Outcome, TrainConfig, TrainEvent, TrainedModel};
use privgan::lipschitz::{RegularizerKind, RegularizerSpec};
use privgan::membership::{self, AttackResult, AttackerView, ShadowConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};

/// Stream indices derived from a run seed.
const DATA_STREAM: u64 = 100;
const SPLIT_STREAM: u64 = 101;
const ATTACK_STREAM: u64 = 102;
const SAMPLE_STREAM: u64 = 103;
const SHADOW_SEED_SALT: u64 = 0x5AD0_5AD0;
/// Seed of the frozen score classifier and its data.
const CLASSIFIER_SEED: u64 = 0xC1A5_51F1;

/// Shared, read-only inputs of a suite.
pub struct SuiteContext {
    pub classifier: Option<ScoreClassifier>,
    pub folder_data: Option<Dataset>,
}

impl SuiteContext {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let folder_data = match cfg.dataset {
            DatasetKind::Folder => {
                let path = cfg.data_path.as_ref().context("data_path")?;
                let load = pnm::load_image_folder(path, cfg.image_size)?;
                if !load.skipped.is_empty() {
                    eprintln!("warning: {} unreadable files skipped", load.skipped.len());
                }
                Some(load.dataset)
            }
            _ => None,
        };
        let classifier = match cfg.dataset {
            DatasetKind::Folder => None,
            _ => {
                let rng = RngStream::new(CLASSIFIER_SEED);
                let (labeled, classes) = synth(cfg, cfg.classifier_samples, &mut rng.derive(0))?;
                Some(ScoreClassifier::fit(&labeled, classes, &ClassifierConfig::default(), &mut rng.derive(1))?)
            }
        };
        Ok(SuiteContext { classifier, folder_data })
    }
}

fn synth(cfg: &ExperimentConfig, samples: usize, rng: &mut RngStream) -> Result<(Dataset, usize)> {
    Ok(match cfg.dataset {
        DatasetKind::Ring => {
            let rc = GaussianRingConfig { n_modes: cfg.ring_modes, radius: cfg.ring_radius, stddev: cfg.ring_stddev, samples };
            (synth_gaussian_ring(&rc, rng)?, cfg.ring_modes.max(2))
        }
        DatasetKind::Patterns => {
            let pc = PatternConfig { size: cfg.pattern_size, noise: cfg.pattern_noise, samples };
            (synth_patterns(&pc, rng)?, PATTERN_CLASSES)
        }
        DatasetKind::Folder => anyhow::bail!("folder datasets are loaded, not synthesized"),
    })
}

/// The dataset of a run and its train/holdout split.
pub fn prepare_data(cfg: &ExperimentConfig, ctx: &SuiteContext, seed: u64) -> Result<SplitDataset> {
    let root = RngStream::new(seed);
    let full = match &ctx.folder_data {
        Some(d) => d.clone(),
        None => synth(cfg, cfg.samples, &mut root.derive(DATA_STREAM))?.0,
    };
    Ok(split_train_holdout(&full, cfg.split, &mut root.derive(SPLIT_STREAM))?)
}

pub fn train_config(cfg: &ExperimentConfig, strategy: RegularizerSpec, objective: MeasuringFunction, seed: u64) -> TrainConfig {
    let mut tc = TrainConfig::new(objective, strategy);
    tc.batch_size = cfg.batch_size;
    tc.epochs = cfg.epochs;
    tc.seed = seed;
    tc.d_steps = cfg.d_steps;
    tc.checkpoint_every = cfg.checkpoint_every;
    tc.generator_loss = cfg.generator_loss;
    tc.d_hidden = cfg.d_hidden.clone();
    tc.g_hidden = cfg.g_hidden.clone();
    tc.noise = NoisePrior::new(NoiseKind::StandardNormal, cfg.noise_dim);
    if let Some(lr) = cfg.d_lr {
        tc.d_adam.lr = lr;
    }
    if let Some(lr) = cfg.g_lr {
        tc.g_adam.lr = lr;
    }
    tc.keep_snapshots = matches!(strategy.kind, RegularizerKind::WeightClip { .. } | RegularizerKind::SpectralNorm { .. });
    tc
}

pub fn cell_name(strategy: RegularizerSpec, objective: MeasuringFunction) -> String {
    format!("{}_{}", strategy.strategy_name(), objective.name())
}

/// Post-hoc audit of the Lipschitz constraint over stored checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    /// Largest `|w|` over every discriminator parameter seen.
    pub max_abs_weight: f64,
    /// Smallest and largest top singular value of effective weight matrices.
    pub sigma_range: Option<(f64, f64)>,
    /// Largest `|w|` observed right after any discriminator step.
    pub max_abs_after_step: f64,
    pub checkpoints: usize,
}

fn top_sigma(w: &Tensor) -> Result<f64> {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    Ok(m.singular_values().max())
}

fn audit_discriminator(d: &Discriminator, audit: &mut ConstraintAudit) -> Result<()> {
    for p in &d.params {
        audit.max_abs_weight = audit.max_abs_weight.max(p.value.max_abs());
    }
    if matches!(d.reparam, gan::Reparam::Spectral { .. }) {
        for w in d.effective_weights()? {
            let s = top_sigma(&w)?;
            audit.sigma_range = Some(match audit.sigma_range {
                Some((lo, hi)) => (lo.min(s), hi.max(s)),
                None => (s, s),
            });
        }
    }
    audit.checkpoints += 1;
    Ok(())
}

/// Everything measured in one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub objective: String,
    pub seed: u64,
    pub outcome: Outcome,
    /// Set when the run could not be executed at all.
    pub error: Option<String>,
    pub whitebox: Option<AttackResult>,
    pub blackbox: Option<AttackResult>,
    pub gap: Option<GapReport>,
    pub classifier_score: Option<f64>,
    pub audit: ConstraintAudit,
    pub sample_stddev: Option<Vec<f64>>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none() && !self.outcome.is_failed()
    }

    pub fn cell(&self) -> String {
        format!("{}_{}", self.strategy, self.objective)
    }

    pub fn errored(strategy: RegularizerSpec, objective: MeasuringFunction, seed: u64, err: &anyhow::Error) -> Self {
        RunRecord {
            strategy: strategy.strategy_name().into(),
            objective: objective.name().into(),
            seed,
            outcome: Outcome::Failed { iteration: 0, reason: format!("{err:#}") },
            error: Some(format!("{err:#}")),
            whitebox: None,
            blackbox: None,
            gap: None,
            classifier_score: None,
            audit: ConstraintAudit::default(),
            sample_stddev: None,
        }
    }
}

/// Serialized networks of a trained model.
#[derive(Serialize, Deserialize)]
pub struct CheckpointFile {
    pub strategy: String,
    pub objective: String,
    pub seed: u64,
    pub example_shape: Vec<usize>,
    pub discriminator: Discriminator,
    pub generator: Generator,
}

/// Trains one model and records the clip/spectral audit along the way.
pub fn train_with_audit(tc: &TrainConfig, split: &SplitDataset) -> Result<(TrainedModel, ConstraintAudit)> {
    let mut audit = ConstraintAudit::default();
    let mut after_step = 0.0f64;
    let model = gan::train_observed(tc, &split.train, Some(&split.holdout), &mut |ev| {
        if let TrainEvent::DiscriminatorStep { discriminator, .. } = ev {
            for p in &discriminator.params {
                after_step = after_step.max(p.value.max_abs());
            }
        }
    })?;
    audit.max_abs_after_step = after_step;
    for cp in &model.checkpoints {
        if let Some(d) = &cp.discriminator {
            audit_discriminator(d, &mut audit)?;
        }
    }
    audit_discriminator(&model.discriminator, &mut audit)?;
    Ok((model, audit))
}

/// Runs one cell for one seed. Training failures are recorded in the outcome.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    ctx: &SuiteContext,
    strategy: RegularizerSpec,
    objective: MeasuringFunction,
    seed: u64,
    out: Option<&Path>,
) -> Result<RunRecord> {
    let split = prepare_data(cfg, ctx, seed)?;
    let tc = train_config(cfg, strategy, objective, seed);
    let (model, audit) = train_with_audit(&tc, &split)?;
    let mut rec = RunRecord {
        strategy: strategy.strategy_name().into(),
        objective: objective.name().into(),
        seed,
        outcome: model.outcome.clone(),
        error: None,
        whitebox: None,
        blackbox: None,
        gap: None,
        classifier_score: None,
        audit,
        sample_stddev: None,
    };
    if let Some(dir) = out {
        write_run_artifacts(dir, &rec, &split, &model)?;
    }
    if model.outcome.is_failed() {
        return Ok(rec);
    }
    let root = RngStream::new(seed);
    let test = membership::build_attack_testset(&split)?;
    if cfg.attack.whitebox() {
        rec.whitebox = Some(membership::whitebox_attack(&model.discriminator, &test, cfg.aux_fraction, &mut root.derive(ATTACK_STREAM))?);
    }
    if cfg.attack.blackbox() {
        let mut shadow_tc = train_config(cfg, strategy, objective, seed ^ SHADOW_SEED_SALT);
        shadow_tc.epochs = cfg.shadow_epochs.unwrap_or(cfg.epochs);
        shadow_tc.keep_snapshots = false;
        let mut sc = ShadowConfig::new(shadow_tc);
        sc.aux_fraction = cfg.aux_fraction;
        let mut arng = root.derive(ATTACK_STREAM).derive(1);
        let view = AttackerView::new(&test, split.train.example_shape(), &model.generator, &sc, &mut arng)?;
        // small aux sets would otherwise fall below one batch
        sc.train.batch_size = sc.train.batch_size.min(view.aux_members.len() + view.generator_samples.rows());
        let (res, _, iso) = membership::blackbox_attack(&view, &sc)?;
        anyhow::ensure!(iso.evaluation_reads_during_training == 0, "shadow training read evaluation examples");
        rec.blackbox = Some(res);
    }
    if let Some(last) = model.checkpoints.last() {
        rec.gap = Some(gap_from_losses(last.losses.train_loss_d, last.losses.heldout_loss_d));
    }
    let samples = model.generator.sample(cfg.eval_samples, &mut root.derive(SAMPLE_STREAM))?;
    if let Some(clf) = &ctx.classifier {
        rec.classifier_score = Some(clf.score(&samples)?);
    }
    let sample_set = Dataset::new(samples.clone(), split.train.example_shape().to_vec(), data::Source::Synthetic("generated".into()))?;
    rec.sample_stddev = Some(channel_stddev(&sample_set)?.stddev);
    if let Some(dir) = out {
        let run_dir = run_dir(dir, &rec);
        fs::write(run_dir.join("record.json"), serde_json::to_string_pretty(&rec)?)?;
        for res in [&rec.whitebox, &rec.blackbox].into_iter().flatten() {
            fs::write(run_dir.join(format!("roc_{}.csv", res.mode.name())), res.roc_csv())?;
        }
        write_samples(&run_dir.join("samples.ppm"), &split.train, &samples)?;
    }
    Ok(rec)
}

fn run_dir(out: &Path, rec: &RunRecord) -> PathBuf {
    out.join("runs").join(rec.cell()).join(format!("seed_{}", rec.seed))
}

fn write_run_artifacts(out: &Path, rec: &RunRecord, split: &SplitDataset, model: &TrainedModel) -> Result<()> {
    let dir = run_dir(out, rec);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("manifest.txt"), split.manifest())?;
    fs::write(dir.join("loss_curve.csv"), model.curve_csv())?;
    let cp = CheckpointFile {
        strategy: rec.strategy.clone(),
        objective: rec.objective.clone(),
        seed: rec.seed,
        example_shape: split.train.example_shape().to_vec(),
        discriminator: model.discriminator.clone(),
        generator: model.generator.clone(),
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string(&cp)?)?;
    Ok(())
}

/// Sample grid for image data; a scatter plot of real (grey) and generated
/// (white) points for 2-d data.
pub fn write_samples(path: &Path, real: &Dataset, samples: &Tensor) -> Result<()> {
    let img = if real.example_shape().len() >= 2 {
        let n = samples.rows().min(64);
        let idx: Vec<usize> = (0..n).collect();
        pnm::sample_grid(&samples.select_rows(&idx), real.example_shape(), 8)?
    } else {
        scatter(real.examples(), samples, 128)
    };
    pnm::write_pnm(path, &img)?;
    Ok(())
}

fn scatter(real: &Tensor, fake: &Tensor, size: usize) -> pnm::Image {
    let mut data = vec![0.0; size * size];
    let mut plot = |t: &Tensor, v: f64| {
        for i in 0..t.rows() {
            let r = t.row(i);
            let (x, y) = (r[0], r.get(1).copied().unwrap_or(0.0));
            let px = (((x + 1.0) / 2.0) * (size - 1) as f64).round();
            let py = (((1.0 - y) / 2.0) * (size - 1) as f64).round();
            if (0.0..size as f64).contains(&px) && (0.0..size as f64).contains(&py) {
                let k = py as usize * size + px as usize;
                data[k] = f64::max(data[k], v);
            }
        }
    };
    plot(real, 0.5);
    plot(fake, 1.0);
    pnm::Image { channels: 1, height: size, width: size, data }
}
