use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use privgan::data::pnm;
use privgan::engine::RngStream;
use privgan_cli::audit::{run_audit, AuditConfig};
use privgan_cli::config::ExperimentConfig;
use privgan_cli::experiment::{self, CheckpointFile, SuiteContext};
use privgan_cli::suite::{run_suite, runs_csv};

#[derive(Parser)]
#[command(name = "privgan", about = "GAN privacy and generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first configured cell and write checkpoints and loss curves.
    Train(Common),
    /// Train and attack the first configured cell; prints attack rows.
    Attack(Common),
    /// Run the full strategy × objective × seed grid.
    Suite(Common),
    /// Run the differential-privacy audit.
    Audit(Common),
    /// Print a results.csv as a markdown table.
    Report {
        results: PathBuf,
    },
    /// Write a sample grid from a checkpoint.
    Samples {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=').ok_or_else(|| anyhow!("override '{s}' is not key=value"))
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = split_kv(o)?;
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn audit_config(c: &Common) -> Result<(AuditConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => AuditConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => AuditConfig::default(),
    };
    for o in &c.overrides {
        let (k, v) = split_kv(o)?;
        cfg.set(k, v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok((cfg, c.out.clone().unwrap_or_else(|| PathBuf::from("out"))))
}

fn first_cell(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut one = cfg.clone();
    one.strategies.truncate(1);
    one.objectives.truncate(1);
    one.seeds.truncate(1);
    one
}

fn report(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("empty results file"))?.split(',').collect();
    println!("| {} |", header.join(" | "));
    println!("|{}", "---|".repeat(header.len()));
    for l in lines.filter(|l| !l.is_empty()) {
        println!("| {} |", l.split(',').collect::<Vec<_>>().join(" | "));
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(c) => {
            let cfg = first_cell(&experiment_config(&c)?);
            let ctx = SuiteContext::new(&cfg)?;
            let split = experiment::prepare_data(&cfg, &ctx, cfg.seeds[0])?;
            let tc = experiment::train_config(&cfg, cfg.strategies[0], cfg.objectives[0], cfg.seeds[0]);
            let (model, audit) = experiment::train_with_audit(&tc, &split)?;
            let dir = cfg.out.join(experiment::cell_name(cfg.strategies[0], cfg.objectives[0]));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("loss_curve.csv"), model.curve_csv())?;
            fs::write(dir.join("manifest.txt"), split.manifest())?;
            let cp = CheckpointFile {
                strategy: cfg.strategies[0].strategy_name().into(),
                objective: cfg.objectives[0].name().into(),
                seed: cfg.seeds[0],
                example_shape: split.train.example_shape().to_vec(),
                discriminator: model.discriminator.clone(),
                generator: model.generator.clone(),
            };
            fs::write(dir.join("checkpoint.json"), serde_json::to_string(&cp)?)?;
            println!("outcome: {:?}", model.outcome);
            println!("iterations: {}  max|w|: {:.6}", model.iterations, audit.max_abs_weight);
            if let Some((lo, hi)) = audit.sigma_range {
                println!("top singular values in [{lo:.4}, {hi:.4}]");
            }
            println!("wrote {}", dir.display());
        }
        Command::Attack(c) => {
            let cfg = first_cell(&experiment_config(&c)?);
            let out = run_suite(&cfg, Some(&cfg.out))?;
            fs::write(cfg.out.join("attack.csv"), runs_csv(&out.records))?;
            print!("{}", runs_csv(&out.records));
        }
        Command::Suite(c) => {
            let cfg = experiment_config(&c)?;
            let out = run_suite(&cfg, Some(&cfg.out))?;
            print!("{}", out.table.to_markdown());
            let failed: usize = out.table.rows.iter().map(|r| r.failed).sum();
            if failed > 0 {
                eprintln!("{failed} cell runs failed or diverged (reported as N/A)");
            }
        }
        Command::Audit(c) => {
            let (cfg, out) = audit_config(&c)?;
            let rep = run_audit(&cfg, Some(&out))?;
            print!("{}", rep.summary());
            if !rep.pass() {
                bail!("audit checks failed");
            }
        }
        Command::Report { results } => report(&results)?,
        Command::Samples { checkpoint, count, seed, out } => {
            let cp: CheckpointFile = serde_json::from_str(&fs::read_to_string(&checkpoint)?)?;
            let samples = cp.generator.sample(count, &mut RngStream::new(seed))?;
            if cp.example_shape.len() >= 2 {
                pnm::write_pnm(&out, &pnm::sample_grid(&samples, &cp.example_shape, 8)?)?;
            } else {
                let mut s = String::new();
                for i in 0..samples.rows() {
                    s.push_str(&samples.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
                    s.push('\n');
                }
                fs::write(&out, s)?;
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
