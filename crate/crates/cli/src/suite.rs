//! Grid execution and the aggregated results table.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use privgan::membership::{AttackMode, AttackResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{self, RunRecord, SuiteContext};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    /// Mean and population stddev; `None` for no values.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt(), n: values.len() })
    }
}

/// One aggregated line: a (strategy, objective, attack mode) cell over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub objective: String,
    pub mode: AttackMode,
    pub f1: Option<Stat>,
    pub auc: Option<Stat>,
    pub gap: Option<Stat>,
    pub classifier_score: Option<Stat>,
    pub runs: usize,
    pub failed: usize,
}

impl ResultRow {
    /// `ok`, `N/A` when every seed failed, else `failed k/n`.
    pub fn outcome(&self) -> String {
        match self.failed {
            0 => "ok".into(),
            f if f == self.runs => "N/A".into(),
            f => format!("failed {f}/{}", self.runs),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULTS_HEADER: &str =
    "strategy,objective,mode,f1_mean,f1_std,auc_mean,auc_std,gap_mean,gap_std,classifier_score_mean,classifier_score_std,outcome,runs";

fn cells(s: Option<Stat>) -> (String, String) {
    match s {
        Some(s) => (format!("{:.6}", s.mean), format!("{:.6}", s.std)),
        None => ("N/A".into(), "N/A".into()),
    }
}

impl ResultsTable {
    /// Aggregates run records in the strategy/objective order of `cfg`.
    pub fn from_records(cfg: &ExperimentConfig, records: &[RunRecord]) -> Self {
        let mut modes = Vec::new();
        if cfg.attack.whitebox() {
            modes.push(AttackMode::Whitebox);
        }
        if cfg.attack.blackbox() {
            modes.push(AttackMode::Blackbox);
        }
        let mut rows = Vec::new();
        for strategy in &cfg.strategies {
            for objective in &cfg.objectives {
                let runs: Vec<&RunRecord> = records
                    .iter()
                    .filter(|r| r.strategy == strategy.strategy_name() && r.objective == objective.name())
                    .collect();
                if runs.is_empty() {
                    continue;
                }
                for &mode in &modes {
                    let attack = |r: &RunRecord| -> Option<AttackResult> {
                        match mode {
                            AttackMode::Whitebox => r.whitebox.clone(),
                            AttackMode::Blackbox => r.blackbox.clone(),
                        }
                    };
                    let ok: Vec<&&RunRecord> = runs.iter().filter(|r| r.ok() && attack(r).is_some()).collect();
                    let collect = |f: &dyn Fn(&RunRecord) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                    rows.push(ResultRow {
                        strategy: strategy.strategy_name().into(),
                        objective: objective.name().into(),
                        mode,
                        f1: collect(&|r| attack(r).map(|a| a.f1.f1)),
                        auc: collect(&|r| attack(r).map(|a| a.auc)),
                        gap: collect(&|r| r.gap.map(|g| g.gap)),
                        classifier_score: collect(&|r| r.classifier_score),
                        runs: runs.len(),
                        failed: runs.len() - ok.len(),
                    });
                }
            }
        }
        ResultsTable { rows }
    }

    pub fn row(&self, strategy: &str, objective: &str, mode: AttackMode) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.objective == objective && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let (f1, f1s) = cells(r.f1);
            let (auc, aucs) = cells(r.auc);
            let (gap, gaps) = cells(r.gap);
            let (cs, css) = cells(r.classifier_score);
            s.push_str(&format!(
                "{},{},{},{f1},{f1s},{auc},{aucs},{gap},{gaps},{cs},{css},{},{}\n",
                r.strategy,
                r.objective,
                r.mode.name(),
                r.outcome(),
                r.runs
            ));
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let pm = |s: Option<Stat>| s.map_or("N/A".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.std));
        let mut s = String::from("| strategy | objective | mode | F1 | AUC | gap | classifier score | outcome |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.strategy,
                r.objective,
                r.mode.name(),
                pm(r.f1),
                pm(r.auc),
                pm(r.gap),
                pm(r.classifier_score),
                r.outcome()
            ));
        }
        s
    }
}

pub const RUNS_HEADER: &str = "strategy,objective,mode,seed,f1,f1_estimated,threshold,auc,gap,gap_signed,classifier_score,n_members,n_nonmembers,max_abs_weight,outcome";

/// One line per (run, attack mode).
pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{RUNS_HEADER}\n");
    let na = || "N/A".to_string();
    for r in records {
        let outcome = match (&r.error, &r.outcome) {
            (Some(e), _) => format!("error: {}", e.replace(',', ";")),
            (None, privgan::gan::Outcome::Failed { iteration, reason }) => format!("failed at {iteration}: {}", reason.replace(',', ";")),
            _ => "ok".into(),
        };
        let attacks: Vec<(&str, Option<&AttackResult>)> = vec![("whitebox", r.whitebox.as_ref()), ("blackbox", r.blackbox.as_ref())];
        for (mode, a) in attacks {
            if a.is_none() && r.ok() {
                continue;
            }
            let f = |v: Option<f64>| v.map_or_else(na, |x| format!("{x:.6}"));
            s.push_str(&format!(
                "{},{},{mode},{},{},{},{},{},{},{},{},{},{},{:.6},{outcome}\n",
                r.strategy,
                r.objective,
                r.seed,
                f(a.map(|a| a.f1.f1)),
                f(a.map(|a| a.f1_estimated.f1)),
                f(a.map(|a| a.f1.threshold)),
                f(a.map(|a| a.auc)),
                f(r.gap.map(|g| g.gap)),
                f(r.gap.map(|g| g.signed)),
                f(r.classifier_score),
                a.map_or_else(na, |a| a.n_members.to_string()),
                a.map_or_else(na, |a| a.n_nonmembers.to_string()),
                r.audit.max_abs_weight,
            ));
        }
    }
    s
}

pub struct SuiteOutput {
    pub records: Vec<RunRecord>,
    pub table: ResultsTable,
}

/// Runs every (strategy, objective, seed) on `cfg.workers` threads. A cell
/// that fails to run is recorded, never fatal; records are sorted before
/// aggregation so the output does not depend on scheduling.
pub fn run_suite(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SuiteOutput> {
    cfg.validate()?;
    let ctx = SuiteContext::new(cfg)?;
    let mut jobs = Vec::new();
    for (si, &s) in cfg.strategies.iter().enumerate() {
        for (oi, &o) in cfg.objectives.iter().enumerate() {
            for &seed in &cfg.seeds {
                jobs.push((si, oi, s, o, seed));
            }
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?;
    let mut results: Vec<((usize, usize, u64), RunRecord)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(si, oi, s, o, seed)| {
                let rec = experiment::run_experiment(cfg, &ctx, s, o, seed, out).unwrap_or_else(|e| RunRecord::errored(s, o, seed, &e));
                ((si, oi, seed), rec)
            })
            .collect()
    });
    results.sort_by_key(|(k, _)| *k);
    let records: Vec<RunRecord> = results.into_iter().map(|(_, r)| r).collect();
    let table = ResultsTable::from_records(cfg, &records);
    if let Some(dir) = out {
        write_suite(dir, cfg, &records, &table)?;
    }
    Ok(SuiteOutput { records, table })
}

fn write_suite(dir: &Path, cfg: &ExperimentConfig, records: &[RunRecord], table: &ResultsTable) -> Result<()> {
    fs::write(dir.join("results.csv"), table.to_csv())?;
    fs::write(dir.join("results.md"), table.to_markdown())?;
    fs::write(dir.join("runs.csv"), runs_csv(records))?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    // per-cell sidecars come from the first seed of each cell
    let first_seed = cfg.seeds[0];
    for r in records.iter().filter(|r| r.seed == first_seed) {
        let run_dir = dir.join("runs").join(r.cell()).join(format!("seed_{}", r.seed));
        for a in [&r.whitebox, &r.blackbox].into_iter().flatten() {
            fs::write(dir.join(format!("roc_{}_{}.csv", r.cell(), a.mode.name())), a.roc_csv())?;
        }
        let samples = run_dir.join("samples.ppm");
        if samples.exists() {
            fs::copy(&samples, dir.join(format!("samples_{}.ppm", r.cell())))?;
        }
    }
    Ok(())
}
