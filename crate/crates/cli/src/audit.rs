//! Privacy audit: the ε → stability → gap chain and the per-iteration tail check.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Result};
use privgan::engine::RngStream;
use privgan::privacy::{
    self, ChainConfig, ChainLearner, ChainMethod, ChainRow, ConvergenceReport, HypothesisClass, NoisyLogisticLearner, ScalarDistribution,
    CHAIN_CSV_HEADER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceConfig {
    pub runs: usize,
    pub m: usize,
    pub steps: usize,
    pub epsilon_total: f64,
    pub clip: f64,
    pub t_grid: Vec<f64>,
    pub eval_size: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { runs: 200, m: 64, steps: 200, epsilon_total: 0.05, clip: 1.0, t_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5], eval_size: 6400 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditConfig {
    pub epsilons: Vec<f64>,
    pub m: usize,
    pub p1: f64,
    /// Monte Carlo runs for the sampled cross-check; 0 skips it.
    pub mc_runs: usize,
    pub include_argmax: bool,
    pub convergence: Option<ConvergenceConfig>,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { epsilons: vec![0.1, 0.5, 1.0], m: 10, p1: 0.3, mc_runs: 2000, include_argmax: true, convergence: Some(ConvergenceConfig::default()), seed: 0 }
    }
}

fn floats(v: &str) -> Result<Vec<f64>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| s.parse::<f64>().map_err(|e| anyhow!("'{s}': {e}"))).collect()
}

impl AuditConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let conv = || ConvergenceConfig::default();
        match key.trim() {
            "epsilons" => self.epsilons = floats(v)?,
            "m" => self.m = v.parse()?,
            "p1" => self.p1 = v.parse()?,
            "mc_runs" => self.mc_runs = v.parse()?,
            "include_argmax" => self.include_argmax = v.parse()?,
            "seed" => self.seed = v.parse()?,
            "convergence" => {
                self.convergence = match v {
                    "on" | "true" => Some(self.convergence.clone().unwrap_or_else(conv)),
                    "off" | "false" => None,
                    other => bail!("convergence '{other}' is not on or off"),
                }
            }
            k @ ("convergence_runs" | "convergence_m" | "convergence_steps" | "convergence_epsilon" | "convergence_clip" | "t_grid" | "eval_size") => {
                let c = self.convergence.get_or_insert_with(conv);
                match k {
                    "convergence_runs" => c.runs = v.parse()?,
                    "convergence_m" => c.m = v.parse()?,
                    "convergence_steps" => c.steps = v.parse()?,
                    "convergence_epsilon" => c.epsilon_total = v.parse()?,
                    "convergence_clip" => c.clip = v.parse()?,
                    "t_grid" => c.t_grid = floats(v)?,
                    _ => c.eval_size = v.parse()?,
                }
            }
            other => bail!("unknown audit key '{other}'"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = AuditConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            cfg.set(k, v).map_err(|e| anyhow!("line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct AuditReport {
    /// Exact-enumeration rows, then Monte Carlo rows, then the non-private control.
    pub chain: Vec<(String, ChainRow)>,
    pub convergence: Option<ConvergenceReport>,
}

impl AuditReport {
    pub fn chain_pass(&self) -> bool {
        self.chain.iter().all(|(_, r)| r.pass != Some(false))
    }

    pub fn pass(&self) -> bool {
        self.chain_pass() && self.convergence.as_ref().is_none_or(|c| c.pass())
    }

    pub fn chain_csv(&self) -> String {
        let mut s = format!("method,{CHAIN_CSV_HEADER}\n");
        for (method, row) in &self.chain {
            s.push_str(&format!("{method},{}\n", row.csv()));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (method, r) in &self.chain {
            let verdict = match r.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "N/A (non-private)",
            };
            s.push_str(&format!(
                "{method:>11} {:<12} eps={:<6} stability {:.6} (bound {}) gap {:+.6} -> {verdict}\n",
                r.mechanism,
                r.epsilon.map_or("-".into(), |e| e.to_string()),
                r.stability_measured,
                r.stability_bound.map_or("-".into(), |b| format!("{b:.6}")),
                r.gap_measured,
            ));
        }
        if let Some(c) = &self.convergence {
            s.push_str(&format!(
                "uniform convergence: eps={:.4} m={} runs={} checkpoints={} -> {}\n",
                c.epsilon,
                c.m,
                c.runs,
                c.rows.len(),
                if c.pass() { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Runs the chain over the ε grid (exact, then sampled) and the tail check.
pub fn run_audit(cfg: &AuditConfig, out: Option<&Path>) -> Result<AuditReport> {
    let mut chain = Vec::new();
    let base = ChainConfig {
        learner: ChainLearner::Exponential,
        epsilons: cfg.epsilons.clone(),
        m: cfg.m,
        p1: cfg.p1,
        class: HypothesisClass::two_point_grid(),
        method: ChainMethod::Exact,
        seed: cfg.seed,
    };
    for row in privacy::verify_dp_chain(&base)? {
        chain.push(("exact".to_string(), row));
    }
    if cfg.mc_runs >= 2 {
        let mc = ChainConfig { method: ChainMethod::MonteCarlo { runs: cfg.mc_runs }, ..base.clone() };
        for row in privacy::verify_dp_chain(&mc)? {
            chain.push(("montecarlo".to_string(), row));
        }
    }
    if cfg.include_argmax && !cfg.epsilons.is_empty() {
        let ctl = ChainConfig { learner: ChainLearner::Argmax, ..base };
        for row in privacy::verify_dp_chain(&ctl)? {
            chain.push(("exact".to_string(), row));
        }
    }
    let convergence = match &cfg.convergence {
        Some(c) if !cfg.epsilons.is_empty() => {
            let learner = NoisyLogisticLearner::with_total_epsilon(c.epsilon_total, c.m, c.steps, c.clip)?;
            let dist = ScalarDistribution::Gaussian { mean: 1.0, std: 1.0 };
            Some(privacy::verify_uniform_convergence(&learner, &dist, c.m, c.runs, &c.t_grid, c.eval_size, &RngStream::new(cfg.seed).derive(7))?)
        }
        _ => None,
    };
    let report = AuditReport { chain, convergence };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("audit.csv"), report.chain_csv())?;
        if let Some(c) = &report.convergence {
            fs::write(dir.join("convergence.csv"), c.csv())?;
        }
        fs::write(dir.join("audit.txt"), report.summary())?;
    }
    Ok(report)
}
