use std::fs;

use privgan_cli::audit::AuditConfig;
use privgan_cli::config::ExperimentConfig;
use privgan_cli::suite::run_suite;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("samples", "32"),
        ("epochs", "2"),
        ("batch_size", "8"),
        ("d_hidden", "8"),
        ("g_hidden", "8"),
        ("noise_dim", "4"),
        ("eval_samples", "64"),
        ("classifier_samples", "64"),
        ("checkpoint_every", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn unknown_and_malformed_keys_are_rejected() {
    assert!(ExperimentConfig::parse("epoch = 3").is_err());
    assert!(ExperimentConfig::parse("epochs = three").is_err());
    assert!(ExperimentConfig::parse("epochs 3").is_err());
    assert!(ExperimentConfig::parse("split = 1.5").is_err());
    assert!(ExperimentConfig::parse("dataset = folder").is_err());
    assert!(ExperimentConfig::parse("strategies = nope").is_err());
    assert!(AuditConfig::parse("epsilon = 1").is_err());
    let ok = ExperimentConfig::parse("# comment\nepochs = 7  # trailing\n\nobjectives = js\n").unwrap();
    assert_eq!(ok.epochs, 7);
    assert_eq!(ok.objectives.len(), 1);
}

#[test]
fn config_text_round_trips() {
    let mut cfg = tiny();
    cfg.set("strategies", "original,gp,weightnorm").unwrap();
    cfg.set("d_lr", "0.001").unwrap();
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn grid_produces_one_record_per_cell_and_seed() {
    let mut cfg = tiny();
    cfg.set("seeds", "0,1,2").unwrap();
    cfg.set("attack", "whitebox").unwrap();
    let out = run_suite(&cfg, None).unwrap();
    // 3 strategies × 2 objectives × 3 seeds
    assert_eq!(out.records.len(), 18);
    assert_eq!(out.table.rows.len(), 6);
    assert!(out.table.rows.iter().all(|r| r.runs == 3));
}

#[test]
fn rerunning_a_suite_reproduces_results() {
    let mut cfg = tiny();
    cfg.set("seeds", "4,5").unwrap();
    cfg.set("objectives", "js").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_suite(&cfg, Some(a.path())).unwrap();
    cfg.workers = 2;
    run_suite(&cfg, Some(b.path())).unwrap();
    for f in ["results.csv", "runs.csv"] {
        assert_eq!(fs::read_to_string(a.path().join(f)).unwrap(), fs::read_to_string(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap().to_string_lossy().starts_with("audit") {
            AuditConfig::parse(&text).unwrap();
        } else {
            ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        }
        seen += 1;
    }
    assert!(seen >= 3);
}
