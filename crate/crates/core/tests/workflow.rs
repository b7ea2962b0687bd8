//! Config parsing, checkpoints, resume, ablation grids and the binary.

mod common;

use std::process::Command;

use common::{micro, BASELINE, MICRO};
use prevmatch::ablation::{comparison_table, run_ablation, GridSpec, TABLE_HEADER};
use prevmatch::checkpoint;
use prevmatch::config::{parse_config, TrainConfig, KEYS};
use prevmatch::metrics::{history_to_csv, parse_history_csv};
use prevmatch::trainer::{fit, make_run_splits, Trainer};
use prevmatch::Error;

#[test]
fn empty_config_is_default() {
    assert_eq!(parse_config("").unwrap(), TrainConfig::default());
    assert_eq!(parse_config("# only a comment\n\n").unwrap(), TrainConfig::default());
}

#[test]
fn config_values_and_errors() {
    assert_eq!(parse_config("K = 3").unwrap().max_k, 3);
    match parse_config("seed = 2\nK = banana") {
        Err(Error::Config { line, key, .. }) => assert_eq!((line, key.as_str()), (2, "K")),
        other => panic!("expected a config error, got {other:?}"),
    }
    match parse_config("colour = red") {
        Err(Error::Config { key, .. }) => assert_eq!(key, "colour"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(parse_config("tau_prev = 1.5").is_err());
    assert!(parse_config("simple_ensemble = true\nrandom_selection = true").is_err());
}

#[test]
fn echo_lists_every_key_and_round_trips() {
    let cfg = parse_config("seed = 9\nN = 5\nsave_criterion = interval:2\nlambda_mode = linear_decay").unwrap();
    let echo = cfg.echo();
    for key in KEYS {
        assert!(echo.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key}");
    }
    assert_eq!(parse_config(&echo).unwrap(), cfg);
}

#[test]
fn labels_follow_toggles() {
    assert_eq!(parse_config(BASELINE).unwrap().label(), "baseline");
    assert_eq!(TrainConfig::default().label(), "prevmatch");
}

#[test]
fn runs_are_deterministic() {
    let cfg = micro("epochs = 4");
    let a = fit(&cfg, &make_run_splits(&cfg).unwrap()).unwrap();
    let b = fit(&cfg, &make_run_splits(&cfg).unwrap()).unwrap();
    assert_eq!(history_to_csv(&a.history, 5), history_to_csv(&b.history, 5));
    assert_eq!(a.model, b.model);
}

#[test]
fn checkpoint_round_trips_bytes() {
    let cfg = micro("epochs = 3");
    let splits = make_run_splits(&cfg).unwrap();
    let mut t = Trainer::new(&cfg, &splits).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let bytes = checkpoint::encode(&cfg, t.state());
    let back = checkpoint::decode(&bytes).unwrap();
    assert_eq!(&back.state, t.state());
    assert_eq!(back.config, cfg);
    assert_eq!(checkpoint::encode(&back.config, &back.state), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(checkpoint::decode(&flipped).map(|c| c.state != back.state).unwrap_or(true));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = micro("epochs = 6\nN = 2");
    let splits = make_run_splits(&cfg).unwrap();
    let full = fit(&cfg, &splits).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.pvmt");
    let mut t = Trainer::new(&cfg, &splits).unwrap();
    for _ in 0..3 {
        t.run_epoch().unwrap();
    }
    checkpoint::save(&path, &cfg, t.state()).unwrap();
    drop(t);
    let ck = checkpoint::load(&path).unwrap();
    let mut t = Trainer::resume(&ck.config, &splits, ck.state).unwrap();
    while !t.is_done() {
        t.run_epoch().unwrap();
    }
    let resumed = t.finish().unwrap();
    assert_eq!(history_to_csv(&resumed.history, 5), history_to_csv(&full.history, 5));
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.summary, full.summary);
}

#[test]
fn preset_grids_have_expected_rows() {
    for (name, rows) in [("components", 5), ("n", 6), ("k", 5), ("save", 4), ("lambda", 4)] {
        let cells = GridSpec::preset(name).unwrap().cells();
        assert_eq!(cells.len(), rows, "{name}");
        for c in &cells {
            let mut cfg = TrainConfig::default();
            for (k, v) in &c.overrides {
                cfg.set(k, v).unwrap();
            }
            cfg.validate().unwrap();
        }
    }
    assert!(GridSpec::preset("nope").is_err());
    let components: Vec<String> = GridSpec::preset("components")
        .unwrap()
        .cells()
        .iter()
        .map(|c| {
            let mut cfg = TrainConfig::default();
            for (k, v) in &c.overrides {
                cfg.set(k, v).unwrap();
            }
            cfg.label().to_string()
        })
        .collect();
    assert_eq!(
        components,
        ["baseline", "pg", "pg+simple_ensemble", "pg+random_selection", "prevmatch"]
    );
}

#[test]
fn grid_parsing_and_cross_product() {
    let g = GridSpec::parse("# axes\nN = 1, 2\nseeds = 3, 4\n[cell a]\nK = 1\n[cell b]\nK = 2\n").unwrap();
    assert_eq!(g.seeds, [3, 4]);
    assert_eq!(g.cells().len(), 4);
    assert!(GridSpec::parse("N = one").is_err());
    assert!(GridSpec::parse("nope = 1").is_err());
    assert_eq!(GridSpec::parse("").unwrap().cells().len(), 1);
}

#[test]
fn empty_grid_runs_base_once() {
    let base = micro("epochs = 2");
    let dir = tempfile::tempdir().unwrap();
    let results = run_ablation(&base, &GridSpec::default(), Some(dir.path())).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].runs.len(), 1);
    let direct = fit(&base, &make_run_splits(&base).unwrap()).unwrap();
    assert_eq!(results[0].runs[0].as_ref().unwrap(), &direct.summary);
    let table = comparison_table(&results);
    assert_eq!(table.lines().next(), Some(TABLE_HEADER));
    assert_eq!(table.lines().count(), 2);
    assert!(dir.path().join("comparison.csv").exists());
}

#[test]
fn failing_cell_does_not_stop_grid() {
    let base = micro("epochs = 2");
    let g = GridSpec::parse("base_lr = 0.01, 1e300\nmomentum = 0\n").unwrap();
    let results = run_ablation(&base, &g, None).unwrap();
    assert_eq!(results.len(), 2);
    assert!(results[0].runs[0].is_ok());
    assert!(results[1].runs[0].is_err());
    assert!(comparison_table(&results).lines().nth(2).unwrap().contains("failed"));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prevmatch"))
}

#[test]
fn cli_train_resume_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.conf");
    std::fs::write(&cfg_path, format!("{MICRO}\nepochs = 4\n")).unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = cfg_path.to_str().unwrap();

    let stdout = run(&["train", "--config", cfg, "--out", &p("full"), "--seed", "5"]);
    assert!(stdout.contains("seed = 5") && stdout.contains("test_miou="));
    run(&["train", "--config", cfg, "--out", &p("half"), "--seed=5", "--stop-after-epoch", "2"]);
    run(&["train", "--resume", &p("half/checkpoint.pvmt"), "--out", &p("rest")]);
    let full = std::fs::read_to_string(p("full/metrics.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(p("rest/metrics.csv")).unwrap(), full);
    assert_eq!(parse_history_csv(&full).unwrap().1.len(), 4);
    assert_eq!(
        std::fs::read(p("rest/checkpoint.pvmt")).unwrap(),
        std::fs::read(p("full/checkpoint.pvmt")).unwrap()
    );

    let eval = run(&["eval", "--checkpoint", &p("full/checkpoint.pvmt")]);
    assert!(eval.contains("shifted_test: mIoU="));
    run(&["export-curves", "--csv", &p("full/metrics.csv"), "--classes", "0,4", "--out", &p("curves")]);
    let curve = std::fs::read_to_string(p("curves/class_4.txt")).unwrap();
    assert_eq!(curve.lines().count(), 5);

    let data = run(&["gen-data", "--config", cfg, "--out", &p("data")]);
    assert_eq!(data.lines().count(), 5);
}

#[test]
fn cli_rejects_bad_input() {
    let out = bin().args(["train", "--out", "/nonexistent/x", "--K", "banana"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`K`"));
    let out = bin().args(["train", "--out", "x", "--no-such-key", "1"]).output().unwrap();
    assert!(!out.status.success());
}
