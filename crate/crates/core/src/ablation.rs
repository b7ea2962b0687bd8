//! Ablation grids: named cells and/or axes of config overrides, each run
//! over a shared list of seeds.
//!
//! Grid files use the config syntax. A line `key = v1, v2, ...` outside any
//! block is an axis; `seeds = ...` sets the seeds; `[cell name]` opens a
//! block of overrides for one named cell. Cells are crossed with the axes.
//! A grid with neither runs the base config once.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::history_to_csv;
use crate::trainer::{fit, make_run_splits, RunSummary};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<(String, Vec<String>)>,
    pub cells: Vec<(String, Vec<(String, String)>)>,
    /// Empty means the base config's seed.
    pub seeds: Vec<u64>,
}

/// One configuration of the cross product.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub overrides: Vec<(String, String)>,
}

fn split_values(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = GridSpec::default();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(h, _)| h).trim();
            if line.is_empty() {
                continue;
            }
            let err = |key: &str, message: &str| Error::Config {
                line: i + 1,
                key: key.to_string(),
                message: message.to_string(),
            };
            if let Some(name) = line.strip_prefix("[cell").and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() || name.contains(['/', '\\']) {
                    return Err(err(line, "cell needs a plain name"));
                }
                grid.cells.push((name.to_string(), Vec::new()));
                current = Some(grid.cells.len() - 1);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let mut probe = TrainConfig::default();
            match current {
                Some(c) => {
                    probe.set(key, value).map_err(|m| err(key, &m))?;
                    grid.cells[c].1.push((key.to_string(), value.to_string()));
                }
                None if key == "seeds" => {
                    grid.seeds = split_values(value)
                        .iter()
                        .map(|s| s.parse().map_err(|_| err(key, &format!("`{s}` is not a seed"))))
                        .collect::<Result<_>>()?;
                }
                None => {
                    let values = split_values(value);
                    if values.is_empty() {
                        return Err(err(key, "axis needs at least one value"));
                    }
                    for v in &values {
                        probe.set(key, v).map_err(|m| err(key, &m))?;
                    }
                    grid.axes.push((key.to_string(), values));
                }
            }
        }
        Ok(grid)
    }

    /// Expands to cells, named cells outermost, then axes in file order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = if self.cells.is_empty() {
            vec![Cell {
                id: String::new(),
                overrides: Vec::new(),
            }]
        } else {
            self.cells
                .iter()
                .map(|(name, ov)| Cell {
                    id: name.clone(),
                    overrides: ov.clone(),
                })
                .collect()
        };
        for (key, values) in &self.axes {
            out = out
                .iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut overrides = c.overrides.clone();
                        overrides.push((key.clone(), v.clone()));
                        let part = format!("{key}={v}");
                        Cell {
                            id: if c.id.is_empty() { part } else { format!("{}_{part}", c.id) },
                            overrides,
                        }
                    })
                })
                .collect();
        }
        for c in &mut out {
            if c.id.is_empty() {
                c.id = "base".into();
            }
            c.id = c.id.replace([':', ' '], "_");
        }
        out
    }

    /// Built-in grids: `components`, `n`, `k`, `save`, `lambda`.
    pub fn preset(name: &str) -> Result<Self> {
        let cells = |rows: &[(&str, &[(&str, &str)])]| -> Vec<(String, Vec<(String, String)>)> {
            rows.iter()
                .map(|(n, ov)| {
                    (n.to_string(), ov.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
                })
                .collect()
        };
        let axis = |key: &str, values: &[&str]| GridSpec {
            axes: vec![(key.to_string(), values.iter().map(|s| s.to_string()).collect())],
            ..GridSpec::default()
        };
        let off = [
            ("simple_ensemble", "false"),
            ("random_selection", "false"),
            ("random_weights", "false"),
        ];
        Ok(match name {
            "components" => GridSpec {
                cells: cells(&[
                    ("baseline", &[("previous_guidance", "false"), off[0], off[1], off[2]]),
                    ("pg", &[("previous_guidance", "true"), off[0], off[1], off[2]]),
                    ("pg+simple_ensemble", &[("previous_guidance", "true"), ("simple_ensemble", "true"), off[1], off[2]]),
                    ("pg+random_selection", &[("previous_guidance", "true"), off[0], ("random_selection", "true"), off[2]]),
                    ("pg+random_selection+random_weights", &[("previous_guidance", "true"), off[0], ("random_selection", "true"), ("random_weights", "true")]),
                ]),
                ..GridSpec::default()
            },
            "n" => axis("N", &["1", "2", "4", "8", "12", "20"]),
            "k" => axis("K", &["1", "2", "3", "4", "5"]),
            "save" => GridSpec {
                cells: cells(&[
                    ("baseline", &[("previous_guidance", "false"), off[0], off[1], off[2]]),
                    ("interval_1", &[("save_criterion", "interval:1")]),
                    ("interval_3", &[("save_criterion", "interval:3")]),
                    ("best", &[("save_criterion", "best")]),
                ]),
                ..GridSpec::default()
            },
            "lambda" => axis("lambda_mode", &["fixed", "linear_decay", "linear_increase", "warmup_decay"]),
            _ => return Err(Error::invalid(format!("unknown preset `{name}` (components, n, k, save, lambda)"))),
        })
    }
}

/// Outcome of one cell over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub label: String,
    pub seeds: Vec<u64>,
    /// One entry per seed; `Err` holds the failure message.
    pub runs: Vec<std::result::Result<RunSummary, String>>,
}

impl CellResult {
    fn values(&self, f: impl Fn(&RunSummary) -> f64) -> Vec<Option<f64>> {
        self.runs.iter().map(|r| r.as_ref().ok().map(&f)).collect()
    }

    pub fn test_miou(&self) -> Vec<Option<f64>> {
        self.values(|s| s.test_miou)
    }

    /// Mean over successful seeds.
    pub fn mean(values: &[Option<f64>]) -> Option<f64> {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

pub const TABLE_HEADER: &str = "cell,label,status,mean_test_miou,mean_shifted_miou,mean_gap,mean_rare_iou_std,per_seed_test_miou";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

/// Tidy comparison table, one row per cell. Per-seed values are separated
/// by `;` in seed order.
pub fn comparison_table(results: &[CellResult]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in results {
        let failures: Vec<&String> = r.runs.iter().filter_map(|x| x.as_ref().err()).collect();
        let status = if failures.is_empty() {
            "ok".to_string()
        } else {
            format!("failed({})", failures.len())
        };
        let per_seed: Vec<String> = r
            .seeds
            .iter()
            .zip(r.test_miou())
            .map(|(s, v)| format!("{s}:{}", opt(v)))
            .collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.cell.id,
            r.label,
            status,
            opt(CellResult::mean(&r.test_miou())),
            opt(CellResult::mean(&r.values(|s| s.shifted_miou))),
            opt(CellResult::mean(&r.values(|s| s.delta))),
            opt(CellResult::mean(
                &r.runs
                    .iter()
                    .map(|x| x.as_ref().ok().and_then(|s| s.rare_stability()).map(|s| s.std))
                    .collect::<Vec<_>>()
            )),
            per_seed.join(";")
        )
        .expect("write to string");
    }
    out
}

/// Runs every cell for every seed. With `out_dir`, each run's metrics CSV
/// goes to `<out_dir>/<cell>/seed_<s>.csv` and the table to
/// `<out_dir>/comparison.csv`. A failing run is recorded and the grid
/// continues.
pub fn run_ablation(base: &TrainConfig, grid: &GridSpec, out_dir: Option<&Path>) -> Result<Vec<CellResult>> {
    let seeds = if grid.seeds.is_empty() { vec![base.seed] } else { grid.seeds.clone() };
    let mut results = Vec::new();
    for cell in grid.cells() {
        let mut label = String::from("invalid");
        let mut runs = Vec::new();
        for &seed in &seeds {
            let mut run = || -> Result<RunSummary> {
                let mut cfg = base.clone();
                for (k, v) in &cell.overrides {
                    cfg.set(k, v).map_err(Error::invalid)?;
                }
                cfg.seed = seed;
                cfg.validate()?;
                label = cfg.label().to_string();
                let splits = make_run_splits(&cfg)?;
                let out = fit(&cfg, &splits)?;
                if let Some(dir) = out_dir {
                    let dir = dir.join(&cell.id);
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let path = dir.join(format!("seed_{seed}.csv"));
                    std::fs::write(&path, history_to_csv(&out.history, cfg.classes)).map_err(|e| Error::io(&path, e))?;
                }
                Ok(out.summary)
            };
            let outcome = run();
            match &outcome {
                Ok(s) => info!("cell {} seed {seed}: {s}", cell.id),
                Err(e) => warn!("cell {} seed {seed} failed: {e}", cell.id),
            }
            runs.push(outcome.map_err(|e| e.to_string()));
        }
        results.push(CellResult {
            cell,
            label,
            seeds: seeds.clone(),
            runs,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("comparison.csv");
        std::fs::write(&path, comparison_table(&results)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(results)
}
