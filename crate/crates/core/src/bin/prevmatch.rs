use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{error, info, LevelFilter};

use prevmatch::ablation::{comparison_table, run_ablation, GridSpec};
use prevmatch::checkpoint;
use prevmatch::config::{apply_config, TrainConfig, KEYS};
use prevmatch::curves::export_curves;
use prevmatch::data::{write_split, SplitKind};
use prevmatch::metrics::{evaluate, history_to_csv, iou_scores};
use prevmatch::trainer::{make_run_splits, TrainState, Trainer};
use prevmatch::Error;

/// Semi-supervised segmentation with previous-model guidance.
///
/// Any config key can also be given as `--<key> <value>`; these override the
/// config file.
#[derive(Parser)]
#[command(name = "prevmatch", version)]
struct Cli {
    /// Log progress per epoch.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits and dump them, one file per split.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run; writes metrics.csv, checkpoint.pvmt and summary.txt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Save a checkpoint and stop once this many epochs are done.
        #[arg(long)]
        stop_after_epoch: Option<u32>,
    },
    /// Evaluate a checkpoint on validation, test and shifted test.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid over shared seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "preset")]
        grid: Option<PathBuf>,
        /// Built-in grid: components, n, k, save or lambda.
        #[arg(long)]
        preset: Option<String>,
        /// Comma separated; replaces the grid's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-class curve files from a metrics CSV.
    ExportCurves {
        #[arg(long)]
        csv: PathBuf,
        /// Comma separated class ids; all classes when omitted.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Pulls `--<config key> <value>` pairs out of the argument list.
fn split_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").map(|k| k.split_once('=').map_or(k, |(k, _)| k));
        match key {
            Some(k) if KEYS.contains(&k) => {
                let value = match arg.split_once('=') {
                    Some((_, v)) => v.to_string(),
                    None => it.next().with_context(|| format!("--{k} needs a value"))?,
                };
                overrides.push((k.to_string(), value));
            }
            _ => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<TrainConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = apply_config(TrainConfig::default(), &text)?;
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|m| Error::Config {
            line: 0,
            key: k.clone(),
            message: m,
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(
    cfg: TrainConfig,
    state: Option<TrainState>,
    out: &Path,
    stop_after: Option<u32>,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    print!("{}", cfg.echo());
    write(&out.join("config.txt"), &cfg.echo())?;
    let splits = make_run_splits(&cfg)?;
    let mut trainer = match state {
        Some(s) => Trainer::resume(&cfg, &splits, s)?,
        None => Trainer::new(&cfg, &splits)?,
    };
    let csv_path = out.join("metrics.csv");
    while !trainer.is_done() && stop_after.is_none_or(|e| trainer.state().epochs_done < e) {
        if let Err(e) = trainer.run_epoch() {
            write(&csv_path, &history_to_csv(&trainer.state().history, cfg.classes))?;
            return Err(e.into());
        }
        let r = trainer.state().history.last().expect("epoch ran");
        info!("epoch {} val mIoU {:.4} lambda {:.3}", r.epoch, r.miou_val, r.lambda);
    }
    write(&csv_path, &history_to_csv(&trainer.state().history, cfg.classes))?;
    checkpoint::save(&out.join("checkpoint.pvmt"), &cfg, trainer.state())?;
    if !trainer.is_done() {
        println!("stopped after epoch {}", trainer.state().epochs_done);
        return Ok(());
    }
    let summary = trainer.summary()?;
    let mut text = format!("{summary}\n");
    for (c, s) in summary.stability.iter().enumerate() {
        if let Some(s) = s {
            text.push_str(&format!("class {c}: val_iou_std={:.6} max_drop={:.6}\n", s.std, s.max_drop));
        }
    }
    write(&out.join("summary.txt"), &text)?;
    println!("{summary}");
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            fs::create_dir_all(&out)?;
            let splits = make_run_splits(&cfg)?;
            for kind in SplitKind::ALL {
                let path = out.join(format!("{}.pvmd", kind.name()));
                write_split(&path, kind, cfg.seed, &kind.scenes(&splits))?;
                println!("{}", path.display());
            }
            write(&out.join("config.txt"), &cfg.echo())
        }
        Command::Train {
            config,
            out,
            resume,
            stop_after_epoch,
        } => match resume {
            Some(path) => {
                if !overrides.is_empty() {
                    bail!("config overrides cannot be combined with --resume");
                }
                let ck = checkpoint::load(&path)?;
                train(ck.config, Some(ck.state), &out, stop_after_epoch)
            }
            None => train(load_config(config.as_deref(), &overrides)?, None, &out, stop_after_epoch),
        },
        Command::Eval { checkpoint: path } => {
            let ck = checkpoint::load(&path)?;
            let splits = make_run_splits(&ck.config)?;
            for (name, scenes) in [("val", &splits.val), ("test", &splits.test), ("shifted_test", &splits.shifted_test)] {
                let s = iou_scores(&evaluate(&ck.state.model, scenes)?)?;
                let per: Vec<String> = s
                    .per_class
                    .iter()
                    .map(|v| v.map_or("NA".into(), |x| format!("{x:.4}")))
                    .collect();
                println!("{name}: mIoU={:.4} per_class=[{}]", s.miou, per.join(", "));
            }
            Ok(())
        }
        Command::Ablate {
            config,
            grid,
            preset,
            seeds,
            out,
        } => {
            let base = load_config(config.as_deref(), &overrides)?;
            let mut spec = match (grid, preset) {
                (Some(p), None) => GridSpec::parse(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                (None, Some(name)) => GridSpec::preset(&name)?,
                (None, None) => GridSpec::default(),
                (Some(_), Some(_)) => unreachable!("clap rejects both"),
            };
            if !seeds.is_empty() {
                spec.seeds = seeds;
            }
            let results = run_ablation(&base, &spec, Some(&out))?;
            print!("{}", comparison_table(&results));
            Ok(())
        }
        Command::ExportCurves { csv, classes, out } => {
            for p in export_curves(&csv, &classes, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .init();
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
