//! Run checkpoints: magic `PVMT`, a `u32` version, then tagged,
//! length-prefixed sections. Floats are stored as little-endian `f64` bits,
//! so a save, load, save cycle reproduces the file byte for byte.
//!
//! | tag | contents |
//! |---|---|
//! | `CONF` | config echo text |
//! | `PARM` | model parameters with shape headers |
//! | `OPTM` | optimizer settings and momentum buffers |
//! | `REGY` | registry policy state and snapshots |
//! | `RNGS` | seed and the state of the next step's substream |
//! | `CURS` | epochs done and the next global step |
//! | `HIST` | metrics history |

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::{parse_config, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::SegModel;
use crate::optim::OptimizerState;
use crate::registry::{PrevRegistry, Snapshot};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

const MAGIC: &[u8; 4] = b"PVMT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn write_params(w: &mut Writer, model: &SegModel) {
    let params = model.params();
    w.u64(params.len() as u64);
    for p in params {
        w.usizes(p.shape());
        w.f64s(p.data());
    }
}

fn read_params(r: &mut Reader<'_>, cfg: &TrainConfig) -> Result<SegModel> {
    let n = r.u64()?;
    let mut params = Vec::new();
    for _ in 0..n {
        params.push(Tensor::new(r.usizes()?, r.f64s()?)?);
    }
    SegModel::from_params(&cfg.arch(), params)
}

fn write_opt(w: &mut Writer, v: Option<f64>) {
    match v {
        Some(x) => {
            w.u8(1);
            w.f64(x);
        }
        None => w.u8(0),
    }
}

fn read_opt(r: &mut Reader<'_>) -> Result<Option<f64>> {
    match r.u8()? {
        0 => Ok(None),
        1 => r.f64().map(Some),
        t => Err(Error::Format(format!("bad option tag {t}"))),
    }
}

fn write_rng(w: &mut Writer, s: &RngState) {
    w.bytes(&s.key);
    w.u64(s.stream);
    w.u128(s.word_pos);
}

fn read_rng(r: &mut Reader<'_>) -> Result<RngState> {
    Ok(RngState {
        key: r.take(32)?.try_into().expect("32 bytes"),
        stream: r.u64()?,
        word_pos: r.u128()?,
    })
}

fn next_step(cfg: &TrainConfig, epochs_done: u32) -> u64 {
    u64::from(epochs_done) * cfg.resolved_steps() as u64
}

pub fn encode(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Writer::new();
    out.bytes(MAGIC);
    out.u32(VERSION);

    let mut w = Writer::new();
    w.str(&cfg.echo());
    out.section(b"CONF", w);

    let mut w = Writer::new();
    write_params(&mut w, &state.model);
    out.section(b"PARM", w);

    let mut w = Writer::new();
    let opt = &state.optimizer;
    w.f64(opt.base_lr);
    w.f64(opt.momentum);
    w.f64(opt.power);
    w.u64(opt.velocity().len() as u64);
    for v in opt.velocity() {
        w.f64s(v);
    }
    out.section(b"OPTM", w);

    let mut w = Writer::new();
    let reg = &state.registry;
    w.u64(reg.capacity() as u64);
    w.f64(reg.best_score());
    match reg.last_epoch() {
        Some(e) => {
            w.u8(1);
            w.u32(e);
        }
        None => w.u8(0),
    }
    w.u64(reg.len() as u64);
    for s in reg.snapshots() {
        w.u32(s.epoch());
        w.f64(s.val_score());
        w.u64(s.saved_checksum());
        write_params(&mut w, s.model());
    }
    out.section(b"REGY", w);

    let mut w = Writer::new();
    w.u64(cfg.seed);
    write_rng(&mut w, &Rng::substream(cfg.seed, "step", next_step(cfg, state.epochs_done)).state());
    out.section(b"RNGS", w);

    let mut w = Writer::new();
    w.u32(state.epochs_done);
    w.u64(next_step(cfg, state.epochs_done));
    out.section(b"CURS", w);

    let mut w = Writer::new();
    w.u64(state.history.len() as u64);
    for rec in &state.history {
        w.u32(rec.epoch);
        for v in [rec.l_s, rec.l_u_std, rec.l_u_prev, rec.lambda, rec.miou_val, rec.mask_std, rec.mask_prev] {
            w.f64(v);
        }
        w.u64(rec.iou.len() as u64);
        for &v in rec.iou.iter().chain(&rec.pacc) {
            write_opt(&mut w, v);
        }
    }
    out.section(b"HIST", w);
    out.finish()
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.expect_bytes(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }

    let mut s = r.section(b"CONF")?;
    let config = parse_config(&s.string()?)?;
    s.finish()?;

    let mut s = r.section(b"PARM")?;
    let model = read_params(&mut s, &config)?;
    s.finish()?;

    let mut s = r.section(b"OPTM")?;
    let (lr, momentum, power) = (s.f64()?, s.f64()?, s.f64()?);
    let n = s.u64()?;
    let velocity = (0..n).map(|_| s.f64s()).collect::<Result<Vec<_>>>()?;
    s.finish()?;
    let optimizer = OptimizerState::new(&model, lr, momentum, power)?.with_velocity(velocity)?;

    let mut s = r.section(b"REGY")?;
    let capacity = s.u64()? as usize;
    let best = s.f64()?;
    let last_epoch = match s.u8()? {
        0 => None,
        1 => Some(s.u32()?),
        t => return Err(Error::Format(format!("bad option tag {t}"))),
    };
    let count = s.u64()?;
    let mut snapshots = Vec::new();
    for _ in 0..count {
        let (epoch, score, checksum) = (s.u32()?, s.f64()?, s.u64()?);
        let snap = Snapshot::new(&read_params(&mut s, &config)?, epoch, score);
        if snap.saved_checksum() != checksum {
            return Err(Error::Format(format!("snapshot of epoch {epoch} fails its checksum")));
        }
        snapshots.push(snap);
    }
    s.finish()?;
    let registry = PrevRegistry::from_parts(capacity, best, last_epoch, snapshots)?;

    let mut s = r.section(b"RNGS")?;
    let seed = s.u64()?;
    let rng = read_rng(&mut s)?;
    s.finish()?;

    let mut s = r.section(b"CURS")?;
    let epochs_done = s.u32()?;
    let step = s.u64()?;
    s.finish()?;
    if seed != config.seed
        || step != next_step(&config, epochs_done)
        || rng != Rng::substream(seed, "step", step).state()
    {
        return Err(Error::Format("random-stream cursor does not match the config".into()));
    }

    let mut s = r.section(b"HIST")?;
    let n = s.u64()?;
    let mut history = Vec::new();
    for _ in 0..n {
        let epoch = s.u32()?;
        let v: Vec<f64> = (0..7).map(|_| s.f64()).collect::<Result<_>>()?;
        let classes = s.u64()? as usize;
        let iou = (0..classes).map(|_| read_opt(&mut s)).collect::<Result<_>>()?;
        let pacc = (0..classes).map(|_| read_opt(&mut s)).collect::<Result<_>>()?;
        history.push(MetricsRecord {
            epoch,
            l_s: v[0],
            l_u_std: v[1],
            l_u_prev: v[2],
            lambda: v[3],
            miou_val: v[4],
            mask_std: v[5],
            mask_prev: v[6],
            iou,
            pacc,
        });
    }
    s.finish()?;
    r.finish()?;

    Ok(Checkpoint {
        config,
        state: TrainState {
            model,
            optimizer,
            registry,
            epochs_done,
            history,
        },
    })
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(cfg, state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
