//! Loss composition, the λ schedule and the epoch loop.
//!
//! Every random draw comes from a substream of the run seed: `("init", 0)`
//! for the model, `("unlabeled", epoch)` and `("labeled", cycle)` for batch
//! order, `("step", step)` for augmentation and `("guidance", step)` for
//! teacher selection and weights. Skipping previous guidance therefore leaves
//! every other draw untouched.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::config::TrainConfig;
use crate::data::{strong_augment, weak_augment, CutMixBox, DatasetSplits, Scene};
use crate::error::{Error, Result};
use crate::kernels::argmax_channels;
use crate::metrics::{
    evaluate, generalization_delta, iou_scores, pseudo_label_accuracy, stability_stats, MetricsRecord,
    Stability,
};
use crate::model::SegModel;
use crate::optim::{poly_lr, sgd_step, OptimizerState};
use crate::registry::{plan_guidance, teacher_probs, GuidanceBatch, PrevRegistry, Snapshot};
use crate::rng::Rng;
use crate::tensor::{LabelMap, PixelMask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    WarmupDecay,
    Fixed,
    LinearDecay,
    LinearIncrease,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMode::WarmupDecay => "warmup_decay",
            LambdaMode::Fixed => "fixed",
            LambdaMode::LinearDecay => "linear_decay",
            LambdaMode::LinearIncrease => "linear_increase",
        })
    }
}

impl FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "warmup_decay" => Ok(LambdaMode::WarmupDecay),
            "fixed" => Ok(LambdaMode::Fixed),
            "linear_decay" => Ok(LambdaMode::LinearDecay),
            "linear_increase" => Ok(LambdaMode::LinearIncrease),
            _ => Err(format!(
                "unknown lambda mode `{s}` (warmup_decay, fixed, linear_decay, linear_increase)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub mode: LambdaMode,
    pub lambda_max: f64,
    /// Peak position of `warmup_decay` as a fraction of the run.
    pub warmup_frac: f64,
}

impl LambdaSchedule {
    /// Weight at `epoch` (0-based) of a run of `total` epochs.
    pub fn lambda_at(&self, epoch: u32, total: u32) -> f64 {
        if total == 0 {
            return if self.mode == LambdaMode::Fixed { self.lambda_max } else { 0.0 };
        }
        let (e, t) = (f64::from(epoch.min(total)), f64::from(total));
        match self.mode {
            LambdaMode::Fixed => self.lambda_max,
            LambdaMode::LinearDecay => self.lambda_max * (t - e) / t,
            LambdaMode::LinearIncrease => self.lambda_max * e / t,
            LambdaMode::WarmupDecay => {
                let peak = self.warmup_frac * t;
                if e <= peak {
                    self.lambda_max * e / peak
                } else {
                    self.lambda_max * (t - e) / (t - peak)
                }
            }
        }
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_u_std: f64,
    pub l_u_prev: f64,
    pub lambda: f64,
    /// `0.5 · (l_s + l_u_std + lambda · l_u_prev)`.
    pub total: f64,
    /// Masked-in pixel fraction of each unsupervised term.
    pub mask_std: f64,
    pub mask_prev: f64,
    /// Teachers used this step; 0 when guidance was skipped.
    pub k_used: usize,
}

impl LossBreakdown {
    pub fn recompose(&self) -> f64 {
        0.5 * (self.l_s + self.l_u_std + self.lambda * self.l_u_prev)
    }
}

/// Replaces the CutMix region of sample `i` with the partner's
/// probabilities, so pseudo-labels follow the mixed image.
pub fn mix_probs(probs: &Tensor, mixes: &[Option<CutMixBox>]) -> Result<Tensor> {
    let [b, c, h, w] = probs.dims4("mix_probs")?;
    if mixes.len() != b {
        return Err(Error::Dimension {
            op: "mix_probs",
            axis: "batch",
            expected: b,
            got: mixes.len(),
        });
    }
    let plane = h * w;
    let mut out = probs.clone();
    for (i, mix) in mixes.iter().enumerate() {
        let Some(m) = mix else { continue };
        if m.partner >= b {
            return Err(Error::invalid(format!("cutmix partner {} outside batch of {b}", m.partner)));
        }
        for (p, inside) in m.mask(h, w).into_iter().enumerate() {
            if inside {
                for ch in 0..c {
                    out.data_mut()[(i * c + ch) * plane + p] = probs.data()[(m.partner * c + ch) * plane + p];
                }
            }
        }
    }
    Ok(out)
}

/// Argmax labels and the `max prob >= tau` mask.
pub fn pseudo_targets(probs: &Tensor, tau: f64) -> Result<(LabelMap, PixelMask)> {
    let (labels, conf) = argmax_channels(probs)?;
    let [b, h, w] = labels.dims();
    let mask = PixelMask::new(b, h, w, conf.iter().map(|&c| c >= tau).collect())?;
    Ok((labels, mask))
}

/// Cross-entropy over every pixel of a labeled batch.
pub fn supervised_loss(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let [b, h, w] = labels.dims();
    let full = PixelMask::filled(b, h, w, true);
    Ok(tape.masked_cross_entropy(logits, labels, &full)?.0)
}

/// Weak-to-strong term. `probs_w` is a plain tensor, so no gradient can
/// reach the weak branch. Returns the loss and its masked-in fraction.
pub fn standard_unsup_loss(tape: &mut Tape, probs_w: &Tensor, logits_s: Var, tau: f64) -> Result<(Var, f64)> {
    if probs_w.shape() != tape.value(logits_s).shape() {
        return Err(Error::invalid(format!(
            "weak probabilities {:?} and strong logits {:?} are not aligned",
            probs_w.shape(),
            tape.value(logits_s).shape()
        )));
    }
    let (labels, mask) = pseudo_targets(probs_w, tau)?;
    let (loss, _) = tape.masked_cross_entropy(logits_s, &labels, &mask)?;
    Ok((loss, mask.fraction()))
}

/// Previous-guidance term against the ensembled pseudo-labels.
pub fn prev_unsup_loss(tape: &mut Tape, guidance: &GuidanceBatch, logits_s: Var) -> Result<(Var, f64)> {
    let (loss, _) = tape.masked_cross_entropy(logits_s, &guidance.pseudo_labels, &guidance.mask)?;
    Ok((loss, guidance.mask.fraction()))
}

/// Inputs of one optimisation step.
pub struct StepBatch {
    pub x_l: Tensor,
    pub y_l: LabelMap,
    /// Weak unlabeled views.
    pub x_w: Tensor,
    /// Strong views built from `x_w`.
    pub x_s: Tensor,
    pub mixes: Vec<Option<CutMixBox>>,
}

/// Index of the `j`-th labeled draw: the labeled split is walked in a fresh
/// permutation per pass.
fn labeled_index(seed: u64, n: usize, j: u64) -> usize {
    let cycle = j / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::substream(seed, "labeled", cycle));
    order[(j % n as u64) as usize]
}

fn unlabeled_order(seed: u64, n: usize, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::substream(seed, "unlabeled", u64::from(epoch)));
    order
}

/// Assembles the batch for `step` (global, 0-based) inside `epoch`
/// (1-based), given that epoch's unlabeled order.
pub fn build_batch(
    cfg: &TrainConfig,
    splits: &DatasetSplits,
    order: &[usize],
    step_in_epoch: usize,
    step: u64,
) -> Result<StepBatch> {
    let aug = cfg.aug();
    let mut rng = Rng::substream(cfg.seed, "step", step);
    let nl = splits.labeled.len();
    let mut xs = Vec::with_capacity(cfg.batch_labeled);
    let mut ys = Vec::with_capacity(cfg.batch_labeled);
    for i in 0..cfg.batch_labeled {
        let scene: &Scene = &splits.labeled[labeled_index(cfg.seed, nl, step * cfg.batch_labeled as u64 + i as u64)];
        let v = weak_augment(&mut rng, &scene.image, Some(&scene.labels), &aug)?;
        xs.push(v.image);
        ys.push(v.labels.expect("labels given"));
    }
    let images = splits.unlabeled.images();
    let weak: Vec<Tensor> = (0..cfg.batch_unlabeled)
        .map(|i| {
            let idx = order[(step_in_epoch * cfg.batch_unlabeled + i) % order.len()];
            weak_augment(&mut rng, &images[idx], None, &aug).map(|v| v.image)
        })
        .collect::<Result<_>>()?;
    let b = weak.len();
    let mut strong = Vec::with_capacity(b);
    let mut mixes = Vec::with_capacity(b);
    for i in 0..b {
        let partner = (i + 1) % b;
        let s = strong_augment(&mut rng, &weak[i], &weak[partner], partner, b > 1, &aug)?;
        strong.push(s.image);
        mixes.push(s.cutmix);
    }
    let refs = |v: &[Tensor]| -> Result<Tensor> { Tensor::stack(&v.iter().collect::<Vec<_>>()) };
    Ok(StepBatch {
        x_l: refs(&xs)?,
        y_l: LabelMap::concat(&ys.iter().collect::<Vec<_>>())?,
        x_w: refs(&weak)?,
        x_s: refs(&strong)?,
        mixes,
    })
}

/// One optimisation step. Previous guidance runs only when it is enabled,
/// `lambda > 0` and the registry holds a snapshot; otherwise the step is the
/// plain weak-to-strong step and `l_u_prev` is reported as 0.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    registry: &PrevRegistry,
    cfg: &TrainConfig,
    batch: &StepBatch,
    lambda: f64,
    lr: f64,
    step: u64,
) -> Result<LossBreakdown> {
    let probs_w = mix_probs(&model.predict_probs(&batch.x_w)?, &batch.mixes)?;

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xl = tape.constant(batch.x_l.clone());
    let logits_l = model.forward(&mut tape, &bound, xl)?;
    let l_s = supervised_loss(&mut tape, logits_l, &batch.y_l)?;
    let xs = tape.constant(batch.x_s.clone());
    let logits_s = model.forward(&mut tape, &bound, xs)?;
    let (l_std, mask_std) = standard_unsup_loss(&mut tape, &probs_w, logits_s, cfg.tau_standard)?;

    let mut sum = tape.add(l_s, l_std)?;
    let mut out = LossBreakdown {
        lambda,
        mask_std,
        ..LossBreakdown::default()
    };
    if let Some(gcfg) = cfg.guidance().filter(|_| lambda > 0.0 && !registry.is_empty()) {
        let mut grng = Rng::substream(cfg.seed, "guidance", step);
        let plan = plan_guidance(&mut grng, registry.len(), &gcfg)?;
        let teachers: Vec<&Snapshot> = plan.indices.iter().map(|&i| registry.get(i).expect("planned index")).collect();
        let probs = mix_probs(&teacher_probs(&teachers, &batch.x_w, &plan.weights)?, &batch.mixes)?;
        let guidance = GuidanceBatch::from_probs(probs, gcfg.tau, plan.weights)?;
        let (l_prev, mask_prev) = prev_unsup_loss(&mut tape, &guidance, logits_s)?;
        out.l_u_prev = tape.value(l_prev).item();
        out.mask_prev = mask_prev;
        out.k_used = guidance.k_used;
        let weighted = tape.scale(l_prev, lambda);
        sum = tape.add(sum, weighted)?;
    }
    let total = tape.scale(sum, 0.5);

    out.l_s = tape.value(l_s).item();
    out.l_u_std = tape.value(l_std).item();
    out.total = tape.value(total).item();
    if !out.total.is_finite() {
        return Err(Error::NonFinite {
            what: format!("total loss {:?}", out),
        });
    }
    tape.backward(total)?;
    let grads = bound.grads(&tape);
    sgd_step(model, &grads, opt, lr)?;
    Ok(out)
}

/// Everything needed to continue a run after `epochs_done` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SegModel,
    pub optimizer: OptimizerState,
    pub registry: PrevRegistry,
    pub epochs_done: u32,
    pub history: Vec<MetricsRecord>,
}

impl TrainState {
    pub fn initial(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::init(&cfg.arch(), &mut Rng::substream(cfg.seed, "init", 0))?;
        Ok(TrainState {
            optimizer: OptimizerState::new(&model, cfg.base_lr, cfg.momentum, cfg.poly_power)?,
            registry: PrevRegistry::new(cfg.registry_size)?,
            model,
            epochs_done: 0,
            history: Vec::new(),
        })
    }
}

/// Final evaluation of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub epochs: u32,
    pub test_miou: f64,
    pub shifted_miou: f64,
    /// `test_miou - shifted_miou`.
    pub delta: f64,
    /// Validation-IoU stability per class over the tail window.
    pub stability: Vec<Option<Stability>>,
    pub rare_class: Option<usize>,
}

impl RunSummary {
    pub fn rare_stability(&self) -> Option<Stability> {
        self.rare_class.and_then(|c| self.stability.get(c).copied().flatten())
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: epochs={} test_miou={:.4} shifted_miou={:.4} gap={:.4}",
            self.label, self.epochs, self.test_miou, self.shifted_miou, self.delta
        )?;
        if let Some(s) = self.rare_stability() {
            write!(f, " rare_iou_std={:.4} rare_iou_max_drop={:.4}", s.std, s.max_drop)?;
        }
        Ok(())
    }
}

/// Result of [`fit`].
pub struct FitOutput {
    pub model: SegModel,
    pub history: Vec<MetricsRecord>,
    pub registry: PrevRegistry,
    pub summary: RunSummary,
}

/// The epoch loop over borrowed data. Each call to [`Trainer::run_epoch`]
/// trains one epoch, validates, offers the model to the registry and
/// appends a history record.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    splits: &'a DatasetSplits,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, splits: &'a DatasetSplits) -> Result<Self> {
        Trainer::resume(cfg, splits, TrainState::initial(cfg)?)
    }

    pub fn resume(cfg: &TrainConfig, splits: &'a DatasetSplits, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if splits.labeled.len() != cfg.n_labeled || splits.unlabeled.len() != cfg.n_unlabeled {
            return Err(Error::invalid("splits do not match the configured counts"));
        }
        if state.model.arch() != &cfg.arch() || state.epochs_done > cfg.epochs {
            return Err(Error::invalid("training state does not belong to this config"));
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            splits,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_done >= self.cfg.epochs
    }

    pub fn run_epoch(&mut self) -> Result<&MetricsRecord> {
        if self.is_done() {
            return Err(Error::invalid("all epochs already ran"));
        }
        let cfg = &self.cfg;
        let epoch = self.state.epochs_done + 1;
        let steps = cfg.resolved_steps();
        let total_steps = u64::from(cfg.epochs) * steps as u64;
        // The weight actually applied: zero while guidance cannot run.
        let lambda = if cfg.previous_guidance && !self.state.registry.is_empty() {
            cfg.lambda.lambda_at(epoch - 1, cfg.epochs)
        } else {
            0.0
        };
        let order = unlabeled_order(cfg.seed, self.splits.unlabeled.len(), epoch);
        let mut acc = LossBreakdown::default();
        for t in 0..steps {
            let step = u64::from(epoch - 1) * steps as u64 + t as u64;
            let abort = |e: Error| Error::Aborted {
                epoch,
                step,
                reason: e.to_string(),
            };
            let batch = build_batch(cfg, self.splits, &order, t, step)?;
            let lr = poly_lr(cfg.base_lr, step, total_steps, cfg.poly_power);
            let st = &mut self.state;
            let loss = train_step(&mut st.model, &mut st.optimizer, &st.registry, cfg, &batch, lambda, lr, step)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => abort(e),
                    e => e,
                })?;
            acc.l_s += loss.l_s;
            acc.l_u_std += loss.l_u_std;
            acc.l_u_prev += loss.l_u_prev;
            acc.mask_std += loss.mask_std;
            acc.mask_prev += loss.mask_prev;
        }
        let n = steps as f64;
        let st = &mut self.state;
        let val = iou_scores(&evaluate(&st.model, &self.splits.val)?)?;
        let pacc = pseudo_label_accuracy(&st.model, self.splits, cfg.pseudo_eval_count, cfg.pseudo_eval_tau)?;
        let saved = st.registry.offer(cfg.save_criterion, &st.model, epoch, val.miou)?;
        debug!("epoch {epoch}: val mIoU {:.4}, saved {saved}", val.miou);
        st.history.push(MetricsRecord {
            epoch,
            l_s: acc.l_s / n,
            l_u_std: acc.l_u_std / n,
            l_u_prev: acc.l_u_prev / n,
            lambda,
            miou_val: val.miou,
            iou: val.per_class,
            pacc,
            mask_std: acc.mask_std / n,
            mask_prev: acc.mask_prev / n,
        });
        st.epochs_done = epoch;
        Ok(st.history.last().expect("just pushed"))
    }

    pub fn summary(&self) -> Result<RunSummary> {
        let g = generalization_delta(&self.state.model, &self.splits.test, &self.splits.shifted_test)?;
        let stability = if self.state.history.len() >= 2 {
            stability_stats(&self.state.history, self.cfg.stability_tail)?
        } else {
            Vec::new()
        };
        Ok(RunSummary {
            label: self.cfg.label().to_string(),
            epochs: self.state.epochs_done,
            test_miou: g.seen,
            shifted_miou: g.shifted,
            delta: g.delta,
            stability,
            rare_class: self.cfg.rare_class(),
        })
    }

    pub fn finish(self) -> Result<FitOutput> {
        let summary = self.summary()?;
        info!("{summary}");
        Ok(FitOutput {
            model: self.state.model,
            history: self.state.history,
            registry: self.state.registry,
            summary,
        })
    }
}

/// Runs every configured epoch.
pub fn fit(cfg: &TrainConfig, splits: &DatasetSplits) -> Result<FitOutput> {
    let mut trainer = Trainer::new(cfg, splits)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

/// Generates the configured splits.
pub fn make_run_splits(cfg: &TrainConfig) -> Result<DatasetSplits> {
    crate::data::make_splits(cfg.seed, cfg.split_counts(), &cfg.scene_spec())
}
