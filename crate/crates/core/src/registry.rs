//! Bounded list of previous models and the randomized ensemble that turns
//! them into extra pseudo-labels.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::kernels::argmax_channels;
use crate::model::SegModel;
use crate::rng::Rng;
use crate::tensor::{LabelMap, PixelMask, Tensor};

/// A frozen copy of the model taken at the end of `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    model: SegModel,
    epoch: u32,
    val_score: f64,
    checksum: u64,
}

impl Snapshot {
    pub fn new(model: &SegModel, epoch: u32, val_score: f64) -> Self {
        Snapshot {
            checksum: model.checksum(),
            model: model.clone(),
            epoch,
            val_score,
        }
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn val_score(&self) -> f64 {
        self.val_score
    }

    /// Parameter checksum recorded when the snapshot was taken.
    pub fn saved_checksum(&self) -> u64 {
        self.checksum
    }
}

/// When to add the current model to the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaveCriterion {
    /// On a strict improvement of the validation score.
    Best,
    /// Every `n` epochs regardless of score.
    Interval(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrevRegistry {
    snapshots: VecDeque<Snapshot>,
    capacity: usize,
    best: f64,
    last_epoch: Option<u32>,
}

impl PrevRegistry {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Registry("capacity must be at least 1".into()));
        }
        Ok(PrevRegistry {
            snapshots: VecDeque::with_capacity(capacity),
            capacity,
            best: f64::NEG_INFINITY,
            last_epoch: None,
        })
    }

    pub(crate) fn from_parts(
        capacity: usize,
        best: f64,
        last_epoch: Option<u32>,
        snapshots: Vec<Snapshot>,
    ) -> Result<Self> {
        let mut reg = PrevRegistry::new(capacity)?;
        if snapshots.len() > capacity || snapshots.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(Error::Registry("stored snapshots violate the list invariants".into()));
        }
        reg.snapshots = snapshots.into();
        reg.best = best;
        reg.last_epoch = last_epoch;
        Ok(reg)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Oldest first.
    pub fn snapshots(&self) -> impl ExactSizeIterator<Item = &Snapshot> {
        self.snapshots.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Snapshot> {
        self.snapshots.get(i)
    }

    /// Best validation score seen so far; `-inf` before the first offer.
    pub fn best_score(&self) -> f64 {
        self.best
    }

    pub(crate) fn last_epoch(&self) -> Option<u32> {
        self.last_epoch
    }

    fn check_epoch(&mut self, epoch: u32, val_score: f64) -> Result<()> {
        if let Some(last) = self.last_epoch {
            if epoch <= last {
                return Err(Error::Registry(format!("epoch {epoch} offered after epoch {last}")));
            }
        }
        if val_score.is_nan() {
            return Err(Error::Registry(format!("validation score at epoch {epoch} is NaN")));
        }
        self.last_epoch = Some(epoch);
        Ok(())
    }

    fn push(&mut self, model: &SegModel, epoch: u32, val_score: f64) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(Snapshot::new(model, epoch, val_score));
    }

    /// Saves iff `val_score` strictly beats every earlier score.
    pub fn maybe_save(&mut self, model: &SegModel, epoch: u32, val_score: f64) -> Result<bool> {
        self.check_epoch(epoch, val_score)?;
        if val_score > self.best {
            self.best = val_score;
            self.push(model, epoch, val_score);
            return Ok(true);
        }
        Ok(false)
    }

    /// Saves whenever `epoch` is a multiple of `interval`.
    pub fn save_on_interval(
        &mut self,
        model: &SegModel,
        epoch: u32,
        val_score: f64,
        interval: u32,
    ) -> Result<bool> {
        if interval == 0 {
            return Err(Error::Registry("save interval must be at least 1".into()));
        }
        self.check_epoch(epoch, val_score)?;
        self.best = self.best.max(val_score);
        if epoch.is_multiple_of(interval) {
            self.push(model, epoch, val_score);
            return Ok(true);
        }
        Ok(false)
    }

    pub fn offer(
        &mut self,
        criterion: SaveCriterion,
        model: &SegModel,
        epoch: u32,
        val_score: f64,
    ) -> Result<bool> {
        match criterion {
            SaveCriterion::Best => self.maybe_save(model, epoch, val_score),
            SaveCriterion::Interval(n) => self.save_on_interval(model, epoch, val_score, n),
        }
    }
}

/// Uniform draw from `1..=min(max_k, available)`.
pub fn sample_k(rng: &mut Rng, max_k: usize, available: usize) -> Result<usize> {
    if max_k == 0 || available == 0 {
        return Err(Error::invalid(format!(
            "sample_k needs K >= 1 and a non-empty registry (K={max_k}, available={available})"
        )));
    }
    Ok(rng.random_range(1..=max_k.min(available)))
}

/// Dirichlet(`alpha`) draw by normalising independent Gamma(α_i, 1) draws.
/// A single component returns `[1.0]` without consuming randomness.
pub fn sample_weights(rng: &mut Rng, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::invalid(format!("Dirichlet concentration must be positive: {alpha:?}")));
    }
    if alpha.len() == 1 {
        return Ok(vec![1.0]);
    }
    let gammas = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    loop {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Only tiny concentrations can underflow every draw to zero.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// `k` distinct indices out of `0..available`, in ascending (list) order.
pub fn sample_indices(rng: &mut Rng, available: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > available {
        return Err(Error::invalid(format!("cannot pick {k} of {available} snapshots")));
    }
    let mut idx = index::sample(rng, available, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// How teachers are picked for previous guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// One teacher drawn uniformly from the list.
    Single,
    /// Always `min(K, available)` teachers.
    Fixed,
    /// `k` uniform in `1..=min(K, available)`.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub selection: Selection,
    pub max_k: usize,
    /// Dirichlet weights when set, equal weights otherwise.
    pub random_weights: bool,
    pub alpha: f64,
    pub tau: f64,
}

/// Teachers and weights for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidancePlan {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn plan_guidance(rng: &mut Rng, available: usize, cfg: &GuidanceConfig) -> Result<GuidancePlan> {
    let k = match cfg.selection {
        Selection::Single => sample_k(rng, 1, available)?,
        Selection::Fixed => cfg.max_k.min(available).max(1),
        Selection::Random => sample_k(rng, cfg.max_k, available)?,
    };
    let indices = sample_indices(rng, available, k)?;
    let weights = if cfg.random_weights {
        sample_weights(rng, &vec![cfg.alpha; k])?
    } else if k == 1 {
        vec![1.0]
    } else {
        vec![1.0 / k as f64; k]
    };
    Ok(GuidancePlan { indices, weights })
}

/// Previous-guidance targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBatch {
    /// `[B, C, H, W]` ensembled probabilities.
    pub probs: Tensor,
    pub pseudo_labels: LabelMap,
    pub mask: PixelMask,
    pub k_used: usize,
    pub weights_used: Vec<f64>,
}

impl GuidanceBatch {
    /// Argmax labels and `max prob >= tau` mask of `probs`.
    pub fn from_probs(probs: Tensor, tau: f64, weights: Vec<f64>) -> Result<Self> {
        let (pseudo_labels, conf) = argmax_channels(&probs)?;
        let [b, h, w] = pseudo_labels.dims();
        let mask = PixelMask::new(b, h, w, conf.iter().map(|&c| c >= tau).collect())?;
        Ok(GuidanceBatch {
            probs,
            pseudo_labels,
            mask,
            k_used: weights.len(),
            weights_used: weights,
        })
    }
}

/// `Σ w_i · p_i`, accumulated in list order.
pub fn weighted_sum(probs: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if probs.is_empty() || probs.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} weights",
            probs.len(),
            weights.len()
        )));
    }
    let mut acc = probs[0].map(|p| weights[0] * p);
    for (p, &w) in probs.iter().zip(weights).skip(1) {
        if p.shape() != acc.shape() {
            return Err(Error::invalid(format!(
                "teacher output shape {:?} differs from {:?}",
                p.shape(),
                acc.shape()
            )));
        }
        for (a, &v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += w * v;
        }
    }
    Ok(acc)
}

/// Weighted ensemble of the teachers' softmax outputs on `x` (no tape, so
/// nothing flows back into the snapshots).
pub fn ensemble_predict(
    snapshots: &[&Snapshot],
    x: &Tensor,
    weights: &[f64],
    tau: f64,
) -> Result<GuidanceBatch> {
    GuidanceBatch::from_probs(teacher_probs(snapshots, x, weights)?, tau, weights.to_vec())
}

/// The ensembled probabilities alone, before thresholding.
pub fn teacher_probs(snapshots: &[&Snapshot], x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if snapshots.is_empty() || snapshots.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} snapshots for {} weights",
            snapshots.len(),
            weights.len()
        )));
    }
    let arch = snapshots[0].model().arch();
    if let Some(s) = snapshots.iter().find(|s| s.model().arch() != arch) {
        return Err(Error::invalid(format!(
            "snapshot from epoch {} has a different architecture",
            s.epoch()
        )));
    }
    let probs = snapshots
        .iter()
        .map(|s| s.model().predict_probs(x))
        .collect::<Result<Vec<_>>>()?;
    weighted_sum(&probs, weights)
}
