//! Run configuration: `key = value` lines, `#` comments, every key optional.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | master seed for data, init and every step |
//! | `height`, `width` | 20 | scene size |
//! | `classes` | 5 | classes including background |
//! | `imbalance` | true | make the last class rare |
//! | `rare_weight` | 0.15 | shape weight of the rare class |
//! | `noise` | 0.8 | feature noise standard deviation |
//! | `shapes_min`, `shapes_max` | 1, 4 | shapes per scene |
//! | `shift_offset` | 0.5 | feature offset of the shifted test domain |
//! | `shift_rare_weight` | 0.4 | rare-class weight in the shifted domain |
//! | `n_labeled`, `n_unlabeled` | 20, 500 | training split sizes |
//! | `n_val`, `n_test`, `n_shifted` | 50, 100, 100 | evaluation split sizes |
//! | `crop` | 16 | square training crop |
//! | `hidden_width`, `hidden_layers` | 32, 3 | model hidden convolutions |
//! | `kernel_size` | 3 | convolution size |
//! | `epochs` | 60 | |
//! | `steps_per_epoch` | 0 | 0 means one pass over the unlabeled pool |
//! | `batch_labeled`, `batch_unlabeled` | 4, 4 | images per step |
//! | `base_lr`, `momentum`, `poly_power` | 0.02, 0.9, 0.9 | SGD with poly decay |
//! | `tau_standard`, `tau_prev` | 0.95, 0.9 | confidence thresholds |
//! | `N`, `K`, `alpha` | 8, 3, 1.0 | registry size, max teachers, Dirichlet concentration |
//! | `lambda_mode` | warmup_decay | also fixed, linear_decay, linear_increase |
//! | `lambda_max`, `warmup_frac` | 1.0, 0.3 | |
//! | `save_criterion` | best | or `interval:<n>` |
//! | `previous_guidance` | true | |
//! | `simple_ensemble` | false | fixed k = K with equal weights |
//! | `random_selection`, `random_weights` | true, true | |
//! | `flip_prob` | 0.5 | weak view |
//! | `jitter_gain`, `jitter_offset` | 0.3, 0.3 | strong view |
//! | `gray_prob`, `gray_strength` | 0.2, 0.6 | |
//! | `blur_prob` | 0.3 | |
//! | `cutmix_prob`, `cutmix_min`, `cutmix_max` | 0.5, 0.2, 0.5 | |
//! | `pseudo_eval_count`, `pseudo_eval_tau` | 100, 0.0 | per-epoch pseudo-label accuracy |
//! | `stability_tail` | 0.3 | tail fraction for stability statistics |

use std::fmt::Display;
use std::str::FromStr;

use crate::data::{AugConfig, SceneSpec, SplitCounts};
use crate::error::{Error, Result};
use crate::model::ModelArch;
use crate::registry::{GuidanceConfig, SaveCriterion, Selection};
use crate::trainer::{LambdaMode, LambdaSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub imbalance: bool,
    pub rare_weight: f64,
    pub noise: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub shift_offset: f64,
    pub shift_rare_weight: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_shifted: usize,
    pub crop: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub kernel_size: usize,
    pub epochs: u32,
    pub steps_per_epoch: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub tau_standard: f64,
    pub tau_prev: f64,
    pub registry_size: usize,
    pub max_k: usize,
    pub alpha: f64,
    pub lambda: LambdaSchedule,
    pub save_criterion: SaveCriterion,
    pub previous_guidance: bool,
    pub simple_ensemble: bool,
    pub random_selection: bool,
    pub random_weights: bool,
    pub flip_prob: f64,
    pub jitter_gain: f64,
    pub jitter_offset: f64,
    pub gray_prob: f64,
    pub gray_strength: f64,
    pub blur_prob: f64,
    pub cutmix_prob: f64,
    pub cutmix_min: f64,
    pub cutmix_max: f64,
    pub pseudo_eval_count: usize,
    pub pseudo_eval_tau: f64,
    pub stability_tail: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            height: 20,
            width: 20,
            classes: 5,
            imbalance: true,
            rare_weight: 0.15,
            noise: 0.8,
            shapes_min: 1,
            shapes_max: 4,
            shift_offset: 0.5,
            shift_rare_weight: 0.4,
            n_labeled: 20,
            n_unlabeled: 500,
            n_val: 50,
            n_test: 100,
            n_shifted: 100,
            crop: 16,
            hidden_width: 32,
            hidden_layers: 3,
            kernel_size: 3,
            epochs: 60,
            steps_per_epoch: 0,
            batch_labeled: 4,
            batch_unlabeled: 4,
            base_lr: 0.02,
            momentum: 0.9,
            poly_power: 0.9,
            tau_standard: 0.95,
            tau_prev: 0.9,
            registry_size: 8,
            max_k: 3,
            alpha: 1.0,
            lambda: LambdaSchedule {
                mode: LambdaMode::WarmupDecay,
                lambda_max: 1.0,
                warmup_frac: 0.3,
            },
            save_criterion: SaveCriterion::Best,
            previous_guidance: true,
            simple_ensemble: false,
            random_selection: true,
            random_weights: true,
            flip_prob: 0.5,
            jitter_gain: 0.3,
            jitter_offset: 0.3,
            gray_prob: 0.2,
            gray_strength: 0.6,
            blur_prob: 0.3,
            cutmix_prob: 0.5,
            cutmix_min: 0.2,
            cutmix_max: 0.5,
            pseudo_eval_count: 100,
            pseudo_eval_tau: 0.0,
            stability_tail: 0.3,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed", "height", "width", "classes", "imbalance", "rare_weight", "noise", "shapes_min",
    "shapes_max", "shift_offset", "shift_rare_weight", "n_labeled", "n_unlabeled", "n_val", "n_test",
    "n_shifted", "crop", "hidden_width", "hidden_layers", "kernel_size", "epochs", "steps_per_epoch",
    "batch_labeled", "batch_unlabeled", "base_lr", "momentum", "poly_power", "tau_standard",
    "tau_prev", "N", "K", "alpha", "lambda_mode", "lambda_max", "warmup_frac", "save_criterion",
    "previous_guidance", "simple_ensemble", "random_selection", "random_weights", "flip_prob",
    "jitter_gain", "jitter_offset", "gray_prob", "gray_strength", "blur_prob", "cutmix_prob",
    "cutmix_min", "cutmix_max", "pseudo_eval_count", "pseudo_eval_tau", "stability_tail",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as {}", std::any::type_name::<T>()))
}

pub fn parse_save_criterion(value: &str) -> std::result::Result<SaveCriterion, String> {
    match value {
        "best" => Ok(SaveCriterion::Best),
        _ => match value.strip_prefix("interval:").map(str::parse::<u32>) {
            Some(Ok(n)) if n >= 1 => Ok(SaveCriterion::Interval(n)),
            _ => Err(format!("expected `best` or `interval:<n>` with n >= 1, got `{value}`")),
        },
    }
}

fn save_criterion_str(c: SaveCriterion) -> String {
    match c {
        SaveCriterion::Best => "best".into(),
        SaveCriterion::Interval(n) => format!("interval:{n}"),
    }
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        macro_rules! fields {
            ($($name:literal => $field:expr),* $(,)?) => {
                match key {
                    $($name => $field = parse(v)?,)*
                    "lambda_mode" => self.lambda.mode = v.parse()?,
                    "save_criterion" => self.save_criterion = parse_save_criterion(v)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
            };
        }
        fields! {
            "seed" => self.seed,
            "height" => self.height,
            "width" => self.width,
            "classes" => self.classes,
            "imbalance" => self.imbalance,
            "rare_weight" => self.rare_weight,
            "noise" => self.noise,
            "shapes_min" => self.shapes_min,
            "shapes_max" => self.shapes_max,
            "shift_offset" => self.shift_offset,
            "shift_rare_weight" => self.shift_rare_weight,
            "n_labeled" => self.n_labeled,
            "n_unlabeled" => self.n_unlabeled,
            "n_val" => self.n_val,
            "n_test" => self.n_test,
            "n_shifted" => self.n_shifted,
            "crop" => self.crop,
            "hidden_width" => self.hidden_width,
            "hidden_layers" => self.hidden_layers,
            "kernel_size" => self.kernel_size,
            "epochs" => self.epochs,
            "steps_per_epoch" => self.steps_per_epoch,
            "batch_labeled" => self.batch_labeled,
            "batch_unlabeled" => self.batch_unlabeled,
            "base_lr" => self.base_lr,
            "momentum" => self.momentum,
            "poly_power" => self.poly_power,
            "tau_standard" => self.tau_standard,
            "tau_prev" => self.tau_prev,
            "N" => self.registry_size,
            "K" => self.max_k,
            "alpha" => self.alpha,
            "lambda_max" => self.lambda.lambda_max,
            "warmup_frac" => self.lambda.warmup_frac,
            "previous_guidance" => self.previous_guidance,
            "simple_ensemble" => self.simple_ensemble,
            "random_selection" => self.random_selection,
            "random_weights" => self.random_weights,
            "flip_prob" => self.flip_prob,
            "jitter_gain" => self.jitter_gain,
            "jitter_offset" => self.jitter_offset,
            "gray_prob" => self.gray_prob,
            "gray_strength" => self.gray_strength,
            "blur_prob" => self.blur_prob,
            "cutmix_prob" => self.cutmix_prob,
            "cutmix_min" => self.cutmix_min,
            "cutmix_max" => self.cutmix_max,
            "pseudo_eval_count" => self.pseudo_eval_count,
            "pseudo_eval_tau" => self.pseudo_eval_tau,
            "stability_tail" => self.stability_tail,
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        match key {
            "seed" => s(self.seed),
            "height" => s(self.height),
            "width" => s(self.width),
            "classes" => s(self.classes),
            "imbalance" => s(self.imbalance),
            "rare_weight" => s(self.rare_weight),
            "noise" => s(self.noise),
            "shapes_min" => s(self.shapes_min),
            "shapes_max" => s(self.shapes_max),
            "shift_offset" => s(self.shift_offset),
            "shift_rare_weight" => s(self.shift_rare_weight),
            "n_labeled" => s(self.n_labeled),
            "n_unlabeled" => s(self.n_unlabeled),
            "n_val" => s(self.n_val),
            "n_test" => s(self.n_test),
            "n_shifted" => s(self.n_shifted),
            "crop" => s(self.crop),
            "hidden_width" => s(self.hidden_width),
            "hidden_layers" => s(self.hidden_layers),
            "kernel_size" => s(self.kernel_size),
            "epochs" => s(self.epochs),
            "steps_per_epoch" => s(self.steps_per_epoch),
            "batch_labeled" => s(self.batch_labeled),
            "batch_unlabeled" => s(self.batch_unlabeled),
            "base_lr" => s(self.base_lr),
            "momentum" => s(self.momentum),
            "poly_power" => s(self.poly_power),
            "tau_standard" => s(self.tau_standard),
            "tau_prev" => s(self.tau_prev),
            "N" => s(self.registry_size),
            "K" => s(self.max_k),
            "alpha" => s(self.alpha),
            "lambda_mode" => s(self.lambda.mode),
            "lambda_max" => s(self.lambda.lambda_max),
            "warmup_frac" => s(self.lambda.warmup_frac),
            "save_criterion" => Some(save_criterion_str(self.save_criterion)),
            "previous_guidance" => s(self.previous_guidance),
            "simple_ensemble" => s(self.simple_ensemble),
            "random_selection" => s(self.random_selection),
            "random_weights" => s(self.random_weights),
            "flip_prob" => s(self.flip_prob),
            "jitter_gain" => s(self.jitter_gain),
            "jitter_offset" => s(self.jitter_offset),
            "gray_prob" => s(self.gray_prob),
            "gray_strength" => s(self.gray_strength),
            "blur_prob" => s(self.blur_prob),
            "cutmix_prob" => s(self.cutmix_prob),
            "cutmix_min" => s(self.cutmix_min),
            "cutmix_max" => s(self.cutmix_max),
            "pseudo_eval_count" => s(self.pseudo_eval_count),
            "pseudo_eval_tau" => s(self.pseudo_eval_tau),
            "stability_tail" => s(self.stability_tail),
            _ => None,
        }
    }

    /// Every effective value as `key = value` lines; parses back to `self`.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: &str| {
            Err(Error::Config {
                line: 0,
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for (key, v) in [
            ("tau_standard", self.tau_standard),
            ("tau_prev", self.tau_prev),
            ("pseudo_eval_tau", self.pseudo_eval_tau),
        ] {
            if !unit(v) {
                return fail(key, "threshold must lie in [0, 1]");
            }
        }
        if self.registry_size == 0 {
            return fail("N", "must be at least 1");
        }
        if self.max_k == 0 {
            return fail("K", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha", "must be positive");
        }
        if self.random_weights && !(self.random_selection || self.simple_ensemble) {
            return fail("random_weights", "requires random_selection or simple_ensemble");
        }
        if self.random_selection && self.simple_ensemble {
            return fail("simple_ensemble", "cannot be combined with random_selection");
        }
        if !(self.lambda.lambda_max >= 0.0 && self.lambda.lambda_max.is_finite()) {
            return fail("lambda_max", "must be finite and >= 0");
        }
        if !(self.lambda.warmup_frac > 0.0 && self.lambda.warmup_frac < 1.0) {
            return fail("warmup_frac", "must lie in (0, 1)");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr", "must be positive");
        }
        if !unit(self.momentum) || self.momentum == 1.0 {
            return fail("momentum", "must lie in [0, 1)");
        }
        if !(self.poly_power >= 0.0) {
            return fail("poly_power", "must be >= 0");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return fail("batch_unlabeled", "batch sizes must be positive");
        }
        if self.batch_unlabeled > self.n_unlabeled || self.batch_labeled > self.n_labeled {
            return fail("batch_unlabeled", "batch larger than its split");
        }
        if self.crop > self.height.min(self.width) || self.crop == 0 {
            return fail("crop", "must be positive and fit inside the scene");
        }
        if self.classes < 2 {
            return fail("classes", "need background and at least one foreground class");
        }
        if self.imbalance && self.classes < 3 {
            return fail("imbalance", "needs at least one common foreground class");
        }
        if self.hidden_width == 0 {
            return fail("hidden_width", "must be positive");
        }
        if !(self.stability_tail > 0.0 && self.stability_tail <= 1.0) {
            return fail("stability_tail", "must lie in (0, 1]");
        }
        self.scene_spec().validate()?;
        self.aug().validate()?;
        self.arch().validate()
    }

    /// Label used in summaries and comparison tables.
    pub fn label(&self) -> &'static str {
        if !self.previous_guidance {
            return "baseline";
        }
        match (self.simple_ensemble, self.random_selection, self.random_weights) {
            (false, false, _) => "pg",
            (true, _, false) => "pg+simple_ensemble",
            (true, _, true) => "pg+simple_ensemble+random_weights",
            (false, true, false) => "pg+random_selection",
            (false, true, true) => "prevmatch",
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::desk(self.classes, self.imbalance, self.rare_weight, self.shift_rare_weight);
        spec.height = self.height;
        spec.width = self.width;
        spec.noise = self.noise;
        spec.shapes_per_scene = (self.shapes_min, self.shapes_max);
        spec.shift.feature_offset = self.shift_offset;
        spec
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            labeled: self.n_labeled,
            unlabeled: self.n_unlabeled,
            val: self.n_val,
            test: self.n_test,
            shifted: self.n_shifted,
        }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            in_channels: 3,
            hidden: vec![self.hidden_width; self.hidden_layers],
            num_classes: self.classes,
            kernel_size: self.kernel_size,
        }
    }

    pub fn aug(&self) -> AugConfig {
        AugConfig {
            crop_height: self.crop,
            crop_width: self.crop,
            flip_prob: self.flip_prob,
            jitter_gain: self.jitter_gain,
            jitter_offset: self.jitter_offset,
            gray_prob: self.gray_prob,
            gray_strength: self.gray_strength,
            blur_prob: self.blur_prob,
            cutmix_prob: self.cutmix_prob,
            cutmix_area: (self.cutmix_min, self.cutmix_max),
        }
    }

    /// `None` when previous guidance is off.
    pub fn guidance(&self) -> Option<GuidanceConfig> {
        self.previous_guidance.then_some(GuidanceConfig {
            selection: if self.random_selection {
                Selection::Random
            } else if self.simple_ensemble {
                Selection::Fixed
            } else {
                Selection::Single
            },
            max_k: self.max_k,
            random_weights: self.random_weights,
            alpha: self.alpha,
            tau: self.tau_prev,
        })
    }

    /// Steps per epoch after resolving the automatic setting.
    pub fn resolved_steps(&self) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (self.n_unlabeled / self.batch_unlabeled).max(1)
        }
    }

    /// The class treated as rare in stability reports.
    pub fn rare_class(&self) -> Option<usize> {
        self.imbalance.then(|| self.classes - 1)
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(head, _)| head).trim()
}

/// Applies `text` on top of `base`. Errors name the 1-based line and key.
pub fn apply_config(base: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw);
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                line: i + 1,
                key: line.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        cfg.set(key, value).map_err(|message| Error::Config {
            line: i + 1,
            key: key.to_string(),
            message,
        })?;
    }
    Ok(cfg)
}

/// Parses a config file over the defaults and validates the result.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg = apply_config(TrainConfig::default(), text)?;
    cfg.validate()?;
    Ok(cfg)
}
