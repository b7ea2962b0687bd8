#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// One-sample Kolmogorov-Smirnov statistic against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Large-sample critical value of the KS statistic at level `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Pearson chi-square p-value of `counts` against `expected` proportions.
pub fn chi_square_p(counts: &[u64], expected: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

use prevmatch::config::{apply_config, TrainConfig};

/// A configuration small enough to train in well under a second.
pub const MICRO: &str = "
epochs = 3
n_labeled = 4
n_unlabeled = 16
n_val = 6
n_test = 6
n_shifted = 6
hidden_width = 6
hidden_layers = 2
height = 12
width = 12
crop = 10
pseudo_eval_count = 8
";

pub fn micro(extra: &str) -> TrainConfig {
    let cfg = apply_config(TrainConfig::default(), &format!("{MICRO}\n{extra}")).unwrap();
    cfg.validate().unwrap();
    cfg
}

pub const BASELINE: &str = "previous_guidance = false\nrandom_selection = false\nrandom_weights = false\n";
