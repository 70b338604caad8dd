//! Monte-Carlo dropout prediction.
//!
//! `T` stochastic forward passes give the predictive mean `y* = (1/T) Σ f_t`
//! and the predictive variance `(1/T) Σ f_t² - y*²`, used as the per-sample
//! uncertainty. Moments are accumulated around the first draw, which keeps
//! the moment-difference form well conditioned and makes the variance of a
//! constant sequence exactly zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{forward, sample_mask_with, ModelError, ParameterSet};
use crate::rng;

/// Default number of MC dropout trials.
pub const DEFAULT_TRIALS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub mean_score: f64,
    pub variance: f64,
    pub trials: usize,
}

/// Streaming accumulator for the MC moments.
#[derive(Debug, Default)]
struct Moments {
    shift: f64,
    sum: f64,
    sum_sq: f64,
    n: usize,
}

impl Moments {
    fn push(&mut self, x: f64) {
        if self.n == 0 {
            self.shift = x;
        }
        let d = x - self.shift;
        self.sum += d;
        self.sum_sq += d * d;
        self.n += 1;
    }

    fn finish(self) -> McPrediction {
        let t = self.n as f64;
        let mean_d = self.sum / t;
        let variance = (self.sum_sq / t - mean_d * mean_d).max(0.0);
        McPrediction { mean_score: self.shift + mean_d, variance, trials: self.n }
    }
}

/// MC-dropout prediction for one input. `trials` masks are drawn from `seed`.
pub fn predict(params: &ParameterSet, x: &[f64], trials: usize, seed: u64) -> Result<McPrediction, ModelError> {
    assert!(trials >= 1, "at least one MC trial is required");
    let mut rng = rng::rng(seed);
    let mut moments = Moments::default();
    for _ in 0..trials {
        let mask = sample_mask_with(&params.config, &mut rng);
        moments.push(forward(params, x, &mask)?);
    }
    Ok(moments.finish())
}

/// The raw per-trial scores behind [`predict`], for diagnostics and tests.
pub fn trial_scores(params: &ParameterSet, x: &[f64], trials: usize, seed: u64) -> Result<Vec<f64>, ModelError> {
    let mut rng = rng::rng(seed);
    (0..trials)
        .map(|_| {
            let mask = sample_mask_with(&params.config, &mut rng);
            forward(params, x, &mask)
        })
        .collect()
}

/// Predicts every `(id, features)` item. Each item's masks are seeded from its
/// id, so results do not depend on list order or on which other items are
/// present.
pub fn predict_all<S, F>(
    params: &ParameterSet,
    items: &[(S, F)],
    trials: usize,
    seed: u64,
) -> Result<Vec<McPrediction>, ModelError>
where
    S: AsRef<str> + Sync,
    F: AsRef<[f64]> + Sync,
{
    items
        .par_iter()
        .map(|(id, x)| predict(params, x.as_ref(), trials, rng::id_seed(seed, id.as_ref())))
        .collect()
}
