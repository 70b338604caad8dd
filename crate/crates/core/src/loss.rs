//! Probabilistic pairwise ranking loss.
//!
//! For a pair `(i, j)` with relative label `C` the model probability that `i`
//! outranks `j` is `P = sigmoid(f(x_i) - f(x_j))` and the pair costs the
//! cross-entropy `-(C log P + (1 - C) log(1 - P))`. A minibatch loss sums pair
//! costs and adds `lambda * sum_l ||W_l||_F^2` over weight matrices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DropoutMask, Gradient, ModelError, ParameterSet};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("probability {0} is outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("relative label must be 0, 0.5 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("pair batch is empty")]
    EmptyBatch,
    #[error("weight decay {0} must be nonnegative")]
    NegativeDecay(f64),
    #[error("{pairs} pairs but {masks} mask pairs")]
    MaskCount { pairs: usize, masks: usize },
    #[error("pair refers to the same sample `{0}` twice")]
    SelfPair(String),
    #[error("unknown sample id `{0}`")]
    UnknownId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Relative annotation of an ordered pair `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelativeLabel {
    /// `i` has a lower level than `j` (C = 0).
    Lower,
    /// Same level (C = 0.5).
    Tie,
    /// `i` has a higher level than `j` (C = 1).
    Higher,
}

impl RelativeLabel {
    pub fn value(self) -> f64 {
        match self {
            RelativeLabel::Lower => 0.0,
            RelativeLabel::Tie => 0.5,
            RelativeLabel::Higher => 1.0,
        }
    }

    pub fn from_value(v: f64) -> Result<Self, LossError> {
        if v == 0.0 {
            Ok(RelativeLabel::Lower)
        } else if v == 0.5 {
            Ok(RelativeLabel::Tie)
        } else if v == 1.0 {
            Ok(RelativeLabel::Higher)
        } else {
            Err(LossError::InvalidLabel(v))
        }
    }

    /// Label of the reversed pair `(j, i)`.
    pub fn swapped(self) -> Self {
        match self {
            RelativeLabel::Lower => RelativeLabel::Higher,
            RelativeLabel::Tie => RelativeLabel::Tie,
            RelativeLabel::Higher => RelativeLabel::Lower,
        }
    }

    /// Compares two ordinal levels.
    pub fn from_levels(level_i: u32, level_j: u32) -> Self {
        match level_i.cmp(&level_j) {
            std::cmp::Ordering::Greater => RelativeLabel::Higher,
            std::cmp::Ordering::Equal => RelativeLabel::Tie,
            std::cmp::Ordering::Less => RelativeLabel::Lower,
        }
    }
}

impl Serialize for RelativeLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for RelativeLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        RelativeLabel::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// An ordered, labeled pair of sample ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotatedPair {
    pub i: String,
    pub j: String,
    pub label: RelativeLabel,
}

impl AnnotatedPair {
    pub fn new(i: impl Into<String>, j: impl Into<String>, label: RelativeLabel) -> Result<Self, LossError> {
        let (i, j) = (i.into(), j.into());
        if i == j {
            return Err(LossError::SelfPair(i));
        }
        Ok(AnnotatedPair { i, j, label })
    }
}

/// A pair with its feature vectors resolved.
#[derive(Clone, Copy, Debug)]
pub struct BatchPair<'a> {
    pub left: &'a [f64],
    pub right: &'a [f64],
    pub label: RelativeLabel,
}

/// The index-pair set of one minibatch.
#[derive(Clone, Debug)]
pub struct PairBatch<'a> {
    pairs: Vec<BatchPair<'a>>,
}

impl<'a> PairBatch<'a> {
    pub fn new(pairs: Vec<BatchPair<'a>>) -> Result<Self, LossError> {
        if pairs.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        Ok(PairBatch { pairs })
    }

    /// Resolves annotated pairs through a feature lookup.
    pub fn resolve<F>(pairs: &[AnnotatedPair], mut features: F) -> Result<Self, LossError>
    where
        F: FnMut(&str) -> Option<&'a [f64]>,
    {
        let resolved = pairs
            .iter()
            .map(|p| {
                let left = features(&p.i).ok_or_else(|| LossError::UnknownId(p.i.clone()))?;
                let right = features(&p.j).ok_or_else(|| LossError::UnknownId(p.j.clone()))?;
                Ok(BatchPair { left, right, label: p.label })
            })
            .collect::<Result<Vec<_>, LossError>>()?;
        Self::new(resolved)
    }

    pub fn pairs(&self) -> &[BatchPair<'a>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Independent dropout masks for the two members of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMasks {
    pub left: DropoutMask,
    pub right: DropoutMask,
}

/// `sigmoid(f_i - f_j)`, evaluated on the branch that cannot overflow.
pub fn pair_probability(f_i: f64, f_j: f64) -> Result<f64, LossError> {
    if !f_i.is_finite() || !f_j.is_finite() {
        return Err(LossError::NonFiniteScore);
    }
    Ok(sigmoid(f_i - f_j))
}

#[inline]
pub(crate) fn sigmoid(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

pub fn pair_loss(p: f64, c: RelativeLabel) -> Result<f64, LossError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LossError::ProbabilityOutOfRange(p));
    }
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let c = c.value();
    Ok(-(c * p.ln() + (1.0 - c) * (1.0 - p).ln()))
}

/// Pair loss written in the score difference `d = f_i - f_j`:
/// `C * softplus(-d) + (1 - C) * softplus(d)`. Equal to
/// `pair_loss(pair_probability(f_i, f_j), C)` but exact under label swap and
/// finite for any finite scores.
pub fn pair_loss_from_scores(f_i: f64, f_j: f64, c: RelativeLabel) -> Result<f64, LossError> {
    if !f_i.is_finite() || !f_j.is_finite() {
        return Err(LossError::NonFiniteScore);
    }
    let d = f_i - f_j;
    let c = c.value();
    Ok(c * softplus(-d) + (1.0 - c) * softplus(d))
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check(batch: &PairBatch<'_>, masks: &[PairMasks], lambda: f64) -> Result<(), LossError> {
    if !(lambda >= 0.0) {
        return Err(LossError::NegativeDecay(lambda));
    }
    if masks.len() != batch.len() {
        return Err(LossError::MaskCount { pairs: batch.len(), masks: masks.len() });
    }
    Ok(())
}

/// Summed pair loss of a batch plus `lambda` times the squared weight norm.
pub fn batch_loss(
    params: &ParameterSet,
    batch: &PairBatch<'_>,
    masks: &[PairMasks],
    lambda: f64,
) -> Result<f64, LossError> {
    check(batch, masks, lambda)?;
    let mut total = 0.0;
    for (pair, m) in batch.pairs.iter().zip(masks) {
        let fi = crate::model::forward(params, pair.left, &m.left)?;
        let fj = crate::model::forward(params, pair.right, &m.right)?;
        total += pair_loss_from_scores(fi, fj, pair.label)?;
    }
    Ok(total + lambda * params.weight_norm_sq())
}

/// Loss and its exact gradient in one pass.
pub fn batch_loss_and_grad(
    params: &ParameterSet,
    batch: &PairBatch<'_>,
    masks: &[PairMasks],
    lambda: f64,
) -> Result<(f64, Gradient), LossError> {
    check(batch, masks, lambda)?;
    let mut grad = Gradient::zeros_like(params);
    let mut total = 0.0;
    for (pair, m) in batch.pairs.iter().zip(masks) {
        let (fi, ti) = params.forward_trace(pair.left, &m.left)?;
        let (fj, tj) = params.forward_trace(pair.right, &m.right)?;
        let p = pair_probability(fi, fj)?;
        total += pair_loss_from_scores(fi, fj, pair.label)?;
        // d loss / d (f_i - f_j) = P - C
        let d = p - pair.label.value();
        if d != 0.0 {
            params.backward(&ti, &m.left, d, &mut grad);
            params.backward(&tj, &m.right, -d, &mut grad);
        }
    }
    if lambda > 0.0 {
        for (g, l) in grad.layers.iter_mut().zip(&params.layers) {
            for (gw, &w) in g.weights.iter_mut().zip(&l.weights) {
                *gw += 2.0 * lambda * w;
            }
        }
    }
    Ok((total + lambda * params.weight_norm_sq(), grad))
}

pub fn batch_loss_grad(
    params: &ParameterSet,
    batch: &PairBatch<'_>,
    masks: &[PairMasks],
    lambda: f64,
) -> Result<Gradient, LossError> {
    batch_loss_and_grad(params, batch, masks, lambda).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, sample_mask, NetworkConfig};
    use proptest::prelude::*;

    #[test]
    fn probability_anchors() {
        assert_eq!(pair_probability(0.3, 0.3).unwrap(), 0.5);
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((pair_probability(1.5, 0.5).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.731059).abs() < 1e-6);
        let tiny = pair_probability(0.0, 700.0).unwrap();
        assert!(tiny > 0.0 && tiny.is_finite());
        let big = pair_probability(1000.0, 0.0).unwrap();
        assert!(big <= 1.0 && big.is_finite());
        assert!(pair_probability(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn loss_anchors() {
        let tie = pair_loss(0.5, RelativeLabel::Tie).unwrap();
        assert!((tie - std::f64::consts::LN_2).abs() < 1e-12);
        let near_one = pair_loss(1.0 - 1e-15, RelativeLabel::Higher).unwrap();
        assert!(near_one < 1e-11);
        let p = sigmoid(1.0);
        // softplus(-1) = ln(1 + e^-1)
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((pair_loss(p, RelativeLabel::Higher).unwrap() - want).abs() < 1e-14);
        assert!((want - 0.313262).abs() < 1e-6);
        assert!(pair_loss(0.0, RelativeLabel::Tie).is_err());
        assert!(pair_loss(1.0, RelativeLabel::Tie).is_err());
    }

    #[test]
    fn label_codomain() {
        assert_eq!(RelativeLabel::from_value(0.5).unwrap(), RelativeLabel::Tie);
        assert!(RelativeLabel::from_value(0.7).is_err());
        assert!(serde_json::from_str::<RelativeLabel>("0.7").is_err());
        assert_eq!(serde_json::to_string(&RelativeLabel::Higher).unwrap(), "1.0");
        assert!(AnnotatedPair::new("a", "a", RelativeLabel::Tie).is_err());
    }

    #[test]
    fn tie_pair_with_equal_scores() {
        let c = NetworkConfig::new(2, &[3]);
        let p = init_params(&c, 4).unwrap();
        let x = [0.2, 0.9];
        let m = sample_mask(&c, 1);
        let masks = vec![PairMasks { left: m.clone(), right: m }];
        let batch = PairBatch::new(vec![BatchPair { left: &x, right: &x, label: RelativeLabel::Tie }]).unwrap();
        let loss = batch_loss(&p, &batch, &masks, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let g = batch_loss_grad(&p, &batch, &masks, 0.0).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_have_zero_regulariser() {
        let c = NetworkConfig::new(2, &[3]);
        let mut p = init_params(&c, 4).unwrap();
        p.set_flat(&vec![0.0; p.num_parameters()]);
        let x = [1.0, 2.0];
        let y = [0.0, -1.0];
        let m = PairMasks { left: sample_mask(&c, 1), right: sample_mask(&c, 2) };
        let batch = PairBatch::new(vec![BatchPair { left: &x, right: &y, label: RelativeLabel::Higher }]).unwrap();
        let with = batch_loss(&p, &batch, std::slice::from_ref(&m), 1e-4).unwrap();
        let without = batch_loss(&p, &batch, std::slice::from_ref(&m), 0.0).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn regulariser_gradient_is_linear_in_lambda() {
        let c = NetworkConfig::new(3, &[4]);
        let p = init_params(&c, 8).unwrap();
        let zero = [0.0; 3];
        let m = PairMasks { left: sample_mask(&c, 3), right: sample_mask(&c, 4) };
        let batch = PairBatch::new(vec![BatchPair { left: &zero, right: &zero, label: RelativeLabel::Higher }]).unwrap();
        let masks = std::slice::from_ref(&m);
        let base = batch_loss_grad(&p, &batch, masks, 0.0).unwrap().flatten();
        let g1 = batch_loss_grad(&p, &batch, masks, 1e-3).unwrap().flatten();
        let g2 = batch_loss_grad(&p, &batch, masks, 2e-3).unwrap().flatten();
        for ((b, a1), a2) in base.iter().zip(&g1).zip(&g2) {
            let r1 = a1 - b;
            let r2 = a2 - b;
            assert!((r2 - 2.0 * r1).abs() < 1e-15, "{r1} {r2}");
        }
    }

    #[test]
    fn batch_and_mask_counts_checked() {
        assert!(matches!(PairBatch::new(vec![]), Err(LossError::EmptyBatch)));
        let c = NetworkConfig::new(1, &[2]);
        let p = init_params(&c, 0).unwrap();
        let x = [1.0];
        let batch = PairBatch::new(vec![BatchPair { left: &x, right: &x, label: RelativeLabel::Tie }]).unwrap();
        assert!(matches!(batch_loss(&p, &batch, &[], 0.0), Err(LossError::MaskCount { .. })));
    }

    proptest! {
        #[test]
        fn probability_antisymmetry(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let s = pair_probability(a, b).unwrap() + pair_probability(b, a).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn label_swap_symmetry(a in -20.0f64..20.0, b in -20.0f64..20.0, k in 0usize..3) {
            let c = [RelativeLabel::Lower, RelativeLabel::Tie, RelativeLabel::Higher][k];
            let l1 = pair_loss_from_scores(a, b, c).unwrap();
            let l2 = pair_loss_from_scores(b, a, c.swapped()).unwrap();
            prop_assert_eq!(l1, l2);
            // The probability route agrees wherever P is not saturated.
            if (a - b).abs() < 10.0 {
                let lp = pair_loss(pair_probability(a, b).unwrap(), c).unwrap();
                prop_assert!((lp - l1).abs() <= 1e-10 * l1.max(1.0));
            }
        }

        #[test]
        fn loss_minimised_at_label(p in 0.01f64..0.99) {
            let tie = pair_loss(p, RelativeLabel::Tie).unwrap();
            prop_assert!(tie >= pair_loss(0.5, RelativeLabel::Tie).unwrap() - 1e-15);
            let hi = pair_loss(p, RelativeLabel::Higher).unwrap();
            prop_assert!(hi > pair_loss((p + 1.0) / 2.0, RelativeLabel::Higher).unwrap());
            let lo = pair_loss(p, RelativeLabel::Lower).unwrap();
            prop_assert!(lo > pair_loss(p / 2.0, RelativeLabel::Lower).unwrap());
        }
    }
}
