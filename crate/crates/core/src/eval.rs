//! Ranking evaluation.
//!
//! Test pairs are ordered `(higher, lower)` by ground-truth level and a pair
//! is correct iff `score(higher) > score(lower)`; exact score ties count as
//! wrong. Two families of test pairs are built: an "overall" set drawn from a
//! class-balanced subsample, and one "neighboring" set per adjacent level pair
//! (the hard cases). Paired correctness flags from two models are compared
//! with McNemar's test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::active::{LabelingState, RoundCheckpoint};
use crate::data::{Dataset, Fold};
use crate::inference::{predict_all, McPrediction};
use crate::model::ModelError;
use crate::rng;

/// Discordant-pair count at which McNemar switches from the exact binomial
/// test to the continuity-corrected chi-squared approximation.
pub const MCNEMAR_EXACT_BELOW: usize = 25;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("level {0} is absent from the test samples")]
    ClassAbsent(u32),
    #[error("no adjacent pair of levels is represented")]
    NoAdjacentLevels,
    #[error("pair set is empty")]
    EmptyPairs,
    #[error("pair ({0}, {1}) violates the strict label order")]
    NotStrict(String, String),
    #[error("no score for sample `{0}`")]
    MissingScore(String),
    #[error("flag vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("duplicate sequence position {0}")]
    DuplicatePosition(u32),
    #[error("sample `{0}` has no sequence position")]
    MissingPosition(String),
    #[error("no checkpoints to evaluate")]
    NoCheckpoints,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairKind {
    Overall,
    Neighboring { lower: u32, upper: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPair {
    pub higher: String,
    pub lower: String,
    pub higher_label: u32,
    pub lower_label: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPairSet {
    pub kind: PairKind,
    pub pairs: Vec<TestPair>,
}

impl TestPairSet {
    pub fn new(kind: PairKind, pairs: Vec<TestPair>) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.higher_label <= p.lower_label) {
            return Err(EvalError::NotStrict(p.higher.clone(), p.lower.clone()));
        }
        Ok(TestPairSet { kind, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `"a-b"` for neighboring sets, `"overall"` otherwise.
    pub fn name(&self) -> String {
        match self.kind {
            PairKind::Overall => "overall".to_string(),
            PairKind::Neighboring { lower, upper } => format!("{lower}-{upper}"),
        }
    }
}

fn oriented(a: &(String, u32), b: &(String, u32)) -> Option<TestPair> {
    let (hi, lo) = match a.1.cmp(&b.1) {
        std::cmp::Ordering::Greater => (a, b),
        std::cmp::Ordering::Less => (b, a),
        std::cmp::Ordering::Equal => return None,
    };
    Some(TestPair { higher: hi.0.clone(), lower: lo.0.clone(), higher_label: hi.1, lower_label: lo.1 })
}

fn by_class(samples: &[(String, u32)], num_levels: u32) -> Vec<Vec<(String, u32)>> {
    let mut classes = vec![Vec::new(); num_levels as usize];
    for s in samples {
        if let Some(c) = classes.get_mut(s.1 as usize) {
            c.push(s.clone());
        }
    }
    classes
}

/// Class-balanced random pairs: every level is subsampled to the smallest
/// level count, each retained sample is paired with a random other retained
/// sample, and tied-label pairs are dropped.
pub fn build_overall_pairs(samples: &[(String, u32)], num_levels: u32, seed: u64) -> Result<TestPairSet> {
    let mut rng = rng::rng(seed);
    let mut classes = by_class(samples, num_levels);
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(EvalError::ClassAbsent(c as u32));
    }
    let min = classes.iter().map(Vec::len).min().unwrap_or(0);
    let mut kept = Vec::with_capacity(min * classes.len());
    for members in &mut classes {
        if members.len() > min {
            let (picked, _) = members.partial_shuffle(&mut rng, min);
            kept.extend_from_slice(picked);
        } else {
            kept.append(members);
        }
    }
    Ok(random_strict_pairs(&kept, &mut rng, PairKind::Overall))
}

/// Each sample gets one uniformly drawn partner; ties are discarded.
fn random_strict_pairs(kept: &[(String, u32)], rng: &mut rng::Rng, kind: PairKind) -> TestPairSet {
    let mut pairs = Vec::with_capacity(kept.len());
    if kept.len() >= 2 {
        for (k, a) in kept.iter().enumerate() {
            let mut j = rng.random_range(0..kept.len() - 1);
            if j >= k {
                j += 1;
            }
            if let Some(p) = oriented(a, &kept[j]) {
                pairs.push(p);
            }
        }
    }
    TestPairSet { kind, pairs }
}

/// Random strict-order pairs without class balancing, used when some level
/// is missing (small validation splits).
pub fn build_unbalanced_pairs(samples: &[(String, u32)], seed: u64) -> TestPairSet {
    random_strict_pairs(samples, &mut rng::rng(seed), PairKind::Overall)
}

/// One set per adjacent level pair `(a, a+1)`. Each member of the larger level
/// is paired with a member of the smaller level, cycling through a shuffled
/// order of the smaller level. Sets for unrepresented levels are empty.
pub fn build_neighboring_pairs(samples: &[(String, u32)], num_levels: u32, seed: u64) -> Result<Vec<TestPairSet>> {
    let classes = by_class(samples, num_levels);
    let mut sets = Vec::with_capacity(num_levels.saturating_sub(1) as usize);
    let mut any = false;
    for a in 0..num_levels.saturating_sub(1) {
        let mut rng = rng::rng(rng::derive(seed, u64::from(a)));
        let mut lo = classes[a as usize].clone();
        let mut hi = classes[a as usize + 1].clone();
        let mut pairs = Vec::new();
        if !lo.is_empty() && !hi.is_empty() {
            any = true;
            lo.shuffle(&mut rng);
            hi.shuffle(&mut rng);
            let n = lo.len().max(hi.len());
            for k in 0..n {
                let h = &hi[k % hi.len()];
                let l = &lo[k % lo.len()];
                pairs.push(TestPair { higher: h.0.clone(), lower: l.0.clone(), higher_label: h.1, lower_label: l.1 });
            }
        }
        sets.push(TestPairSet { kind: PairKind::Neighboring { lower: a, upper: a + 1 }, pairs });
    }
    if !any {
        return Err(EvalError::NoAdjacentLevels);
    }
    Ok(sets)
}

/// Source of model scores keyed by sample id.
pub trait ScoreLookup {
    fn score(&self, id: &str) -> Option<f64>;
}

impl ScoreLookup for HashMap<String, f64> {
    fn score(&self, id: &str) -> Option<f64> {
        self.get(id).copied()
    }
}

impl ScoreLookup for BTreeMap<String, f64> {
    fn score(&self, id: &str) -> Option<f64> {
        self.get(id).copied()
    }
}

impl ScoreLookup for BTreeMap<String, McPrediction> {
    fn score(&self, id: &str) -> Option<f64> {
        self.get(id).map(|p| p.mean_score)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

pub fn pair_accuracy<S: ScoreLookup + ?Sized>(scores: &S, pairs: &TestPairSet) -> Result<PairAccuracy> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    let lookup = |id: &str| scores.score(id).ok_or_else(|| EvalError::MissingScore(id.to_string()));
    let correct = pairs
        .pairs
        .iter()
        .map(|p| Ok(lookup(&p.higher)? > lookup(&p.lower)?))
        .collect::<Result<Vec<bool>>>()?;
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(PairAccuracy { accuracy: hits as f64 / correct.len() as f64, correct })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Pairs where only the first model is correct.
    pub b: usize,
    /// Pairs where only the second model is correct.
    pub c: usize,
    /// Continuity-corrected chi-squared statistic `(|b - c| - 1)^2 / (b + c)`.
    pub statistic: f64,
    /// Upper one-degree-of-freedom chi-squared tail of `statistic`.
    pub chi_square_p: f64,
    /// Decision p-value: exact binomial below the switch, else `chi_square_p`.
    pub p_value: f64,
    pub method: McNemarMethod,
}

/// McNemar's test on paired correctness flags. Uses the exact two-sided
/// binomial test when `b + c < 25`, else the continuity-corrected
/// chi-squared test with one degree of freedom.
pub fn mcnemar(flags_a: &[bool], flags_b: &[bool]) -> Result<McNemarResult> {
    if flags_a.len() != flags_b.len() {
        return Err(EvalError::LengthMismatch(flags_a.len(), flags_b.len()));
    }
    let b = flags_a.iter().zip(flags_b).filter(|(a, b)| **a && !**b).count();
    let c = flags_a.iter().zip(flags_b).filter(|(a, b)| !**a && **b).count();
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: usize, c: usize) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: 0.0,
            chi_square_p: 1.0,
            p_value: 1.0,
            method: McNemarMethod::ExactBinomial,
        };
    }
    let diff = (b as f64 - c as f64).abs();
    let statistic = (diff - 1.0).max(0.0).powi(2) / n as f64;
    let chi_square_p = ChiSquared::new(1.0).expect("one degree of freedom").sf(statistic);
    if n < MCNEMAR_EXACT_BELOW {
        let k = b.max(c);
        // P(X >= k) for X ~ Binomial(n, 1/2)
        let mut coef = 1.0f64;
        let mut tail = 0.0;
        for i in 0..=n {
            if i >= k {
                tail += coef;
            }
            coef = coef * (n - i) as f64 / (i + 1) as f64;
        }
        let p_value = (2.0 * tail / 2f64.powi(n as i32)).min(1.0);
        McNemarResult { b, c, statistic, chi_square_p, p_value, method: McNemarMethod::ExactBinomial }
    } else {
        McNemarResult { b, c, statistic, chi_square_p, p_value: chi_square_p, method: McNemarMethod::ChiSquared }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(FiveNumber {
        count: v.len(),
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

fn summaries(values: BTreeMap<u32, Vec<f64>>) -> BTreeMap<u32, FiveNumber> {
    values
        .into_iter()
        .filter_map(|(c, v)| five_number(&v).map(|s| (c, s)))
        .collect()
}

/// Five-number summary of scores per ground-truth level.
pub fn score_distribution_by_class<S: ScoreLookup + ?Sized>(
    scores: &S,
    samples: &[(String, u32)],
) -> Result<BTreeMap<u32, FiveNumber>> {
    let mut per: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (id, label) in samples {
        let s = scores.score(id).ok_or_else(|| EvalError::MissingScore(id.clone()))?;
        per.entry(*label).or_default().push(s);
    }
    Ok(summaries(per))
}

/// Five-number summary of MC-dropout variances per ground-truth level.
pub fn uncertainty_by_class(
    predictions: &BTreeMap<String, McPrediction>,
    labels: &BTreeMap<String, u32>,
) -> Result<BTreeMap<u32, FiveNumber>> {
    let mut per: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (id, p) in predictions {
        let label = labels.get(id).ok_or_else(|| EvalError::MissingScore(id.clone()))?;
        per.entry(*label).or_default().push(p.variance);
    }
    Ok(summaries(per))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProportions {
    pub iteration: usize,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

fn proportions(iteration: usize, ids: &BTreeSet<&str>, labels: &BTreeMap<String, u32>, num_levels: u32) -> ClassProportions {
    let mut counts = vec![0usize; num_levels as usize];
    for id in ids {
        if let Some(&l) = labels.get(*id) {
            counts[l as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    ClassProportions { iteration, counts, fractions }
}

/// Class histogram of every id labeled up to each iteration (iteration 0 is
/// the initial random sample).
pub fn selection_proportions(
    state: &LabelingState,
    labels: &BTreeMap<String, u32>,
    num_levels: u32,
) -> Vec<ClassProportions> {
    let mut acc: BTreeSet<&str> = state.initial_ids.iter().map(String::as_str).collect();
    let mut out = vec![proportions(0, &acc, labels, num_levels)];
    for rec in &state.history {
        acc.extend(rec.selected.iter().map(|s| s.id.as_str()));
        out.push(proportions(rec.iteration, &acc, labels, num_levels));
    }
    out
}

/// Class histogram of ids chosen by the acquisition step only (iterations
/// `1..=k`), excluding the initial random sample.
pub fn acquired_proportions(
    state: &LabelingState,
    labels: &BTreeMap<String, u32>,
    num_levels: u32,
) -> Vec<ClassProportions> {
    let mut acc: BTreeSet<&str> = BTreeSet::new();
    state
        .history
        .iter()
        .map(|rec| {
            acc.extend(rec.selected.iter().map(|s| s.id.as_str()));
            proportions(rec.iteration, &acc, labels, num_levels)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub sequence_pos: u32,
    pub score: f64,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub group: String,
    pub points: Vec<TracePoint>,
}

/// Scores of one group's samples in capture order. Members are
/// `(id, label, sequence_pos)`.
pub fn sequence_trace<S: ScoreLookup + ?Sized>(
    scores: &S,
    group: &str,
    members: &[(String, u32, Option<u32>)],
) -> Result<SequenceTrace> {
    let mut points = members
        .iter()
        .map(|(id, label, pos)| {
            let pos = pos.ok_or_else(|| EvalError::MissingPosition(id.clone()))?;
            let score = scores.score(id).ok_or_else(|| EvalError::MissingScore(id.clone()))?;
            Ok(TracePoint { sequence_pos: pos, score, label: *label })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by_key(|p| p.sequence_pos);
    if let Some(w) = points.windows(2).find(|w| w[0].sequence_pos == w[1].sequence_pos) {
        return Err(EvalError::DuplicatePosition(w[0].sequence_pos));
    }
    Ok(SequenceTrace { group: group.to_string(), points })
}

/// Overall and neighboring test pairs for one test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub overall: TestPairSet,
    pub neighboring: Vec<TestPairSet>,
}

impl TestSuite {
    pub fn build(samples: &[(String, u32)], num_levels: u32, seed: u64) -> Result<Self> {
        Ok(TestSuite {
            overall: build_overall_pairs(samples, num_levels, rng::derive(seed, 1))?,
            neighboring: build_neighboring_pairs(samples, num_levels, rng::derive(seed, 2))?,
        })
    }

    pub fn evaluate<S: ScoreLookup + ?Sized>(&self, scores: &S) -> Result<SuiteResult> {
        let overall = pair_accuracy(scores, &self.overall)?;
        let neighboring = self
            .neighboring
            .iter()
            .map(|set| {
                if set.is_empty() {
                    Ok(None)
                } else {
                    pair_accuracy(scores, set).map(|a| Some((set.name(), a)))
                }
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(SuiteResult { overall, neighboring })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub overall: PairAccuracy,
    pub neighboring: BTreeMap<String, PairAccuracy>,
}

impl SuiteResult {
    pub fn neighboring_accuracies(&self) -> BTreeMap<String, f64> {
        self.neighboring.iter().map(|(k, a)| (k.clone(), a.accuracy)).collect()
    }

    /// Mean of the per-bucket neighboring accuracies.
    pub fn neighboring_mean(&self) -> f64 {
        if self.neighboring.is_empty() {
            return 0.0;
        }
        self.neighboring.values().map(|a| a.accuracy).sum::<f64>() / self.neighboring.len() as f64
    }

    /// Correctness flags of every neighboring pair, buckets concatenated in order.
    pub fn neighboring_flags(&self) -> Vec<bool> {
        self.neighboring.values().flat_map(|a| a.correct.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub labeling_ratio: f64,
    pub overall: f64,
    pub neighboring: BTreeMap<String, f64>,
    pub neighboring_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_traces: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { trials: crate::inference::DEFAULT_TRIALS, seed: 0, max_traces: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fold: usize,
    pub overall_accuracy: f64,
    pub neighboring_accuracies: BTreeMap<String, f64>,
    pub neighboring_mean: f64,
    /// Test-score summaries per level for the final checkpoint.
    pub per_class_score_summary: BTreeMap<u32, FiveNumber>,
    /// Training-pool uncertainty summaries per level for the final checkpoint.
    pub per_class_uncertainty_summary: BTreeMap<u32, FiveNumber>,
    /// Same summaries for the first (initial-round) checkpoint.
    pub initial_score_summary: BTreeMap<u32, FiveNumber>,
    pub initial_uncertainty_summary: BTreeMap<u32, FiveNumber>,
    pub selection_proportions: Vec<ClassProportions>,
    pub acquired_proportions: Vec<ClassProportions>,
    pub mcnemar: Option<McNemarResult>,
    pub accuracy_curve: Vec<CurvePoint>,
    pub traces: Vec<SequenceTrace>,
    pub test_pair_counts: BTreeMap<String, usize>,
}

/// MC-dropout predictions for a set of ids.
pub fn predict_ids(
    params: &crate::model::ParameterSet,
    dataset: &Dataset,
    ids: &[String],
    trials: usize,
    seed: u64,
) -> Result<BTreeMap<String, McPrediction>> {
    let items: Vec<(&str, &[f64])> = ids
        .iter()
        .filter_map(|id| dataset.features_of(id).map(|f| (id.as_str(), f)))
        .collect();
    let preds = predict_all(params, &items, trials, seed)?;
    Ok(items.iter().map(|(id, _)| id.to_string()).zip(preds).collect())
}

/// Everything needed to evaluate one fold's checkpoints.
pub struct RunEvaluation<'a> {
    pub dataset: &'a Dataset,
    pub fold: &'a Fold,
    pub suite: TestSuite,
    pub config: EvalConfig,
}

impl<'a> RunEvaluation<'a> {
    pub fn new(dataset: &'a Dataset, fold: &'a Fold, config: EvalConfig) -> Result<Self> {
        let test = dataset.labeled(&fold.test);
        let suite = TestSuite::build(&test, dataset.num_levels, config.seed)?;
        Ok(RunEvaluation { dataset, fold, suite, config })
    }

    pub fn test_scores(&self, params: &crate::model::ParameterSet) -> Result<BTreeMap<String, McPrediction>> {
        predict_ids(params, self.dataset, &self.fold.test, self.config.trials, rng::derive(self.config.seed, 3))
    }

    pub fn score_checkpoint(&self, params: &crate::model::ParameterSet) -> Result<SuiteResult> {
        self.suite.evaluate(&self.test_scores(params)?)
    }

    pub fn report(&self, checkpoints: &[RoundCheckpoint]) -> Result<EvaluationReport> {
        let first = checkpoints.first().ok_or(EvalError::NoCheckpoints)?;
        let last = checkpoints.last().unwrap();
        let labels = self.dataset.label_map();
        let test = self.dataset.labeled(&self.fold.test);

        let mut curve = Vec::with_capacity(checkpoints.len());
        let mut final_result = None;
        let mut final_scores = BTreeMap::new();
        for cp in checkpoints {
            let scores = self.test_scores(&cp.params)?;
            let res = self.suite.evaluate(&scores)?;
            curve.push(CurvePoint {
                round: cp.round,
                labeling_ratio: cp.labeling_ratio,
                overall: res.overall.accuracy,
                neighboring: res.neighboring_accuracies(),
                neighboring_mean: res.neighboring_mean(),
            });
            final_result = Some(res);
            final_scores = scores;
        }
        let final_result = final_result.unwrap();
        let initial_scores = self.test_scores(&first.params)?;

        let pool_uncertainty = |params: &crate::model::ParameterSet| {
            predict_ids(params, self.dataset, &self.fold.train, self.config.trials, rng::derive(self.config.seed, 4))
                .and_then(|p| uncertainty_by_class(&p, &labels))
        };

        let mut traces = Vec::new();
        for group in self.fold.test_groups.iter() {
            if traces.len() >= self.config.max_traces {
                break;
            }
            let members: Vec<(String, u32, Option<u32>)> = self
                .dataset
                .group_members(group)
                .into_iter()
                .map(|k| (self.dataset.id(k).to_string(), self.dataset.label(k), self.dataset.sequence_pos(k)))
                .collect();
            if members.iter().all(|m| m.2.is_some()) {
                traces.push(sequence_trace(&final_scores, group, &members)?);
            }
        }

        let mut test_pair_counts = BTreeMap::new();
        test_pair_counts.insert("overall".to_string(), self.suite.overall.len());
        for set in &self.suite.neighboring {
            test_pair_counts.insert(set.name(), set.len());
        }

        Ok(EvaluationReport {
            fold: self.fold.index,
            overall_accuracy: final_result.overall.accuracy,
            neighboring_accuracies: final_result.neighboring_accuracies(),
            neighboring_mean: final_result.neighboring_mean(),
            per_class_score_summary: score_distribution_by_class(&final_scores, &test)?,
            per_class_uncertainty_summary: pool_uncertainty(&last.params)?,
            initial_score_summary: score_distribution_by_class(&initial_scores, &test)?,
            initial_uncertainty_summary: pool_uncertainty(&first.params)?,
            selection_proportions: selection_proportions(&last.state, &labels, self.dataset.num_levels),
            acquired_proportions: acquired_proportions(&last.state, &labels, self.dataset.num_levels),
            mcnemar: None,
            accuracy_curve: curve,
            traces,
            test_pair_counts,
        })
    }
}

/// One row source for the CSV tables.
pub struct NamedReport<'a> {
    pub run: &'a str,
    pub report: &'a EvaluationReport,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes the flat CSV tables and returns the paths written.
pub fn write_csv_tables(reports: &[NamedReport<'_>], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let buckets: BTreeSet<String> = reports
        .iter()
        .flat_map(|r| r.report.neighboring_accuracies.keys().cloned())
        .collect();
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };

    let mut t = String::from("run,fold,labeling_ratio,overall");
    for b in &buckets {
        write!(t, ",neighboring_{b}").unwrap();
    }
    t.push_str(",neighboring_mean,mcnemar_b,mcnemar_c,mcnemar_statistic,mcnemar_chi_square_p,mcnemar_p\n");
    for r in reports {
        let rep = r.report;
        let ratio = rep.accuracy_curve.last().map_or(0.0, |c| c.labeling_ratio);
        write!(t, "{},{},{},{}", r.run, rep.fold, fmt_f(ratio), fmt_f(rep.overall_accuracy)).unwrap();
        for b in &buckets {
            let v = rep.neighboring_accuracies.get(b).map(|&v| fmt_f(v)).unwrap_or_default();
            write!(t, ",{v}").unwrap();
        }
        write!(t, ",{}", fmt_f(rep.neighboring_mean)).unwrap();
        match &rep.mcnemar {
            Some(m) => writeln!(
                t,
                ",{},{},{},{},{}",
                m.b,
                m.c,
                fmt_f(m.statistic),
                fmt_f(m.chi_square_p),
                fmt_f(m.p_value)
            )
            .unwrap(),
            None => t.push_str(",,,,,\n"),
        }
    }
    emit("accuracy_summary.csv", t)?;

    let mut c = String::from("run,fold,round,labeling_ratio,overall");
    for b in &buckets {
        write!(c, ",neighboring_{b}").unwrap();
    }
    c.push_str(",neighboring_mean\n");
    for r in reports {
        for p in &r.report.accuracy_curve {
            write!(c, "{},{},{},{},{}", r.run, r.report.fold, p.round, fmt_f(p.labeling_ratio), fmt_f(p.overall)).unwrap();
            for b in &buckets {
                let v = p.neighboring.get(b).map(|&v| fmt_f(v)).unwrap_or_default();
                write!(c, ",{v}").unwrap();
            }
            writeln!(c, ",{}", fmt_f(p.neighboring_mean)).unwrap();
        }
    }
    emit("accuracy_curve.csv", c)?;

    let summary_rows = |out: &mut String, run: &str, fold: usize, stage: &str, m: &BTreeMap<u32, FiveNumber>| {
        for (class, s) in m {
            writeln!(
                out,
                "{run},{fold},{stage},{class},{},{},{},{},{},{}",
                s.count,
                fmt_f(s.min),
                fmt_f(s.q1),
                fmt_f(s.median),
                fmt_f(s.q3),
                fmt_f(s.max)
            )
            .unwrap();
        }
    };
    let mut s5 = String::from("run,fold,stage,class,count,min,q1,median,q3,max\n");
    let mut s7 = s5.clone();
    for r in reports {
        summary_rows(&mut s5, r.run, r.report.fold, "initial", &r.report.initial_score_summary);
        summary_rows(&mut s5, r.run, r.report.fold, "final", &r.report.per_class_score_summary);
        summary_rows(&mut s7, r.run, r.report.fold, "initial", &r.report.initial_uncertainty_summary);
        summary_rows(&mut s7, r.run, r.report.fold, "final", &r.report.per_class_uncertainty_summary);
    }
    emit("score_distribution.csv", s5)?;
    emit("uncertainty_distribution.csv", s7)?;

    let mut s6 = String::from("run,fold,iteration,scope,class,count,fraction\n");
    for r in reports {
        for (scope, rows) in [("accumulated", &r.report.selection_proportions), ("acquired", &r.report.acquired_proportions)] {
            for p in rows.iter() {
                for (class, (n, f)) in p.counts.iter().zip(&p.fractions).enumerate() {
                    writeln!(s6, "{},{},{},{scope},{class},{n},{}", r.run, r.report.fold, p.iteration, fmt_f(*f)).unwrap();
                }
            }
        }
    }
    emit("selection_proportions.csv", s6)?;

    let mut s8 = String::from("run,fold,group,sequence_pos,score,label\n");
    for r in reports {
        for tr in &r.report.traces {
            for p in &tr.points {
                writeln!(s8, "{},{},{},{},{},{}", r.run, r.report.fold, tr.group, p.sequence_pos, fmt_f(p.score), p.label)
                    .unwrap();
            }
        }
    }
    emit("sequence_traces.csv", s8)?;
    Ok(written)
}
