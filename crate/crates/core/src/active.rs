//! The active-learning loop.
//!
//! Step 1 draws `r%` of the training pool at random and pairs each drawn id
//! with one random partner. Each round then trains a fresh scorer on every
//! labeled pair, estimates MC-dropout variance on the unlabeled ids, selects
//! the `s%` most uncertain, pairs them the same way and asks the oracle for
//! relative labels. Percentages are of the full pool, so after round `k`
//! `floor(rN/100) + k * floor(sN/100)` ids are labeled.
//!
//! [`ActiveLoop`] is an explicit state machine so that a human oracle can
//! defer: the loop stops at the annotation barrier, serializes, and resumes
//! once labels arrive.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_ids, Dataset};
use crate::eval::{build_neighboring_pairs, build_overall_pairs, build_unbalanced_pairs};
use crate::inference::{predict_all, DEFAULT_TRIALS};
use crate::loss::{AnnotatedPair, LossError, RelativeLabel};
use crate::model::{init_params, ModelError, NetworkConfig, ParameterSet};
use crate::rng::{self, stream};
use crate::train::{train, IndexedPair, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("need at least 2 ids to pair, got {0}")]
    TooFewIds(usize),
    #[error("cannot select {wanted} ids from {available} unlabeled")]
    Exhausted { wanted: usize, available: usize },
    #[error("operation not allowed in phase {0}")]
    Phase(&'static str),
    #[error("annotation mismatch: {0}")]
    Annotation(String),
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("loop suspended waiting for labels in round {}", .0.round())]
    Suspended(Box<ActiveLoop>),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LoopError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Top MC-dropout variance.
    #[default]
    Uncertainty,
    /// Uniformly random incremental sampling.
    Random,
    /// One round on the whole pool.
    AllData,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uncertainty" => Ok(Strategy::Uncertainty),
            "random" => Ok(Strategy::Random),
            "all-data" => Ok(Strategy::AllData),
            _ => Err(format!("unknown strategy `{s}` (expected uncertainty, random or all-data)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uncertainty => "uncertainty",
            Strategy::Random => "random",
            Strategy::AllData => "all-data",
        })
    }
}

/// Who newly selected ids are paired with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartnerScope {
    /// Among the ids selected in the same round.
    #[default]
    Selected,
    /// Among every labeled id, including the new ones.
    Labeled,
}

impl FromStr for PartnerScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "selected" => Ok(PartnerScope::Selected),
            "labeled" => Ok(PartnerScope::Labeled),
            _ => Err(format!("unknown partner scope `{s}` (expected selected or labeled)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Initial labeling percentage `r`.
    pub initial_pct: f64,
    /// Per-iteration percentage `s`.
    pub step_pct: f64,
    /// Iteration count `K`.
    pub iterations: usize,
    /// MC-dropout trials `T`.
    pub trials: usize,
    /// Per-round training settings; the seed field is ignored.
    pub train: TrainConfig,
    pub warm_start: bool,
    pub seed: u64,
    pub strategy: Strategy,
    pub partners: PartnerScope,
    /// Restrict all pairing to one precomputed partner per pool id.
    pub candidate_pool: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            initial_pct: 20.0,
            step_pct: 5.0,
            iterations: 6,
            trials: DEFAULT_TRIALS,
            train: TrainConfig::default(),
            warm_start: false,
            seed: 0,
            strategy: Strategy::Uncertainty,
            partners: PartnerScope::Selected,
            candidate_pool: false,
        }
    }
}

impl LoopConfig {
    /// `all-data` overrides the schedule to one round over the whole pool.
    pub fn effective(&self) -> LoopConfig {
        let mut c = self.clone();
        if c.strategy == Strategy::AllData {
            c.initial_pct = 100.0;
            c.iterations = 0;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.effective();
        let bad = |m: String| Err(LoopError::Config(m));
        if !(c.initial_pct > 0.0 && c.initial_pct <= 100.0) {
            return bad(format!("r = {} must be in (0, 100]", c.initial_pct));
        }
        if !(c.step_pct >= 0.0 && c.step_pct.is_finite()) {
            return bad(format!("s = {} must be non-negative", c.step_pct));
        }
        if c.initial_pct + c.step_pct * c.iterations as f64 > 100.0 + 1e-9 {
            return bad(format!("r + sK = {} exceeds 100", c.initial_pct + c.step_pct * c.iterations as f64));
        }
        if c.trials == 0 {
            return bad("T must be at least 1".into());
        }
        c.train.validate()?;
        Ok(())
    }
}

/// `floor(pct * n / 100)`, tolerant of binary rounding in `pct`.
pub fn percent_count(pct: f64, n: usize) -> usize {
    (pct * n as f64 / 100.0 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedId {
    pub id: String,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub iteration: usize,
    pub selected: Vec<SelectedId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelingState {
    pub pool_size: usize,
    pub labeled_pairs: Vec<AnnotatedPair>,
    pub labeled_ids: BTreeSet<String>,
    pub unlabeled_ids: BTreeSet<String>,
    pub k: usize,
    pub initial_ids: Vec<String>,
    pub history: Vec<SelectionRecord>,
}

impl LabelingState {
    pub fn labeling_ratio(&self) -> f64 {
        if self.pool_size == 0 {
            0.0
        } else {
            self.labeled_ids.len() as f64 / self.pool_size as f64
        }
    }

    /// Checks the structural invariants. In candidate-pool mode a pair's
    /// partner need not be labeled itself, so pair membership is not checked.
    pub fn check(&self, candidate_pool: bool) -> std::result::Result<(), String> {
        if let Some(id) = self.labeled_ids.intersection(&self.unlabeled_ids).next() {
            return Err(format!("`{id}` is both labeled and unlabeled"));
        }
        if self.history.len() != self.k {
            return Err(format!("history has {} records at k = {}", self.history.len(), self.k));
        }
        if !candidate_pool {
            for p in &self.labeled_pairs {
                for id in [&p.i, &p.j] {
                    if !self.labeled_ids.contains(id) {
                        return Err(format!("pair member `{id}` is not labeled"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// An unlabeled pair awaiting an oracle answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairQuery {
    pub i: String,
    pub j: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRound {
    pub round: usize,
    pub queries: Vec<PairQuery>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Simulated,
    Human,
}

/// One answered pair as persisted in `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub i: String,
    pub j: String,
    pub label: RelativeLabel,
    pub round: usize,
    pub source: AnnotationSource,
    /// Unix seconds; `null` for simulated answers so runs stay byte-identical.
    pub timestamp: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

#[derive(Debug)]
pub enum OracleError {
    /// Labels are not available yet; the loop should suspend.
    Deferred,
    Failed(String),
}

pub trait Oracle {
    fn annotate(&mut self, round: &PendingRound) -> std::result::Result<Vec<AnnotationRecord>, OracleError>;
}

/// Relative label from hidden ordinal levels.
pub fn simulated_oracle(level_i: u32, level_j: u32) -> RelativeLabel {
    RelativeLabel::from_levels(level_i, level_j)
}

/// Answers from hidden ground-truth levels, instantly.
pub struct SimulatedOracle {
    labels: BTreeMap<String, u32>,
}

impl SimulatedOracle {
    pub fn new(dataset: &Dataset) -> Self {
        SimulatedOracle { labels: dataset.label_map() }
    }
}

impl Oracle for SimulatedOracle {
    fn annotate(&mut self, round: &PendingRound) -> std::result::Result<Vec<AnnotationRecord>, OracleError> {
        round
            .queries
            .iter()
            .map(|q| {
                let level = |id: &str| {
                    self.labels.get(id).copied().ok_or_else(|| OracleError::Failed(format!("no hidden label for `{id}`")))
                };
                Ok(AnnotationRecord {
                    i: q.i.clone(),
                    j: q.j.clone(),
                    label: simulated_oracle(level(&q.i)?, level(&q.j)?),
                    round: round.round,
                    source: AnnotationSource::Simulated,
                    timestamp: None,
                    pair_id: None,
                    annotator: None,
                })
            })
            .collect()
    }
}

/// Uniform sample of `floor(r N / 100)` pool ids, returned sorted.
pub fn initial_sample(pool: &[String], pct: f64, seed: u64) -> Result<Vec<String>> {
    let count = percent_count(pct, pool.len());
    if count < 2 {
        return Err(LoopError::TooFewIds(count));
    }
    let mut picked = sample_ids(pool, count, &mut rng::rng(seed));
    picked.sort();
    Ok(picked)
}

/// One pair per id in `ids`, partner drawn uniformly from `candidates`
/// minus the id itself. An exact repeat of an ordered pair is redrawn once.
pub fn make_pairs_with(ids: &[String], candidates: &[String], seed: u64) -> Result<Vec<PairQuery>> {
    if ids.len() < 2 && candidates.len() < 2 {
        return Err(LoopError::TooFewIds(ids.len()));
    }
    let mut rng = rng::rng(seed);
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let others: Vec<&String> = candidates.iter().filter(|c| *c != id).collect();
        if others.is_empty() {
            return Err(LoopError::TooFewIds(candidates.len()));
        }
        let mut partner = others[rng.random_range(0..others.len())];
        if seen.contains(&(id.clone(), partner.clone())) {
            partner = others[rng.random_range(0..others.len())];
        }
        seen.insert((id.clone(), partner.clone()));
        out.push(PairQuery { i: id.clone(), j: partner.clone() });
    }
    Ok(out)
}

/// Exactly `|ids|` pairs, each id paired with a random other id.
pub fn make_pairs(ids: &[String], seed: u64) -> Result<Vec<PairQuery>> {
    if ids.len() < 2 {
        return Err(LoopError::TooFewIds(ids.len()));
    }
    make_pairs_with(ids, ids, seed)
}

/// The `m` ids with the largest variance, ties by ascending id.
pub fn top_uncertain(predictions: &[(String, f64)], m: usize) -> Vec<String> {
    let mut order: Vec<&(String, f64)> = predictions.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.into_iter().take(m).map(|p| p.0.clone()).collect()
}

pub fn select_uncertain(predictions: &[(String, f64)], step_pct: f64, pool_size: usize) -> Result<Vec<String>> {
    let m = percent_count(step_pct, pool_size);
    if m > predictions.len() {
        return Err(LoopError::Exhausted { wanted: m, available: predictions.len() });
    }
    Ok(top_uncertain(predictions, m))
}

/// Dataset, training pool and validation pairs for one fold.
pub struct LoopData {
    pub dataset: Dataset,
    pub pool: Vec<String>,
    /// `(higher, lower)` dataset indices for early stopping: balanced random
    /// pairs plus every adjacent-level pair of the validation split.
    pub validation: Vec<(usize, usize)>,
}

impl LoopData {
    pub fn new(dataset: Dataset, pool: Vec<String>, val_ids: &[String], seed: u64) -> Result<Self> {
        if let Some(id) = pool.iter().chain(val_ids).find(|id| dataset.index_of(id).is_none()) {
            return Err(LoopError::Data(format!("unknown sample id `{id}`")));
        }
        let val = dataset.labeled(val_ids);
        let mut pairs = match build_overall_pairs(&val, dataset.num_levels, seed) {
            Ok(s) => s.pairs,
            Err(_) => build_unbalanced_pairs(&val, seed).pairs,
        };
        // the adjacent-level pairs add signal from every validation sample
        if let Ok(sets) = build_neighboring_pairs(&val, dataset.num_levels, rng::derive(seed, 1)) {
            pairs.extend(sets.into_iter().flat_map(|s| s.pairs));
        }
        let validation = pairs
            .iter()
            .map(|p| (dataset.index_of(&p.higher).unwrap(), dataset.index_of(&p.lower).unwrap()))
            .collect();
        Ok(LoopData { dataset, pool, validation })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabels { pending: PendingRound },
    ReadyToTrain,
    Done,
}

/// Parameters, labeling state and the round's annotations after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundCheckpoint {
    pub round: usize,
    pub labeling_ratio: f64,
    pub params: ParameterSet,
    pub state: LabelingState,
    pub annotations: Vec<AnnotationRecord>,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Drive {
    Finished,
    /// Waiting on the oracle for this round.
    Suspended { round: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveLoop {
    pub network: NetworkConfig,
    pub config: LoopConfig,
    pub state: LabelingState,
    pub params: Option<ParameterSet>,
    pub phase: Phase,
    /// Annotations received for the round currently being trained.
    pub round_annotations: Vec<AnnotationRecord>,
    /// Fixed partner of each pool id in candidate-pool mode.
    pub candidate_partners: Option<BTreeMap<String, String>>,
}

impl ActiveLoop {
    pub fn new(data: &LoopData, network: NetworkConfig, config: LoopConfig) -> Result<Self> {
        config.validate()?;
        network.validate()?;
        if network.input_dim() != data.dataset.dim() {
            return Err(LoopError::Data(format!(
                "network expects {} inputs but samples have {}",
                network.input_dim(),
                data.dataset.dim()
            )));
        }
        if data.pool.len() < 2 {
            return Err(LoopError::TooFewIds(data.pool.len()));
        }
        let eff = config.effective();
        let seed = config.seed;
        let initial = initial_sample(&data.pool, eff.initial_pct, rng::derive(seed, stream::INITIAL_SAMPLE))?;
        let candidate_partners = if config.candidate_pool || config.strategy == Strategy::AllData {
            let pairs = make_pairs(&data.pool, rng::derive(seed, stream::CANDIDATE_POOL))?;
            Some(pairs.into_iter().map(|q| (q.i, q.j)).collect::<BTreeMap<_, _>>())
        } else {
            None
        };
        let queries = match &candidate_partners {
            Some(map) => initial.iter().map(|id| PairQuery { i: id.clone(), j: map[id].clone() }).collect(),
            None => make_pairs(&initial, rng::derive(seed, stream::INITIAL_PAIRS))?,
        };
        let labeled_ids: BTreeSet<String> = initial.iter().cloned().collect();
        let unlabeled_ids = data.pool.iter().filter(|id| !labeled_ids.contains(*id)).cloned().collect();
        Ok(ActiveLoop {
            network,
            config,
            state: LabelingState {
                pool_size: data.pool.len(),
                labeled_pairs: Vec::new(),
                labeled_ids,
                unlabeled_ids,
                k: 0,
                initial_ids: initial,
                history: Vec::new(),
            },
            params: None,
            phase: Phase::AwaitingLabels { pending: PendingRound { round: 0, queries } },
            round_annotations: Vec::new(),
            candidate_partners,
        })
    }

    /// Round currently being labeled or trained.
    pub fn round(&self) -> usize {
        self.state.k
    }

    pub fn pending(&self) -> Option<&PendingRound> {
        match &self.phase {
            Phase::AwaitingLabels { pending } => Some(pending),
            _ => None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Accepts the oracle's answers for the pending round. Every query must be
    /// answered exactly once; an answer given in swapped orientation is
    /// normalized back to the query's orientation.
    pub fn supply_labels(&mut self, records: Vec<AnnotationRecord>) -> Result<()> {
        let pending = match &self.phase {
            Phase::AwaitingLabels { pending } => pending.clone(),
            Phase::ReadyToTrain => return Err(LoopError::Phase("ready_to_train")),
            Phase::Done => return Err(LoopError::Phase("done")),
        };
        if records.len() != pending.queries.len() {
            return Err(LoopError::Annotation(format!(
                "{} answers for {} queries",
                records.len(),
                pending.queries.len()
            )));
        }
        let mut remaining: Vec<Option<&PairQuery>> = pending.queries.iter().map(Some).collect();
        let mut normalized = Vec::with_capacity(records.len());
        for mut rec in records {
            let slot = remaining.iter_mut().find(|q| {
                q.is_some_and(|q| (q.i == rec.i && q.j == rec.j) || (q.i == rec.j && q.j == rec.i))
            });
            let Some(slot) = slot else {
                return Err(LoopError::Annotation(format!("unexpected or repeated pair ({}, {})", rec.i, rec.j)));
            };
            let q = slot.take().unwrap();
            if rec.i != q.i {
                std::mem::swap(&mut rec.i, &mut rec.j);
                rec.label = rec.label.swapped();
            }
            rec.round = pending.round;
            normalized.push(rec);
        }
        for rec in &normalized {
            self.state.labeled_pairs.push(AnnotatedPair::new(rec.i.clone(), rec.j.clone(), rec.label)?);
        }
        self.round_annotations = normalized;
        self.phase = Phase::ReadyToTrain;
        Ok(())
    }

    fn training_pairs(&self, data: &LoopData) -> Result<Vec<IndexedPair>> {
        self.state
            .labeled_pairs
            .iter()
            .map(|p| {
                let idx = |id: &str| {
                    data.dataset.index_of(id).ok_or_else(|| LoopError::Data(format!("unknown sample id `{id}`")))
                };
                Ok(IndexedPair { left: idx(&p.i)?, right: idx(&p.j)?, label: p.label })
            })
            .collect()
    }

    /// Trains on every labeled pair, emits the round checkpoint and, unless
    /// the schedule is complete, selects and pairs the next batch.
    pub fn train_round(&mut self, data: &LoopData) -> Result<RoundCheckpoint> {
        if self.phase != Phase::ReadyToTrain {
            return Err(LoopError::Phase(if self.is_done() { "done" } else { "awaiting_labels" }));
        }
        let seed = self.config.seed;
        let k = self.state.k;
        let start = match (&self.params, self.config.warm_start) {
            (Some(p), true) => p.clone(),
            _ => init_params(&self.network, rng::derive(seed, stream::INIT))?,
        };
        let pairs = self.training_pairs(data)?;
        let tc = TrainConfig { seed: rng::derive(seed, stream::TRAIN + k as u64), ..self.config.train.clone() };
        let (params, report) = train(start, &data.dataset, &pairs, &data.validation, &tc)?;
        let checkpoint = RoundCheckpoint {
            round: k,
            labeling_ratio: self.state.labeling_ratio(),
            params: params.clone(),
            state: self.state.clone(),
            annotations: std::mem::take(&mut self.round_annotations),
            train: report,
        };
        self.params = Some(params);
        if k < self.config.effective().iterations {
            self.propose(data)?;
        } else {
            self.phase = Phase::Done;
        }
        Ok(checkpoint)
    }

    fn propose(&mut self, data: &LoopData) -> Result<()> {
        let params = self.params.as_ref().expect("trained before proposing");
        let seed = self.config.seed;
        let k = self.state.k;
        let n = self.state.pool_size;
        let unlabeled: Vec<String> = self.state.unlabeled_ids.iter().cloned().collect();
        let items: Vec<(&str, &[f64])> =
            unlabeled.iter().map(|id| (id.as_str(), data.dataset.features_of(id).unwrap())).collect();
        let preds = predict_all(params, &items, self.config.trials, rng::derive(seed, stream::PREDICT + k as u64))?;
        let variances: Vec<(String, f64)> = unlabeled.iter().cloned().zip(preds.iter().map(|p| p.variance)).collect();
        let m = percent_count(self.config.step_pct, n).min(unlabeled.len());

        let selected = match self.config.strategy {
            Strategy::Random => {
                let mut r = rng::rng(rng::derive(seed, stream::SELECT + k as u64));
                let mut picked = unlabeled.clone();
                let (chosen, _) = picked.partial_shuffle(&mut r, m);
                let mut chosen = chosen.to_vec();
                chosen.sort();
                chosen
            }
            _ => top_uncertain(&variances, m),
        };
        let var_of: BTreeMap<&str, f64> = variances.iter().map(|(id, v)| (id.as_str(), *v)).collect();
        let record = SelectionRecord {
            iteration: k + 1,
            selected: selected.iter().map(|id| SelectedId { id: id.clone(), variance: var_of[id.as_str()] }).collect(),
        };
        for id in &selected {
            self.state.unlabeled_ids.remove(id);
            self.state.labeled_ids.insert(id.clone());
        }
        let pair_seed = rng::derive(seed, stream::PAIRS + k as u64);
        let queries = match (&self.candidate_partners, self.config.partners) {
            (Some(map), _) => selected.iter().map(|id| PairQuery { i: id.clone(), j: map[id].clone() }).collect(),
            (None, PartnerScope::Labeled) => {
                let all: Vec<String> = self.state.labeled_ids.iter().cloned().collect();
                make_pairs_with(&selected, &all, pair_seed)?
            }
            (None, PartnerScope::Selected) if selected.len() >= 2 => make_pairs(&selected, pair_seed)?,
            (None, PartnerScope::Selected) if !selected.is_empty() => {
                // a lone selected id is paired with the labeled set instead
                let all: Vec<String> = self.state.labeled_ids.iter().cloned().collect();
                make_pairs_with(&selected, &all, pair_seed)?
            }
            (None, PartnerScope::Selected) => Vec::new(),
        };
        self.state.history.push(record);
        self.state.k = k + 1;
        self.phase = if queries.is_empty() {
            Phase::ReadyToTrain
        } else {
            Phase::AwaitingLabels { pending: PendingRound { round: k + 1, queries } }
        };
        Ok(())
    }

    /// Runs until the schedule completes or the oracle defers, handing every
    /// checkpoint to `sink`.
    pub fn drive<F>(&mut self, data: &LoopData, oracle: &mut dyn Oracle, mut sink: F) -> Result<Drive>
    where
        F: FnMut(&RoundCheckpoint) -> Result<()>,
    {
        loop {
            match &self.phase {
                Phase::Done => return Ok(Drive::Finished),
                Phase::AwaitingLabels { pending } => match oracle.annotate(pending) {
                    Ok(records) => self.supply_labels(records)?,
                    Err(OracleError::Deferred) => return Ok(Drive::Suspended { round: pending.round }),
                    Err(OracleError::Failed(m)) => return Err(LoopError::Oracle(m)),
                },
                Phase::ReadyToTrain => {
                    let cp = self.train_round(data)?;
                    sink(&cp)?;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoopOutcome {
    pub params: ParameterSet,
    pub state: LabelingState,
    pub checkpoints: Vec<RoundCheckpoint>,
}

/// Runs the whole schedule. A deferring oracle yields
/// [`LoopError::Suspended`] carrying the resumable loop.
pub fn run_loop(data: &LoopData, network: NetworkConfig, config: LoopConfig, oracle: &mut dyn Oracle) -> Result<LoopOutcome> {
    let mut lp = ActiveLoop::new(data, network, config)?;
    let mut checkpoints = Vec::new();
    match lp.drive(data, oracle, |cp| {
        checkpoints.push(cp.clone());
        Ok(())
    })? {
        Drive::Finished => Ok(LoopOutcome {
            params: lp.params.clone().expect("at least one round trained"),
            state: lp.state,
            checkpoints,
        }),
        Drive::Suspended { .. } => Err(LoopError::Suspended(Box::new(lp))),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    round: usize,
    labeling_ratio: f64,
    state: LabelingState,
    train: TrainReport,
}

pub fn round_dir(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round:02}"))
}

pub fn annotations_to_jsonl(records: &[AnnotationRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("annotation serializes") + "\n")
        .collect()
}

/// Writes `round_kk/{params.json, state.json, annotations.jsonl}` under `dir`.
pub fn write_checkpoint(dir: &Path, cp: &RoundCheckpoint) -> Result<PathBuf> {
    let rd = round_dir(dir, cp.round);
    fs::create_dir_all(&rd)?;
    cp.params.save(&rd.join("params.json"))?;
    let state = CheckpointState {
        round: cp.round,
        labeling_ratio: cp.labeling_ratio,
        state: cp.state.clone(),
        train: cp.train.clone(),
    };
    fs::write(rd.join("state.json"), serde_json::to_string_pretty(&state).expect("state serializes") + "\n")?;
    fs::write(rd.join("annotations.jsonl"), annotations_to_jsonl(&cp.annotations))?;
    Ok(rd)
}

pub fn read_checkpoint(round_dir: &Path) -> Result<RoundCheckpoint> {
    let err = |message: String| LoopError::Checkpoint { path: round_dir.to_path_buf(), message };
    let params = ParameterSet::load(&round_dir.join("params.json")).map_err(|e| err(e.to_string()))?;
    let text = fs::read_to_string(round_dir.join("state.json")).map_err(|e| err(format!("state.json: {e}")))?;
    let st: CheckpointState = serde_json::from_str(&text).map_err(|e| err(format!("state.json: {e}")))?;
    let ann = fs::read_to_string(round_dir.join("annotations.jsonl")).map_err(|e| err(format!("annotations.jsonl: {e}")))?;
    let annotations = ann
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| err(format!("annotations.jsonl: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundCheckpoint {
        round: st.round,
        labeling_ratio: st.labeling_ratio,
        params,
        state: st.state,
        annotations,
        train: st.train,
    })
}

/// Every `round_kk` checkpoint under `dir`, in round order.
pub fn read_checkpoints(dir: &Path) -> Result<Vec<RoundCheckpoint>> {
    let entries = fs::read_dir(dir).map_err(|e| LoopError::Checkpoint { path: dir.to_path_buf(), message: e.to_string() })?;
    let mut rounds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("round_")))
        .collect();
    rounds.sort();
    if rounds.is_empty() {
        return Err(LoopError::Checkpoint { path: dir.to_path_buf(), message: "no round_* checkpoints".into() });
    }
    rounds.iter().map(|p| read_checkpoint(p)).collect()
}
