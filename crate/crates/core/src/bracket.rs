//! Single-bracket successive halving.
//!
//! A bracket is a ladder of rungs; rung `k` trains configurations to
//! `r * eta^(s + k)` resource units. The same [`BracketState`] drives both the
//! synchronous schedule ([`BracketState::sync_sha_next_rung`]) and the
//! asynchronous one ([`BracketState::asha_get_job`]).
//!
//! Decisions and state changes are split: `*_decide` methods only look at the
//! state, and the `add_sampled` / `promote` / `record` methods apply a decision.
//! The orchestrator journals each decision between the two steps; replay calls
//! the apply methods directly and never re-decides a promotion.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ConfigId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BracketError {
    #[error("invalid bracket parameters: {0}")]
    InvalidParams(String),
    #[error("bracket needs at least {required} configurations, got {n}")]
    InfeasibleWidth { n: u64, required: u64 },
    #[error("config {config_id} is not pending in rung {rung}")]
    UnknownJob { config_id: ConfigId, rung: usize },
    #[error("config {config_id} already has a result in rung {rung}")]
    DuplicateResult { config_id: ConfigId, rung: usize },
    #[error("config {config_id} cannot be promoted from rung {rung}: {reason}")]
    NotPromotable { config_id: ConfigId, rung: usize, reason: &'static str },
    #[error("config {0} was already sampled into this bracket")]
    AlreadySampled(ConfigId),
    #[error("bottom rung is at its width limit")]
    WidthExhausted,
    #[error("rung {0} does not exist")]
    NoSuchRung(usize),
}

/// `r`, `R`, `eta` and the minimum early-stopping rate `s` of one bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BracketParams {
    pub min_resource: u64,
    pub max_resource: u64,
    pub eta: u64,
    pub early_stopping_rate: u32,
    /// Keep promoting past `max_resource`, growing the resource by `eta` per rung.
    #[serde(default)]
    pub infinite_horizon: bool,
}

/// `floor(log_eta(max / min))` computed in integers.
pub fn max_early_stopping_rate(min_resource: u64, max_resource: u64, eta: u64) -> u32 {
    let mut k = 0;
    let mut res = min_resource;
    while let Some(next) = res.checked_mul(eta) {
        if next > max_resource {
            break;
        }
        res = next;
        k += 1;
    }
    k
}

impl BracketParams {
    pub fn new(min_resource: u64, max_resource: u64, eta: u64, early_stopping_rate: u32) -> Result<Self, BracketError> {
        let p = Self { min_resource, max_resource, eta, early_stopping_rate, infinite_horizon: false };
        p.validate()?;
        Ok(p)
    }

    pub fn with_infinite_horizon(mut self, on: bool) -> Self {
        self.infinite_horizon = on;
        self
    }

    pub fn validate(&self) -> Result<(), BracketError> {
        if self.min_resource < 1 {
            return Err(BracketError::InvalidParams("minimum resource must be at least 1".into()));
        }
        if self.max_resource < self.min_resource {
            return Err(BracketError::InvalidParams("maximum resource must be at least the minimum resource".into()));
        }
        if self.eta < 2 {
            return Err(BracketError::InvalidParams("reduction factor must be at least 2".into()));
        }
        let s_max = self.s_max();
        if self.early_stopping_rate > s_max {
            return Err(BracketError::InvalidParams(format!(
                "early-stopping rate {} exceeds the maximum {s_max}",
                self.early_stopping_rate
            )));
        }
        Ok(())
    }

    pub fn s_max(&self) -> u32 {
        max_early_stopping_rate(self.min_resource, self.max_resource, self.eta)
    }

    /// Number of rungs up to and including the one at the largest resource `<= R`.
    pub fn finite_rung_count(&self) -> usize {
        (self.s_max() - self.early_stopping_rate) as usize + 1
    }

    pub fn rung_resource(&self, rung: usize) -> u64 {
        let exp = self.early_stopping_rate as u64 + rung as u64;
        self.eta
            .checked_pow(exp.try_into().unwrap_or(u32::MAX))
            .and_then(|f| f.checked_mul(self.min_resource))
            .unwrap_or(u64::MAX)
    }

    /// The minimum number of configurations that lets one reach the top rung.
    pub fn min_width(&self) -> u64 {
        self.eta.saturating_pow(self.s_max() - self.early_stopping_rate)
    }
}

/// One row of the synchronous schedule: `configs` trained to `resource`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungPlan {
    pub configs: u64,
    pub resource: u64,
}

impl RungPlan {
    pub fn budget(&self) -> u64 {
        self.configs * self.resource
    }
}

/// Per-rung sizes and resources of a synchronous bracket started with `n` configurations.
pub fn rung_schedule(n: u64, params: &BracketParams) -> Result<Vec<RungPlan>, BracketError> {
    params.validate()?;
    let required = params.min_width();
    if n < required {
        return Err(BracketError::InfeasibleWidth { n, required });
    }
    let mut configs = n;
    Ok((0..params.finite_rung_count())
        .map(|i| {
            let row = RungPlan { configs, resource: params.rung_resource(i) };
            configs /= params.eta;
            row
        })
        .collect())
}

/// Sum of rung training times in units of `time(R)`, training each rung from scratch.
pub fn completion_time_ratio(params: &BracketParams) -> Ratio<u64> {
    (0..params.finite_rung_count())
        .map(|k| Ratio::new(params.rung_resource(k), params.max_resource))
        .fold(Ratio::from_integer(0), |a, b| a + b)
}

/// NaN and -0.0 are folded so losses have a total order; NaN counts as the worst loss.
pub fn normalize_loss(loss: f64) -> f64 {
    if loss.is_nan() {
        f64::INFINITY
    } else if loss == 0.0 {
        0.0
    } else {
        loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LossKey(f64);

impl Eq for LossKey {}

impl PartialOrd for LossKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for LossKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RungRecord", into = "RungRecord")]
pub struct RungState {
    pub index: usize,
    pub resource: u64,
    completed: BTreeMap<ConfigId, f64>,
    pending: BTreeSet<ConfigId>,
    promoted: BTreeSet<ConfigId>,
    // Completed configs ordered by (loss, id), all and not-yet-promoted.
    ranked: BTreeSet<(LossKey, ConfigId)>,
    unpromoted: BTreeSet<(LossKey, ConfigId)>,
}

#[derive(Serialize, Deserialize)]
struct RungRecord {
    index: usize,
    resource: u64,
    #[serde(with = "crate::serde_f64::loss_map")]
    completed: BTreeMap<ConfigId, f64>,
    pending: BTreeSet<ConfigId>,
    promoted: BTreeSet<ConfigId>,
}

impl From<RungRecord> for RungState {
    fn from(r: RungRecord) -> Self {
        let mut rung = RungState::new(r.index, r.resource);
        for (&id, &loss) in &r.completed {
            rung.ranked.insert((LossKey(loss), id));
            if !r.promoted.contains(&id) {
                rung.unpromoted.insert((LossKey(loss), id));
            }
        }
        rung.completed = r.completed;
        rung.pending = r.pending;
        rung.promoted = r.promoted;
        rung
    }
}

impl From<RungState> for RungRecord {
    fn from(r: RungState) -> Self {
        Self { index: r.index, resource: r.resource, completed: r.completed, pending: r.pending, promoted: r.promoted }
    }
}

impl RungState {
    pub fn new(index: usize, resource: u64) -> Self {
        Self {
            index,
            resource,
            completed: BTreeMap::new(),
            pending: BTreeSet::new(),
            promoted: BTreeSet::new(),
            ranked: BTreeSet::new(),
            unpromoted: BTreeSet::new(),
        }
    }

    pub fn completed(&self) -> &BTreeMap<ConfigId, f64> {
        &self.completed
    }

    pub fn pending(&self) -> &BTreeSet<ConfigId> {
        &self.pending
    }

    pub fn promoted(&self) -> &BTreeSet<ConfigId> {
        &self.promoted
    }

    pub fn width(&self) -> usize {
        self.completed.len() + self.pending.len()
    }

    pub fn contains(&self, id: ConfigId) -> bool {
        self.completed.contains_key(&id) || self.pending.contains(&id)
    }

    /// The `count` lowest-loss completed configurations, ties to the lower id.
    pub fn top_k(&self, count: usize) -> Vec<ConfigId> {
        self.ranked.iter().take(count).map(|&(_, id)| id).collect()
    }

    /// How many configurations of this rung may be promoted in total right now.
    pub fn promotion_quota(&self, eta: u64) -> usize {
        self.completed.len() / eta as usize
    }

    /// Best unpromoted member of `top_k(quota)`, provided the quota is not used up.
    pub fn next_promotable(&self, eta: u64) -> Option<ConfigId> {
        // Every completed config ranked above the best unpromoted one is itself
        // promoted, so that config ranks at most |promoted| and therefore sits
        // inside the top `quota` whenever |promoted| < quota.
        if self.promoted.len() >= self.promotion_quota(eta) {
            return None;
        }
        self.unpromoted.first().map(|&(_, id)| id)
    }

    pub fn promotable_count(&self, eta: u64) -> usize {
        self.promotion_quota(eta)
            .saturating_sub(self.promoted.len())
            .min(self.unpromoted.len())
    }

    /// Position of `id` in the loss ranking of the completed set.
    pub fn rank_of(&self, id: ConfigId) -> Option<usize> {
        let loss = *self.completed.get(&id)?;
        Some(self.ranked.range(..(LossKey(loss), id)).count())
    }

    pub fn best(&self) -> Option<(ConfigId, f64)> {
        self.ranked.first().map(|&(LossKey(l), id)| (id, l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobOrigin {
    NewConfig,
    Promotion { from_rung: usize },
}

/// A unit of work: train `config_id` to `resource` as a member of `rung`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub config_id: ConfigId,
    pub rung: usize,
    pub resource: u64,
    pub origin: JobOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultReport {
    pub config_id: ConfigId,
    pub rung: usize,
    #[serde(with = "crate::serde_f64::loss")]
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AshaDecision {
    Promote { config_id: ConfigId, from_rung: usize },
    Sample,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AshaJob {
    Job(Job),
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncDecision {
    Sample(u64),
    Promote { from_rung: usize, configs: Vec<ConfigId> },
    NotReady,
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SyncStep {
    Jobs(Vec<Job>),
    NotReady,
    Finished { best: Option<(ConfigId, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketState {
    pub params: BracketParams,
    pub rungs: Vec<RungState>,
    pub sampled_count: u64,
    pub width_limit: Option<u64>,
}

impl BracketState {
    pub fn new(params: BracketParams, width_limit: Option<u64>) -> Self {
        let initial = if params.infinite_horizon { 1 } else { params.finite_rung_count() };
        let rungs = (0..initial).map(|k| RungState::new(k, params.rung_resource(k))).collect();
        Self { params, rungs, sampled_count: 0, width_limit }
    }

    pub fn rung(&self, k: usize) -> Option<&RungState> {
        self.rungs.get(k)
    }

    pub fn top_rung(&self) -> &RungState {
        self.rungs.last().expect("a bracket has at least one rung")
    }

    pub fn width_available(&self) -> bool {
        self.width_limit.is_none_or(|w| self.sampled_count < w)
    }

    pub fn remaining_width(&self) -> Option<u64> {
        self.width_limit.map(|w| w.saturating_sub(self.sampled_count))
    }

    pub fn has_pending(&self) -> bool {
        self.rungs.iter().any(|r| !r.pending.is_empty())
    }

    fn promotion_source_rungs(&self) -> usize {
        if self.params.infinite_horizon { self.rungs.len() } else { self.rungs.len() - 1 }
    }

    /// Total configurations promotable right now across all rungs.
    pub fn promotable_count(&self) -> usize {
        self.rungs[..self.promotion_source_rungs()]
            .iter()
            .map(|r| r.promotable_count(self.params.eta))
            .sum()
    }

    /// Width-limited, nothing pending, nothing promotable.
    pub fn is_drained(&self) -> bool {
        !self.width_available() && !self.has_pending() && self.asha_decide() == AshaDecision::Blocked
    }

    /// The asynchronous promotion rule: scan rungs top-down for a promotable
    /// configuration, otherwise grow the bottom rung.
    pub fn asha_decide(&self) -> AshaDecision {
        let eta = self.params.eta;
        for k in (0..self.promotion_source_rungs()).rev() {
            if let Some(config_id) = self.rungs[k].next_promotable(eta) {
                return AshaDecision::Promote { config_id, from_rung: k };
            }
        }
        if self.width_available() { AshaDecision::Sample } else { AshaDecision::Blocked }
    }

    pub fn asha_get_job(&mut self, mut sampler: impl FnMut() -> ConfigId) -> AshaJob {
        let job = match self.asha_decide() {
            AshaDecision::Promote { config_id, from_rung } => self.promote(config_id, from_rung),
            AshaDecision::Sample => self.add_sampled(sampler()),
            AshaDecision::Blocked => return AshaJob::Blocked,
        };
        AshaJob::Job(job.expect("decided action applies to the state it was decided on"))
    }

    pub fn asha_record_result(&mut self, report: ResultReport) -> Result<(), BracketError> {
        self.record(report)
    }

    /// The synchronous rule: a rung's survivors are chosen only once every
    /// member of the rung has reported.
    pub fn sync_decide(&self) -> SyncDecision {
        let Some(current) = self.rungs.iter().rposition(|r| r.width() > 0) else {
            let n = self.remaining_width().unwrap_or(0);
            return if n > 0 { SyncDecision::Sample(n) } else { SyncDecision::Finished };
        };
        let rung = &self.rungs[current];
        if !rung.pending.is_empty() {
            return SyncDecision::NotReady;
        }
        let count = rung.promotion_quota(self.params.eta);
        if current + 1 >= self.rungs.len() || count == 0 {
            return SyncDecision::Finished;
        }
        SyncDecision::Promote { from_rung: current, configs: rung.top_k(count) }
    }

    pub fn sync_sha_next_rung(&mut self, mut sampler: impl FnMut() -> ConfigId) -> Result<SyncStep, BracketError> {
        match self.sync_decide() {
            SyncDecision::Sample(n) => {
                let jobs = (0..n).map(|_| self.add_sampled(sampler())).collect::<Result<_, _>>()?;
                Ok(SyncStep::Jobs(jobs))
            }
            SyncDecision::Promote { from_rung, configs } => {
                let jobs = configs
                    .into_iter()
                    .map(|id| self.promote(id, from_rung))
                    .collect::<Result<_, _>>()?;
                Ok(SyncStep::Jobs(jobs))
            }
            SyncDecision::NotReady => Ok(SyncStep::NotReady),
            SyncDecision::Finished => Ok(SyncStep::Finished { best: self.output() }),
        }
    }

    /// Best configuration of the deepest rung holding any result.
    pub fn output(&self) -> Option<(ConfigId, f64)> {
        self.rungs.iter().rev().find_map(RungState::best)
    }

    /// Adds a new configuration to the bottom rung as pending.
    pub fn add_sampled(&mut self, config_id: ConfigId) -> Result<Job, BracketError> {
        if !self.width_available() {
            return Err(BracketError::WidthExhausted);
        }
        let bottom = &mut self.rungs[0];
        if bottom.contains(config_id) {
            return Err(BracketError::AlreadySampled(config_id));
        }
        bottom.pending.insert(config_id);
        self.sampled_count += 1;
        Ok(Job { config_id, rung: 0, resource: bottom.resource, origin: JobOrigin::NewConfig })
    }

    /// Moves a completed configuration of `from_rung` into the next rung as pending.
    ///
    /// Ranking is not checked here so replay can follow a journal verbatim.
    pub fn promote(&mut self, config_id: ConfigId, from_rung: usize) -> Result<Job, BracketError> {
        let source_rungs = self.promotion_source_rungs();
        if from_rung >= source_rungs {
            return Err(BracketError::NotPromotable { config_id, rung: from_rung, reason: "top rung" });
        }
        let eta = self.params.eta;
        let src = &mut self.rungs[from_rung];
        let Some(&loss) = src.completed.get(&config_id) else {
            return Err(BracketError::NotPromotable { config_id, rung: from_rung, reason: "no result" });
        };
        if src.promoted.contains(&config_id) {
            return Err(BracketError::NotPromotable { config_id, rung: from_rung, reason: "already promoted" });
        }
        if src.promoted.len() >= src.promotion_quota(eta) {
            return Err(BracketError::NotPromotable { config_id, rung: from_rung, reason: "rung quota used up" });
        }
        src.promoted.insert(config_id);
        src.unpromoted.remove(&(LossKey(loss), config_id));
        let to = from_rung + 1;
        if to == self.rungs.len() {
            self.rungs.push(RungState::new(to, self.params.rung_resource(to)));
        }
        let dst = &mut self.rungs[to];
        dst.pending.insert(config_id);
        Ok(Job { config_id, rung: to, resource: dst.resource, origin: JobOrigin::Promotion { from_rung } })
    }

    pub fn record(&mut self, report: ResultReport) -> Result<(), BracketError> {
        let ResultReport { config_id, rung, loss } = report;
        let r = self.rungs.get_mut(rung).ok_or(BracketError::NoSuchRung(rung))?;
        if r.completed.contains_key(&config_id) {
            return Err(BracketError::DuplicateResult { config_id, rung });
        }
        if !r.pending.remove(&config_id) {
            return Err(BracketError::UnknownJob { config_id, rung });
        }
        let loss = normalize_loss(loss);
        r.completed.insert(config_id, loss);
        r.ranked.insert((LossKey(loss), config_id));
        r.unpromoted.insert((LossKey(loss), config_id));
        Ok(())
    }

    pub fn extend_width(&mut self, additional: u64) {
        if let Some(w) = &mut self.width_limit {
            *w += additional;
        }
    }
}
