//! Multi-bracket coordination.
//!
//! An [`Experiment`] owns one [`BracketState`] per early-stopping rate and
//! hands out jobs across them: synchronous brackets wait at rung barriers,
//! asynchronous ones promote whenever a rung allows it. Every state change is
//! expressed as an [`EventKind`] and applied through [`Experiment::apply`], so a
//! journal of those events rebuilds the experiment exactly.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bracket::{
    max_early_stopping_rate, AshaDecision, BracketError, BracketParams, BracketState, ConfigId, ResultReport,
    SyncDecision,
};
use crate::journal::{EventKind, JournalEvent};
use crate::space::{self, SearchSpace};

pub type Token = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SyncSha,
    Asha,
    SyncHyperband,
    #[default]
    AsyncHyperband,
}

impl Mode {
    pub fn is_synchronous(self) -> bool {
        matches!(self, Mode::SyncSha | Mode::SyncHyperband)
    }

    pub fn is_single_bracket(self) -> bool {
        matches!(self, Mode::SyncSha | Mode::Asha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BracketPreset {
    Standard,
    Aggressive,
    Conservative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BracketSet {
    Preset(BracketPreset),
    Explicit(Vec<u32>),
}

impl BracketSet {
    fn rates(&self) -> Vec<u32> {
        match self {
            BracketSet::Preset(BracketPreset::Standard) => vec![0, 1, 2],
            BracketSet::Preset(BracketPreset::Aggressive) => vec![0],
            BracketSet::Preset(BracketPreset::Conservative) => vec![0, 1, 2, 3, 4],
            BracketSet::Explicit(v) => v.clone(),
        }
    }
}

/// What a user submits. Only the space, `n` and `max_resource` are required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub space: SearchSpace,
    #[serde(default)]
    pub mode: Mode,
    pub n: u64,
    pub max_resource: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_resource: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brackets: Option<BracketSet>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub incremental_training: bool,
    #[serde(default)]
    pub infinite_horizon: bool,
    /// Open a fresh bracket whenever no existing bracket has work.
    #[serde(default)]
    pub loop_brackets: bool,
    /// Asynchronous brackets keep growing their bottom rung; `n` is ignored.
    #[serde(default)]
    pub unbounded_width: bool,
}

impl ExperimentSpec {
    pub fn new(space: SearchSpace, mode: Mode, n: u64, max_resource: u64) -> Self {
        Self {
            space,
            mode,
            n,
            max_resource,
            min_resource: None,
            eta: None,
            brackets: None,
            seed: 0,
            incremental_training: false,
            infinite_horizon: false,
            loop_brackets: false,
            unbounded_width: false,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SpecError> {
        toml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, SpecError> {
        serde_json::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<Settings, SpecError> {
        Settings::resolve(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("invalid experiment spec: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("cannot parse experiment spec: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("{n} configurations cannot cover {brackets} brackets")]
    TooFewConfigs { n: u64, brackets: usize },
    #[error("no brackets to allocate to")]
    NoBrackets,
    #[error("bracket weights overflow")]
    Overflow,
}

/// Production defaults for a given maximum resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefaultSettings {
    pub eta: u64,
    pub min_resource: u64,
    pub standard: Vec<u32>,
    pub aggressive: Vec<u32>,
    pub conservative: Vec<u32>,
}

/// `eta = 4`, `r = max(1, ceil(R / 256))` so the most aggressive bracket has five rungs.
pub fn default_settings(max_resource: u64) -> DefaultSettings {
    let eta = 4;
    let min_resource = default_min_resource(max_resource, eta);
    let s_max = max_early_stopping_rate(min_resource, max_resource.max(1), eta);
    let clamp = |set: BracketPreset| clamp_rates(&BracketSet::Preset(set).rates(), s_max);
    DefaultSettings {
        eta,
        min_resource,
        standard: clamp(BracketPreset::Standard),
        aggressive: clamp(BracketPreset::Aggressive),
        conservative: clamp(BracketPreset::Conservative),
    }
}

fn default_min_resource(max_resource: u64, eta: u64) -> u64 {
    let div = eta.saturating_pow(4);
    max_resource.div_ceil(div).max(1)
}

fn clamp_rates(rates: &[u32], s_max: u32) -> Vec<u32> {
    let mut v: Vec<u32> = rates.iter().copied().filter(|&s| s <= s_max).collect();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() {
        v.push(0);
    }
    v
}

/// Mean resource per configuration of bracket `s` relative to `R`, assuming no
/// mispromotions: `rungs / eta^(s_max - s)`.
pub fn average_resource(s: u32, min_resource: u64, max_resource: u64, eta: u64) -> Ratio<u64> {
    let s_max = max_early_stopping_rate(min_resource, max_resource, eta);
    assert!(s <= s_max, "early-stopping rate {s} exceeds {s_max}");
    let rungs = (s_max - s + 1) as u64;
    Ratio::new(rungs, eta.pow(s_max - s))
}

/// Splits `n` configurations across brackets in proportion to the inverse of
/// their average resource, so every bracket gets the same total budget.
///
/// Rounding is largest-remainder (ties to the lower `s`); a bracket rounded
/// down to zero takes one configuration from the largest bracket.
pub fn allocate_configs(
    n: u64,
    brackets: &[u32],
    min_resource: u64,
    max_resource: u64,
    eta: u64,
) -> Result<BTreeMap<u32, u64>, AllocError> {
    if brackets.is_empty() {
        return Err(AllocError::NoBrackets);
    }
    if n < brackets.len() as u64 {
        return Err(AllocError::TooFewConfigs { n, brackets: brackets.len() });
    }
    let s_max = max_early_stopping_rate(min_resource, max_resource, eta);
    // weight_s = eta^(s_max - s) / rungs_s, scaled by the lcm of rung counts.
    let rungs: Vec<u128> = brackets.iter().map(|&s| (s_max - s + 1) as u128).collect();
    let lcm = rungs.iter().fold(1u128, |acc, &r| acc / gcd(acc, r) * r);
    let weights = brackets
        .iter()
        .zip(&rungs)
        .map(|(&s, &r)| (eta as u128).checked_pow(s_max - s).and_then(|p| p.checked_mul(lcm / r)))
        .collect::<Option<Vec<u128>>>()
        .ok_or(AllocError::Overflow)?;
    let total: u128 = weights.iter().try_fold(0u128, |a, &w| a.checked_add(w)).ok_or(AllocError::Overflow)?;
    let mut shares = Vec::with_capacity(brackets.len());
    for &w in &weights {
        let scaled = (n as u128).checked_mul(w).ok_or(AllocError::Overflow)?;
        shares.push(((scaled / total) as u64, scaled % total));
    }
    let mut counts: Vec<u64> = shares.iter().map(|&(q, _)| q).collect();
    let leftover = n - counts.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..brackets.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.cmp(&shares[a].1).then(brackets[a].cmp(&brackets[b])));
    for &i in order.iter().take(leftover as usize) {
        counts[i] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(brackets[b].cmp(&brackets[a])))
            .expect("non-empty");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(brackets.iter().copied().zip(counts).collect())
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// A spec with every default filled in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settings {
    pub eta: u64,
    pub min_resource: u64,
    pub max_resource: u64,
    pub brackets: Vec<u32>,
    pub widths: BTreeMap<u32, u64>,
}

fn bad(errors: &mut Vec<FieldError>, field: &str, message: String) {
    errors.push(FieldError { field: field.into(), message });
}

impl Settings {
    pub fn resolve(spec: &ExperimentSpec) -> Result<Settings, SpecError> {
        let mut errors = Vec::new();
        for v in spec.space.validate() {
            bad(&mut errors, &format!("dimension.{}", v.dimension), v.message);
        }
        if spec.space.dimensions.is_empty() {
            bad(&mut errors, "dimension", "search space has no dimensions".into());
        }
        if spec.n < 1 {
            bad(&mut errors, "n", "must be at least 1".into());
        }
        if spec.max_resource < 1 {
            bad(&mut errors, "max_resource", "must be at least 1".into());
        }
        let eta = spec.eta.unwrap_or(4);
        if eta < 2 {
            bad(&mut errors, "eta", "must be at least 2".into());
        }
        let min_resource = spec.min_resource.unwrap_or_else(|| default_min_resource(spec.max_resource, eta.max(2)));
        if min_resource < 1 || min_resource > spec.max_resource.max(1) {
            bad(&mut errors, "min_resource", "must lie between 1 and max_resource".into());
        }
        if spec.infinite_horizon && spec.mode.is_synchronous() {
            bad(&mut errors, "infinite_horizon", "only asynchronous modes support an unbounded horizon".into());
        }
        if spec.unbounded_width && spec.mode.is_synchronous() {
            bad(&mut errors, "unbounded_width", "synchronous brackets need a fixed width".into());
        }
        if !errors.is_empty() {
            return Err(SpecError::Invalid(errors));
        }

        let s_max = max_early_stopping_rate(min_resource, spec.max_resource, eta);
        let set = spec.brackets.clone().unwrap_or(BracketSet::Preset(if spec.mode.is_single_bracket() {
            BracketPreset::Aggressive
        } else {
            BracketPreset::Standard
        }));
        let brackets = match &set {
            BracketSet::Explicit(list) => {
                if list.is_empty() {
                    bad(&mut errors, "brackets", "must name at least one bracket".into());
                }
                if let Some(&s) = list.iter().find(|&&s| s > s_max) {
                    bad(&mut errors, "brackets", format!("early-stopping rate {s} exceeds the maximum {s_max}"));
                }
                let mut v = list.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            BracketSet::Preset(_) => clamp_rates(&set.rates(), s_max),
        };
        if spec.mode.is_single_bracket() && brackets.len() > 1 {
            bad(&mut errors, "brackets", format!("{:?} mode runs exactly one bracket", spec.mode));
        }
        if !errors.is_empty() {
            return Err(SpecError::Invalid(errors));
        }
        let widths = match allocate_configs(spec.n, &brackets, min_resource, spec.max_resource, eta) {
            Ok(w) => w,
            Err(e) => return Err(SpecError::Invalid(vec![FieldError { field: "n".into(), message: e.to_string() }])),
        };
        if spec.mode.is_synchronous() {
            for (&s, &w) in &widths {
                let params = BracketParams::new(min_resource, spec.max_resource, eta, s).expect("checked above");
                if w < params.min_width() {
                    bad(&mut errors, "n", format!("synchronous bracket s={s} gets {w} configurations but needs {}", params.min_width()));
                }
            }
        }
        if !errors.is_empty() {
            return Err(SpecError::Invalid(errors));
        }
        Ok(Settings { eta, min_resource, max_resource: spec.max_resource, brackets, widths })
    }

    pub fn params(&self, s: u32, infinite_horizon: bool) -> BracketParams {
        BracketParams {
            min_resource: self.min_resource,
            max_resource: self.max_resource,
            eta: self.eta,
            early_stopping_rate: s,
            infinite_horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedJob {
    pub config_id: ConfigId,
    pub rung: usize,
}

/// One bracket plus the jobs it has created but not yet handed to a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketSlot {
    pub early_stopping_rate: u32,
    pub synchronous: bool,
    pub state: BracketState,
    pub ready: VecDeque<QueuedJob>,
}

impl BracketSlot {
    pub fn is_finished(&self) -> bool {
        if !self.ready.is_empty() {
            return false;
        }
        if self.synchronous {
            self.state.sync_decide() == SyncDecision::Finished
        } else {
            self.state.is_drained()
        }
    }

    /// Tasks this bracket could start right now without waiting on a result.
    pub fn runnable(&self) -> u64 {
        let queued = self.ready.len() as u64;
        // Unsampled rung-0 configs are runnable in both modes.
        // An unbounded bracket can always sample another config.
        let width = self.state.remaining_width().unwrap_or(u32::MAX as u64);
        if self.synchronous {
            return queued
                + match self.state.sync_decide() {
                    SyncDecision::Sample(count) => count,
                    SyncDecision::Promote { configs, .. } => configs.len() as u64,
                    SyncDecision::NotReady | SyncDecision::Finished => 0,
                };
        }
        queued + self.state.promotable_count() as u64 + width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub bracket: usize,
    pub config_id: ConfigId,
    pub rung: usize,
    pub dispatched_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fate", rename_all = "kebab-case")]
pub enum Settled {
    Completed {
        #[serde(with = "crate::serde_f64::loss")]
        loss: f64,
    },
    Dropped,
}

/// A completed result as seen by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: u64,
    pub config_id: ConfigId,
    pub bracket: usize,
    pub rung: usize,
    pub resource: u64,
    #[serde(with = "crate::serde_f64::loss")]
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accounting {
    ByRung,
    ByBracket,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncumbentRecord {
    pub config_id: ConfigId,
    #[serde(with = "crate::serde_f64::loss")]
    pub loss: f64,
    pub time: u64,
    pub rung: usize,
    pub bracket: usize,
    pub resource: u64,
}

impl IncumbentRecord {
    fn from_observation(o: &Observation) -> Self {
        Self { config_id: o.config_id, loss: o.loss, time: o.time, rung: o.rung, bracket: o.bracket, resource: o.resource }
    }
}

/// More-trained wins; at equal resource the lower loss wins.
fn beats(candidate: &Observation, current: &Observation) -> bool {
    candidate.resource > current.resource || (candidate.resource == current.resource && candidate.loss < current.loss)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error(transparent)]
    Bracket(#[from] BracketError),
    #[error("bracket {0} does not exist")]
    NoSuchBracket(usize),
    #[error("token {0} is not outstanding")]
    UnknownToken(Token),
    #[error("event does not match the experiment state: {0}")]
    Mismatch(String),
}

/// What the experiment wants to do next, before anything is journaled.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    /// Events ending in a `JobDispatched`.
    Dispatch(Vec<EventKind>),
    /// No bracket has work; open another one and plan again.
    OpenBracket(EventKind),
    Blocked,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    spec: ExperimentSpec,
    settings: Settings,
    brackets: Vec<BracketSlot>,
    in_flight: BTreeMap<Token, Dispatch>,
    settled: BTreeMap<Token, Settled>,
    observations: Vec<Observation>,
    next_config_id: ConfigId,
    next_token: Token,
    cursor: usize,
    opened: u64,
}

impl Experiment {
    pub fn new(spec: ExperimentSpec) -> Result<Self, SpecError> {
        let settings = Settings::resolve(&spec)?;
        let synchronous = spec.mode.is_synchronous();
        let brackets = settings
            .brackets
            .iter()
            .map(|&s| BracketSlot {
                early_stopping_rate: s,
                synchronous,
                state: BracketState::new(
                    settings.params(s, spec.infinite_horizon),
                    (!spec.unbounded_width).then(|| settings.widths[&s]),
                ),
                ready: VecDeque::new(),
            })
            .collect();
        Ok(Self {
            spec,
            settings,
            brackets,
            in_flight: BTreeMap::new(),
            settled: BTreeMap::new(),
            observations: Vec::new(),
            next_config_id: 0,
            next_token: 0,
            cursor: 0,
            opened: 0,
        })
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn brackets(&self) -> &[BracketSlot] {
        &self.brackets
    }

    pub fn in_flight(&self) -> &BTreeMap<Token, Dispatch> {
        &self.in_flight
    }

    pub fn settled(&self, token: Token) -> Option<Settled> {
        self.settled.get(&token).copied()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn configs_sampled(&self) -> u64 {
        self.next_config_id
    }

    pub fn resource_of(&self, bracket: usize, rung: usize) -> u64 {
        self.brackets[bracket].state.params.rung_resource(rung)
    }

    /// Total tasks runnable without waiting on a result (the task stack size).
    pub fn runnable_tasks(&self) -> u64 {
        let open: u64 = self.brackets.iter().map(BracketSlot::runnable).sum();
        if self.spec.loop_brackets {
            // Another bracket can be opened whenever the others are waiting.
            let rates = &self.settings.brackets;
            let s = rates[(self.opened % rates.len() as u64) as usize];
            return open.saturating_add(self.settings.widths[&s]);
        }
        open
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.plan(), Plan::Finished)
    }

    /// Chooses the next job without changing any state.
    pub fn plan(&self) -> Plan {
        let nb = self.brackets.len();
        // Looping brackets fill the oldest bracket first; otherwise round-robin.
        let start = if self.spec.loop_brackets { 0 } else { self.cursor };
        for i in 0..nb {
            let b = (start + i) % nb;
            if let Some(events) = self.plan_bracket(b) {
                return Plan::Dispatch(events);
            }
        }
        if self.spec.loop_brackets {
            let rates = &self.settings.brackets;
            let s = rates[(self.opened % rates.len() as u64) as usize];
            return Plan::OpenBracket(EventKind::BracketOpened {
                bracket: nb,
                early_stopping_rate: s,
                width: self.settings.widths[&s],
            });
        }
        if self.in_flight.is_empty() && self.brackets.iter().all(BracketSlot::is_finished) {
            Plan::Finished
        } else {
            Plan::Blocked
        }
    }

    fn dispatch_event(&self, bracket: usize, config_id: ConfigId, rung: usize) -> EventKind {
        EventKind::JobDispatched { token: self.next_token, bracket, config_id, rung }
    }

    fn sampled_event(&self, bracket: usize, config_id: ConfigId) -> EventKind {
        EventKind::ConfigSampled { bracket, config_id, sample_seed: space::sample_seed(self.spec.seed, config_id) }
    }

    fn plan_bracket(&self, b: usize) -> Option<Vec<EventKind>> {
        let slot = &self.brackets[b];
        if let Some(q) = slot.ready.front() {
            return Some(vec![self.dispatch_event(b, q.config_id, q.rung)]);
        }
        if slot.synchronous {
            match slot.state.sync_decide() {
                SyncDecision::Sample(count) => {
                    let first = self.next_config_id;
                    let mut events: Vec<_> = (first..first + count).map(|id| self.sampled_event(b, id)).collect();
                    events.push(self.dispatch_event(b, first, 0));
                    Some(events)
                }
                SyncDecision::Promote { from_rung, configs } => {
                    let first = configs[0];
                    let mut events: Vec<_> = configs
                        .into_iter()
                        .map(|config_id| EventKind::ConfigPromoted { bracket: b, config_id, from_rung })
                        .collect();
                    events.push(self.dispatch_event(b, first, from_rung + 1));
                    Some(events)
                }
                SyncDecision::NotReady | SyncDecision::Finished => None,
            }
        } else {
            match slot.state.asha_decide() {
                AshaDecision::Promote { config_id, from_rung } => Some(vec![
                    EventKind::ConfigPromoted { bracket: b, config_id, from_rung },
                    self.dispatch_event(b, config_id, from_rung + 1),
                ]),
                AshaDecision::Sample => {
                    let id = self.next_config_id;
                    Some(vec![self.sampled_event(b, id), self.dispatch_event(b, id, 0)])
                }
                AshaDecision::Blocked => None,
            }
        }
    }

    fn slot_mut(&mut self, bracket: usize) -> Result<&mut BracketSlot, ApplyError> {
        self.brackets.get_mut(bracket).ok_or(ApplyError::NoSuchBracket(bracket))
    }

    /// Applies one journaled event. Nothing is re-decided: promotions are taken
    /// from the event as written.
    pub fn apply(&mut self, event: &JournalEvent) -> Result<(), ApplyError> {
        match &event.kind {
            EventKind::ExperimentCreated { .. } => {
                return Err(ApplyError::Mismatch("experiment already created".into()));
            }
            &EventKind::BracketOpened { bracket, early_stopping_rate, width } => {
                if bracket != self.brackets.len() {
                    return Err(ApplyError::Mismatch(format!("bracket {bracket} opened out of order")));
                }
                if !self.settings.brackets.contains(&early_stopping_rate) {
                    return Err(ApplyError::Mismatch(format!("bracket s={early_stopping_rate} is not configured")));
                }
                let params = self.settings.params(early_stopping_rate, self.spec.infinite_horizon);
                self.brackets.push(BracketSlot {
                    early_stopping_rate,
                    synchronous: self.spec.mode.is_synchronous(),
                    state: BracketState::new(params, Some(width)),
                    ready: VecDeque::new(),
                });
                self.opened += 1;
            }
            &EventKind::ConfigSampled { bracket, config_id, sample_seed } => {
                if config_id != self.next_config_id {
                    return Err(ApplyError::Mismatch(format!(
                        "config {config_id} sampled but next id is {}",
                        self.next_config_id
                    )));
                }
                if sample_seed != space::sample_seed(self.spec.seed, config_id) {
                    return Err(ApplyError::Mismatch(format!("sample seed of config {config_id} does not derive")));
                }
                let slot = self.slot_mut(bracket)?;
                slot.state.add_sampled(config_id)?;
                slot.ready.push_back(QueuedJob { config_id, rung: 0 });
                self.next_config_id += 1;
            }
            &EventKind::ConfigPromoted { bracket, config_id, from_rung } => {
                let slot = self.slot_mut(bracket)?;
                let job = slot.state.promote(config_id, from_rung)?;
                slot.ready.push_back(QueuedJob { config_id, rung: job.rung });
            }
            &EventKind::JobDispatched { token, bracket, config_id, rung } => {
                if token != self.next_token {
                    return Err(ApplyError::Mismatch(format!("token {token} issued but next is {}", self.next_token)));
                }
                let slot = self.slot_mut(bracket)?;
                if slot.ready.front() != Some(&QueuedJob { config_id, rung }) {
                    return Err(ApplyError::Mismatch(format!(
                        "dispatch of config {config_id} rung {rung} is not at the head of bracket {bracket}"
                    )));
                }
                slot.ready.pop_front();
                self.in_flight.insert(token, Dispatch { bracket, config_id, rung, dispatched_at: event.timestamp });
                self.next_token += 1;
                self.cursor = (bracket + 1) % self.brackets.len();
            }
            &EventKind::ResultRecorded { token, bracket, config_id, rung, loss, .. } => {
                self.check_token(token, bracket, config_id, rung)?;
                let slot = self.slot_mut(bracket)?;
                slot.state.record(ResultReport { config_id, rung, loss })?;
                let resource = slot.state.params.rung_resource(rung);
                let loss = crate::bracket::normalize_loss(loss);
                self.in_flight.remove(&token);
                self.settled.insert(token, Settled::Completed { loss });
                self.observations.push(Observation { time: event.timestamp, config_id, bracket, rung, resource, loss });
            }
            &EventKind::JobDropped { token, bracket, config_id, rung } => {
                self.check_token(token, bracket, config_id, rung)?;
                self.in_flight.remove(&token);
                self.settled.insert(token, Settled::Dropped);
                self.slot_mut(bracket)?.ready.push_back(QueuedJob { config_id, rung });
            }
            &EventKind::WidthExtended { bracket, additional } => {
                let slot = self.slot_mut(bracket)?;
                if slot.synchronous && additional > 0 {
                    return Err(ApplyError::Mismatch("synchronous brackets cannot be widened".into()));
                }
                slot.state.extend_width(additional);
            }
        }
        Ok(())
    }

    fn check_token(&self, token: Token, bracket: usize, config_id: ConfigId, rung: usize) -> Result<(), ApplyError> {
        match self.in_flight.get(&token) {
            None => Err(ApplyError::UnknownToken(token)),
            Some(d) if d.bracket != bracket || d.config_id != config_id || d.rung != rung => {
                Err(ApplyError::Mismatch(format!("token {token} was issued for a different job")))
            }
            Some(_) => Ok(()),
        }
    }

    /// Best configuration so far.
    ///
    /// By rung, the most-trained observation wins and loss breaks ties within
    /// a resource level. By bracket, only outputs of finished brackets count.
    pub fn incumbent(&self, accounting: Accounting) -> Option<IncumbentRecord> {
        match accounting {
            Accounting::ByRung => {
                let mut best: Option<&Observation> = None;
                for o in &self.observations {
                    if best.is_none_or(|b| beats(o, b)) {
                        best = Some(o);
                    }
                }
                best.map(IncumbentRecord::from_observation)
            }
            Accounting::ByBracket => {
                let mut best: Option<IncumbentRecord> = None;
                for (b, slot) in self.brackets.iter().enumerate() {
                    if !slot.is_finished() {
                        continue;
                    }
                    let Some((config_id, loss)) = slot.state.output() else { continue };
                    let finished_at = self.observations.iter().filter(|o| o.bracket == b).map(|o| o.time).max();
                    let rung = slot.state.rungs.iter().rposition(|r| !r.completed().is_empty()).unwrap_or(0);
                    let rec = IncumbentRecord {
                        config_id,
                        loss,
                        time: finished_at.unwrap_or(0),
                        rung,
                        bracket: b,
                        resource: slot.state.params.rung_resource(rung),
                    };
                    if best.is_none_or(|cur| rec.loss < cur.loss) {
                        best = Some(rec);
                    }
                }
                best
            }
        }
    }

    /// Every change of the by-rung incumbent, in observation order.
    pub fn incumbent_trace(&self) -> Vec<IncumbentRecord> {
        let mut out = Vec::new();
        let mut best: Option<&Observation> = None;
        for o in &self.observations {
            if best.is_none_or(|b| beats(o, b)) {
                best = Some(o);
                out.push(IncumbentRecord::from_observation(o));
            }
        }
        out
    }

    pub fn status(&self) -> ExperimentStatus {
        ExperimentStatus {
            sequence_no: None,
            finished: self.is_finished(),
            configs_sampled: self.next_config_id,
            in_flight: self.in_flight.len(),
            runnable: self.runnable_tasks(),
            incumbent: self.incumbent(Accounting::ByRung),
            brackets: self
                .brackets
                .iter()
                .enumerate()
                .map(|(i, slot)| BracketStatus {
                    bracket: i,
                    early_stopping_rate: slot.early_stopping_rate,
                    synchronous: slot.synchronous,
                    width_limit: slot.state.width_limit,
                    sampled: slot.state.sampled_count,
                    finished: slot.is_finished(),
                    rungs: slot
                        .state
                        .rungs
                        .iter()
                        .map(|r| RungStatus {
                            rung: r.index,
                            resource: r.resource,
                            completed: r.completed().len(),
                            pending: r.pending().len(),
                            promoted: r.promoted().len(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungStatus {
    pub rung: usize,
    pub resource: u64,
    pub completed: usize,
    pub pending: usize,
    pub promoted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketStatus {
    pub bracket: usize,
    pub early_stopping_rate: u32,
    pub synchronous: bool,
    pub width_limit: Option<u64>,
    pub sampled: u64,
    pub finished: bool,
    pub rungs: Vec<RungStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStatus {
    pub sequence_no: Option<u64>,
    pub finished: bool,
    pub configs_sampled: u64,
    pub in_flight: usize,
    pub runnable: u64,
    pub incumbent: Option<IncumbentRecord>,
    pub brackets: Vec<BracketStatus>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Dimension;

    fn space() -> SearchSpace {
        SearchSpace::new(vec![Dimension::linear("x", 0.0, 1.0)])
    }

    #[test]
    fn defaults_for_256() {
        let d = default_settings(256);
        assert_eq!((d.eta, d.min_resource), (4, 1));
        assert_eq!(d.standard, vec![0, 1, 2]);
        assert_eq!(d.aggressive, vec![0]);
        assert_eq!(d.conservative, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn defaults_round_r_up() {
        assert_eq!(default_settings(100).min_resource, 1);
        assert_eq!(default_settings(1000).min_resource, 4);
        let d = default_settings(1);
        assert_eq!(d.min_resource, 1);
        assert_eq!(d.standard, vec![0]);
        assert_eq!(d.conservative, vec![0]);
    }

    #[test]
    fn average_resource_defaults() {
        assert_eq!(average_resource(0, 1, 256, 4), Ratio::new(5, 256));
        assert_eq!(average_resource(1, 1, 256, 4), Ratio::new(4, 64));
        assert_eq!(average_resource(2, 1, 256, 4), Ratio::new(3, 16));
        assert_eq!(average_resource(4, 1, 256, 4), Ratio::from_integer(1));
    }

    #[test]
    fn allocation_examples() {
        let a = allocate_configs(1000, &[0, 1, 2], 1, 256, 4).unwrap();
        assert_eq!(a, BTreeMap::from([(0, 706), (1, 221), (2, 73)]));
        assert_eq!(allocate_configs(50, &[0], 1, 256, 4).unwrap(), BTreeMap::from([(0, 50)]));
        let small = allocate_configs(3, &[0, 1, 2], 1, 256, 4).unwrap();
        assert!(small.values().all(|&c| c >= 1));
        assert_eq!(small.values().sum::<u64>(), 3);
        assert_eq!(
            allocate_configs(2, &[0, 1, 2], 1, 256, 4),
            Err(AllocError::TooFewConfigs { n: 2, brackets: 3 })
        );
    }

    #[test]
    fn minimal_spec_gets_defaults() {
        let spec = ExperimentSpec::new(space(), Mode::AsyncHyperband, 100, 256);
        let s = spec.validate().unwrap();
        assert_eq!((s.eta, s.min_resource), (4, 1));
        assert_eq!(s.brackets, vec![0, 1, 2]);
        assert_eq!(s.widths.values().sum::<u64>(), 100);
    }

    #[test]
    fn invalid_spec_lists_fields() {
        let mut spec = ExperimentSpec::new(SearchSpace::new(vec![Dimension::log("lr", 0.0, 1.0)]), Mode::Asha, 0, 256);
        spec.eta = Some(1);
        let Err(SpecError::Invalid(errors)) = spec.validate() else { panic!() };
        let fields: Vec<_> = errors.iter().map(|e| e.field.as_str()).collect();
        assert_eq!(fields, vec!["dimension.lr", "n", "eta"]);
    }

    #[test]
    fn single_bracket_modes_reject_several_brackets() {
        let mut spec = ExperimentSpec::new(space(), Mode::Asha, 100, 256);
        spec.brackets = Some(BracketSet::Explicit(vec![0, 1]));
        assert!(spec.validate().is_err());
        spec.brackets = Some(BracketSet::Explicit(vec![0]));
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn sync_modes_need_feasible_widths() {
        let spec = ExperimentSpec::new(space(), Mode::SyncSha, 100, 256);
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec::new(space(), Mode::SyncSha, 256, 256);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
n = 100
max_resource = 256
brackets = "conservative"
seed = 3

[[dimension]]
name = "lr"
kind = "continuous-log"
lower = 1e-4
upper = 1e-1
"#;
        let spec = ExperimentSpec::from_toml_str(text).unwrap();
        assert_eq!(spec.mode, Mode::AsyncHyperband);
        assert_eq!(spec.brackets, Some(BracketSet::Preset(BracketPreset::Conservative)));
        assert_eq!(spec.validate().unwrap().brackets, vec![0, 1, 2, 3, 4]);
        let explicit = ExperimentSpec::from_toml_str(&text.replace("\"conservative\"", "[0]")).unwrap();
        assert_eq!(explicit.brackets, Some(BracketSet::Explicit(vec![0])));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(ExperimentSpec::from_json_str(&json).unwrap(), spec);
    }
}
