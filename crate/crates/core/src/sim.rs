//! Discrete-event simulation of a worker pool driving a [`Tuner`].
//!
//! Time is an integer tick count. A job of `b` base units takes
//! `ceil(b * (1 + |z|))` ticks with `z ~ N(0, sigma)`, and every tick a running
//! job is lost with probability `p`. All completions and drops sharing a
//! timestamp are handled (in worker order) before idle workers ask for work,
//! also in worker order.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::io;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bracket::ConfigId;
use crate::journal::{EventKind, Journal};
use crate::orchestrator::{BracketSet, ExperimentSpec, Mode, Token};
use crate::seed;
use crate::space::{Dimension, SearchSpace};
use crate::tuner::{NextJob, Tuner, TunerError};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("a simulation needs at least one worker")]
    NoWorkers,
    #[error(transparent)]
    Tuner(#[from] TunerError),
}

const LATENT_TAG: u64 = 0x6c61_7465_6e74;
const NOISE_TAG: u64 = 0x6e6f_6973_65;
const SIM_TAG: u64 = 0x7369_6d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingModel {
    /// Each rung retrains from scratch: a job costs its full resource.
    #[default]
    Restart,
    /// Each rung resumes the previous rung's checkpoint.
    Incremental,
}

/// Synthetic learning curves with a known ground truth.
///
/// `loss(c, r) = u_c + (decay + noise * xi) / sqrt(r)` where `u_c ~ U(0, 1)` is
/// the configuration's latent quality and `xi ~ N(0, 1)` is keyed by `(c, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub seed: u64,
    pub decay: f64,
    pub noise: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self { seed: 0, decay: 1.0, noise: 0.0 }
    }
}

impl Objective {
    pub fn latent(&self, config_id: ConfigId) -> f64 {
        seed::rng_for(&[self.seed, LATENT_TAG, config_id]).random::<f64>()
    }

    pub fn loss(&self, config_id: ConfigId, resource: u64) -> f64 {
        let scale = 1.0 / (resource.max(1) as f64).sqrt();
        let xi: f64 = if self.noise > 0.0 {
            StandardNormal.sample(&mut seed::rng_for(&[self.seed, NOISE_TAG, config_id, resource]))
        } else {
            0.0
        };
        self.latent(config_id) + (self.decay + self.noise * xi) * scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub workers: usize,
    pub straggler_sigma: f64,
    pub drop_prob: f64,
    pub training: TrainingModel,
    pub objective: Objective,
    pub seed: u64,
}

impl Workload {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            straggler_sigma: 0.0,
            drop_prob: 0.0,
            training: TrainingModel::Restart,
            objective: Objective::default(),
            seed: 0,
        }
    }
}

/// Wall time of a job whose undisturbed duration is `base`, given a straggler draw `z`.
pub fn straggler_time(base: f64, z: f64) -> f64 {
    base * (1.0 + z.abs())
}

/// Probability that a job of `units` ticks survives per-tick drops with probability `p`.
pub fn drop_survival(p: f64, units: u64) -> f64 {
    (1.0 - p).powf(units as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Start,
    Complete,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: u64,
    pub worker: usize,
    pub kind: TraceKind,
    pub token: Token,
    pub config_id: ConfigId,
    pub rung: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Results recorded at the maximum resource.
    pub configs_trained_to_max: u64,
    pub time_to_first_max: Option<u64>,
    pub end_time: u64,
    pub jobs_started: u64,
    pub jobs_dropped: u64,
    pub finished: bool,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    time: u64,
    worker: usize,
    dropped: bool,
    token: Token,
}

pub struct Simulation {
    tuner: Tuner,
    workload: Workload,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Pending>>,
    idle: BTreeSet<usize>,
    now: u64,
    started: bool,
    keep_trace: bool,
    report: SimReport,
}

impl Simulation {
    pub fn new(spec: ExperimentSpec, workload: Workload) -> Result<Self, SimError> {
        if workload.workers == 0 {
            return Err(SimError::NoWorkers);
        }
        let tuner = Tuner::in_memory(spec)?;
        let rng = seed::rng_for(&[workload.seed, SIM_TAG]);
        let idle = (0..workload.workers).collect();
        Ok(Self {
            tuner,
            workload,
            rng,
            queue: BinaryHeap::new(),
            idle,
            now: 0,
            started: false,
            keep_trace: false,
            report: SimReport::default(),
        })
    }

    pub fn keep_trace(mut self) -> Self {
        self.keep_trace = true;
        self
    }

    pub fn tuner(&self) -> &Tuner {
        &self.tuner
    }

    pub fn tuner_mut(&mut self) -> &mut Tuner {
        &mut self.tuner
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn report(&self) -> &SimReport {
        &self.report
    }

    fn trace(&mut self, kind: TraceKind, worker: usize, token: Token) {
        if self.keep_trace {
            let d = &self.tuner.experiment().in_flight()[&token];
            let entry = TraceEntry { time: self.now, worker, kind, token, config_id: d.config_id, rung: d.rung };
            self.report.trace.push(entry);
        }
    }

    fn start(&mut self, worker: usize, token: Token, resource: u64, prior: Option<u64>) {
        let base = match (self.workload.training, prior) {
            (TrainingModel::Incremental, Some(p)) => resource - p,
            _ => resource,
        }
        .max(1);
        let sigma = self.workload.straggler_sigma;
        let z = if sigma > 0.0 { Normal::new(0.0, sigma).expect("finite sigma").sample(&mut self.rng) } else { 0.0 };
        let duration = (straggler_time(base as f64, z).ceil() as u64).max(1);
        let p = self.workload.drop_prob;
        let drop_at = if p > 0.0 {
            let failures = Geometric::new(p).expect("probability in (0, 1]").sample(&mut self.rng);
            Some(failures.saturating_add(1))
        } else {
            None
        };
        let pending = match drop_at {
            Some(d) if d <= duration => Pending { time: self.now + d, worker, dropped: true, token },
            _ => Pending { time: self.now + duration, worker, dropped: false, token },
        };
        self.trace(TraceKind::Start, worker, token);
        self.report.jobs_started += 1;
        self.queue.push(Reverse(pending));
    }

    fn poll_idle(&mut self) -> Result<(), SimError> {
        while let Some(&worker) = self.idle.first() {
            match self.tuner.next_job(self.now)? {
                NextJob::Job(a) => {
                    self.idle.remove(&worker);
                    self.start(worker, a.token, a.resource, a.prior_resource);
                }
                NextJob::Blocked => break,
                NextJob::Finished => {
                    self.report.finished = true;
                    break;
                }
            }
        }
        Ok(())
    }

    /// Advances to the next timestamp. Returns `false` once nothing is left to
    /// do or the next event lies beyond `horizon`.
    pub fn step(&mut self, horizon: Option<u64>) -> Result<bool, SimError> {
        if !self.started {
            self.started = true;
            self.poll_idle()?;
            return Ok(!self.queue.is_empty());
        }
        let Some(&Reverse(next)) = self.queue.peek() else { return Ok(false) };
        if horizon.is_some_and(|h| next.time > h) {
            return Ok(false);
        }
        self.now = next.time;
        let max_resource = self.tuner.experiment().settings().max_resource;
        while let Some(&Reverse(ev)) = self.queue.peek() {
            if ev.time != self.now {
                break;
            }
            self.queue.pop();
            if ev.dropped {
                self.trace(TraceKind::Drop, ev.worker, ev.token);
                self.tuner.drop_job(ev.token, self.now)?;
                self.report.jobs_dropped += 1;
            } else {
                self.trace(TraceKind::Complete, ev.worker, ev.token);
                let d = self.tuner.experiment().in_flight()[&ev.token].clone();
                let resource = self.tuner.experiment().resource_of(d.bracket, d.rung);
                let loss = self.workload.objective.loss(d.config_id, resource);
                self.tuner.record_result(ev.token, loss, self.now)?;
                if resource >= max_resource {
                    self.report.configs_trained_to_max += 1;
                    self.report.time_to_first_max.get_or_insert(self.now);
                }
            }
            self.idle.insert(ev.worker);
        }
        self.poll_idle()?;
        self.report.end_time = self.now;
        Ok(!self.queue.is_empty())
    }

    pub fn run(&mut self, horizon: Option<u64>) -> Result<&SimReport, SimError> {
        while self.step(horizon)? {}
        Ok(&self.report)
    }

    /// Throws away the live tuner and rebuilds it from its own journal, as a
    /// restarted server would. Work already handed to workers carries on.
    pub fn crash_and_resume(&mut self) -> Result<(), SimError> {
        let events = self.tuner.journal().events().to_vec();
        let journal = Journal::from_events(events).map_err(TunerError::from)?;
        self.tuner = crate::tuner::resume(journal, 0, self.now)?;
        Ok(())
    }
}

/// Runs `spec` against `workload` up to `horizon`.
pub fn simulate(spec: ExperimentSpec, workload: Workload, horizon: Option<u64>) -> Result<(SimReport, Tuner), SimError> {
    let mut sim = Simulation::new(spec, workload)?;
    sim.run(horizon)?;
    Ok((sim.report, sim.tuner))
}

/// Events other than width extensions, without sequence numbers.
pub fn comparable_events(journal: &Journal) -> Vec<(u64, EventKind)> {
    journal
        .events()
        .iter()
        .filter(|e| !matches!(e.kind, EventKind::WidthExtended { .. }))
        .map(|e| (e.timestamp, e.kind.clone()))
        .collect()
}

fn unit_space() -> SearchSpace {
    SearchSpace::new(vec![Dimension::linear("x", 0.0, 1.0)])
}

/// Single-bracket spec with `r`, `R`, `eta` and `n` spelled out.
pub fn bracket_spec(mode: Mode, n: u64, min_resource: u64, max_resource: u64, eta: u64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(unit_space(), mode, n, max_resource);
    spec.min_resource = Some(min_resource);
    spec.eta = Some(eta);
    spec.brackets = Some(BracketSet::Explicit(vec![0]));
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerSetup {
    pub workers: usize,
    pub n: u64,
    pub min_resource: u64,
    pub max_resource: u64,
    pub eta: u64,
    pub horizon: u64,
    pub replications: u64,
    pub sigmas: Vec<f64>,
    pub drop_probs: Vec<f64>,
    pub objective_noise: f64,
}

impl Default for StragglerSetup {
    fn default() -> Self {
        Self {
            workers: 25,
            n: 256,
            min_resource: 1,
            max_resource: 256,
            eta: 4,
            horizon: 2560,
            replications: 25,
            sigmas: vec![0.0, 0.5, 1.0, 2.0],
            drop_probs: vec![0.0, 1e-4, 1e-3, 1e-2],
            objective_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerCell {
    pub policy: Mode,
    pub sigma: f64,
    pub drop_prob: f64,
    pub mean_configs_to_max: f64,
    /// Runs that never reached `R` count as the horizon.
    pub mean_time_to_first_max: f64,
    pub reached_fraction: f64,
}

/// Synchronous SHA against ASHA under stragglers and drops. Synchronous SHA
/// runs brackets of `n` configurations and opens another whenever no job is
/// available; ASHA runs one bracket whose bottom rung grows without limit.
pub fn straggler_grid(setup: &StragglerSetup) -> Result<Vec<StragglerCell>, SimError> {
    let mut runs = Vec::new();
    for policy in [Mode::SyncSha, Mode::Asha] {
        for &sigma in &setup.sigmas {
            for &p in &setup.drop_probs {
                for rep in 0..setup.replications {
                    runs.push((policy, sigma, p, rep));
                }
            }
        }
    }
    let reports = runs
        .par_iter()
        .map(|&(policy, sigma, p, rep)| {
            let mut spec = bracket_spec(policy, setup.n, setup.min_resource, setup.max_resource, setup.eta);
            match policy {
                Mode::Asha => spec.unbounded_width = true,
                _ => spec.loop_brackets = true,
            }
            spec.seed = rep;
            let workload = Workload {
                workers: setup.workers,
                straggler_sigma: sigma,
                drop_prob: p,
                training: TrainingModel::Restart,
                objective: Objective { seed: rep, decay: 1.0, noise: setup.objective_noise },
                seed: seed::derive(&[rep, sigma.to_bits(), p.to_bits()]),
            };
            let mut sim = Simulation::new(spec, workload)?;
            sim.run(Some(setup.horizon))?;
            Ok(sim.report)
        })
        .collect::<Result<Vec<SimReport>, SimError>>()?;

    let mut cells = Vec::new();
    for (chunk, group) in reports.chunks(setup.replications as usize).zip(runs.chunks(setup.replications as usize)) {
        let (policy, sigma, p, _) = group[0];
        let k = chunk.len() as f64;
        cells.push(StragglerCell {
            policy,
            sigma,
            drop_prob: p,
            mean_configs_to_max: chunk.iter().map(|r| r.configs_trained_to_max as f64).sum::<f64>() / k,
            mean_time_to_first_max: chunk
                .iter()
                .map(|r| r.time_to_first_max.unwrap_or(setup.horizon) as f64)
                .sum::<f64>()
                / k,
            reached_fraction: chunk.iter().filter(|r| r.time_to_first_max.is_some()).count() as f64 / k,
        });
    }
    Ok(cells)
}

pub fn write_cells_csv<W: io::Write>(cells: &[StragglerCell], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

/// Fraction of rung-0 promotions that hindsight would not have made: the
/// promoted configurations outside the final top `floor(m / eta)` of the `m`
/// completed rung-0 results. With a noiseless objective this is the true ranking.
pub fn mispromotion_fraction(tuner: &Tuner) -> f64 {
    let exp = tuner.experiment();
    let eta = exp.settings().eta as usize;
    let mut promoted = 0usize;
    let mut wrong = 0usize;
    for slot in exp.brackets() {
        let rung0 = &slot.state.rungs[0];
        let best: BTreeSet<ConfigId> = rung0.top_k(rung0.completed().len() / eta).into_iter().collect();
        promoted += rung0.promoted().len();
        wrong += rung0.promoted().iter().filter(|c| !best.contains(c)).count();
    }
    if promoted == 0 { 0.0 } else { wrong as f64 / promoted as f64 }
}

/// Runs one ASHA bracket (`s = 0`, `eta = 4`, `R = 256`) of width `n` to
/// completion and measures rung-0 mispromotions.
pub fn asha_mispromotions(n: u64, seed: u64, workers: usize, noise: f64) -> Result<f64, SimError> {
    let mut spec = bracket_spec(Mode::Asha, n, 1, 256, 4);
    spec.seed = seed;
    let mut workload = Workload::new(workers);
    workload.objective = Objective { seed, decay: 1.0, noise };
    workload.seed = seed;
    let (_, tuner) = simulate(spec, workload, None)?;
    Ok(mispromotion_fraction(&tuner))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_config_bracket_finishes_at_13() {
        for mode in [Mode::SyncSha, Mode::Asha] {
            let (report, tuner) = simulate(bracket_spec(mode, 9, 1, 9, 3), Workload::new(9), None).unwrap();
            assert_eq!(report.time_to_first_max, Some(13), "{mode:?}");
            assert_eq!(report.configs_trained_to_max, 1);
            assert!(report.finished);
            assert!(tuner.experiment().is_finished());
        }
    }

    #[test]
    fn incremental_training_is_cheaper() {
        let mut w = Workload::new(9);
        w.training = TrainingModel::Incremental;
        let (report, _) = simulate(bracket_spec(Mode::Asha, 9, 1, 9, 3), w, None).unwrap();
        assert_eq!(report.time_to_first_max, Some(9));
    }

    #[test]
    fn objective_is_keyed() {
        let o = Objective { seed: 1, decay: 1.0, noise: 0.3 };
        assert_eq!(o.loss(5, 16), o.loss(5, 16));
        assert_ne!(o.loss(5, 16), o.loss(5, 64));
        assert!((0.0..1.0).contains(&o.latent(5)));
    }

    #[test]
    fn survival_formula() {
        assert!((drop_survival(1e-3, 256) - 0.999f64.powi(256)).abs() < 1e-15);
        assert_eq!(drop_survival(0.0, 1000), 1.0);
        assert_eq!(drop_survival(0.01, 0), 1.0);
        assert!((drop_survival(0.01, 256) - 0.0763).abs() < 1e-4);
    }

    #[test]
    fn straggler_stretch() {
        assert_eq!(straggler_time(4.0, 0.0), 4.0);
        assert_eq!(straggler_time(4.0, -0.5), 6.0);
        assert_eq!(straggler_time(4.0, 0.5), 6.0);
    }

    #[test]
    fn zero_workers_rejected() {
        let err = Simulation::new(bracket_spec(Mode::Asha, 9, 1, 9, 3), Workload::new(0)).err().unwrap();
        assert!(matches!(err, SimError::NoWorkers));
    }
}
