//! Sharing a GPU cluster between experiments.
//!
//! Each experiment exposes a stack of runnable tasks and a per-task GPU
//! count `kappa`. Allocations are weighted max-min fair with each experiment
//! capped at `kappa` times its task count. Shrinking an allocation never kills
//! a task outright: tasks are throttled first and preempted at their next
//! checkpoint boundary.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bracket::ConfigId;
use crate::orchestrator::Experiment;

/// Tolerance for efficiency comparisons made in floating point.
const EFFICIENCY_EPS: f64 = 1e-9;

pub trait ScalingModel {
    /// Throughput on `gpus` GPUs relative to one GPU.
    fn speedup(&self, gpus: u32) -> f64;
}

/// `speedup(g) = g / (1 + overhead * (g - 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmdahlModel {
    pub overhead: f64,
}

impl Default for AmdahlModel {
    fn default() -> Self {
        Self { overhead: 1.0 / 45.0 }
    }
}

impl ScalingModel for AmdahlModel {
    fn speedup(&self, gpus: u32) -> f64 {
        let g = gpus as f64;
        g / (1.0 + self.overhead * (g - 1.0))
    }
}

impl AmdahlModel {
    /// Closed form of [`max_gpus_for_efficiency`] for this model.
    pub fn max_gpus_closed_form(&self, tau: f64, cluster_size: u32) -> u32 {
        if self.overhead <= 0.0 {
            return cluster_size.max(1);
        }
        let g = (1.0 + (1.0 / tau - 1.0) / self.overhead + EFFICIENCY_EPS).floor();
        (g as u32).clamp(1, cluster_size.max(1))
    }
}

/// Largest GPU count (at most `cluster_size`) whose parallel efficiency
/// `speedup(g) / g` is still at least `tau`. Always at least 1.
pub fn max_gpus_for_efficiency(model: &dyn ScalingModel, tau: f64, cluster_size: u32) -> u32 {
    (1..=cluster_size.max(1))
        .filter(|&g| model.speedup(g) / g as f64 >= tau - EFFICIENCY_EPS)
        .max()
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub config_id: ConfigId,
    pub rung: usize,
    pub resource: u64,
}

/// Runnable tasks, most recently pushed on top.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStack {
    tasks: Vec<Task>,
}

impl TaskStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task: Task) {
        self.tasks.push(task);
    }

    pub fn pop(&mut self) -> Option<Task> {
        self.tasks.pop()
    }

    pub fn peek(&self) -> Option<&Task> {
        self.tasks.last()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDemand {
    pub experiment: String,
    pub kappa: u32,
    pub stack_size: u64,
    pub weight: f64,
}

impl ClusterDemand {
    pub fn cap(&self) -> u64 {
        (self.kappa as u64).saturating_mul(self.stack_size)
    }
}

/// Demand of an experiment whose runnable tasks form its stack.
pub fn demand(id: &str, experiment: &Experiment, kappa: u32, weight: f64) -> ClusterDemand {
    ClusterDemand { experiment: id.to_string(), kappa, stack_size: experiment.runnable_tasks(), weight }
}

/// Weighted max-min fair split of `capacity` GPUs subject to each demand's cap.
///
/// Shares are computed by water-filling with experiments frozen at their cap.
/// The integer remainder goes one GPU at a time to the experiment that would
/// hold the smallest weighted share after receiving it (ties: larger
/// fractional part, then input order).
pub fn water_fill(demands: &[ClusterDemand], capacity: u64) -> BTreeMap<String, u64> {
    let n = demands.len();
    let caps: Vec<u64> = demands.iter().map(ClusterDemand::cap).collect();
    let weights: Vec<f64> = demands.iter().map(|d| if d.weight > 0.0 { d.weight } else { 1.0 }).collect();
    let mut alloc = vec![0u64; n];
    let mut frac = vec![0f64; n];
    let mut active: Vec<usize> = (0..n).filter(|&i| caps[i] > 0).collect();
    let mut left = capacity;
    loop {
        if active.is_empty() {
            break;
        }
        let total_w: f64 = active.iter().map(|&i| weights[i]).sum();
        let level = left as f64 / total_w;
        let saturated: Vec<usize> = active.iter().copied().filter(|&i| weights[i] * level >= caps[i] as f64).collect();
        if saturated.is_empty() {
            for &i in &active {
                let share = weights[i] * level;
                alloc[i] = (share.floor() as u64).min(caps[i]);
                frac[i] = share - share.floor();
            }
            let used: u64 = active.iter().map(|&i| alloc[i]).sum();
            left -= used.min(left);
            break;
        }
        for &i in &saturated {
            alloc[i] = caps[i];
            left -= caps[i];
        }
        active.retain(|i| !saturated.contains(i));
    }
    // Hand out the integer remainder.
    while left > 0 {
        let pick = active
            .iter()
            .copied()
            .filter(|&i| alloc[i] < caps[i])
            .min_by(|&a, &b| {
                let sa = (alloc[a] + 1) as f64 / weights[a];
                let sb = (alloc[b] + 1) as f64 / weights[b];
                sa.total_cmp(&sb).then(frac[b].total_cmp(&frac[a])).then(a.cmp(&b))
            });
        let Some(i) = pick else { break };
        alloc[i] += 1;
        frac[i] = 0.0;
        left -= 1;
    }
    demands.iter().zip(alloc).map(|(d, a)| (d.experiment.clone(), a)).collect()
}

/// First-come first-served baseline: each demand in input order takes all it
/// can until capacity runs out.
pub fn fifo_fill(demands: &[ClusterDemand], capacity: u64) -> BTreeMap<String, u64> {
    let mut left = capacity;
    demands
        .iter()
        .map(|d| {
            let take = d.cap().min(left);
            left -= take;
            (d.experiment.clone(), take)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "kebab-case")]
pub enum Directive {
    Dispatch { experiment: String, task_id: u64, task: Task, gpus: u32 },
    /// Stop the task at its next checkpoint and return it to the stack.
    Preempt { experiment: String, task_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RebalanceOutcome {
    pub allocations: BTreeMap<String, u64>,
    /// `(before, after)` for every experiment whose allocation moved.
    pub changes: BTreeMap<String, (u64, u64)>,
    pub directives: Vec<Directive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunningTask {
    task: Task,
    gpus: u32,
    preempting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Member {
    kappa: u32,
    weight: f64,
    stack: TaskStack,
    running: BTreeMap<u64, RunningTask>,
    allocation: u64,
}

impl Member {
    fn used(&self) -> u64 {
        self.running.values().map(|t| t.gpus as u64).sum()
    }
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("experiment {0:?} is not registered")]
    UnknownExperiment(String),
    #[error("experiment {0:?} is already registered")]
    Duplicate(String),
    #[error("task {1} of {0:?} is not running")]
    UnknownTask(String, u64),
    #[error("cannot write allocation log: {0}")]
    Log(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One row of the per-tick allocation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub tick: u64,
    pub experiment: String,
    pub cap: u64,
    pub allocation: u64,
    pub used: u64,
}

/// Cluster-wide allocator holding every experiment's task stack.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    capacity: u64,
    members: BTreeMap<String, Member>,
    next_task_id: u64,
    tick: u64,
    log: Vec<AllocationRow>,
}

impl Cluster {
    pub fn new(capacity: u64) -> Self {
        Self { capacity, ..Self::default() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn set_capacity(&mut self, capacity: u64) {
        self.capacity = capacity;
    }

    pub fn register(&mut self, experiment: &str, kappa: u32, weight: f64) -> Result<(), ClusterError> {
        if self.members.contains_key(experiment) {
            return Err(ClusterError::Duplicate(experiment.into()));
        }
        let member = Member { kappa: kappa.max(1), weight, stack: TaskStack::new(), running: BTreeMap::new(), allocation: 0 };
        self.members.insert(experiment.into(), member);
        Ok(())
    }

    fn member(&mut self, experiment: &str) -> Result<&mut Member, ClusterError> {
        self.members.get_mut(experiment).ok_or_else(|| ClusterError::UnknownExperiment(experiment.into()))
    }

    pub fn push_task(&mut self, experiment: &str, task: Task) -> Result<(), ClusterError> {
        self.member(experiment)?.stack.push(task);
        Ok(())
    }

    /// Removes a finished task and frees its GPUs.
    pub fn complete_task(&mut self, experiment: &str, task_id: u64) -> Result<Task, ClusterError> {
        let m = self.member(experiment)?;
        m.running.remove(&task_id).map(|t| t.task).ok_or_else(|| ClusterError::UnknownTask(experiment.into(), task_id))
    }

    /// A preempted task reached its checkpoint: free its GPUs and make it runnable again.
    pub fn preempted(&mut self, experiment: &str, task_id: u64) -> Result<(), ClusterError> {
        let m = self.member(experiment)?;
        let t = m.running.remove(&task_id).ok_or_else(|| ClusterError::UnknownTask(experiment.into(), task_id))?;
        m.stack.push(t.task);
        Ok(())
    }

    pub fn allocation(&self, experiment: &str) -> Option<u64> {
        self.members.get(experiment).map(|m| m.allocation)
    }

    pub fn used(&self, experiment: &str) -> Option<u64> {
        self.members.get(experiment).map(Member::used)
    }

    /// Demands as seen by the allocator. Running tasks count towards the cap
    /// so that dispatching does not by itself shrink an experiment's share.
    pub fn demands(&self) -> Vec<ClusterDemand> {
        self.members
            .iter()
            .map(|(id, m)| ClusterDemand {
                experiment: id.clone(),
                kappa: m.kappa,
                stack_size: (m.stack.len() + m.running.len()) as u64,
                weight: m.weight,
            })
            .collect()
    }

    pub fn rebalance(&mut self) -> RebalanceOutcome {
        self.tick += 1;
        let demands = self.demands();
        let allocations = water_fill(&demands, self.capacity);
        let mut out = RebalanceOutcome { allocations: allocations.clone(), ..Default::default() };

        for (id, m) in &mut self.members {
            let target = allocations[id];
            if target != m.allocation {
                out.changes.insert(id.clone(), (m.allocation, target));
                m.allocation = target;
            }
            // Mark the newest tasks for preemption until the rest fit.
            let mut keep = m.used();
            for t in m.running.values().filter(|t| t.preempting) {
                keep -= t.gpus as u64;
            }
            if keep > target {
                for (&task_id, t) in m.running.iter_mut().rev() {
                    if keep <= target {
                        break;
                    }
                    if !t.preempting {
                        t.preempting = true;
                        keep -= t.gpus as u64;
                        out.directives.push(Directive::Preempt { experiment: id.clone(), task_id });
                    }
                }
            }
        }

        let mut free = self.capacity.saturating_sub(self.members.values().map(Member::used).sum());
        for (id, m) in &mut self.members {
            while free > 0 && !m.stack.is_empty() {
                let used = m.used();
                if used >= m.allocation {
                    break;
                }
                let gpus = (m.kappa as u64).min(m.allocation - used).min(free) as u32;
                let task = m.stack.pop().expect("non-empty");
                let task_id = self.next_task_id;
                self.next_task_id += 1;
                m.running.insert(task_id, RunningTask { task, gpus, preempting: false });
                free -= gpus as u64;
                out.directives.push(Directive::Dispatch { experiment: id.clone(), task_id, task, gpus });
            }
        }

        for (id, m) in &self.members {
            let cap = m.kappa as u64 * (m.stack.len() + m.running.len()) as u64;
            self.log.push(AllocationRow { tick: self.tick, experiment: id.clone(), cap, allocation: m.allocation, used: m.used() });
        }
        out
    }

    pub fn log(&self) -> &[AllocationRow] {
        &self.log
    }

    pub fn write_log<W: io::Write>(&self, out: W) -> Result<(), ClusterError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
