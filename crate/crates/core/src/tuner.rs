//! An [`Experiment`] bound to its [`Journal`].
//!
//! Every change is journaled first and applied second, so replaying the
//! journal reproduces the live state event for event.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bracket::{ConfigId, JobOrigin};
use crate::journal::{EventKind, Journal, JournalError, JournalEvent};
use crate::orchestrator::{
    allocate_configs, AllocError, ApplyError, Experiment, ExperimentSpec, ExperimentStatus, Plan, Settled, SpecError,
    Token,
};
use crate::space::Configuration;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("event {sequence_no} does not apply: {source}")]
    Apply { sequence_no: u64, source: ApplyError },
    #[error("token {0} is not outstanding")]
    UnknownToken(Token),
    #[error("journal is empty")]
    EmptyJournal,
    #[error("first journal event does not create an experiment")]
    MissingCreation,
    #[error("cannot extend width: {0}")]
    Extend(String),
}

impl From<AllocError> for TunerError {
    fn from(e: AllocError) -> Self {
        TunerError::Extend(e.to_string())
    }
}

/// A job handed to a worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub token: Token,
    pub bracket: usize,
    pub early_stopping_rate: u32,
    pub config: Configuration,
    pub rung: usize,
    pub resource: u64,
    /// Resource already trained by the previous rung, when continuing from a checkpoint.
    pub prior_resource: Option<u64>,
    pub origin: JobOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NextJob {
    Job(Assignment),
    Blocked,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecordOutcome {
    Recorded,
    /// The token already has this exact result; nothing was journaled.
    Duplicate,
}

#[derive(Debug)]
pub struct Tuner {
    experiment: Experiment,
    journal: Journal,
    snapshots: Option<Vec<Experiment>>,
}

impl Tuner {
    /// Starts a new experiment on `journal`, which must be empty.
    pub fn create(spec: ExperimentSpec, mut journal: Journal, now: u64) -> Result<Self, TunerError> {
        let experiment = Experiment::new(spec.clone())?;
        journal.append(EventKind::ExperimentCreated { spec }, now)?;
        Ok(Self { experiment, journal, snapshots: None })
    }

    pub fn in_memory(spec: ExperimentSpec) -> Result<Self, TunerError> {
        Self::create(spec, Journal::in_memory(), 0)
    }

    /// Rebuilds the tuner from an existing journal.
    pub fn from_journal(journal: Journal) -> Result<Self, TunerError> {
        let experiment = replay(journal.events())?;
        Ok(Self { experiment, journal, snapshots: None })
    }

    pub fn open(path: &Path, fsync: bool) -> Result<Self, TunerError> {
        Self::from_journal(Journal::open(path, fsync)?)
    }

    /// Keeps a copy of the experiment after every event, for replay checks.
    pub fn record_snapshots(&mut self) {
        self.snapshots = Some(vec![self.experiment.clone(); self.journal.len()]);
    }

    pub fn snapshots(&self) -> Option<&[Experiment]> {
        self.snapshots.as_deref()
    }

    pub fn experiment(&self) -> &Experiment {
        &self.experiment
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn into_parts(self) -> (Experiment, Journal) {
        (self.experiment, self.journal)
    }

    fn commit(&mut self, kind: EventKind, now: u64) -> Result<(), TunerError> {
        let event = self.journal.append(kind, now)?;
        let sequence_no = event.sequence_no;
        self.experiment.apply(event).map_err(|source| TunerError::Apply { sequence_no, source })?;
        if let Some(s) = &mut self.snapshots {
            s.push(self.experiment.clone());
        }
        Ok(())
    }

    pub fn next_job(&mut self, now: u64) -> Result<NextJob, TunerError> {
        loop {
            match self.experiment.plan() {
                Plan::Dispatch(events) => {
                    let token = match events.last() {
                        Some(&EventKind::JobDispatched { token, .. }) => token,
                        _ => unreachable!("a dispatch plan ends with a dispatch"),
                    };
                    for kind in events {
                        self.commit(kind, now)?;
                    }
                    return Ok(NextJob::Job(self.assignment(token)));
                }
                Plan::OpenBracket(kind) => self.commit(kind, now)?,
                Plan::Blocked => return Ok(NextJob::Blocked),
                Plan::Finished => return Ok(NextJob::Finished),
            }
        }
    }

    /// Describes an outstanding job.
    pub fn assignment(&self, token: Token) -> Assignment {
        let d = &self.experiment.in_flight()[&token];
        let slot = &self.experiment.brackets()[d.bracket];
        let spec = self.experiment.spec();
        let params = &slot.state.params;
        Assignment {
            token,
            bracket: d.bracket,
            early_stopping_rate: slot.early_stopping_rate,
            config: spec.space.sample_unchecked(spec.seed, d.config_id),
            rung: d.rung,
            resource: params.rung_resource(d.rung),
            prior_resource: (d.rung > 0).then(|| params.rung_resource(d.rung - 1)),
            origin: if d.rung == 0 { JobOrigin::NewConfig } else { JobOrigin::Promotion { from_rung: d.rung - 1 } },
        }
    }

    pub fn record_result(&mut self, token: Token, loss: f64, now: u64) -> Result<RecordOutcome, TunerError> {
        self.record_result_with_checkpoint(token, loss, None, now)
    }

    pub fn record_result_with_checkpoint(
        &mut self,
        token: Token,
        loss: f64,
        checkpoint: Option<String>,
        now: u64,
    ) -> Result<RecordOutcome, TunerError> {
        let loss = crate::bracket::normalize_loss(loss);
        if let Some(Settled::Completed { loss: prior }) = self.experiment.settled(token) {
            if prior.to_bits() == loss.to_bits() {
                return Ok(RecordOutcome::Duplicate);
            }
        }
        let d = self.experiment.in_flight().get(&token).ok_or(TunerError::UnknownToken(token))?.clone();
        self.commit(
            EventKind::ResultRecorded {
                token,
                bracket: d.bracket,
                config_id: d.config_id,
                rung: d.rung,
                loss,
                checkpoint,
            },
            now,
        )?;
        Ok(RecordOutcome::Recorded)
    }

    /// Marks an outstanding job as lost; its configuration is queued again.
    pub fn drop_job(&mut self, token: Token, now: u64) -> Result<(), TunerError> {
        let d = self.experiment.in_flight().get(&token).ok_or(TunerError::UnknownToken(token))?.clone();
        self.commit(EventKind::JobDropped { token, bracket: d.bracket, config_id: d.config_id, rung: d.rung }, now)
    }

    /// Adds `additional_n` configurations spread over the configured brackets
    /// as if they had been part of the original budget.
    pub fn extend(&mut self, additional_n: u64, now: u64) -> Result<(), TunerError> {
        if additional_n == 0 {
            return self.commit(EventKind::WidthExtended { bracket: 0, additional: 0 }, now);
        }
        if self.experiment.spec().mode.is_synchronous() {
            return Err(TunerError::Extend("synchronous brackets have a fixed width".into()));
        }
        let settings = self.experiment.settings().clone();
        let shares =
            allocate_configs(additional_n, &settings.brackets, settings.min_resource, settings.max_resource, settings.eta)?;
        for (s, additional) in shares {
            let bracket = self
                .experiment
                .brackets()
                .iter()
                .position(|b| b.early_stopping_rate == s)
                .expect("every configured rate has a bracket");
            self.commit(EventKind::WidthExtended { bracket, additional }, now)?;
        }
        Ok(())
    }

    pub fn status(&self) -> ExperimentStatus {
        let mut status = self.experiment.status();
        status.sequence_no = self.journal.last_sequence_no();
        status
    }

    pub fn config(&self, config_id: ConfigId) -> Configuration {
        let spec = self.experiment.spec();
        spec.space.sample_unchecked(spec.seed, config_id)
    }
}

/// Rebuilds an experiment by folding every event of a journal.
pub fn replay(events: &[JournalEvent]) -> Result<Experiment, TunerError> {
    let (first, rest) = events.split_first().ok_or(TunerError::EmptyJournal)?;
    let EventKind::ExperimentCreated { spec } = &first.kind else {
        return Err(TunerError::MissingCreation);
    };
    replay_from(spec.clone(), rest)
}

/// Rebuilds an experiment from its spec and the events that followed creation.
pub fn replay_from(spec: ExperimentSpec, events: &[JournalEvent]) -> Result<Experiment, TunerError> {
    let mut experiment = Experiment::new(spec)?;
    for e in events {
        experiment.apply(e).map_err(|source| TunerError::Apply { sequence_no: e.sequence_no, source })?;
    }
    Ok(experiment)
}

/// Replays `journal` and widens the experiment by `additional_n` configurations.
pub fn resume(journal: Journal, additional_n: u64, now: u64) -> Result<Tuner, TunerError> {
    let mut tuner = Tuner::from_journal(journal)?;
    tuner.extend(additional_n, now)?;
    Ok(tuner)
}
