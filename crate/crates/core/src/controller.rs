//! Online tuning loop: K-NN for in-cluster states, the RL policy for
//! outliers, one decision per period.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactError;
use crate::backend::ParamBackend;
use crate::cluster::ClusterModel;
use crate::collector::{EnvError, Environment};
use crate::db::PerfDatabase;
use crate::rl::{PendingAction, PpoAgent, RlError};
use crate::space::{ParamConfig, ParamSpace};
use crate::state::{IpcBounds, WorkloadState};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid tuner config: {0}")]
    Config(String),
    #[error("artifacts are inconsistent: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("writing the decision log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DecisionSource {
    Knn,
    Rl,
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TunerMode {
    /// K-NN inside clusters, RL for outliers.
    Hybrid,
    RlOnly,
    KnnOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerConfig {
    /// Interval length in the environment's unit (simulator steps, which
    /// stand for seconds).
    pub period: u64,
    pub knn_k: usize,
    pub rl_online_learning: bool,
    pub latency_budget_ms: f64,
    pub mode: TunerMode,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            period: 10,
            knn_k: 25,
            rl_online_learning: true,
            latency_budget_ms: 10.0,
            mode: TunerMode::Hybrid,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.period < 1 || self.knn_k < 1 || !(self.latency_budget_ms > 0.0) {
            return Err(ControllerError::Config(format!("{self:?}")));
        }
        Ok(())
    }

    /// Decision steps for a run of `duration` environment units.
    pub fn steps_for(&self, duration: u64) -> u64 {
        duration.div_ceil(self.period)
    }
}

/// One logged decision. The outcome fields are filled once the interval the
/// config ran for has been measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningDecision {
    pub interval: u64,
    pub source: DecisionSource,
    pub config: ParamConfig,
    pub cluster_id: Option<usize>,
    pub distance: Option<f64>,
    pub outlier: Option<bool>,
    /// State the decision was based on.
    pub ws: Option<WorkloadState>,
    /// False when the backend rejected the config and the previous one stayed.
    pub applied: bool,
    pub ipc: Option<f64>,
    pub reward: Option<f64>,
    pub phase: Option<usize>,
    pub latency_us: f64,
}

/// Clustering model with the database it was fit on.
#[derive(Debug, Clone)]
pub struct OfflineModels {
    pub model: ClusterModel,
    pub db: PerfDatabase,
}

impl OfflineModels {
    pub fn new(model: ClusterModel, db: PerfDatabase) -> Result<Self, ArtifactError> {
        model.check_db(&db)?;
        Ok(Self { model, db })
    }

    pub fn load(model: &Path, db: &Path) -> Result<Self, ArtifactError> {
        Self::new(ClusterModel::load(model)?, PerfDatabase::load(db)?)
    }
}

/// Result of one [`HybridTuner::tune_step`].
#[derive(Debug, Clone)]
pub struct StepDecision {
    pub decision: TuningDecision,
    pub pending: Option<PendingAction>,
}

#[derive(Debug, Clone)]
pub struct HybridTuner {
    pub space: ParamSpace,
    pub cfg: TunerConfig,
    pub agent: PpoAgent,
    models: Option<OfflineModels>,
    bounds: Option<IpcBounds>,
}

impl HybridTuner {
    /// `models = None` means the offline model could not be loaded; the tuner
    /// then falls back to the default config except in RL-only mode.
    pub fn new(
        space: ParamSpace,
        models: Option<OfflineModels>,
        mut agent: PpoAgent,
        cfg: TunerConfig,
    ) -> Result<Self, ControllerError> {
        cfg.validate()?;
        if !agent.space.is_compatible(&space) {
            return Err(ControllerError::Mismatch(format!(
                "agent space {} does not match tuning space {}",
                agent.space.solution, space.solution
            )));
        }
        let mut bounds = None;
        if let Some(m) = &models {
            if !m.db.space.is_compatible(&space) {
                return Err(ControllerError::Mismatch(format!(
                    "database space {} does not match tuning space {}",
                    m.db.space.solution, space.solution
                )));
            }
            bounds = m.db.ipc_bounds().ok();
        }
        agent.frozen = agent.frozen || !cfg.rl_online_learning;
        Ok(Self {
            space,
            cfg,
            agent,
            models,
            bounds,
        })
    }

    /// Overrides the IPC range used for rewards.
    pub fn with_bounds(mut self, bounds: IpcBounds) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn bounds(&self) -> Option<IpcBounds> {
        self.bounds
    }

    pub fn models(&self) -> Option<&OfflineModels> {
        self.models.as_ref()
    }

    /// Running without a clustering model.
    pub fn degraded(&self) -> bool {
        self.models.is_none()
    }

    pub fn default_decision(&self, interval: u64) -> TuningDecision {
        TuningDecision {
            interval,
            source: DecisionSource::Default,
            config: self.space.default_config(),
            cluster_id: None,
            distance: None,
            outlier: None,
            ws: None,
            applied: false,
            ipc: None,
            reward: None,
            phase: None,
            latency_us: 0.0,
        }
    }

    /// Picks the config for the next interval from the state just observed.
    pub fn tune_step(&mut self, ws: &WorkloadState) -> StepDecision {
        let mut decision = self.default_decision(0);
        decision.ws = Some(*ws);
        let check = self.models.as_ref().map(|m| m.model.outlier_check(ws));
        if let Some(c) = check {
            decision.cluster_id = Some(c.cluster);
            decision.distance = Some(c.distance);
            decision.outlier = Some(c.is_outlier);
        }
        let use_rl = match (self.cfg.mode, check) {
            (TunerMode::RlOnly, _) => true,
            (_, None) => false,
            (TunerMode::KnnOnly, Some(_)) => false,
            (TunerMode::Hybrid, Some(c)) => c.is_outlier,
        };
        if use_rl {
            let pending = self.agent.act(ws);
            decision.source = DecisionSource::Rl;
            decision.config = pending.config.clone();
            return StepDecision {
                decision,
                pending: Some(pending),
            };
        }
        self.agent.mark_boundary();
        if let Some(m) = &self.models {
            let ans = m.model.knn_query(&m.db, ws, self.cfg.knn_k);
            decision.source = DecisionSource::Knn;
            decision.config = ans.config;
            decision.cluster_id = Some(ans.cluster);
        }
        StepDecision {
            decision,
            pending: None,
        }
    }

    /// Feeds the measured outcome of an RL decision back to the agent.
    fn learn(&mut self, pending: PendingAction, ipc: f64, next: &WorkloadState, done: bool) -> Result<(), RlError> {
        let Some(b) = self.bounds else {
            return Ok(());
        };
        match self.agent.record(pending, b.reward(ipc), next, done) {
            Ok(_) => Ok(()),
            Err(RlError::NonFinite(what)) => {
                log::warn!("PPO update skipped, weights kept: non-finite {what}");
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: u64,
    pub decisions: Vec<TuningDecision>,
    /// Intervals whose metrics were empty; the following decision was skipped.
    pub skipped: Vec<u64>,
    /// The metrics source ran out before the requested duration.
    pub truncated: bool,
    pub degraded: bool,
    pub apply_failures: u64,
    pub ppo_updates: u64,
    pub mean_ipc: Option<f64>,
    pub latency_p99_us: f64,
    pub latency_max_us: f64,
    pub baseline_ipc: Option<f64>,
    pub speedup: Option<f64>,
}

impl RunReport {
    pub fn write_decision_log(&self, mut w: impl Write) -> std::io::Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut w, d)?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Fills the speedup against a default-config run.
    pub fn set_baseline(&mut self, baseline_ipc: f64) {
        self.baseline_ipc = Some(baseline_ipc);
        self.speedup = self.mean_ipc.map(|m| m / baseline_ipc);
    }

    pub fn count(&self, source: DecisionSource) -> usize {
        self.decisions.iter().filter(|d| d.source == source).count()
    }
}

#[derive(Debug, Error)]
#[error("tuning stopped after {} decisions: {source}", partial.decisions.len())]
pub struct RunFailure {
    pub partial: Box<RunReport>,
    #[source]
    pub source: ControllerError,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn apply_with_retry(backend: &mut dyn ParamBackend, space: &ParamSpace, cfg: &ParamConfig) -> Result<(), String> {
    let attempt = |b: &mut dyn ParamBackend| match b.apply(space, cfg) {
        Ok(r) if r.is_ok() => Ok(()),
        Ok(r) => Err(r
            .failures()
            .map(|f| format!("{}: {:?}", f.name, f.status))
            .collect::<Vec<_>>()
            .join("; ")),
        Err(e) => Err(e.to_string()),
    };
    attempt(backend).or_else(|first| {
        log::warn!("applying {cfg} failed ({first}); retrying once");
        attempt(backend)
    })
}

fn append_log(w: &mut dyn Write, d: &TuningDecision) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, d)?;
    writeln!(w)?;
    w.flush()
}

/// Runs `tuner` for `duration` environment units.
///
/// The default config is applied before the first interval. Every later
/// decision is taken from the state measured over the previous interval and
/// applied before the next one; its IPC and reward are attached when that
/// interval ends. A decision's latency covers the outlier check, the K-NN
/// query or policy forward, and the agent bookkeeping for the previous
/// reward. When `log` is given, each decision is appended to it as a JSON
/// line as soon as its outcome is known.
pub fn run_loop(
    env: &mut dyn Environment,
    backend: &mut dyn ParamBackend,
    tuner: &mut HybridTuner,
    duration: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<RunReport, RunFailure> {
    let steps = tuner.cfg.steps_for(duration);
    if env.period() != tuner.cfg.period {
        return Err(RunFailure {
            partial: Box::default(),
            source: ControllerError::Config(format!(
                "environment interval is {} units but the tuning period is {}",
                env.period(),
                tuner.cfg.period
            )),
        });
    }
    let mut report = RunReport {
        steps,
        degraded: tuner.degraded(),
        ..Default::default()
    };
    if tuner.degraded() && steps > 0 {
        log::error!("no clustering model available; falling back to default decisions");
    }
    let mut latencies = Vec::with_capacity(steps.min(1 << 16) as usize);
    let mut current: Option<ParamConfig> = None;
    let mut next: Option<StepDecision> = None;
    let mut ipc_sum = 0.0;
    let mut measured = 0u64;

    for t in 0..steps {
        let mut step = match next.take() {
            Some(s) => Some(s),
            None if t == 0 => Some(StepDecision {
                decision: tuner.default_decision(0),
                pending: None,
            }),
            None => None,
        };
        if let Some(s) = step.as_mut() {
            s.decision.interval = t;
            let cfg = s.decision.config.clone();
            if current.as_ref() == Some(&cfg) {
                s.decision.applied = true;
            } else if let Err(why) = apply_with_retry(backend, &tuner.space, &cfg) {
                log::error!("interval {t}: could not apply {cfg}, keeping the previous config: {why}");
                report.apply_failures += 1;
                if s.pending.take().is_some() {
                    tuner.agent.mark_boundary();
                }
            } else {
                s.decision.applied = true;
                current = Some(cfg);
            }
        }

        let obs = match env.next_interval() {
            Ok(o) => Some(o),
            Err(EnvError::EmptyInterval(why)) => {
                log::warn!("interval {t}: empty interval ({why}); next decision skipped");
                report.skipped.push(t);
                None
            }
            Err(e) => {
                if let Some(s) = step {
                    report.decisions.push(s.decision);
                }
                if matches!(e, EnvError::Exhausted) {
                    log::warn!("metrics source exhausted after {t} of {steps} intervals");
                    report.truncated = true;
                    break;
                }
                return Err(RunFailure {
                    partial: Box::new(report),
                    source: e.into(),
                });
            }
        };

        let started = Instant::now();
        let mut learn_err = None;
        if let Some(s) = step.as_mut() {
            let pending = s.pending.take();
            match &obs {
                Some(o) => {
                    s.decision.ipc = Some(o.ipc);
                    s.decision.reward = tuner.bounds.map(|b| b.reward(o.ipc));
                    s.decision.phase = o.phase;
                    if let Some(p) = pending {
                        learn_err = tuner.learn(p, o.ipc, &o.ws, t + 1 == steps).err();
                    }
                }
                None if pending.is_some() => tuner.agent.mark_boundary(),
                None => {}
            }
        }
        if let Some(o) = &obs {
            ipc_sum += o.ipc;
            measured += 1;
            if t + 1 < steps {
                let mut n = tuner.tune_step(&o.ws);
                let us = started.elapsed().as_secs_f64() * 1e6;
                n.decision.latency_us = us;
                latencies.push(us);
                next = Some(n);
            }
        }

        if let Some(s) = step {
            if let Some(w) = log.as_deref_mut() {
                if let Err(e) = append_log(w, &s.decision) {
                    report.decisions.push(s.decision);
                    return Err(RunFailure {
                        partial: Box::new(report),
                        source: e.into(),
                    });
                }
            }
            report.decisions.push(s.decision);
        }
        if let Some(e) = learn_err {
            return Err(RunFailure {
                partial: Box::new(report),
                source: e.into(),
            });
        }
    }
    latencies.sort_by(f64::total_cmp);
    report.latency_p99_us = percentile(&latencies, 0.99);
    report.latency_max_us = latencies.last().copied().unwrap_or(0.0);
    report.mean_ipc = (measured > 0).then(|| ipc_sum / measured as f64);
    report.ppo_updates = tuner.agent.updates();
    Ok(report)
}

/// Mean IPC of `steps` intervals under the default config.
pub fn run_baseline(
    env: &mut dyn Environment,
    backend: &mut dyn ParamBackend,
    space: &ParamSpace,
    steps: u64,
) -> Result<Option<f64>, EnvError> {
    let report = backend.apply(space, &space.default_config())?;
    if !report.is_ok() {
        return Err(EnvError::ApplyFailed(space.default_config().to_string()));
    }
    let mut sum = 0.0;
    let mut n = 0u64;
    for _ in 0..steps {
        match env.next_interval() {
            Ok(o) => {
                sum += o.ipc;
                n += 1;
            }
            Err(EnvError::EmptyInterval(_)) => {}
            Err(EnvError::Exhausted) => break,
            Err(e) => return Err(e),
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
