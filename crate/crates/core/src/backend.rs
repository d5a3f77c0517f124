//! Parameter backends: where an applied config ends up.
//!
//! * [`SimBackend`] sets the knobs of a [`crate::collector::SimEnv`].
//! * [`DryRunBackend`] records the `path, value` writes it would perform.
//! * [`SysfsBackend`] writes decimal values to each spec's `apply_path`,
//!   optionally below a root prefix, and refuses to exist without an
//!   explicit acknowledgment.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{ConfigViolation, ParamConfig, ParamSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    Sim,
    SysfsDryrun,
    SysfsLive,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Config(#[from] ConfigViolation),
    #[error("{0}")]
    Refused(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "reason")]
pub enum WriteStatus {
    Written,
    Unchanged,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub name: String,
    pub path: Option<String>,
    pub value: i64,
    #[serde(flatten)]
    pub status: WriteStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub entries: Vec<WriteRecord>,
}

impl ApplyReport {
    pub fn all_unchanged(&self) -> bool {
        self.entries.iter().all(|e| e.status == WriteStatus::Unchanged)
    }

    pub fn failures(&self) -> impl Iterator<Item = &WriteRecord> {
        self.entries
            .iter()
            .filter(|e| matches!(e.status, WriteStatus::Failed(_)))
    }

    pub fn is_ok(&self) -> bool {
        self.failures().next().is_none()
    }
}

pub trait ParamBackend {
    fn mode(&self) -> BackendMode;

    /// Applies `cfg`. Per-parameter failures land in the report; an `Err`
    /// means nothing was attempted.
    fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError>;
}

/// Last value written per parameter name, for unchanged detection.
#[derive(Debug, Clone, Default)]
struct Applied(BTreeMap<String, i64>);

impl Applied {
    fn status_for(&self, name: &str, value: i64) -> Option<WriteStatus> {
        (self.0.get(name) == Some(&value)).then_some(WriteStatus::Unchanged)
    }

    fn record(&mut self, name: &str, value: i64) {
        self.0.insert(name.to_string(), value);
    }
}

/// Knob cell shared between a simulator environment and its backend.
pub type SharedKnobs = Rc<RefCell<ParamConfig>>;

#[derive(Debug, Clone)]
pub struct SimBackend {
    knobs: SharedKnobs,
    applied: Applied,
}

impl SimBackend {
    pub fn new(knobs: SharedKnobs) -> Self {
        Self {
            knobs,
            applied: Applied::default(),
        }
    }
}

impl ParamBackend for SimBackend {
    fn mode(&self) -> BackendMode {
        BackendMode::Sim
    }

    fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError> {
        space.validate_config(cfg)?;
        let mut report = ApplyReport::default();
        for (spec, &value) in space.specs.iter().zip(&cfg.values) {
            let status = self
                .applied
                .status_for(&spec.name, value)
                .unwrap_or(WriteStatus::Written);
            self.applied.record(&spec.name, value);
            report.entries.push(WriteRecord {
                name: spec.name.clone(),
                path: None,
                value,
                status,
            });
        }
        *self.knobs.borrow_mut() = cfg.clone();
        Ok(report)
    }
}

/// Records the writes a live backend would perform.
#[derive(Debug, Clone, Default)]
pub struct DryRunBackend {
    applied: Applied,
    writes: Vec<(String, String)>,
}

impl DryRunBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every `(path, value)` write so far, in order.
    pub fn writes(&self) -> &[(String, String)] {
        &self.writes
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["path", "value"])?;
        for (p, v) in &self.writes {
            out.write_record([p, v])?;
        }
        out.flush()?;
        Ok(())
    }
}

impl ParamBackend for DryRunBackend {
    fn mode(&self) -> BackendMode {
        BackendMode::SysfsDryrun
    }

    fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError> {
        space.validate_config(cfg)?;
        let mut report = ApplyReport::default();
        for (spec, &value) in space.specs.iter().zip(&cfg.values) {
            let path = spec.resolved_path();
            let status = match (&path, self.applied.status_for(&spec.name, value)) {
                (None, _) => WriteStatus::Failed("no apply_path in catalog".into()),
                (Some(_), Some(unchanged)) => unchanged,
                (Some(p), None) => {
                    self.writes.push((p.clone(), value.to_string()));
                    self.applied.record(&spec.name, value);
                    WriteStatus::Written
                }
            };
            report.entries.push(WriteRecord {
                name: spec.name.clone(),
                path,
                value,
                status,
            });
        }
        Ok(report)
    }
}

/// Flag the operator must pass before live writes are allowed.
pub const LIVE_ACK_FLAG: &str = "--i-know-this-writes-sysfs";

#[derive(Debug, Clone)]
pub struct SysfsBackend {
    root: PathBuf,
    applied: Applied,
}

impl SysfsBackend {
    /// `root` is prepended to every apply path (use `/` for the real system).
    pub fn new(root: &Path, acknowledged: bool) -> Result<Self, BackendError> {
        if !acknowledged {
            return Err(BackendError::Refused(format!(
                "live sysfs writes need {LIVE_ACK_FLAG}"
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            applied: Applied::default(),
        })
    }

    fn target(&self, path: &str) -> PathBuf {
        self.root.join(path.trim_start_matches('/'))
    }
}

impl ParamBackend for SysfsBackend {
    fn mode(&self) -> BackendMode {
        BackendMode::SysfsLive
    }

    fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError> {
        space.validate_config(cfg)?;
        let mut report = ApplyReport::default();
        for (spec, &value) in space.specs.iter().zip(&cfg.values) {
            let path = spec.resolved_path();
            let status = match (&path, self.applied.status_for(&spec.name, value)) {
                (None, _) => WriteStatus::Failed("no apply_path in catalog".into()),
                (Some(_), Some(unchanged)) => unchanged,
                (Some(p), None) => match std::fs::write(self.target(p), value.to_string()) {
                    Ok(()) => {
                        self.applied.record(&spec.name, value);
                        WriteStatus::Written
                    }
                    Err(e) => WriteStatus::Failed(e.to_string()),
                },
            };
            report.entries.push(WriteRecord {
                name: spec.name.clone(),
                path,
                value,
                status,
            });
        }
        Ok(report)
    }
}
