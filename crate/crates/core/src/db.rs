//! The offline performance database.
//!
//! On disk a database is line-delimited JSON: one header record carrying the
//! parameter space and collection settings, then one [`DataPoint`] per line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{check_version, ArtifactError, SCHEMA_VERSION};
use crate::space::{ParamConfig, ParamSpace};
use crate::state::{IpcBounds, StateError, WorkloadState};

/// State at decision time, the config applied, and the IPC measured over the
/// interval that followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub ws: WorkloadState,
    pub config: ParamConfig,
    pub ipc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseHeader {
    pub kind: String,
    pub version: u32,
    pub space: ParamSpace,
    pub seed: u64,
    pub period: u64,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfDatabase {
    pub space: ParamSpace,
    pub seed: u64,
    pub period: u64,
    pub source: String,
    points: Vec<DataPoint>,
    ipc_min: f64,
    ipc_max: f64,
}

const DB_KIND: &str = "perf-database";

impl PerfDatabase {
    pub fn new(space: ParamSpace) -> Self {
        Self {
            space,
            seed: 0,
            period: 1,
            source: String::new(),
            points: Vec::new(),
            ipc_min: f64::INFINITY,
            ipc_max: f64::NEG_INFINITY,
        }
    }

    /// Appends a point, keeping the IPC bounds current.
    pub fn push(&mut self, p: DataPoint) -> Result<(), ArtifactError> {
        if !(p.ipc > 0.0) || !p.ipc.is_finite() {
            return Err(ArtifactError::Mismatch(format!(
                "data point ipc must be positive, got {}",
                p.ipc
            )));
        }
        self.space
            .validate_config(&p.config)
            .map_err(|e| ArtifactError::Mismatch(e.to_string()))?;
        self.ipc_min = self.ipc_min.min(p.ipc);
        self.ipc_max = self.ipc_max.max(p.ipc);
        self.points.push(p);
        Ok(())
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(ipc_min, ipc_max)`, or `None` when empty.
    pub fn ipc_range(&self) -> Option<(f64, f64)> {
        (!self.points.is_empty()).then_some((self.ipc_min, self.ipc_max))
    }

    pub fn ipc_bounds(&self) -> Result<IpcBounds, StateError> {
        IpcBounds::new(self.ipc_min, self.ipc_max)
    }

    pub fn header(&self) -> DatabaseHeader {
        DatabaseHeader {
            kind: DB_KIND.to_string(),
            version: SCHEMA_VERSION,
            space: self.space.clone(),
            seed: self.seed,
            period: self.period,
            source: self.source.clone(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &self.header())?;
        w.write_all(b"\n")?;
        for p in &self.points {
            serde_json::to_writer(&mut *w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let f = std::fs::File::create(path).map_err(|e| ArtifactError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| ArtifactError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let f = std::fs::File::open(path).map_err(|e| ArtifactError::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let parse_err = |line, source| ArtifactError::Parse {
            path: path.to_path_buf(),
            line,
            source,
        };
        let first = lines
            .next()
            .ok_or_else(|| ArtifactError::invalid(path, "empty database file"))?
            .map_err(|e| ArtifactError::io(path, e))?;
        let header: DatabaseHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
        if header.kind != DB_KIND {
            return Err(ArtifactError::invalid(
                path,
                format!("expected a {DB_KIND} header, found {}", header.kind),
            ));
        }
        check_version(path, header.version)?;
        let mut db = PerfDatabase::new(header.space);
        db.seed = header.seed;
        db.period = header.period;
        db.source = header.source;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| ArtifactError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: DataPoint = serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?;
            db.push(p)
                .map_err(|e| ArtifactError::invalid(path, format!("line {}: {e}", i + 2)))?;
        }
        Ok(db)
    }
}
