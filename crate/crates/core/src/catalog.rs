//! Parameter catalogs: the tunable knobs of each tiering solution, plus
//! optional simulator scenario definitions.
//!
//! A built-in catalog is compiled in. Setting `TIERTUNE_CATALOG` to a file
//! path replaces it wholesale.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{check_version, read_json, ArtifactError};
use crate::sim::{SimError, SimWorkload};
use crate::space::ParamSpace;

pub const CATALOG_ENV: &str = "TIERTUNE_CATALOG";

const BUILTIN: &str = include_str!("../data/catalog.json");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("catalog has no solution named {0:?}")]
    UnknownSolution(String),
    #[error("catalog lists {0:?} twice")]
    Duplicate(String),
    #[error(transparent)]
    Scenario(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub solutions: Vec<ParamSpace>,
    #[serde(default)]
    pub scenarios: Vec<SimWorkload>,
}

impl Catalog {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN, Path::new("<builtin catalog>")).expect("built-in catalog is valid")
    }

    /// The catalog named by `TIERTUNE_CATALOG`, or the built-in one.
    pub fn from_env() -> Result<Self, CatalogError> {
        match std::env::var_os(CATALOG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::builtin()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CatalogError> {
        let cat: Catalog = read_json(path)?;
        cat.check(path)?;
        Ok(cat)
    }

    fn parse(text: &str, origin: &Path) -> Result<Self, CatalogError> {
        let cat: Catalog = serde_json::from_str(text).map_err(|source| ArtifactError::Parse {
            path: origin.to_path_buf(),
            line: source.line(),
            source,
        })?;
        cat.check(origin)?;
        Ok(cat)
    }

    fn check(&self, origin: &Path) -> Result<(), CatalogError> {
        check_version(origin, self.version)?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.solutions {
            if !seen.insert(s.solution.as_str()) {
                return Err(CatalogError::Duplicate(s.solution.clone()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in &self.scenarios {
            if !seen.insert(w.name.as_str()) {
                return Err(CatalogError::Duplicate(w.name.clone()));
            }
            w.validate()?;
        }
        Ok(())
    }

    pub fn space(&self, solution: &str) -> Result<ParamSpace, CatalogError> {
        self.solutions
            .iter()
            .find(|s| s.solution == solution)
            .cloned()
            .ok_or_else(|| CatalogError::UnknownSolution(solution.to_string()))
    }

    pub fn solution_names(&self) -> Vec<&str> {
        self.solutions.iter().map(|s| s.solution.as_str()).collect()
    }

    /// A scenario defined in the catalog, falling back to the built-in
    /// generators. Catalog scenarios take `seed` as their simulator seed.
    pub fn scenario(&self, name: &str, seed: u64) -> Result<SimWorkload, CatalogError> {
        if let Some(w) = self.scenarios.iter().find(|w| w.name == name) {
            let mut w = w.clone();
            w.seed = seed;
            return Ok(w);
        }
        Ok(crate::sim::make_scenario(name, seed)?)
    }
}
