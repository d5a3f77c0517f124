//! Discrete parameter catalogs and concrete assignments.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpaceError {
    #[error("parameter {0} has no candidates")]
    EmptyCandidates(String),
    #[error("candidates of {0} are not strictly increasing")]
    UnorderedCandidates(String),
    #[error("default {default} of {name} is not a candidate")]
    DefaultNotCandidate { name: String, default: i64 },
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("space {0} has no parameters")]
    NoParameters(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

/// A config that does not fit its space.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigViolation {
    #[error("config has {got} values but the space has {expected} parameters")]
    Arity { expected: usize, got: usize },
    #[error("value {value} for {name} (dimension {dim}) is not a listed candidate")]
    NotCandidate { dim: usize, name: String, value: i64 },
}

/// One tunable knob and its candidate values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub candidates: Vec<i64>,
    pub default: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apply_path: Option<String>,
}

impl ParamSpec {
    pub fn new(name: &str, candidates: Vec<i64>, default: i64) -> Result<Self, SpaceError> {
        let spec = Self {
            name: name.to_string(),
            candidates,
            default,
            apply_path: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_apply_path(mut self, path: &str) -> Self {
        self.apply_path = Some(path.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.candidates.is_empty() {
            return Err(SpaceError::EmptyCandidates(self.name.clone()));
        }
        if self.candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SpaceError::UnorderedCandidates(self.name.clone()));
        }
        if !self.candidates.contains(&self.default) {
            return Err(SpaceError::DefaultNotCandidate {
                name: self.name.clone(),
                default: self.default,
            });
        }
        Ok(())
    }

    pub fn index_of(&self, value: i64) -> Option<usize> {
        self.candidates.binary_search(&value).ok()
    }

    pub fn default_index(&self) -> usize {
        self.index_of(self.default).expect("validated spec")
    }

    /// Resolves the apply path, substituting `{name}` in the template.
    pub fn resolved_path(&self) -> Option<String> {
        self.apply_path
            .as_ref()
            .map(|p| p.replace("{name}", &self.name))
    }
}

/// The ordered set of knobs tuned for one tiering solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct ParamSpace {
    pub solution: String,
    pub specs: Vec<ParamSpec>,
}

#[derive(Deserialize)]
struct RawSpace {
    solution: String,
    specs: Vec<ParamSpec>,
}

impl TryFrom<RawSpace> for ParamSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        ParamSpace::new(&raw.solution, raw.specs)
    }
}

impl ParamSpace {
    pub fn new(solution: &str, specs: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        if specs.is_empty() {
            return Err(SpaceError::NoParameters(solution.to_string()));
        }
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(SpaceError::DuplicateName(s.name.clone()));
            }
        }
        Ok(Self {
            solution: solution.to_string(),
            specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Candidate counts per parameter, i.e. the policy head sizes.
    pub fn head_sizes(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.candidates.len()).collect()
    }

    /// Number of joint configurations, saturating at `u128::MAX`.
    pub fn cardinality(&self) -> u128 {
        self.specs
            .iter()
            .fold(1u128, |acc, s| acc.saturating_mul(s.candidates.len() as u128))
    }

    pub fn position(&self, name: &str) -> Result<usize, SpaceError> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| SpaceError::UnknownParameter(name.to_string()))
    }

    pub fn default_config(&self) -> ParamConfig {
        ParamConfig::new(self.specs.iter().map(|s| s.default).collect())
    }

    pub fn validate_config(&self, cfg: &ParamConfig) -> Result<(), ConfigViolation> {
        if cfg.values.len() != self.specs.len() {
            return Err(ConfigViolation::Arity {
                expected: self.specs.len(),
                got: cfg.values.len(),
            });
        }
        for (dim, (spec, &value)) in self.specs.iter().zip(&cfg.values).enumerate() {
            if spec.index_of(value).is_none() {
                return Err(ConfigViolation::NotCandidate {
                    dim,
                    name: spec.name.clone(),
                    value,
                });
            }
        }
        Ok(())
    }

    /// Candidate indices of a config, one per parameter.
    pub fn indices_of(&self, cfg: &ParamConfig) -> Result<Vec<usize>, ConfigViolation> {
        self.validate_config(cfg)?;
        Ok(self
            .specs
            .iter()
            .zip(&cfg.values)
            .map(|(s, &v)| s.index_of(v).expect("validated"))
            .collect())
    }

    /// Builds a config from candidate indices. Panics on out-of-range indices.
    pub fn config_from_indices(&self, idx: &[usize]) -> ParamConfig {
        assert_eq!(idx.len(), self.specs.len(), "index arity");
        ParamConfig::new(
            self.specs
                .iter()
                .zip(idx)
                .map(|(s, &i)| s.candidates[i])
                .collect(),
        )
    }

    /// Every joint config, in lexicographic order of candidate values.
    pub fn enumerate(&self) -> Vec<ParamConfig> {
        let sizes = self.head_sizes();
        let total: usize = sizes.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; sizes.len()];
        for _ in 0..total {
            out.push(self.config_from_indices(&idx));
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < sizes[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    }

    /// Same solution name and identical parameter names and candidates.
    pub fn is_compatible(&self, other: &ParamSpace) -> bool {
        self.solution == other.solution
            && self.specs.len() == other.specs.len()
            && self
                .specs
                .iter()
                .zip(&other.specs)
                .all(|(a, b)| a.name == b.name && a.candidates == b.candidates)
    }
}

/// One value per parameter of the owning space. Ordering is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamConfig {
    pub values: Vec<i64>,
}

impl ParamConfig {
    pub fn new(values: Vec<i64>) -> Self {
        Self { values }
    }
}

impl fmt::Display for ParamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}
