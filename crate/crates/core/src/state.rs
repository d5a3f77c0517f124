//! Workload state vectors, feature weights and the reward mapping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of metrics in a [`WorkloadState`].
pub const WS_DIM: usize = 5;

/// Allowed overshoot of `slow_read_ratio + slow_write_ratio` above 1.
pub const TRAFFIC_SUM_EPS: f64 = 1e-6;

/// Tolerance on the sum of feature weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Metric names, in vector order.
pub const WS_FIELDS: [&str; WS_DIM] = [
    "l2_hit",
    "l3_hit",
    "slow_read_ratio",
    "slow_write_ratio",
    "total_read_ratio",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("metric {field} = {value} is outside [0, 1]")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("slow read + slow write ratios sum to {0}, above 1")]
    TrafficOverflow(f64),
    #[error("weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("ipc bounds are not ordered: min {min} >= max {max}")]
    DegenerateBounds { min: f64, max: f64 },
}

/// Five normalized performance metrics describing a workload and the
/// current page placement over one interval.
///
/// The traffic ratios are fractions of the total bytes moved to and from
/// memory during the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; WS_DIM]", into = "[f64; WS_DIM]")]
pub struct WorkloadState {
    pub l2_hit: f64,
    pub l3_hit: f64,
    pub slow_read_ratio: f64,
    pub slow_write_ratio: f64,
    pub total_read_ratio: f64,
}

impl WorkloadState {
    pub fn new(
        l2_hit: f64,
        l3_hit: f64,
        slow_read_ratio: f64,
        slow_write_ratio: f64,
        total_read_ratio: f64,
    ) -> Result<Self, StateError> {
        Self::from_array([
            l2_hit,
            l3_hit,
            slow_read_ratio,
            slow_write_ratio,
            total_read_ratio,
        ])
    }

    pub fn from_array(v: [f64; WS_DIM]) -> Result<Self, StateError> {
        for (i, &x) in v.iter().enumerate() {
            if !x.is_finite() || !(0.0..=1.0).contains(&x) {
                return Err(StateError::OutOfRange {
                    field: WS_FIELDS[i],
                    value: x,
                });
            }
        }
        let slow = v[2] + v[3];
        if slow > 1.0 + TRAFFIC_SUM_EPS {
            return Err(StateError::TrafficOverflow(slow));
        }
        Ok(Self::from_array_unchecked(v))
    }

    pub(crate) fn from_array_unchecked(v: [f64; WS_DIM]) -> Self {
        Self {
            l2_hit: v[0],
            l3_hit: v[1],
            slow_read_ratio: v[2],
            slow_write_ratio: v[3],
            total_read_ratio: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; WS_DIM] {
        [
            self.l2_hit,
            self.l3_hit,
            self.slow_read_ratio,
            self.slow_write_ratio,
            self.total_read_ratio,
        ]
    }

    /// Plain Euclidean distance, used for centroid assignment.
    pub fn distance(&self, other: &WorkloadState) -> f64 {
        squared_distance(&self.to_array(), &other.to_array()).sqrt()
    }
}

impl TryFrom<[f64; WS_DIM]> for WorkloadState {
    type Error = StateError;

    fn try_from(v: [f64; WS_DIM]) -> Result<Self, Self::Error> {
        Self::from_array(v)
    }
}

impl From<WorkloadState> for [f64; WS_DIM] {
    fn from(ws: WorkloadState) -> Self {
        ws.to_array()
    }
}

pub(crate) fn squared_distance(a: &[f64; WS_DIM], b: &[f64; WS_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Non-negative per-metric weights summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; WS_DIM]", into = "[f64; WS_DIM]")]
pub struct FeatureWeights([f64; WS_DIM]);

impl FeatureWeights {
    pub fn new(w: [f64; WS_DIM]) -> Result<Self, StateError> {
        for (index, &value) in w.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(StateError::NegativeWeight { index, value });
            }
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(StateError::WeightSum(sum));
        }
        Ok(Self(w))
    }

    pub fn uniform() -> Self {
        Self([1.0 / WS_DIM as f64; WS_DIM])
    }

    pub fn as_array(&self) -> &[f64; WS_DIM] {
        &self.0
    }
}

impl TryFrom<[f64; WS_DIM]> for FeatureWeights {
    type Error = StateError;

    fn try_from(w: [f64; WS_DIM]) -> Result<Self, Self::Error> {
        Self::new(w)
    }
}

impl From<FeatureWeights> for [f64; WS_DIM] {
    fn from(w: FeatureWeights) -> Self {
        w.0
    }
}

/// `sqrt(sum_i w_i (a_i - b_i)^2)`.
pub fn weighted_distance(a: &WorkloadState, b: &WorkloadState, w: &FeatureWeights) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    a.iter()
        .zip(&b)
        .zip(w.as_array())
        .map(|((x, y), wi)| wi * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Like [`weighted_distance`] but validates a raw weight vector first.
pub fn weighted_distance_checked(
    a: &WorkloadState,
    b: &WorkloadState,
    w: [f64; WS_DIM],
) -> Result<f64, StateError> {
    Ok(weighted_distance(a, b, &FeatureWeights::new(w)?))
}

/// Offline IPC range used to normalize rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpcBounds {
    min: f64,
    max: f64,
}

impl IpcBounds {
    pub fn new(min: f64, max: f64) -> Result<Self, StateError> {
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(StateError::DegenerateBounds { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Maps IPC linearly onto [-1, 1]; values outside the offline range clamp.
    pub fn reward(&self, ipc: f64) -> f64 {
        let r = 2.0 * (ipc - self.min) / (self.max - self.min) - 1.0;
        r.clamp(-1.0, 1.0)
    }
}

pub fn reward_from_ipc(ipc: f64, ipc_min: f64, ipc_max: f64) -> Result<f64, StateError> {
    Ok(IpcBounds::new(ipc_min, ipc_max)?.reward(ipc))
}
