//! Deterministic two-tier memory simulator.
//!
//! Each call to [`SimState::step`] advances one tuning interval: profiling
//! samples pages, hot slow-tier pages become promotion candidates, a
//! watermark-driven demotion frees fast pages, promotions fill the freed
//! space, and the interval's IPC and [`WorkloadState`] are derived from the
//! access mass left on the slow tier.
//!
//! The random stream consumes the same number of draws per step whatever the
//! config, so runs that differ only in their configs see identical noise.

mod oracle;
mod scenario;

pub use oracle::{
    oracle_best_config, oracle_table, param_sweep, phase_start_state, write_oracle_csv,
    write_sweep_csv, write_sweep_dat, OracleRow, SimSetup, SweepRow, MAX_ORACLE_CONFIGS,
};
pub use scenario::{make_scenario, SCENARIOS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::space::{ConfigViolation, ParamConfig, ParamSpace, SpaceError};
use crate::state::WorkloadState;

/// Knob names understood by the simulator, in catalog order.
pub const SIM_KNOBS: [&str; 4] = [
    "scan_size_mb",
    "hot_threshold",
    "watermark_scale_factor",
    "demote_scale_factor",
];

/// Upper bound of the per-page detected-access counter.
const MAX_HOTNESS: u32 = 64;

/// Half-width of the uniform jitter applied to every reported ratio.
pub const WS_JITTER: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("fast tier capacity must be at least one page")]
    NoFastCapacity,
    #[error(transparent)]
    Config(#[from] ConfigViolation),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("phase {index} out of range ({phases} phases)")]
    PhaseOutOfRange { index: usize, phases: usize },
    #[error("space has {0} joint configs, above the exhaustive-search limit")]
    SpaceTooLarge(u128),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotPage {
    pub page: u32,
    pub weight: f64,
}

/// One execution phase of a simulated workload.
///
/// A fraction `hot_mass` of the accesses lands on `hot_set` (weights sum to
/// one within the set); the rest is spread uniformly over all pages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub duration: u32,
    pub page_count: u32,
    pub hot_set: Vec<HotPage>,
    pub hot_mass: f64,
    pub hot_set_drift: f64,
    pub base_ipc: f64,
    pub cache_profile: (f64, f64),
    pub read_fraction: f64,
}

impl Phase {
    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Workload(format!("phase {}: {m}", self.name)));
        if self.duration < 1 {
            return bad("duration must be >= 1".into());
        }
        if self.page_count < 1 {
            return bad("page_count must be >= 1".into());
        }
        if !(self.base_ipc > 0.0) {
            return bad("base_ipc must be positive".into());
        }
        for (x, what) in [
            (self.hot_mass, "hot_mass"),
            (self.hot_set_drift, "hot_set_drift"),
            (self.read_fraction, "read_fraction"),
            (self.cache_profile.0, "l2_hit"),
            (self.cache_profile.1, "l3_hit"),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return bad(format!("{what} = {x} outside [0, 1]"));
            }
        }
        if !self.hot_set.is_empty() {
            let sum: f64 = self.hot_set.iter().map(|h| h.weight).sum();
            if (sum - 1.0).abs() > 1e-9 || self.hot_set.iter().any(|h| h.weight < 0.0) {
                return bad(format!("hot-set weights sum to {sum}"));
            }
        } else if self.hot_mass > 0.0 {
            return bad("hot_mass > 0 with an empty hot set".into());
        }
        let mut ids: Vec<u32> = self.hot_set.iter().map(|h| h.page).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate hot page".into());
        }
        if ids.last().is_some_and(|&p| p >= self.page_count) {
            return bad("hot page outside the phase's pages".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorkload {
    pub name: String,
    pub phases: Vec<Phase>,
    pub seed: u64,
    /// Size of one simulated page.
    pub page_mb: u32,
    /// Fast-tier size suggested by the scenario.
    pub fast_capacity: u32,
}

impl SimWorkload {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.phases.is_empty() {
            return Err(SimError::Workload(format!("{} has no phases", self.name)));
        }
        if self.page_mb < 1 {
            return Err(SimError::Workload("page_mb must be >= 1".into()));
        }
        self.phases.iter().try_for_each(Phase::validate)
    }

    /// Highest page id touched by any phase, plus one.
    pub fn page_count(&self) -> u32 {
        self.phases.iter().map(|p| p.page_count).max().unwrap_or(0)
    }

    /// Intervals in one full pass over all phases.
    pub fn pass_len(&self) -> u32 {
        self.phases.iter().map(|p| p.duration).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCostModel {
    /// Relative slowdown per unit of access mass served by the slow tier.
    pub slow_penalty: f64,
    /// Normalized IPC penalty per migrated page.
    pub migration_cost: f64,
    /// Normalized IPC penalty per scanned MB.
    pub profiling_cost: f64,
}

impl Default for SimCostModel {
    fn default() -> Self {
        Self {
            slow_penalty: 2.0,
            migration_cost: 0.003,
            profiling_cost: 1.5e-5,
        }
    }
}

impl SimCostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.slow_penalty.is_finite()
            && self.slow_penalty > 0.0
            && self.migration_cost.is_finite()
            && self.migration_cost >= 0.0
            && self.profiling_cost.is_finite()
            && self.profiling_cost >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::Workload(format!("invalid cost model {self:?}")))
        }
    }
}

/// Knob values resolved from a config against the simulator space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimKnobs {
    pub scan_size_mb: i64,
    pub hot_threshold: i64,
    pub watermark_scale_factor: i64,
    pub demote_scale_factor: i64,
}

impl SimKnobs {
    pub fn resolve(space: &ParamSpace, cfg: &ParamConfig) -> Result<Self, SimError> {
        space.validate_config(cfg)?;
        let get = |name: &str| -> Result<i64, SimError> { Ok(cfg.values[space.position(name)?]) };
        Ok(Self {
            scan_size_mb: get(SIM_KNOBS[0])?,
            hot_threshold: get(SIM_KNOBS[1])?,
            watermark_scale_factor: get(SIM_KNOBS[2])?,
            demote_scale_factor: get(SIM_KNOBS[3])?,
        })
    }
}

/// The simulator parameter space from the built-in catalog.
pub fn sim_space() -> ParamSpace {
    crate::catalog::Catalog::builtin()
        .space("sim")
        .expect("built-in catalog defines the sim space")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Fast,
    Slow,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationStats {
    pub promoted: u32,
    pub demoted: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub ws: WorkloadState,
    pub ipc: f64,
    pub migration: MigrationStats,
    /// Access mass served by the slow tier after migration.
    pub slow_frac: f64,
    /// Pages whose profiling sample fired this interval.
    pub detected: u32,
    pub phase: usize,
}

/// Mutable simulator state: clock, placement and detected hotness.
#[derive(Debug, Clone)]
pub struct SimState {
    phase: usize,
    clock: u32,
    pass: u64,
    fast_capacity: u32,
    placement: Vec<Tier>,
    fast_used: u32,
    hotness: Vec<u32>,
    hot_set: Vec<HotPage>,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(workload: &SimWorkload, fast_capacity: u32) -> Result<Self, SimError> {
        workload.validate()?;
        if fast_capacity < 1 {
            return Err(SimError::NoFastCapacity);
        }
        let n = workload.page_count() as usize;
        let mut s = Self {
            phase: 0,
            clock: 0,
            pass: 0,
            fast_capacity,
            placement: vec![Tier::Slow; n],
            fast_used: 0,
            hotness: vec![0; n],
            hot_set: workload.phases[0].hot_set.clone(),
            rng: ChaCha8Rng::seed_from_u64(workload.seed),
        };
        s.first_touch();
        Ok(s)
    }

    /// Places the lowest page ids on the fast tier, as first-touch allocation would.
    fn first_touch(&mut self) {
        let fast = (self.fast_capacity as usize).min(self.placement.len());
        for (i, t) in self.placement.iter_mut().enumerate() {
            *t = if i < fast { Tier::Fast } else { Tier::Slow };
        }
        self.fast_used = fast as u32;
        self.hotness.iter_mut().for_each(|h| *h = 0);
    }

    pub fn phase(&self) -> usize {
        self.phase
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    /// Completed passes over the whole workload.
    pub fn pass(&self) -> u64 {
        self.pass
    }

    pub fn fast_capacity(&self) -> u32 {
        self.fast_capacity
    }

    pub fn fast_used(&self) -> u32 {
        self.fast_used
    }

    pub fn tier_of(&self, page: u32) -> Tier {
        self.placement[page as usize]
    }

    pub fn hot_set(&self) -> &[HotPage] {
        &self.hot_set
    }

    /// Phase the next step will run in.
    pub fn upcoming_phase(&self, workload: &SimWorkload) -> usize {
        if self.clock >= workload.phases[self.phase].duration {
            (self.phase + 1) % workload.phases.len()
        } else {
            self.phase
        }
    }

    fn advance_clock(&mut self, workload: &SimWorkload) {
        if self.clock < workload.phases[self.phase].duration {
            return;
        }
        self.clock = 0;
        self.phase += 1;
        if self.phase == workload.phases.len() {
            // the workload restarts as a fresh process
            self.phase = 0;
            self.pass += 1;
            self.first_touch();
        }
        self.hot_set = workload.phases[self.phase].hot_set.clone();
    }

    fn drift(&mut self, phase: &Phase) {
        let n_hot = self.hot_set.len();
        let replace = (phase.hot_set_drift * n_hot as f64).round() as usize;
        if replace == 0 || n_hot as u32 >= phase.page_count {
            return;
        }
        let mut in_set = vec![false; phase.page_count as usize];
        for h in &self.hot_set {
            in_set[h.page as usize] = true;
        }
        let slots = rand::seq::index::sample(&mut self.rng, n_hot, replace.min(n_hot));
        for slot in slots.iter() {
            let page = loop {
                let p = self.rng.random_range(0..phase.page_count);
                if !in_set[p as usize] {
                    break p;
                }
            };
            in_set[self.hot_set[slot].page as usize] = false;
            in_set[page as usize] = true;
            self.hot_set[slot].page = page;
        }
    }

    /// Per-page access mass for the current phase and hot set.
    fn access_mass(&self, phase: &Phase) -> Vec<f64> {
        let mut a = vec![0.0; self.placement.len()];
        let background = (1.0 - phase.hot_mass) / phase.page_count as f64;
        a[..phase.page_count as usize]
            .iter_mut()
            .for_each(|x| *x = background);
        for h in &self.hot_set {
            a[h.page as usize] += phase.hot_mass * h.weight;
        }
        a
    }

    /// Advances one interval under `cfg`.
    pub fn step(
        &mut self,
        workload: &SimWorkload,
        space: &ParamSpace,
        cfg: &ParamConfig,
        cost: &SimCostModel,
    ) -> Result<StepOutput, SimError> {
        let knobs = SimKnobs::resolve(space, cfg)?;
        if self.fast_capacity < 1 {
            return Err(SimError::NoFastCapacity);
        }
        self.advance_clock(workload);
        let phase = &workload.phases[self.phase];
        if self.clock > 0 {
            self.drift(phase);
        }
        let mass = self.access_mass(phase);
        let n = self.placement.len();

        // 1. profiling: each page sampled with probability p
        let working_set_mb = phase.page_count as f64 * workload.page_mb as f64;
        let p = (knobs.scan_size_mb as f64 / working_set_mb).min(1.0);
        let scale = phase.page_count as f64;
        let mut detected = 0;
        for i in 0..n {
            let u: f64 = self.rng.random();
            let v: f64 = self.rng.random();
            self.hotness[i] /= 2;
            if u < p && mass[i] > 0.0 {
                let rate = mass[i] * scale;
                let inc = rate.floor() as u32 + u32::from(v < rate.fract());
                if inc > 0 {
                    detected += 1;
                    self.hotness[i] = (self.hotness[i] + inc).min(MAX_HOTNESS);
                }
            }
        }

        // 2. promotion candidates, hottest first
        let threshold = knobs.hot_threshold.max(0) as u32;
        let mut candidates: Vec<u32> = (0..n as u32)
            .filter(|&i| self.placement[i as usize] == Tier::Slow && self.hotness[i as usize] >= threshold)
            .collect();
        candidates.sort_by_key(|&i| (std::cmp::Reverse(self.hotness[i as usize]), i));

        // 3. demotion down to the free-page target once below the watermark
        let cap = self.fast_capacity as f64;
        let wake = cap * knobs.watermark_scale_factor as f64 / 10_000.0;
        let target = (cap * (knobs.watermark_scale_factor + knobs.demote_scale_factor) as f64
            / 10_000.0)
            .ceil()
            .min(cap) as u32;
        let mut stats = MigrationStats::default();
        let free = self.fast_capacity - self.fast_used;
        if (free as f64) < wake {
            let mut victims: Vec<u32> = (0..n as u32)
                .filter(|&i| self.placement[i as usize] == Tier::Fast)
                .collect();
            victims.sort_by_key(|&i| (self.hotness[i as usize], i));
            let need = target.saturating_sub(free) as usize;
            for &v in victims.iter().take(need) {
                self.placement[v as usize] = Tier::Slow;
                self.fast_used -= 1;
                stats.demoted += 1;
            }
        }

        // 4. promotions fill whatever is free
        for &c in &candidates {
            if self.fast_used >= self.fast_capacity {
                break;
            }
            self.placement[c as usize] = Tier::Fast;
            self.fast_used += 1;
            stats.promoted += 1;
        }
        debug_assert!(self.fast_used <= self.fast_capacity);

        // 5. performance of the interval
        let slow_frac: f64 = (0..n)
            .filter(|&i| self.placement[i] == Tier::Slow)
            .map(|i| mass[i])
            .sum::<f64>()
            .clamp(0.0, 1.0);
        let migrated = (stats.promoted + stats.demoted) as f64;
        let ipc = phase.base_ipc
            / (1.0
                + cost.slow_penalty * slow_frac
                + cost.migration_cost * migrated
                + cost.profiling_cost * knobs.scan_size_mb as f64);

        let mut jitter = [0.0; 5];
        for j in jitter.iter_mut() {
            *j = self.rng.random_range(-WS_JITTER..=WS_JITTER);
        }
        let rf = phase.read_fraction;
        let mut slow_read = (slow_frac * rf + jitter[2]).clamp(0.0, 1.0);
        let mut slow_write = (slow_frac * (1.0 - rf) + jitter[3]).clamp(0.0, 1.0);
        let sum = slow_read + slow_write;
        if sum > 1.0 {
            slow_read /= sum;
            slow_write /= sum;
        }
        let ws = WorkloadState::from_array_unchecked([
            (phase.cache_profile.0 + jitter[0]).clamp(0.0, 1.0),
            (phase.cache_profile.1 + jitter[1]).clamp(0.0, 1.0),
            slow_read,
            slow_write,
            (rf + jitter[4]).clamp(0.0, 1.0),
        ]);

        self.clock += 1;
        Ok(StepOutput {
            ws,
            ipc,
            migration: stats,
            slow_frac,
            detected,
            phase: self.phase,
        })
    }
}
