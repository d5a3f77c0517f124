//! Counter sources, tuning environments and offline database collection.

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactError;
use crate::backend::{BackendError, ParamBackend, SharedKnobs, SimBackend};
use crate::db::{DataPoint, PerfDatabase};
use crate::sim::{SimError, SimSetup, SimState, StepOutput};
use crate::space::{ParamConfig, ParamSpace};
use crate::state::WorkloadState;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("empty interval: {0}")]
    EmptyInterval(&'static str),
    #[error("counter {field} went backwards at sample {index}")]
    NonMonotonic { field: &'static str, index: usize },
    #[error("metrics source exhausted")]
    Exhausted,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend could not apply {0}")]
    ApplyFailed(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("replay file {path}: {source}")]
    Replay {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Raw since-boot style counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub cycles: u64,
    pub instructions: u64,
    pub fast_read_bytes: u64,
    pub fast_write_bytes: u64,
    pub slow_read_bytes: u64,
    pub slow_write_bytes: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub l3_hits: u64,
    pub l3_misses: u64,
}

impl MetricsSample {
    fn fields(&self) -> [(&'static str, u64); 10] {
        [
            ("cycles", self.cycles),
            ("instructions", self.instructions),
            ("fast_read_bytes", self.fast_read_bytes),
            ("fast_write_bytes", self.fast_write_bytes),
            ("slow_read_bytes", self.slow_read_bytes),
            ("slow_write_bytes", self.slow_write_bytes),
            ("l2_hits", self.l2_hits),
            ("l2_misses", self.l2_misses),
            ("l3_hits", self.l3_hits),
            ("l3_misses", self.l3_misses),
        ]
    }

    /// Name of the first counter that is smaller in `self` than in `prev`.
    pub fn regressed_from(&self, prev: &MetricsSample) -> Option<&'static str> {
        self.fields()
            .iter()
            .zip(prev.fields())
            .find(|((_, c), (_, p))| c < p)
            .map(|((name, _), _)| *name)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Workload state and IPC over the interval between two samples.
///
/// A cache level with no lookups in the interval reports a hit ratio of 0.
pub fn derive_ws(prev: &MetricsSample, cur: &MetricsSample) -> Result<(WorkloadState, f64), EnvError> {
    if let Some(field) = cur.regressed_from(prev) {
        return Err(EnvError::NonMonotonic { field, index: 1 });
    }
    let d = |c: u64, p: u64| c - p;
    let cycles = d(cur.cycles, prev.cycles);
    if cycles == 0 {
        return Err(EnvError::EmptyInterval("no cycles elapsed"));
    }
    let fr = d(cur.fast_read_bytes, prev.fast_read_bytes);
    let fw = d(cur.fast_write_bytes, prev.fast_write_bytes);
    let sr = d(cur.slow_read_bytes, prev.slow_read_bytes);
    let sw = d(cur.slow_write_bytes, prev.slow_write_bytes);
    let traffic = fr + fw + sr + sw;
    if traffic == 0 {
        return Err(EnvError::EmptyInterval("no memory traffic"));
    }
    let l2h = d(cur.l2_hits, prev.l2_hits);
    let l2m = d(cur.l2_misses, prev.l2_misses);
    let l3h = d(cur.l3_hits, prev.l3_hits);
    let l3m = d(cur.l3_misses, prev.l3_misses);
    let ws = WorkloadState::new(
        ratio(l2h, l2h + l2m),
        ratio(l3h, l3h + l3m),
        ratio(sr, traffic),
        ratio(sw, traffic),
        ratio(fr + sr, traffic),
    )
    .expect("ratios of one total stay in range");
    let ipc = d(cur.instructions, prev.instructions) as f64 / cycles as f64;
    Ok((ws, ipc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Live,
    Replay,
    Stub,
}

pub trait MetricsSource {
    fn kind(&self) -> SourceKind;
    fn read(&mut self) -> Result<MetricsSample, EnvError>;
}

/// Replays counter rows from a CSV file whose header names the
/// [`MetricsSample`] fields.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    rows: Vec<MetricsSample>,
    next: usize,
}

impl ReplaySource {
    /// Fails if any counter decreases between consecutive rows.
    pub fn new(rows: Vec<MetricsSample>) -> Result<Self, EnvError> {
        for (i, w) in rows.windows(2).enumerate() {
            if let Some(field) = w[1].regressed_from(&w[0]) {
                return Err(EnvError::NonMonotonic { field, index: i + 1 });
            }
        }
        Ok(Self { rows, next: 0 })
    }

    pub fn from_reader(r: impl std::io::Read, origin: &str) -> Result<Self, EnvError> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<Vec<MetricsSample>, _>>()
            .map_err(|source| EnvError::Replay {
                path: origin.to_string(),
                source,
            })?;
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let f = std::fs::File::open(path).map_err(|e| ArtifactError::io(path, e))?;
        Self::from_reader(f, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl MetricsSource for ReplaySource {
    fn kind(&self) -> SourceKind {
        SourceKind::Replay
    }

    fn read(&mut self) -> Result<MetricsSample, EnvError> {
        let s = self.rows.get(self.next).copied().ok_or(EnvError::Exhausted)?;
        self.next += 1;
        Ok(s)
    }
}

/// Placeholder for hardware counters; always unsupported.
#[derive(Debug, Clone, Default)]
pub struct LiveStub;

impl MetricsSource for LiveStub {
    fn kind(&self) -> SourceKind {
        SourceKind::Stub
    }

    fn read(&mut self) -> Result<MetricsSample, EnvError> {
        Err(EnvError::Unsupported(
            "live hardware counters are not available; supply a replay file".into(),
        ))
    }
}

/// What the tuner sees at the end of one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub ws: WorkloadState,
    pub ipc: f64,
    /// Simulator phase, when known.
    pub phase: Option<usize>,
}

/// Something that runs one tuning interval at a time under whatever config
/// was last applied through its backend.
pub trait Environment {
    fn next_interval(&mut self) -> Result<Observation, EnvError>;

    /// Length of one interval in the environment's native unit.
    fn period(&self) -> u64 {
        1
    }

    fn describe(&self) -> String;
}

/// Environment driven by a counter source; configs have no effect on it.
pub struct MetricsEnv<S: MetricsSource> {
    source: S,
    prev: Option<MetricsSample>,
    period: u64,
}

impl<S: MetricsSource> MetricsEnv<S> {
    pub fn new(source: S, period: u64) -> Self {
        Self {
            source,
            prev: None,
            period,
        }
    }
}

impl<S: MetricsSource> Environment for MetricsEnv<S> {
    fn next_interval(&mut self) -> Result<Observation, EnvError> {
        let prev = match self.prev {
            Some(p) => p,
            None => self.source.read()?,
        };
        let cur = self.source.read()?;
        self.prev = Some(cur);
        let (ws, ipc) = derive_ws(&prev, &cur)?;
        Ok(Observation {
            ws,
            ipc,
            phase: None,
        })
    }

    fn period(&self) -> u64 {
        self.period
    }

    fn describe(&self) -> String {
        format!("{:?} metrics", self.source.kind()).to_lowercase()
    }
}

/// The simulator as a tuning environment. One interval is `period`
/// simulator steps; the observation carries the last step's state and the
/// mean IPC over the interval.
#[derive(Debug, Clone)]
pub struct SimEnv {
    setup: SimSetup,
    state: SimState,
    knobs: SharedKnobs,
    period: u32,
    last: Option<StepOutput>,
}

impl SimEnv {
    pub fn new(setup: SimSetup) -> Result<Self, SimError> {
        let state = setup.fresh_state()?;
        let knobs = Rc::new(RefCell::new(setup.space.default_config()));
        Ok(Self {
            setup,
            state,
            knobs,
            period: 1,
            last: None,
        })
    }

    pub fn with_period(mut self, period: u32) -> Self {
        self.period = period.max(1);
        self
    }

    /// A backend that sets this environment's knobs.
    pub fn backend(&self) -> SimBackend {
        SimBackend::new(self.knobs.clone())
    }

    pub fn setup(&self) -> &SimSetup {
        &self.setup
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn current_config(&self) -> ParamConfig {
        self.knobs.borrow().clone()
    }

    pub fn last_step(&self) -> Option<&StepOutput> {
        self.last.as_ref()
    }
}

impl Environment for SimEnv {
    fn next_interval(&mut self) -> Result<Observation, EnvError> {
        let cfg = self.knobs.borrow().clone();
        let mut total = 0.0;
        let mut out = None;
        for _ in 0..self.period {
            let o = self
                .state
                .step(&self.setup.workload, &self.setup.space, &cfg, &self.setup.cost)?;
            total += o.ipc;
            out = Some(o);
        }
        let out = out.expect("period >= 1");
        let obs = Observation {
            ws: out.ws,
            ipc: total / self.period as f64,
            phase: Some(out.phase),
        };
        self.last = Some(out);
        Ok(obs)
    }

    fn period(&self) -> u64 {
        self.period as u64
    }

    fn describe(&self) -> String {
        format!("sim:{}", self.setup.workload.name)
    }
}

/// Collection stopped early; `partial` holds every point gathered so far.
#[derive(Debug, Error)]
#[error("collection stopped after {} points: {source}", partial.len())]
pub struct CollectFailure {
    pub partial: Box<PerfDatabase>,
    #[source]
    pub source: EnvError,
}

/// Consecutive empty intervals tolerated before collection gives up.
const MAX_EMPTY_RUN: usize = 16;

/// Draws one config uniformly and independently per dimension.
pub fn random_config(space: &ParamSpace, rng: &mut impl Rng) -> ParamConfig {
    let idx: Vec<usize> = space
        .head_sizes()
        .iter()
        .map(|&n| rng.random_range(0..n))
        .collect();
    space.config_from_indices(&idx)
}

/// Builds a database of `target_points` records by applying a random config
/// every interval.
///
/// Each record pairs the state observed when the config was chosen with the
/// IPC of the interval that followed its application. Empty intervals drop
/// the pending decision and resample the state.
pub fn collect_database(
    env: &mut dyn Environment,
    backend: &mut dyn ParamBackend,
    space: &ParamSpace,
    target_points: usize,
    seed: u64,
) -> Result<PerfDatabase, CollectFailure> {
    let mut db = PerfDatabase::new(space.clone());
    db.seed = seed;
    db.period = env.period();
    db.source = env.describe();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fail = |db: PerfDatabase, source: EnvError| CollectFailure {
        partial: Box::new(db),
        source,
    };

    let mut empty_run = 0;
    let mut next_obs = |env: &mut dyn Environment| -> Result<Option<Observation>, EnvError> {
        match env.next_interval() {
            Ok(o) => {
                empty_run = 0;
                Ok(Some(o))
            }
            Err(EnvError::EmptyInterval(why)) => {
                empty_run += 1;
                if empty_run > MAX_EMPTY_RUN {
                    Err(EnvError::EmptyInterval(why))
                } else {
                    Ok(None)
                }
            }
            Err(e) => Err(e),
        }
    };

    let mut decision_ws: Option<WorkloadState> = None;
    while db.len() < target_points {
        let Some(ws) = decision_ws else {
            match next_obs(env) {
                Ok(o) => decision_ws = o.map(|o| o.ws),
                Err(e) => return Err(fail(db, e)),
            }
            continue;
        };
        let cfg = random_config(space, &mut rng);
        match backend.apply(space, &cfg) {
            Ok(r) if r.is_ok() => {}
            Ok(_) => return Err(fail(db, EnvError::ApplyFailed(cfg.to_string()))),
            Err(e) => return Err(fail(db, e.into())),
        }
        match next_obs(env) {
            Ok(Some(o)) => {
                let point = DataPoint {
                    ws,
                    config: cfg,
                    ipc: o.ipc,
                };
                if let Err(e) = db.push(point) {
                    return Err(fail(db, e.into()));
                }
                decision_ws = Some(o.ws);
            }
            Ok(None) => decision_ws = None,
            Err(e) => return Err(fail(db, e)),
        }
    }
    Ok(db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ApplyReport, BackendMode};
    use crate::sim::{make_scenario, sim_space, SimCostModel};

    fn sample(k: u64) -> MetricsSample {
        MetricsSample {
            cycles: 1000 * k,
            instructions: 1500 * k,
            fast_read_bytes: 600 * k,
            fast_write_bytes: 200 * k,
            slow_read_bytes: 150 * k,
            slow_write_bytes: 50 * k,
            l2_hits: 70 * k,
            l2_misses: 30 * k,
            l3_hits: 12 * k,
            l3_misses: 18 * k,
        }
    }

    #[test]
    fn derive_ws_hand_computed() {
        let (ws, ipc) = derive_ws(&sample(1), &sample(3)).unwrap();
        // deltas: traffic 2000, slow reads 300, slow writes 100, reads 1500
        assert_eq!(ws.to_array(), [0.7, 0.4, 0.15, 0.05, 0.75]);
        assert_eq!(ipc, 1.5);
    }

    #[test]
    fn derive_ws_edge_cases() {
        let mut cur = sample(2);
        cur.slow_read_bytes = sample(1).slow_read_bytes;
        cur.slow_write_bytes = sample(1).slow_write_bytes;
        cur.instructions = sample(1).instructions + 1000;
        let (ws, ipc) = derive_ws(&sample(1), &cur).unwrap();
        assert_eq!((ws.slow_read_ratio, ws.slow_write_ratio), (0.0, 0.0));
        assert_eq!(ipc, 1.0);

        let mut idle = sample(1);
        idle.cycles = 5000;
        assert!(matches!(
            derive_ws(&sample(1), &idle),
            Err(EnvError::EmptyInterval(_))
        ));
        let mut no_cycles = sample(2);
        no_cycles.cycles = sample(1).cycles;
        assert!(matches!(
            derive_ws(&sample(1), &no_cycles),
            Err(EnvError::EmptyInterval(_))
        ));
        assert!(matches!(
            derive_ws(&sample(2), &sample(1)),
            Err(EnvError::NonMonotonic { .. })
        ));

        let mut no_cache = sample(2);
        no_cache.l3_hits = sample(1).l3_hits;
        no_cache.l3_misses = sample(1).l3_misses;
        assert_eq!(derive_ws(&sample(1), &no_cache).unwrap().0.l3_hit, 0.0);
    }

    #[test]
    fn replay_rejects_regressing_counters() {
        let csv = "cycles,instructions,fast_read_bytes,fast_write_bytes,slow_read_bytes,slow_write_bytes,l2_hits,l2_misses,l3_hits,l3_misses\n\
                   10,10,10,10,10,10,10,10,10,10\n\
                   20,20,20,20,20,20,20,20,20,20\n\
                   30,30,30,30,5,30,30,30,30,30\n";
        assert!(matches!(
            ReplaySource::from_reader(csv.as_bytes(), "t"),
            Err(EnvError::NonMonotonic {
                field: "slow_read_bytes",
                index: 2
            })
        ));
    }

    #[test]
    fn live_stub_is_unsupported() {
        let mut env = MetricsEnv::new(LiveStub, 10);
        assert!(matches!(env.next_interval(), Err(EnvError::Unsupported(_))));
    }

    /// Remembers the order of applies relative to environment reads.
    struct Recording {
        log: Rc<RefCell<Vec<String>>>,
    }

    impl ParamBackend for Recording {
        fn mode(&self) -> BackendMode {
            BackendMode::SysfsDryrun
        }
        fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError> {
            space.validate_config(cfg)?;
            self.log.borrow_mut().push(format!("apply {cfg}"));
            Ok(ApplyReport::default())
        }
    }

    struct Logged<E> {
        inner: E,
        log: Rc<RefCell<Vec<String>>>,
    }

    impl<E: Environment> Environment for Logged<E> {
        fn next_interval(&mut self) -> Result<Observation, EnvError> {
            let o = self.inner.next_interval()?;
            self.log.borrow_mut().push(format!("measure {}", o.ipc));
            Ok(o)
        }
        fn describe(&self) -> String {
            self.inner.describe()
        }
    }

    fn replay_schedule(n: u64) -> ReplaySource {
        // interval i has ipc (i + 1) / 2 and distinct cache ratios
        let mut rows = vec![MetricsSample::default()];
        for i in 0..n {
            let mut s = *rows.last().unwrap();
            s.cycles += 2000;
            s.instructions += 1000 * (i + 1);
            s.fast_read_bytes += 100;
            s.slow_write_bytes += 100;
            s.l2_hits += i;
            s.l2_misses += n - i;
            rows.push(s);
        }
        ReplaySource::new(rows).unwrap()
    }

    #[test]
    fn points_pair_decision_state_with_following_ipc() {
        let log = Rc::new(RefCell::new(Vec::new()));
        let mut env = Logged {
            inner: MetricsEnv::new(replay_schedule(12), 1),
            log: log.clone(),
        };
        let mut backend = Recording { log: log.clone() };
        let space = sim_space();
        let db = collect_database(&mut env, &mut backend, &space, 10, 5).unwrap();
        assert_eq!(db.len(), 10);
        for (i, p) in db.points().iter().enumerate() {
            // decision i sees interval i and is scored by interval i + 1
            assert_eq!(p.ws.l2_hit, i as f64 / 12.0);
            assert_eq!(p.ipc, (i + 2) as f64 / 2.0);
        }
        let log = log.borrow();
        assert_eq!(log.len(), 21);
        for i in 0..10 {
            assert!(log[1 + 2 * i].starts_with("apply"));
            assert!(log[2 + 2 * i].starts_with("measure"));
        }
    }

    #[test]
    fn exhausted_source_keeps_partial_points() {
        let mut env = MetricsEnv::new(replay_schedule(4), 1);
        let mut backend = Recording {
            log: Rc::new(RefCell::new(Vec::new())),
        };
        let err = collect_database(&mut env, &mut backend, &sim_space(), 10, 5).unwrap_err();
        assert_eq!(err.partial.len(), 3);
        assert!(matches!(err.source, EnvError::Exhausted));
    }

    fn sim_env(seed: u64) -> SimEnv {
        let setup = SimSetup::new(
            make_scenario("shifting-hot", seed).unwrap(),
            sim_space(),
            SimCostModel::default(),
        );
        SimEnv::new(setup).unwrap()
    }

    #[test]
    fn collection_is_reproducible() {
        let run = |seed| {
            let mut env = sim_env(3);
            let mut b = env.backend();
            let space = env.setup().space.clone();
            collect_database(&mut env, &mut b, &space, 40, seed).unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn single_candidate_space_gives_identical_configs() {
        let mut env = sim_env(1);
        let mut b = env.backend();
        let space = crate::space::ParamSpace::new(
            "sim",
            env.setup()
                .space
                .specs
                .iter()
                .map(|s| crate::space::ParamSpec::new(&s.name, vec![s.default], s.default).unwrap())
                .collect(),
        )
        .unwrap();
        let db = collect_database(&mut env, &mut b, &space, 10, 0).unwrap();
        assert_eq!(db.len(), 10);
        assert!(db.points().iter().all(|p| p.config == space.default_config()));
    }

    #[test]
    fn draws_are_uniform_per_dimension() {
        // chi-square with 3 degrees of freedom, 99% quantile
        const CHI2_99_DF3: f64 = 11.345;
        let space = sim_space();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts = vec![[0u32; 4]; space.len()];
        let n = 3000;
        for _ in 0..n {
            let idx = space.indices_of(&random_config(&space, &mut rng)).unwrap();
            for (d, &i) in idx.iter().enumerate() {
                counts[d][i] += 1;
            }
        }
        let expected = n as f64 / 4.0;
        for c in counts {
            let chi2: f64 = c
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < CHI2_99_DF3, "{c:?} chi2 {chi2}");
        }
    }
}
