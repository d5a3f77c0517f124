use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use tiertune::artifact::ArtifactError;
use tiertune::backend::{ApplyReport, BackendError, BackendMode, DryRunBackend, ParamBackend, SimBackend, SysfsBackend};
use tiertune::catalog::{CatalogError, CATALOG_ENV};
use tiertune::cluster::{ClusterError, ClusterModel, ClusteringConfig};
use tiertune::collector::{collect_database, Environment, MetricsEnv, ReplaySource, SimEnv};
use tiertune::controller::{
    run_baseline, run_loop, ControllerError, DecisionSource, HybridTuner, OfflineModels, RunReport, TunerConfig,
    TunerMode,
};
use tiertune::rl::{bc_pretrain, build_expert_dataset, BcConfig, PolicyNet, PpoAgent, PpoConfig, ValueNet, WeightsFile};
use tiertune::sim::{param_sweep, write_sweep_csv, write_sweep_dat, SimCostModel, SimError, SimKnobs, SimSetup};
use tiertune::{Catalog, ParamConfig, ParamSpace, PerfDatabase};

use crate::args::{
    BackendArgs, BackendKind, CollectArgs, EnvSpec, FitArgs, KChoice, ModeArg, PretrainArgs, SweepArgs, TuneArgs,
};
use crate::manifest::RunManifest;
use crate::{artifact, environment, usage, Failure};

type CmdResult = Result<(), Failure>;

/// Workload passes run by `tune` in the simulator without `--duration`.
const DEFAULT_SIM_PASSES: u64 = 3;

pub struct LoadedCatalog {
    pub catalog: Catalog,
    /// `builtin` or the file the catalog came from.
    pub source: String,
}

pub fn catalog(path: Option<&Path>) -> Result<LoadedCatalog, Failure> {
    let (catalog, source) = match path {
        Some(p) => (Catalog::load(p), p.display().to_string()),
        None => match std::env::var(CATALOG_ENV) {
            Ok(p) if !p.is_empty() => (Catalog::from_env(), p),
            _ => (Ok(Catalog::builtin()), "builtin".to_string()),
        },
    };
    let catalog = catalog.map_err(|e| match e {
        CatalogError::Artifact(a) => artifact(a),
        other => usage(other),
    })?;
    Ok(LoadedCatalog { catalog, source })
}

impl LoadedCatalog {
    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.source, self.catalog.version)
    }

    fn space(&self, solution: &str) -> Result<ParamSpace, Failure> {
        self.catalog.space(solution).map_err(usage)
    }
}

fn artifact_failure(e: ArtifactError) -> Failure {
    artifact(e)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(artifact)
}

fn save_manifest(m: &RunManifest, output: &Path) -> CmdResult {
    m.save_for(output)
        .with_context(|| format!("writing manifest for {}", output.display()))
        .map_err(artifact)?;
    Ok(())
}

enum AnyBackend {
    Sim(SimBackend),
    Dry(DryRunBackend),
    Live(SysfsBackend),
}

impl ParamBackend for AnyBackend {
    fn mode(&self) -> BackendMode {
        match self {
            AnyBackend::Sim(b) => b.mode(),
            AnyBackend::Dry(b) => b.mode(),
            AnyBackend::Live(b) => b.mode(),
        }
    }

    fn apply(&mut self, space: &ParamSpace, cfg: &ParamConfig) -> Result<ApplyReport, BackendError> {
        match self {
            AnyBackend::Sim(b) => b.apply(space, cfg),
            AnyBackend::Dry(b) => b.apply(space, cfg),
            AnyBackend::Live(b) => b.apply(space, cfg),
        }
    }
}

impl AnyBackend {
    fn write_csv(&self, path: Option<&Path>) -> CmdResult {
        let Some(path) = path else { return Ok(()) };
        let AnyBackend::Dry(b) = self else {
            return Err(usage(anyhow!("--writes-csv needs --backend sysfs-dryrun")));
        };
        b.write_csv(create(path)?)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(artifact)
    }
}

enum AnyEnv {
    Sim(Box<SimEnv>),
    Replay(MetricsEnv<ReplaySource>),
}

impl AnyEnv {
    fn as_dyn(&mut self) -> &mut dyn Environment {
        match self {
            AnyEnv::Sim(e) => e.as_mut(),
            AnyEnv::Replay(e) => e,
        }
    }
}

fn sim_setup(cat: &LoadedCatalog, scenario: &str, seed: u64, space: ParamSpace) -> Result<SimSetup, Failure> {
    SimKnobs::resolve(&space, &space.default_config())
        .with_context(|| format!("solution {:?} cannot drive the simulator", space.solution))
        .map_err(usage)?;
    let workload = cat.catalog.scenario(scenario, seed).map_err(usage)?;
    Ok(SimSetup::new(workload, space, SimCostModel::default()))
}

fn sim_period(period: u64) -> Result<u32, Failure> {
    u32::try_from(period)
        .ok()
        .filter(|&p| p >= 1)
        .ok_or_else(|| usage(anyhow!("--period must be between 1 and {}", u32::MAX)))
}

/// Builds the environment and a backend that fits it.
fn open_env(
    cat: &LoadedCatalog,
    spec: &EnvSpec,
    space: ParamSpace,
    period: u64,
    scenario_seed: u64,
    b: &BackendArgs,
) -> Result<(AnyEnv, AnyBackend, Option<SimSetup>), Failure> {
    match spec {
        EnvSpec::Sim(name) => {
            if !matches!(b.backend, None | Some(BackendKind::Sim)) {
                return Err(usage(anyhow!("simulator environments take --backend sim")));
            }
            let setup = sim_setup(cat, name, scenario_seed, space)?;
            let env = SimEnv::new(setup.clone()).map_err(environment)?.with_period(sim_period(period)?);
            let backend = AnyBackend::Sim(env.backend());
            Ok((AnyEnv::Sim(Box::new(env)), backend, Some(setup)))
        }
        EnvSpec::Replay(path) => {
            if period == 0 {
                return Err(usage(anyhow!("--period must be at least 1")));
            }
            let backend = match b.backend.unwrap_or(BackendKind::SysfsDryrun) {
                BackendKind::Sim => return Err(usage(anyhow!("--backend sim needs a sim:<scenario> environment"))),
                BackendKind::SysfsDryrun => AnyBackend::Dry(DryRunBackend::new()),
                BackendKind::SysfsLive => AnyBackend::Live(SysfsBackend::new(&b.sysfs_root, b.live_ack).map_err(environment)?),
            };
            let source = ReplaySource::load(path).map_err(environment)?;
            Ok((AnyEnv::Replay(MetricsEnv::new(source, period)), backend, None))
        }
    }
}

pub fn collect(cat: &LoadedCatalog, a: CollectArgs) -> CmdResult {
    let solution = match (&a.solution, &a.env) {
        (Some(s), _) => s.clone(),
        (None, EnvSpec::Sim(_)) => "sim".to_string(),
        (None, EnvSpec::Replay(_)) => return Err(usage(anyhow!("replay environments need --solution"))),
    };
    let space = cat.space(&solution)?;
    let (mut env, mut backend, _) = open_env(cat, &a.env, space.clone(), a.period, a.scenario_seed, &a.backend)?;
    let result = collect_database(env.as_dyn(), &mut backend, &space, a.points, a.seed);
    backend.write_csv(a.backend.writes_csv.as_deref())?;
    let db = match result {
        Ok(db) => db,
        Err(f) => {
            let mut partial = a.out.clone().into_os_string();
            partial.push(".partial");
            let partial = PathBuf::from(partial);
            f.partial.save(&partial).map_err(artifact_failure)?;
            return Err(environment(anyhow!(f).context(format!("partial database saved to {}", partial.display()))));
        }
    };
    db.save(&a.out).map_err(artifact_failure)?;
    let mut m = cat
        .manifest("collect")
        .seed("seed", a.seed)
        .artifact("database", &a.out);
    if matches!(a.env, EnvSpec::Sim(_)) {
        m = m.seed("scenario_seed", a.scenario_seed);
    }
    save_manifest(&m, &a.out)?;
    let (lo, hi) = db.ipc_range().unwrap_or((f64::NAN, f64::NAN));
    println!("points {} ipc_min {lo:.6} ipc_max {hi:.6}", db.len());
    Ok(())
}

fn cluster_failure(e: ClusterError) -> Failure {
    match e {
        ClusterError::Artifact(a) => artifact(a),
        ClusterError::EmptyDatabase => artifact(e),
        other => usage(other),
    }
}

pub fn fit(cat: &LoadedCatalog, a: FitArgs) -> CmdResult {
    let db = PerfDatabase::load(&a.db).map_err(artifact_failure)?;
    let cfg = ClusteringConfig {
        knn_k: a.knn_k,
        seed: a.seed,
        ..Default::default()
    };
    let k = match a.k {
        KChoice::Auto => None,
        KChoice::Fixed(k) => Some(k),
    };
    let model = ClusterModel::fit(&db, k, &cfg).map_err(cluster_failure)?;
    model.save(&a.out).map_err(artifact_failure)?;
    let m = cat
        .manifest("fit")
        .seed("seed", a.seed)
        .artifact("database", &a.db)
        .artifact("model", &a.out);
    save_manifest(&m, &a.out)?;
    println!("k {}", model.k());
    for (c, (stats, idx)) in model.kmeans.stats.iter().zip(&model.clusters).enumerate() {
        let w: Vec<String> = idx.weights.as_array().iter().map(|v| format!("{v:.4}")).collect();
        println!(
            "cluster {c} size {} threshold {:.6} weights [{}]{}",
            stats.size,
            stats.threshold,
            w.join(", "),
            if idx.weights_fallback { " (uniform fallback)" } else { "" }
        );
    }
    Ok(())
}

fn load_consistent(db_path: &Path, model_path: &Path) -> Result<(PerfDatabase, ClusterModel), Failure> {
    let db = PerfDatabase::load(db_path).map_err(artifact_failure)?;
    let model = ClusterModel::load(model_path).map_err(artifact_failure)?;
    model.check_db(&db).map_err(artifact_failure)?;
    Ok((db, model))
}

pub fn pretrain(cat: &LoadedCatalog, a: PretrainArgs) -> CmdResult {
    let (db, model) = load_consistent(&a.db, &a.model)?;
    let space = db.space.clone();
    let expert = build_expert_dataset(&db, &model, model.config.knn_k);
    let mut policy = PolicyNet::new(&space.head_sizes(), a.seed);
    let cfg = BcConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        seed: a.seed,
    };
    let report = bc_pretrain(&mut policy, &space, &expert, &cfg).map_err(usage)?;
    let value = ValueNet::new(a.seed);
    let weights = WeightsFile::new(&space, &policy, &value);
    weights.save(&a.out_weights).map_err(artifact_failure)?;
    let m = cat
        .manifest("pretrain")
        .seed("seed", a.seed)
        .artifact("database", &a.db)
        .artifact("model", &a.model)
        .artifact("weights", &a.out_weights);
    save_manifest(&m, &a.out_weights)?;
    println!(
        "pairs {} cross_entropy {:.6} accuracy {:.4} policy_params {} value_params {}",
        expert.len(),
        report.final_ce,
        report.accuracy,
        weights.policy.len(),
        weights.value.len()
    );
    Ok(())
}

/// Run summary written by `tune`; the per-interval records go to the log.
#[derive(Debug, Serialize)]
struct TuneSummary<'a> {
    env: String,
    mode: TunerMode,
    backend: BackendMode,
    period: u64,
    duration: u64,
    knn_decisions: usize,
    rl_decisions: usize,
    default_decisions: usize,
    decision_log: &'a Path,
    #[serde(flatten)]
    report: ReportWithoutDecisions<'a>,
}

#[derive(Debug, Serialize)]
struct ReportWithoutDecisions<'a> {
    steps: u64,
    decisions: usize,
    skipped: &'a [u64],
    truncated: bool,
    degraded: bool,
    apply_failures: u64,
    ppo_updates: u64,
    mean_ipc: Option<f64>,
    latency_p99_us: f64,
    latency_max_us: f64,
    baseline_ipc: Option<f64>,
    speedup: Option<f64>,
}

impl<'a> From<&'a RunReport> for ReportWithoutDecisions<'a> {
    fn from(r: &'a RunReport) -> Self {
        Self {
            steps: r.steps,
            decisions: r.decisions.len(),
            skipped: &r.skipped,
            truncated: r.truncated,
            degraded: r.degraded,
            apply_failures: r.apply_failures,
            ppo_updates: r.ppo_updates,
            mean_ipc: r.mean_ipc,
            latency_p99_us: r.latency_p99_us,
            latency_max_us: r.latency_max_us,
            baseline_ipc: r.baseline_ipc,
            speedup: r.speedup,
        }
    }
}

fn controller_failure(e: ControllerError) -> Failure {
    match e {
        ControllerError::Config(_) => usage(e),
        ControllerError::Mismatch(_) | ControllerError::Artifact(_) => artifact(e),
        ControllerError::Rl(_) | ControllerError::Env(_) | ControllerError::Log(_) => environment(e),
    }
}

/// Offline models for `tune`. A model that cannot be read degrades the run
/// to default configs; one that disagrees with the database is rejected.
fn tune_models(db: &PerfDatabase, model_path: &Path) -> Result<Option<OfflineModels>, Failure> {
    let model = match ClusterModel::load(model_path) {
        Ok(m) => m,
        Err(e) => {
            log::error!("offline model unavailable, running degraded: {e}");
            return Ok(None);
        }
    };
    OfflineModels::new(model, db.clone()).map(Some).map_err(artifact_failure)
}

pub fn tune(cat: &LoadedCatalog, a: TuneArgs) -> CmdResult {
    let db = PerfDatabase::load(&a.db).map_err(artifact_failure)?;
    let space = db.space.clone();
    let models = tune_models(&db, &a.model)?;
    let ppo = PpoConfig {
        seed: a.seed,
        ..Default::default()
    };
    let agent = match &a.weights {
        Some(path) => {
            let w = WeightsFile::load(path).map_err(artifact_failure)?;
            let (policy, value) = w.nets();
            PpoAgent::from_nets(w.space.clone(), policy, value, ppo)
        }
        None => PpoAgent::new(space.clone(), ppo),
    }
    .map_err(|e| artifact(anyhow!(e).context("building the RL agent")))?;
    let cfg = TunerConfig {
        period: a.period,
        knn_k: a.knn_k,
        rl_online_learning: !a.freeze_rl,
        mode: match a.mode {
            ModeArg::Hybrid => TunerMode::Hybrid,
            ModeArg::RlOnly => TunerMode::RlOnly,
            ModeArg::KnnOnly => TunerMode::KnnOnly,
        },
        ..Default::default()
    };
    let mode = cfg.mode;
    let mut tuner = HybridTuner::new(space.clone(), models, agent, cfg).map_err(controller_failure)?;
    if tuner.bounds().is_none() {
        let bounds = db.ipc_bounds().map_err(|e| artifact(anyhow!(e).context("database IPC range")))?;
        tuner = tuner.with_bounds(bounds);
    }

    let (mut env, mut backend, setup) = open_env(cat, &a.env, space.clone(), a.period, a.scenario_seed, &a.backend)?;
    let replay_rows = match &a.env {
        EnvSpec::Replay(p) => Some(ReplaySource::load(p).map_err(environment)?.len() as u64),
        EnvSpec::Sim(_) => None,
    };
    let duration = match (a.duration, &setup, replay_rows) {
        (Some(d), _, _) => d,
        (None, Some(s), _) => DEFAULT_SIM_PASSES * s.workload.pass_len() as u64,
        (None, None, Some(rows)) => rows.saturating_sub(1) * a.period,
        (None, None, None) => unreachable!("every environment is sim or replay"),
    };

    let log_path = a.log.clone().unwrap_or_else(|| a.report.with_extension("jsonl"));
    let mut log = create(&log_path)?;
    let result = run_loop(env.as_dyn(), &mut backend, &mut tuner, duration, Some(&mut log));
    log.flush()
        .with_context(|| format!("writing {}", log_path.display()))
        .map_err(artifact)?;
    backend.write_csv(a.backend.writes_csv.as_deref())?;
    let (mut report, failure) = match result {
        Ok(r) => (r, None),
        Err(f) => (*f.partial, Some(f.source)),
    };

    if a.baseline && failure.is_none() {
        let steps = tuner.cfg.steps_for(duration);
        let (mut env, mut backend, _) = match &a.env {
            EnvSpec::Sim(_) => open_env(cat, &a.env, space.clone(), a.period, a.scenario_seed, &a.backend)?,
            EnvSpec::Replay(_) => {
                // the baseline never touches the system
                let dry = BackendArgs {
                    backend: Some(BackendKind::SysfsDryrun),
                    ..a.backend.clone()
                };
                open_env(cat, &a.env, space.clone(), a.period, a.scenario_seed, &dry)?
            }
        };
        match run_baseline(env.as_dyn(), &mut backend, &space, steps).map_err(environment)? {
            Some(base) => report.set_baseline(base),
            None => log::warn!("baseline run produced no intervals"),
        }
    }

    let summary = TuneSummary {
        env: env.as_dyn().describe(),
        mode,
        backend: backend.mode(),
        period: a.period,
        duration,
        knn_decisions: report.count(DecisionSource::Knn),
        rl_decisions: report.count(DecisionSource::Rl),
        default_decisions: report.count(DecisionSource::Default),
        decision_log: &log_path,
        report: (&report).into(),
    };
    let mut out = create(&a.report)?;
    serde_json::to_writer_pretty(&mut out, &summary)
        .map_err(anyhow::Error::from)
        .and_then(|()| writeln!(out).and_then(|()| out.flush()).map_err(anyhow::Error::from))
        .with_context(|| format!("writing {}", a.report.display()))
        .map_err(artifact)?;

    let mut m = cat
        .manifest("tune")
        .seed("seed", a.seed)
        .artifact("database", &a.db)
        .artifact("model", &a.model)
        .artifact("report", &a.report)
        .artifact("decision_log", &log_path);
    if let Some(w) = &a.weights {
        m = m.artifact("weights", w);
    }
    if let Some(w) = &a.backend.writes_csv {
        m = m.artifact("writes_csv", w);
    }
    if matches!(a.env, EnvSpec::Sim(_)) {
        m = m.seed("scenario_seed", a.scenario_seed);
    }
    save_manifest(&m, &a.report)?;

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    println!(
        "decisions {} (knn {}, rl {}, default {}) mean_ipc {} speedup {} p99_latency_us {:.1}{}",
        report.decisions.len(),
        summary.knn_decisions,
        summary.rl_decisions,
        summary.default_decisions,
        fmt(report.mean_ipc),
        fmt(report.speedup),
        report.latency_p99_us,
        if report.degraded { " degraded" } else { "" }
    );
    match failure {
        Some(e) => Err(controller_failure(e)),
        None => Ok(()),
    }
}

pub fn sweep(cat: &LoadedCatalog, a: SweepArgs) -> CmdResult {
    let EnvSpec::Sim(scenario) = &a.env else {
        return Err(usage(anyhow!("sweep needs a sim:<scenario> environment")));
    };
    let setup = sim_setup(cat, scenario, a.scenario_seed, cat.space("sim")?)?;
    let rows = param_sweep(&setup, &a.param).map_err(|e| match e {
        SimError::Space(_) | SimError::Config(_) => usage(e),
        other => environment(other),
    })?;
    write_sweep_csv(&rows, create(&a.out_csv)?)
        .with_context(|| format!("writing {}", a.out_csv.display()))
        .map_err(artifact)?;
    let dat = a.out_dat.clone().unwrap_or_else(|| a.out_csv.with_extension("dat"));
    let mut w = create(&dat)?;
    write_sweep_dat(&a.param, &rows, &mut w)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", dat.display()))
        .map_err(artifact)?;
    let m = cat
        .manifest("sweep")
        .seed("scenario_seed", a.scenario_seed)
        .artifact("csv", &a.out_csv)
        .artifact("dat", &dat);
    save_manifest(&m, &a.out_csv)?;
    for r in &rows {
        println!("{} {} ipc {:.6} speedup {:.4}", a.param, r.value, r.ipc, r.speedup);
    }
    Ok(())
}
