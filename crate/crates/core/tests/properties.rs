//! Property tests for invariants that span modules.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tiertune::cluster::{ClusterModel, ClusteringConfig};
use tiertune::collector::{collect_database, SimEnv};
use tiertune::controller::{DecisionSource, HybridTuner, OfflineModels, TunerConfig, TunerMode};
use tiertune::rl::{ppo_update, Optimizers, PolicyNet, PpoAgent, PpoConfig, Step, ValueNet};
use tiertune::sim::{make_scenario, sim_space, SimCostModel, SimSetup, SimState, SCENARIOS};
use tiertune::{ParamConfig, PerfDatabase, WorkloadState};

fn arb_ws() -> impl Strategy<Value = WorkloadState> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=0.5f64, 0.0..=0.5f64, 0.0..=1.0f64)
        .prop_map(|(a, b, c, d, e)| WorkloadState::new(a, b, c, d, e).unwrap())
}

/// phase, fast used, fast capacity, ws bits, ipc bits, base ipc, slow fraction
type TraceRow = (usize, u32, u32, [u64; 5], u64, f64, f64);

fn sim_trace(scenario: &str, seed: u64, picks: &[usize]) -> Vec<TraceRow> {
    let wl = make_scenario(scenario, seed).unwrap();
    let space = sim_space();
    let configs = space.enumerate();
    let cost = SimCostModel::default();
    let mut st = SimState::new(&wl, wl.fast_capacity).unwrap();
    picks
        .iter()
        .map(|&i| {
            let o = st.step(&wl, &space, &configs[i % configs.len()], &cost).unwrap();
            (
                o.phase,
                st.fast_used(),
                st.fast_capacity(),
                o.ws.to_array().map(f64::to_bits),
                o.ipc.to_bits(),
                wl.phases[o.phase].base_ipc,
                o.slow_frac,
            )
        })
        .collect()
}

/// A small offline model shared by the controller properties.
fn offline() -> &'static (PerfDatabase, ClusterModel) {
    static CELL: OnceLock<(PerfDatabase, ClusterModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = SimSetup::new(make_scenario("phased-graph", 2).unwrap(), sim_space(), SimCostModel::default());
        let mut env = SimEnv::new(setup.clone()).unwrap();
        let mut backend = env.backend();
        let db = collect_database(&mut env, &mut backend, &setup.space, 300, 2).unwrap();
        let model = ClusterModel::fit(&db, Some(3), &ClusteringConfig::default()).unwrap();
        (db, model)
    })
}

fn tuner(seed: u64, online: bool) -> HybridTuner {
    let (db, model) = offline();
    let space = db.space.clone();
    let agent = PpoAgent::new(
        space.clone(),
        PpoConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    let cfg = TunerConfig {
        period: 1,
        rl_online_learning: online,
        mode: TunerMode::Hybrid,
        ..Default::default()
    };
    let models = OfflineModels::new(model.clone(), db.clone()).unwrap();
    HybridTuner::new(space, Some(models), agent, cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulator_invariants(
        scenario in prop::sample::select(SCENARIOS.to_vec()),
        seed in 0u64..1000,
        picks in prop::collection::vec(0usize..256, 1..80),
    ) {
        let trace = sim_trace(scenario, seed, &picks);
        for &(_, used, cap, ws, ipc, base, slow_frac) in &trace {
            prop_assert!(used <= cap);
            let ipc = f64::from_bits(ipc);
            prop_assert!(ipc > 0.0 && ipc <= base);
            let ws = ws.map(f64::from_bits);
            prop_assert!(((ws[2] + ws[3]) - slow_frac).abs() <= 0.02 + 1e-12);
        }
        prop_assert_eq!(trace, sim_trace(scenario, seed, &picks));
    }

    #[test]
    fn heads_are_normalized_and_log_probs_finite(
        heads in prop::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
        scale in 0.0..20.0f64,
        x in prop::array::uniform5(0.0..=1.0f64),
    ) {
        let mut net = PolicyNet::new(&heads, seed);
        net.params.iter_mut().enumerate().for_each(|(i, w)| *w *= 1.0 + scale * ((i as f64) * 0.7).sin().abs());
        let pass = net.forward(&x);
        for (p, &n) in pass.probs.iter().zip(&heads) {
            prop_assert_eq!(p.len(), n);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let action: Vec<usize> = heads.iter().map(|&n| n - 1).collect();
        prop_assert!(pass.log_prob(&action).is_finite());
    }

    #[test]
    fn first_epoch_ratio_is_exactly_one(
        seed in 0u64..1000,
        steps in prop::collection::vec((prop::array::uniform5(0.0..=1.0f64), 0usize..4, 0usize..4, -1.0..1.0f64), 4),
    ) {
        let cfg = PpoConfig { seed, ..Default::default() };
        let mut policy = PolicyNet::new(&[4, 4], seed);
        let mut value = ValueNet::new(seed);
        let mut opt = Optimizers::new(&policy, &value, &cfg);
        let traj: Vec<Step> = steps
            .iter()
            .map(|&(x, a, b, reward)| Step {
                x,
                action: vec![a, b],
                log_prob: policy.forward(&x).log_prob(&[a, b]),
                value: value.value(&x),
                reward,
                next_value: 0.0,
                done: false,
                truncated: false,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = ppo_update(&mut policy, &mut value, &mut opt, &traj, &cfg, &mut rng).unwrap();
        prop_assert_eq!(d.first_epoch_ratio_dev, 0.0);
    }

    #[test]
    fn dispatch_follows_the_outlier_test(trace in prop::collection::vec(arb_ws(), 1..60), seed in 0u64..100) {
        let mut t = tuner(seed, true);
        for ws in &trace {
            let d = t.tune_step(ws).decision;
            prop_assert_eq!(d.source == DecisionSource::Rl, d.outlier == Some(true));
            prop_assert!(t.space.validate_config(&d.config).is_ok());
        }
    }

    #[test]
    fn frozen_decisions_are_deterministic(trace in prop::collection::vec(arb_ws(), 1..40), seed in 0u64..100) {
        let run = || -> Vec<(DecisionSource, ParamConfig)> {
            let mut t = tuner(seed, false);
            trace.iter().map(|ws| {
                let d = t.tune_step(ws).decision;
                (d.source, d.config)
            }).collect()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn collection_is_reproducible(seed in 0u64..1000, n in 1usize..30) {
        let setup = SimSetup::new(make_scenario("shifting-hot", seed).unwrap(), sim_space(), SimCostModel::default());
        let collect = || {
            let mut env = SimEnv::new(setup.clone()).unwrap();
            let mut backend = env.backend();
            let db = collect_database(&mut env, &mut backend, &setup.space, n, seed).unwrap();
            let mut bytes = Vec::new();
            db.write_to(&mut bytes).unwrap();
            bytes
        };
        prop_assert_eq!(collect(), collect());
    }
}
