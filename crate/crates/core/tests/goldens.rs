//! Golden fixtures and brute-force oracles over the public API.
//!
//! Set `TIERTUNE_BLESS=1` to rewrite the fixture files from the current
//! implementation.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiertune::backend::{DryRunBackend, ParamBackend};
use tiertune::cluster::{ClusterModel, ClusteringConfig};
use tiertune::rl::{build_expert_dataset, PolicyNet};
use tiertune::sim::{make_scenario, oracle_table, param_sweep, sim_space, write_oracle_csv, SimCostModel, SimSetup};
use tiertune::{weighted_distance, Catalog, DataPoint, ParamConfig, PerfDatabase, WorkloadState};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn blessing() -> bool {
    std::env::var_os("TIERTUNE_BLESS").is_some()
}

fn check_text(name: &str, actual: &str) {
    let path = fixture(name);
    if blessing() {
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from the fixture");
}

fn phased_graph() -> SimSetup {
    SimSetup::new(make_scenario("phased-graph", 1).unwrap(), sim_space(), SimCostModel::default())
}

#[test]
fn phased_graph_oracle_table_matches_fixture() {
    let setup = phased_graph();
    let rows = oracle_table(&setup).unwrap();
    let mut csv = Vec::new();
    write_oracle_csv(&setup.space, &rows, &mut csv).unwrap();
    check_text("phased_graph_oracle.csv", &String::from_utf8(csv).unwrap());
}

#[test]
fn construction_prefers_less_demotion_than_bfs() {
    let setup = phased_graph();
    let rows = oracle_table(&setup).unwrap();
    let dsf = setup.space.position("demote_scale_factor").unwrap();
    let by_name = |n: &str| rows.iter().find(|r| r.phase_name == n).unwrap().config.values[dsf];
    assert!(by_name("construction") < by_name("bfs"), "{rows:?}");
}

#[test]
fn demote_sweep_is_not_flat_and_default_is_not_best() {
    let setup = phased_graph();
    let rows = param_sweep(&setup, "demote_scale_factor").unwrap();
    let default = setup.space.specs[setup.space.position("demote_scale_factor").unwrap()].default;
    let best = rows.iter().max_by(|a, b| a.ipc.total_cmp(&b.ipc)).unwrap();
    let spread = rows.iter().map(|r| r.speedup).fold(f64::NEG_INFINITY, f64::max)
        - rows.iter().map(|r| r.speedup).fold(f64::INFINITY, f64::min);
    assert!(spread > 1e-3, "{rows:?}");
    assert_ne!(best.value, default, "{rows:?}");
}

#[test]
fn tpp_dryrun_write_list_matches_fixture() {
    let space = Catalog::builtin().space("tpp").unwrap();
    let mut backend = DryRunBackend::new();
    for cfg in space.enumerate() {
        assert!(backend.apply(&space, &cfg).unwrap().is_ok());
    }
    let mut csv = Vec::new();
    backend.write_csv(&mut csv).unwrap();
    check_text("tpp_dryrun_writes.csv", &String::from_utf8(csv).unwrap());
}

#[test]
fn dryrun_of_one_demote_value() {
    let space = Catalog::builtin().space("tpp").unwrap();
    let mut backend = DryRunBackend::new();
    let mut cfg = space.default_config();
    cfg.values[space.position("demote_scale_factor").unwrap()] = 400;
    backend.apply(&space, &cfg).unwrap();
    let demote: Vec<_> = backend.writes().iter().filter(|(p, _)| p.ends_with("/demote_scale_factor")).collect();
    assert_eq!(demote.len(), 1);
    assert_eq!(demote[0].1, "400");
}

#[test]
fn policy_forward_matches_fixture() {
    let space = Catalog::builtin().space("tpp").unwrap();
    let net = PolicyNet::new(&space.head_sizes(), 42);
    let inputs = [[0.6, 0.4, 0.3, 0.1, 0.7], [0.0; 5], [1.0, 1.0, 0.5, 0.5, 1.0]];
    let probs: Vec<Vec<Vec<f64>>> = inputs.iter().map(|x| net.forward(x).probs).collect();
    let path = fixture("policy_forward_seed42.json");
    if blessing() {
        std::fs::write(&path, serde_json::to_string_pretty(&probs).unwrap() + "\n").unwrap();
    }
    let expected: Vec<Vec<Vec<f64>>> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(expected.len(), probs.len());
    for (e, a) in expected.iter().flatten().flatten().zip(probs.iter().flatten().flatten()) {
        assert!((e - a).abs() < 1e-12, "{e} vs {a}");
    }
}

fn random_db(seed: u64, n: usize) -> PerfDatabase {
    let space = Catalog::builtin().space("tpp").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = PerfDatabase::new(space.clone());
    db.seed = seed;
    let configs = space.enumerate();
    for _ in 0..n {
        let blob = rng.random_range(0..3) as f64 * 0.3;
        let ws = WorkloadState::new(
            blob + rng.random_range(0.0..0.1),
            blob + rng.random_range(0.0..0.1),
            rng.random_range(0.0..0.4),
            rng.random_range(0.0..0.4),
            rng.random::<f64>(),
        )
        .unwrap();
        // a coarse ipc grid makes ties common
        let ipc = 0.5 + (rng.random_range(0..20) as f64) * 0.05;
        let config = configs[rng.random_range(0..configs.len())].clone();
        db.push(DataPoint { ws, config, ipc }).unwrap();
    }
    db
}

fn brute_force_label(db: &PerfDatabase, model: &ClusterModel, ws: &WorkloadState, knn_k: usize) -> ParamConfig {
    let x = ws.to_array();
    let cluster = (0..model.k())
        .filter(|&c| model.kmeans.stats[c].size > 0)
        .min_by(|&a, &b| {
            let d = |c: usize| x.iter().zip(&model.kmeans.centroids[c]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        })
        .unwrap();
    let w = &model.clusters[cluster].weights;
    let pts = db.points();
    let mut members: Vec<(f64, usize)> = (0..pts.len())
        .filter(|&i| model.kmeans.assignments[i] == cluster)
        .map(|i| (weighted_distance(ws, &pts[i].ws, w), i))
        .collect();
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    members.truncate(knn_k);
    let mut best = members[0];
    for &m in &members[1..] {
        let (pm, pb) = (&pts[m.1], &pts[best.1]);
        let better = pm.ipc > pb.ipc
            || (pm.ipc == pb.ipc && (m.0 < best.0 || (m.0 == best.0 && pm.config < pb.config)));
        if better {
            best = m;
        }
    }
    pts[best.1].config.clone()
}

#[test]
fn expert_dataset_matches_brute_force_labels() {
    let db = random_db(3, 200);
    let cfg = ClusteringConfig {
        tree_min_leaf: 5,
        ..Default::default()
    };
    let model = ClusterModel::fit(&db, Some(3), &cfg).unwrap();
    for knn_k in [1, 5, 25, 500] {
        let expert = build_expert_dataset(&db, &model, knn_k);
        assert_eq!(expert.len(), db.len());
        for (pair, p) in expert.iter().zip(db.points()) {
            assert_eq!(pair.ws, p.ws);
            assert_eq!(pair.config, brute_force_label(&db, &model, &p.ws, knn_k));
        }
    }
}

#[test]
fn unique_best_points_label_themselves() {
    let mut db = PerfDatabase::new(Catalog::builtin().space("tpp").unwrap());
    let configs = db.space.enumerate();
    for i in 0..40 {
        let t = i as f64 / 40.0;
        let ws = WorkloadState::new(t, t, 0.1, 0.1, 0.5).unwrap();
        db.push(DataPoint {
            ws,
            config: configs[i % configs.len()].clone(),
            ipc: 1.0 + t,
        })
        .unwrap();
    }
    let cfg = ClusteringConfig {
        tree_min_leaf: 2,
        ..Default::default()
    };
    let model = ClusterModel::fit(&db, Some(1), &cfg).unwrap();
    let expert = build_expert_dataset(&db, &model, 1);
    for (pair, p) in expert.iter().zip(db.points()) {
        assert_eq!(pair.config, p.config);
    }
}
