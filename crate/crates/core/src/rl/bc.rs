//! Behavioral cloning from the clustered database.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::PolicyNet;
use super::ppo::Adam;
use super::RlError;
use crate::cluster::ClusterModel;
use crate::db::PerfDatabase;
use crate::space::{ParamConfig, ParamSpace};
use crate::state::WorkloadState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPair {
    pub ws: WorkloadState,
    pub config: ParamConfig,
}

/// One `(state, config)` label per database point: the config of the best
/// of its K nearest cluster neighbors.
pub fn build_expert_dataset(db: &PerfDatabase, model: &ClusterModel, knn_k: usize) -> Vec<ExpertPair> {
    db.points()
        .iter()
        .map(|p| ExpertPair {
            ws: p.ws,
            config: model.knn_query(db, &p.ws, knn_k).config,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    /// Mean summed cross-entropy over each epoch's minibatches.
    pub epoch_losses: Vec<f64>,
    /// Mean summed cross-entropy over the dataset after training.
    pub final_ce: f64,
    /// Fraction of pairs whose per-head argmax equals the label.
    pub accuracy: f64,
}

/// Network input and per-head label indices of one pair.
type Encoded = ([f64; 5], Vec<usize>);

fn encode(space: &ParamSpace, data: &[ExpertPair]) -> Result<Vec<Encoded>, RlError> {
    data.iter()
        .map(|p| {
            let idx = space
                .indices_of(&p.config)
                .map_err(|e| RlError::Shape(e.to_string()))?;
            Ok((p.ws.to_array(), idx))
        })
        .collect()
}

/// Mean cross-entropy per head over `data`.
pub fn head_cross_entropy(policy: &PolicyNet, space: &ParamSpace, data: &[ExpertPair]) -> Result<Vec<f64>, RlError> {
    let enc = encode(space, data)?;
    let mut ce = vec![0.0; policy.head_sizes.len()];
    for (x, a) in &enc {
        let pass = policy.forward(x);
        for (h, (p, &ai)) in pass.probs.iter().zip(a).enumerate() {
            ce[h] -= p[ai].ln() / enc.len() as f64;
        }
    }
    Ok(ce)
}

fn accuracy(policy: &PolicyNet, enc: &[([f64; 5], Vec<usize>)]) -> f64 {
    let hits = enc
        .iter()
        .filter(|(x, a)| {
            let pass = policy.forward(x);
            pass.probs.iter().zip(a).all(|(p, &ai)| {
                let arg = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
                arg == ai
            })
        })
        .count();
    hits as f64 / enc.len().max(1) as f64
}

/// Minimizes the summed per-head cross-entropy between the policy and the
/// expert labels with minibatch Adam.
pub fn bc_pretrain(
    policy: &mut PolicyNet,
    space: &ParamSpace,
    data: &[ExpertPair],
    cfg: &BcConfig,
) -> Result<BcReport, RlError> {
    if data.is_empty() {
        return Err(RlError::Empty);
    }
    if policy.head_sizes != space.head_sizes() {
        return Err(RlError::Shape(format!(
            "policy heads {:?} do not match space {:?}",
            policy.head_sizes,
            space.head_sizes()
        )));
    }
    let enc = encode(space, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(policy.params.len(), cfg.learning_rate, 1e-8);
    let mut order: Vec<usize> = (0..enc.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let saved = policy.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let b = chunk.len() as f64;
            let mut g = vec![0.0; policy.params.len()];
            for &i in chunk {
                let (x, a) = &enc[i];
                let pass = policy.forward(x);
                total -= pass.log_prob(a);
                policy.backward(&pass, a, -1.0 / b, 0.0, &mut g);
            }
            if !total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                *policy = saved;
                return Err(RlError::NonFinite("behavioral cloning loss".into()));
            }
            opt.step(&mut policy.params, &g);
        }
        epoch_losses.push(total / enc.len() as f64);
    }
    let final_ce = head_cross_entropy(policy, space, data)?.iter().sum();
    Ok(BcReport {
        epoch_losses,
        final_ce,
        accuracy: accuracy(policy, &enc),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParamSpec;
    use rand::Rng;

    fn space() -> ParamSpace {
        ParamSpace::new(
            "t",
            vec![
                ParamSpec::new("a", vec![1, 2, 3, 4], 1).unwrap(),
                ParamSpec::new("b", vec![10, 20, 30, 40], 10).unwrap(),
            ],
        )
        .unwrap()
    }

    fn ws(a: [f64; 5]) -> WorkloadState {
        WorkloadState::from_array(a).unwrap()
    }

    #[test]
    fn single_pair_is_memorized() {
        let space = space();
        let pair = ExpertPair {
            ws: ws([0.4, 0.3, 0.2, 0.1, 0.6]),
            config: ParamConfig::new(vec![3, 10]),
        };
        let mut net = PolicyNet::new(&space.head_sizes(), 1);
        let cfg = BcConfig {
            epochs: 300,
            ..Default::default()
        };
        let r = bc_pretrain(&mut net, &space, std::slice::from_ref(&pair), &cfg).unwrap();
        let pass = net.forward(&pair.ws.to_array());
        let joint = pass.log_prob(&space.indices_of(&pair.config).unwrap()).exp();
        assert!(joint > 0.99, "joint {joint}");
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let space = space();
        let mut net = PolicyNet::new(&space.head_sizes(), 1);
        let before = net.clone();
        let pair = ExpertPair {
            ws: ws([0.1; 5]),
            config: space.default_config(),
        };
        let cfg = BcConfig {
            epochs: 0,
            ..Default::default()
        };
        bc_pretrain(&mut net, &space, &[pair], &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn random_labels_cannot_beat_chance() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<ExpertPair> = (0..4000)
            .map(|_| ExpertPair {
                ws: ws([rng.random(), rng.random(), rng.random::<f64>() * 0.5, rng.random::<f64>() * 0.5, rng.random()]),
                config: space.config_from_indices(&[rng.random_range(0..4), rng.random_range(0..4)]),
            })
            .collect();
        let mut net = PolicyNet::new(&space.head_sizes(), 2);
        let cfg = BcConfig {
            epochs: 10,
            ..Default::default()
        };
        bc_pretrain(&mut net, &space, &data, &cfg).unwrap();
        for ce in head_cross_entropy(&net, &space, &data).unwrap() {
            assert!(ce >= 4f64.ln() - 0.05, "ce {ce}");
        }
    }

    fn jittered(rng: &mut ChaCha8Rng, center: [f64; 5]) -> WorkloadState {
        ws(center.map(|c| c + rng.random_range(-0.02..0.02)))
    }

    #[test]
    fn single_cluster_loss_is_monotone() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<ExpertPair> = (0..300)
            .map(|_| ExpertPair {
                ws: jittered(&mut rng, [0.5, 0.3, 0.2, 0.1, 0.6]),
                config: ParamConfig::new(vec![2, 40]),
            })
            .collect();
        let mut net = PolicyNet::new(&space.head_sizes(), 3);
        let cfg = BcConfig {
            epochs: 40,
            ..Default::default()
        };
        let r = bc_pretrain(&mut net, &space, &data, &cfg).unwrap();
        for w in r.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{:?}", r.epoch_losses);
        }
    }

    #[test]
    fn separated_clusters_are_learned() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<ExpertPair> = (0..400)
            .map(|i| {
                let (c, cfg) = if i % 2 == 0 {
                    ([0.1, 0.2, 0.1, 0.1, 0.3], vec![1, 40])
                } else {
                    ([0.9, 0.7, 0.4, 0.1, 0.8], vec![4, 20])
                };
                ExpertPair {
                    ws: jittered(&mut rng, c),
                    config: ParamConfig::new(cfg),
                }
            })
            .collect();
        let mut net = PolicyNet::new(&space.head_sizes(), 3);
        let r = bc_pretrain(&mut net, &space, &data, &BcConfig::default()).unwrap();
        assert!(r.accuracy > 0.95, "accuracy {}", r.accuracy);
    }
}
