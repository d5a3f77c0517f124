//! PPO agent over workload states with one categorical head per parameter.

mod bc;
mod net;
mod ppo;

pub use bc::{bc_pretrain, build_expert_dataset, head_cross_entropy, BcConfig, BcReport, ExpertPair};
pub use net::{Input, PolicyNet, PolicyPass, ValueNet, HIDDEN};
pub use ppo::{
    clip_grad_norm, gae, loss_and_grad, normalize, ppo_update, Adam, LossParts, Optimizers, PpoConfig, Sample,
    Step, Trajectory, UpdateDiagnostics,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{check_version, read_json, ArtifactError, SCHEMA_VERSION};
use crate::space::{ParamConfig, ParamSpace};
use crate::state::{WorkloadState, WS_DIM};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("nothing to train on")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid PPO config {0}")]
    Config(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// Independent categorical draw per head. Returns the indices and the joint
/// log-probability.
pub fn sample_action(pass: &PolicyPass, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let idx: Vec<usize> = pass
        .probs
        .iter()
        .map(|p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (j, &q) in p.iter().enumerate() {
                if q > 0.0 {
                    last = j;
                }
                acc += q;
                if u < acc && q > 0.0 {
                    return j;
                }
            }
            last
        })
        .collect();
    let lp = pass.log_prob(&idx);
    (idx, lp)
}

/// An action taken by the agent, kept until its reward arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingAction {
    pub x: Input,
    pub action: Vec<usize>,
    pub config: ParamConfig,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub space: ParamSpace,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub cfg: PpoConfig,
    pub frozen: bool,
    opt: Optimizers,
    buffer: Vec<Step>,
    rng: ChaCha8Rng,
    updates: u64,
}

impl PpoAgent {
    pub fn new(space: ParamSpace, cfg: PpoConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        let policy = PolicyNet::new(&space.head_sizes(), cfg.seed);
        let value = ValueNet::new(cfg.seed);
        Self::from_nets(space, policy, value, cfg)
    }

    pub fn from_nets(space: ParamSpace, policy: PolicyNet, value: ValueNet, cfg: PpoConfig) -> Result<Self, RlError> {
        cfg.validate()?;
        if policy.head_sizes != space.head_sizes() {
            return Err(RlError::Shape(format!(
                "policy heads {:?} do not match space {:?}",
                policy.head_sizes,
                space.head_sizes()
            )));
        }
        let opt = Optimizers::new(&policy, &value, &cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5050_4f00);
        Ok(Self {
            space,
            policy,
            value,
            cfg,
            frozen: false,
            opt,
            buffer: Vec::new(),
            rng,
            updates: 0,
        })
    }

    pub fn act(&mut self, ws: &WorkloadState) -> PendingAction {
        let x = ws.to_array();
        let pass = self.policy.forward(&x);
        let (action, log_prob) = sample_action(&pass, &mut self.rng);
        PendingAction {
            config: self.space.config_from_indices(&action),
            value: self.value.value(&x),
            x,
            action,
            log_prob,
        }
    }

    /// Most likely config under the current policy.
    pub fn greedy(&self, ws: &WorkloadState) -> ParamConfig {
        let pass = self.policy.forward(&ws.to_array());
        let idx: Vec<usize> = pass
            .probs
            .iter()
            .map(|p| (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b }))
            .collect();
        self.space.config_from_indices(&idx)
    }

    pub fn value_of(&self, ws: &WorkloadState) -> f64 {
        self.value.value(&ws.to_array())
    }

    /// Completes `pending` with its reward and the state that followed.
    /// Runs a PPO update once the buffer holds `n_steps` transitions.
    pub fn record(
        &mut self,
        pending: PendingAction,
        reward: f64,
        next: &WorkloadState,
        done: bool,
    ) -> Result<Option<UpdateDiagnostics>, RlError> {
        if self.frozen {
            return Ok(None);
        }
        self.buffer.push(Step {
            x: pending.x,
            action: pending.action,
            log_prob: pending.log_prob,
            value: pending.value,
            reward,
            next_value: if done { 0.0 } else { self.value_of(next) },
            done,
            truncated: false,
        });
        if self.buffer.len() < self.cfg.n_steps {
            return Ok(None);
        }
        let traj = std::mem::take(&mut self.buffer);
        let d = ppo_update(
            &mut self.policy,
            &mut self.value,
            &mut self.opt,
            &traj,
            &self.cfg,
            &mut self.rng,
        )?;
        self.updates += 1;
        Ok(Some(d))
    }

    /// The next recorded step will not continue from the last one.
    pub fn mark_boundary(&mut self) {
        if let Some(s) = self.buffer.last_mut() {
            s.truncated = true;
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn weights(&self) -> WeightsFile {
        WeightsFile::new(&self.space, &self.policy, &self.value)
    }
}

/// Policy and value weights with the shapes needed to rebuild them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub kind: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden: usize,
    pub head_sizes: Vec<usize>,
    pub space: ParamSpace,
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

const WEIGHTS_KIND: &str = "rl-weights";

impl WeightsFile {
    pub fn new(space: &ParamSpace, policy: &PolicyNet, value: &ValueNet) -> Self {
        Self {
            kind: WEIGHTS_KIND.to_string(),
            version: SCHEMA_VERSION,
            input_dim: WS_DIM,
            hidden: HIDDEN,
            head_sizes: policy.head_sizes.clone(),
            space: space.clone(),
            policy: policy.params.clone(),
            value: value.params.clone(),
        }
    }

    pub fn nets(&self) -> (PolicyNet, ValueNet) {
        (
            PolicyNet {
                head_sizes: self.head_sizes.clone(),
                params: self.policy.clone(),
            },
            ValueNet {
                params: self.value.clone(),
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        let mut text = serde_json::to_string(self).expect("weights serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| ArtifactError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let w: WeightsFile = read_json(path)?;
        if w.kind != WEIGHTS_KIND {
            return Err(ArtifactError::invalid(path, format!("not an {WEIGHTS_KIND} file")));
        }
        check_version(path, w.version)?;
        let shape_ok = w.input_dim == WS_DIM
            && w.hidden == HIDDEN
            && w.head_sizes == w.space.head_sizes()
            && w.policy.len() == PolicyNet::param_count(&w.head_sizes)
            && w.value.len() == ValueNet::PARAM_COUNT;
        if !shape_ok {
            return Err(ArtifactError::invalid(path, "weight shapes do not match the header"));
        }
        if w.policy.iter().chain(&w.value).any(|x| !x.is_finite()) {
            return Err(ArtifactError::invalid(path, "non-finite weight"));
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::ParamSpec;

    fn one_head() -> ParamSpace {
        ParamSpace::new(
            "tpp",
            vec![ParamSpec::new("demote_scale_factor", vec![100, 200, 400, 800], 200).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_head_always_picks_its_mass() {
        let pass = PolicyPass {
            x: [0.0; 5],
            h: [0.0; HIDDEN],
            probs: vec![vec![1.0, 0.0, 0.0, 0.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_action(&pass, &mut rng), (vec![0], 0.0));
        }
    }

    #[test]
    fn uniform_head_frequencies() {
        let pass = PolicyPass {
            x: [0.0; 5],
            h: [0.0; HIDDEN],
            probs: vec![vec![0.25; 4]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[sample_action(&pass, &mut rng).0[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e4 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn joint_log_prob_is_the_sum_of_heads() {
        let pass = PolicyPass {
            x: [0.0; 5],
            h: [0.0; HIDDEN],
            probs: vec![vec![0.1, 0.9], vec![0.5, 0.2, 0.3]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (a, lp) = sample_action(&pass, &mut rng);
            assert_eq!(lp, pass.probs[0][a[0]].ln() + pass.probs[1][a[1]].ln());
        }
    }

    #[test]
    fn weights_round_trip() {
        let agent = PpoAgent::new(one_head(), PpoConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        agent.weights().save(&path).unwrap();
        let back = WeightsFile::load(&path).unwrap();
        assert_eq!(back, agent.weights());
        assert_eq!(back.policy.len(), 644);
        assert_eq!(back.value.len(), 449);
        let mut bad = back.clone();
        bad.policy.pop();
        bad.save(&path).unwrap();
        assert!(WeightsFile::load(&path).is_err());
    }

    #[test]
    fn frozen_agent_never_updates() {
        let mut agent = PpoAgent::new(one_head(), PpoConfig::default()).unwrap();
        agent.frozen = true;
        let ws = WorkloadState::new(0.5, 0.3, 0.1, 0.1, 0.6).unwrap();
        let before = agent.policy.clone();
        for _ in 0..20 {
            let p = agent.act(&ws);
            agent.record(p, 1.0, &ws, false).unwrap();
        }
        assert_eq!(agent.policy, before);
        assert_eq!(agent.updates(), 0);
    }

    #[test]
    fn two_armed_bandit_converges() {
        let space = ParamSpace::new("bandit", vec![ParamSpec::new("arm", vec![0, 1], 0).unwrap()]).unwrap();
        let ws = WorkloadState::new(0.5, 0.5, 0.2, 0.1, 0.7).unwrap();
        for seed in 0..3 {
            let cfg = PpoConfig {
                seed,
                ..Default::default()
            };
            let mut agent = PpoAgent::new(space.clone(), cfg).unwrap();
            let mut reached = None;
            for t in 0..500 {
                let p = agent.act(&ws);
                let r = if p.config.values[0] == 1 { 1.0 } else { -1.0 };
                agent.record(p, r, &ws, false).unwrap();
                if agent.policy.forward(&ws.to_array()).probs[0][1] >= 0.9 {
                    reached = Some(t);
                    break;
                }
            }
            assert!(reached.is_some(), "seed {seed} did not converge");
        }
    }
}
