//! Clipped-surrogate PPO over factorized categorical heads.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Input, PolicyNet, ValueNet};
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub n_steps: usize,
    pub clip_epsilon: f64,
    pub gae_lambda: f64,
    pub epochs_per_update: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            learning_rate: 0.01,
            n_steps: 4,
            clip_epsilon: 0.2,
            gae_lambda: 0.95,
            epochs_per_update: 10,
            minibatch: 4,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let ok = (0.0..1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.clip_epsilon > 0.0
            && self.learning_rate > 0.0
            && self.n_steps >= 1
            && self.minibatch >= 1
            && self.max_grad_norm > 0.0
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RlError::Config(format!("{self:?}")))
        }
    }
}

/// Adam over one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One transition of the rollout buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub x: Input,
    pub action: Vec<usize>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Value estimate of the state reached after this step.
    pub next_value: f64,
    pub done: bool,
    /// The following buffered step does not continue from this one.
    pub truncated: bool,
}

pub type Trajectory = Vec<Step>;

/// GAE advantages and returns. Advantages chain into the next buffered
/// step only when it directly continues this one.
pub fn gae(traj: &[Step], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.len();
    let mut adv = vec![0.0; n];
    for t in (0..n).rev() {
        let s = &traj[t];
        let live = if s.done { 0.0 } else { 1.0 };
        let delta = s.reward + gamma * live * s.next_value - s.value;
        let chain = !s.done && !s.truncated && t + 1 < n;
        adv[t] = delta + if chain { gamma * lambda * adv[t + 1] } else { 0.0 };
    }
    let ret = adv.iter().zip(traj).map(|(a, s)| a + s.value).collect();
    (adv, ret)
}

/// Batch-normalizes advantages with the sample standard deviation.
pub fn normalize(adv: &mut [f64]) {
    let n = adv.len();
    if n < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Training sample after advantage estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Input,
    pub action: Vec<usize>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Largest |ratio - 1| in the batch.
    pub max_ratio_dev: f64,
}

/// PPO loss over `batch` and its gradients with respect to both networks.
pub fn loss_and_grad(
    policy: &PolicyNet,
    value: &ValueNet,
    batch: &[Sample],
    cfg: &PpoConfig,
) -> (LossParts, Vec<f64>, Vec<f64>) {
    let b = batch.len() as f64;
    let mut gp = vec![0.0; policy.params.len()];
    let mut gv = vec![0.0; value.params.len()];
    let mut parts = LossParts::default();
    for s in batch {
        let pass = policy.forward(&s.x);
        let lp = pass.log_prob(&s.action);
        let ratio = (lp - s.old_log_prob).exp();
        let lo = 1.0 - cfg.clip_epsilon;
        let hi = 1.0 + cfg.clip_epsilon;
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(lo, hi) * s.advantage;
        parts.policy_loss -= unclipped.min(clipped) / b;
        parts.max_ratio_dev = parts.max_ratio_dev.max((ratio - 1.0).abs());
        parts.approx_kl += ((ratio - 1.0) - (lp - s.old_log_prob)) / b;
        if !(lo..=hi).contains(&ratio) {
            parts.clip_fraction += 1.0 / b;
        }
        let ent = pass.entropy();
        parts.entropy += ent / b;
        // d(-min)/d lp is -A * ratio on the unclipped branch, zero otherwise
        let coef_lp = if unclipped <= clipped { -s.advantage * ratio / b } else { 0.0 };
        policy.backward(&pass, &s.action, coef_lp, -cfg.entropy_coef / b, &mut gp);

        let (v, h) = value.forward(&s.x);
        parts.value_loss += (v - s.ret) * (v - s.ret) / b;
        value.backward(&s.x, &h, cfg.value_coef * 2.0 * (v - s.ret) / b, &mut gv);
    }
    parts.total = parts.policy_loss + cfg.value_coef * parts.value_loss - cfg.entropy_coef * parts.entropy;
    (parts, gp, gv)
}

/// Scales both gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(gp: &mut [f64], gv: &mut [f64], max_norm: f64) -> f64 {
    let norm = gp.iter().chain(gv.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        gp.iter_mut().chain(gv.iter_mut()).for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Largest |ratio - 1| seen in the first epoch; exactly zero.
    pub first_epoch_ratio_dev: f64,
}

/// Optimizer state for one policy/value pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub policy: Adam,
    pub value: Adam,
}

impl Optimizers {
    pub fn new(policy: &PolicyNet, value: &ValueNet, cfg: &PpoConfig) -> Self {
        Self {
            policy: Adam::new(policy.params.len(), cfg.learning_rate, cfg.adam_eps),
            value: Adam::new(value.params.len(), cfg.learning_rate, cfg.adam_eps),
        }
    }
}

/// One PPO update on a full rollout. On a non-finite loss the networks and
/// optimizers are left exactly as they were.
pub fn ppo_update(
    policy: &mut PolicyNet,
    value: &mut ValueNet,
    opt: &mut Optimizers,
    traj: &[Step],
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateDiagnostics, RlError> {
    if traj.is_empty() {
        return Err(RlError::Empty);
    }
    let (mut adv, ret) = gae(traj, cfg.gamma, cfg.gae_lambda);
    normalize(&mut adv);
    let samples: Vec<Sample> = traj
        .iter()
        .zip(adv.iter().zip(&ret))
        .map(|(s, (&a, &r))| Sample {
            x: s.x,
            action: s.action.clone(),
            old_log_prob: s.log_prob,
            advantage: a,
            ret: r,
        })
        .collect();

    let saved = (policy.clone(), value.clone(), opt.clone());
    let mut diag = UpdateDiagnostics::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (parts, mut gp, mut gv) = loss_and_grad(policy, value, &batch, cfg);
            let finite = parts.total.is_finite() && gp.iter().chain(&gv).all(|g| g.is_finite());
            if !finite {
                (*policy, *value, *opt) = saved;
                return Err(RlError::NonFinite("ppo loss".into()));
            }
            if epoch == 0 {
                diag.first_epoch_ratio_dev = diag.first_epoch_ratio_dev.max(parts.max_ratio_dev);
            }
            diag.policy_loss = parts.policy_loss;
            diag.value_loss = parts.value_loss;
            diag.approx_kl = parts.approx_kl;
            diag.clip_fraction = parts.clip_fraction;
            diag.entropy = parts.entropy;
            clip_grad_norm(&mut gp, &mut gv, cfg.max_grad_norm);
            opt.policy.step(&mut policy.params, &gp);
            opt.value.step(&mut value.params, &gv);
        }
    }
    if !policy.is_finite() || !value.is_finite() {
        (*policy, *value, *opt) = saved;
        return Err(RlError::NonFinite("weights after update".into()));
    }
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn step(r: f64, v: f64, nv: f64) -> Step {
        Step {
            x: [0.0; 5],
            action: vec![0],
            log_prob: 0.0,
            value: v,
            reward: r,
            next_value: nv,
            done: false,
            truncated: false,
        }
    }

    #[test]
    fn gae_matches_hand_expansion() {
        let traj = vec![step(1.0, 0.5, 0.2), step(-1.0, 0.2, 0.4), step(0.5, 0.4, 0.1)];
        let (g, l) = (0.9, 0.95);
        let d: Vec<f64> = traj.iter().map(|s| s.reward + g * s.next_value - s.value).collect();
        let a2 = d[2];
        let a1 = d[1] + g * l * a2;
        let a0 = d[0] + g * l * a1;
        let (adv, ret) = gae(&traj, g, l);
        for (x, y) in adv.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gae_stops_at_boundaries() {
        let mut traj = vec![step(1.0, 0.0, 0.3), step(1.0, 0.0, 0.3)];
        traj[0].truncated = true;
        let (adv, _) = gae(&traj, 0.9, 0.95);
        assert!((adv[0] - (1.0 + 0.9 * 0.3)).abs() < 1e-15);
        traj[0].truncated = false;
        traj[0].done = true;
        let (adv, _) = gae(&traj, 0.9, 0.95);
        assert_eq!(adv[0], 1.0);
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_std() {
        let mut a = vec![1.0, 2.0, 4.0, 7.0];
        normalize(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| x * x).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        let mut z = vec![0.0; 4];
        normalize(&mut z);
        assert_eq!(z, [0.0; 4]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        Adam::new(2, 0.01, 1e-8).step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn nan_reward_keeps_previous_weights() {
        let cfg = PpoConfig::default();
        let mut policy = PolicyNet::new(&[4], 1);
        let mut value = ValueNet::new(1);
        let mut opt = Optimizers::new(&policy, &value, &cfg);
        let before = (policy.clone(), value.clone(), opt.clone());
        let mut traj: Vec<Step> = (0..4).map(|i| step(i as f64 * 0.1, 0.0, 0.0)).collect();
        traj[2].reward = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ppo_update(&mut policy, &mut value, &mut opt, &traj, &cfg, &mut rng).is_err());
        assert_eq!((policy, value, opt), before);
    }

    #[test]
    fn zero_advantages_leave_the_policy_alone() {
        let cfg = PpoConfig::default();
        let mut policy = PolicyNet::new(&[4, 4], 2);
        let mut value = ValueNet::new(2);
        // perfect value fit of a constant reward c: V = c / (1 - gamma)
        let c = 0.3;
        let target = c / (1.0 - cfg.gamma);
        value.params.iter_mut().for_each(|w| *w = 0.0);
        *value.params.last_mut().unwrap() = target;
        let mut opt = Optimizers::new(&policy, &value, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj: Vec<Step> = (0..4)
            .map(|_| {
                let x: Input = [(); 5].map(|_| rng.random::<f64>() * 0.5);
                let pass = policy.forward(&x);
                let action = vec![rng.random_range(0..4), rng.random_range(0..4)];
                Step {
                    x,
                    log_prob: pass.log_prob(&action),
                    action,
                    value: target,
                    reward: c,
                    next_value: target,
                    done: false,
                    truncated: false,
                }
            })
            .collect();
        let before = policy.clone();
        let d = ppo_update(&mut policy, &mut value, &mut opt, &traj, &cfg, &mut rng).unwrap();
        let max = before.params.iter().zip(&policy.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-9, "moved by {max}");
        assert_eq!(d.first_epoch_ratio_dev, 0.0);
    }

    fn fd_fixture(seed: u64) -> (PolicyNet, ValueNet, Vec<Sample>, PpoConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = PolicyNet::new(&[4, 3], seed);
        // larger head weights so probabilities and entropy gradients are not trivial
        policy.params.iter_mut().for_each(|w| *w += rng.random_range(-0.5..0.5));
        let value = ValueNet::new(seed);
        let cfg = PpoConfig {
            entropy_coef: 0.05,
            ..Default::default()
        };
        let batch = (0..16)
            .map(|_| {
                let x: Input = [(); 5].map(|_| rng.random::<f64>());
                let action = vec![rng.random_range(0..4), rng.random_range(0..3)];
                let lp = policy.forward(&x).log_prob(&action);
                Sample {
                    x,
                    // old log-probs away from the current ones so some samples clip
                    old_log_prob: lp + rng.random_range(-0.6..0.6),
                    action,
                    advantage: rng.random_range(-1.5..1.5),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        (policy, value, batch, cfg)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut policy, mut value, batch, cfg) = fd_fixture(11);
        let (parts, gp, gv) = loss_and_grad(&policy, &value, &batch, &cfg);
        assert!(parts.clip_fraction > 0.0 && parts.clip_fraction < 1.0);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..policy.params.len() {
            let w = policy.params[i];
            policy.params[i] = w + h;
            let up = loss_and_grad(&policy, &value, &batch, &cfg).0.total;
            policy.params[i] = w - h;
            let down = loss_and_grad(&policy, &value, &batch, &cfg).0.total;
            policy.params[i] = w;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - gp[i]).abs() / fd.abs().max(gp[i].abs()).max(1e-6));
        }
        for i in 0..value.params.len() {
            let w = value.params[i];
            value.params[i] = w + h;
            let up = loss_and_grad(&policy, &value, &batch, &cfg).0.total;
            value.params[i] = w - h;
            let down = loss_and_grad(&policy, &value, &batch, &cfg).0.total;
            value.params[i] = w;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - gv[i]).abs() / fd.abs().max(gv[i].abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
