//! 5 -> 64 (tanh) networks with hand-written backpropagation.
//!
//! Parameters live in one flat vector per network:
//! trunk weights `[HIDDEN x WS_DIM]` row-major, trunk biases, then for the
//! policy each head's `[n x HIDDEN]` weights followed by its `n` biases, and
//! for the value net `HIDDEN` weights and one bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::state::WS_DIM;

pub const HIDDEN: usize = 64;
const TRUNK: usize = HIDDEN * WS_DIM + HIDDEN;

pub type Input = [f64; WS_DIM];

fn uniform_init(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, gain: f64) {
    let bound = gain / (fan_in as f64).sqrt();
    for w in out {
        *w = rng.random_range(-bound..bound);
    }
}

fn trunk_forward(p: &[f64], x: &Input) -> [f64; HIDDEN] {
    let mut h = [0.0; HIDDEN];
    for (j, hj) in h.iter_mut().enumerate() {
        let row = &p[j * WS_DIM..(j + 1) * WS_DIM];
        let mut s = p[HIDDEN * WS_DIM + j];
        for (w, xi) in row.iter().zip(x) {
            s += w * xi;
        }
        *hj = s.tanh();
    }
    h
}

/// Accumulates trunk gradients given dL/dh.
fn trunk_backward(g: &mut [f64], x: &Input, h: &[f64; HIDDEN], dh: &[f64; HIDDEN]) {
    for j in 0..HIDDEN {
        let dpre = dh[j] * (1.0 - h[j] * h[j]);
        for (i, xi) in x.iter().enumerate() {
            g[j * WS_DIM + i] += dpre * xi;
        }
        g[HIDDEN * WS_DIM + j] += dpre;
    }
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub head_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Forward pass of the policy, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct PolicyPass {
    pub x: Input,
    pub h: [f64; HIDDEN],
    pub probs: Vec<Vec<f64>>,
}

impl PolicyPass {
    /// Sum over heads of `log p(action_h)`.
    pub fn log_prob(&self, action: &[usize]) -> f64 {
        self.probs.iter().zip(action).map(|(p, &a)| p[a].ln()).sum()
    }

    /// Per-head entropies summed.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .map(|p| -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>())
            .sum()
    }
}

impl PolicyNet {
    pub fn param_count(head_sizes: &[usize]) -> usize {
        TRUNK + head_sizes.iter().map(|n| HIDDEN * n + n).sum::<usize>()
    }

    /// Trunk weights scaled to fan-in; head weights start small so the
    /// initial policy is close to uniform.
    pub fn new(head_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; Self::param_count(head_sizes)];
        uniform_init(&mut rng, &mut params[..HIDDEN * WS_DIM], WS_DIM, 1.0);
        let mut off = TRUNK;
        for &n in head_sizes {
            uniform_init(&mut rng, &mut params[off..off + HIDDEN * n], HIDDEN, 0.01);
            off += HIDDEN * n + n;
        }
        Self {
            head_sizes: head_sizes.to_vec(),
            params,
        }
    }

    /// Sets every head weight and bias to zero.
    pub fn zero_heads(&mut self) {
        self.params[TRUNK..].iter_mut().for_each(|w| *w = 0.0);
    }

    pub fn forward(&self, x: &Input) -> PolicyPass {
        let h = trunk_forward(&self.params, x);
        let mut off = TRUNK;
        let probs = self
            .head_sizes
            .iter()
            .map(|&n| {
                let w = &self.params[off..off + HIDDEN * n];
                let b = &self.params[off + HIDDEN * n..off + HIDDEN * n + n];
                off += HIDDEN * n + n;
                let mut z: Vec<f64> = (0..n)
                    .map(|a| b[a] + w[a * HIDDEN..(a + 1) * HIDDEN].iter().zip(&h).map(|(w, h)| w * h).sum::<f64>())
                    .collect();
                softmax(&mut z);
                z
            })
            .collect();
        PolicyPass { x: *x, h, probs }
    }

    /// Accumulates into `g` the gradient of `coef_lp * log p(action) +
    /// coef_ent * entropy` at the pass.
    pub fn backward(&self, pass: &PolicyPass, action: &[usize], coef_lp: f64, coef_ent: f64, g: &mut [f64]) {
        let mut dh = [0.0; HIDDEN];
        let mut off = TRUNK;
        for ((&n, p), &a) in self.head_sizes.iter().zip(&pass.probs).zip(action) {
            let ent: f64 = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
            for j in 0..n {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let lp = if p[j] > 0.0 { p[j].ln() } else { 0.0 };
                let dz = coef_lp * (onehot - p[j]) - coef_ent * p[j] * (lp + ent);
                if dz == 0.0 {
                    continue;
                }
                let row = off + j * HIDDEN;
                for k in 0..HIDDEN {
                    g[row + k] += dz * pass.h[k];
                    dh[k] += dz * self.params[row + k];
                }
                g[off + HIDDEN * n + j] += dz;
            }
            off += HIDDEN * n + n;
        }
        trunk_backward(g, &pass.x, &pass.h, &dh);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub params: Vec<f64>,
}

impl ValueNet {
    pub const PARAM_COUNT: usize = TRUNK + HIDDEN + 1;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0076_616c_7565);
        let mut params = vec![0.0; Self::PARAM_COUNT];
        uniform_init(&mut rng, &mut params[..HIDDEN * WS_DIM], WS_DIM, 1.0);
        uniform_init(&mut rng, &mut params[TRUNK..TRUNK + HIDDEN], HIDDEN, 1.0);
        Self { params }
    }

    pub fn forward(&self, x: &Input) -> (f64, [f64; HIDDEN]) {
        let h = trunk_forward(&self.params, x);
        let w = &self.params[TRUNK..TRUNK + HIDDEN];
        let v = self.params[TRUNK + HIDDEN] + w.iter().zip(&h).map(|(w, h)| w * h).sum::<f64>();
        (v, h)
    }

    pub fn value(&self, x: &Input) -> f64 {
        self.forward(x).0
    }

    /// Accumulates `dv * dV/dparams` into `g`.
    pub fn backward(&self, x: &Input, h: &[f64; HIDDEN], dv: f64, g: &mut [f64]) {
        let mut dh = [0.0; HIDDEN];
        for k in 0..HIDDEN {
            g[TRUNK + k] += dv * h[k];
            dh[k] = dv * self.params[TRUNK + k];
        }
        g[TRUNK + HIDDEN] += dv;
        trunk_backward(g, x, h, &dh);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|w| w.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(PolicyNet::param_count(&[4]), 644);
        assert_eq!(PolicyNet::new(&[4], 0).params.len(), 644);
        assert_eq!(ValueNet::PARAM_COUNT, 449);
        assert_eq!(PolicyNet::param_count(&[4, 4, 4, 4]), 384 + 4 * 260);
    }

    #[test]
    fn zero_heads_are_uniform() {
        let mut net = PolicyNet::new(&[4, 2, 5], 3);
        net.zero_heads();
        let pass = net.forward(&[0.3, 0.9, 0.1, 0.2, 0.5]);
        for (p, n) in pass.probs.iter().zip([4, 2, 5]) {
            for q in p {
                assert_eq!(*q, 1.0 / n as f64);
            }
        }
    }

    #[test]
    fn heads_are_normalized() {
        let mut net = PolicyNet::new(&[3, 4], 9);
        net.params.iter_mut().enumerate().for_each(|(i, w)| *w += (i as f64 * 0.37).sin() * 3.0);
        let pass = net.forward(&[1.0, 0.0, 0.4, 0.6, 1.0]);
        for p in &pass.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
