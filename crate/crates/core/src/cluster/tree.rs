//! Greedy CART regression tree used only for its feature importances.

use serde::{Deserialize, Serialize};

use super::kmeans::Point;
use crate::state::WS_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
        n: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in preorder; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    /// Total squared-error decrease per feature, unnormalized.
    pub gains: [f64; WS_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

fn sse(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    ys.iter().map(|y| (y - mean) * (y - mean)).sum()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best variance-reduction split of `idx`, or `None` if no split leaves
/// `min_leaf` samples on each side and reduces the error.
fn best_split(x: &[Point], y: &[f64], idx: &[usize], min_leaf: usize) -> Option<BestSplit> {
    let n = idx.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let parent = sse(&ys);
    // splits must beat rounding noise in the parent error
    let floor = parent * 1e-12;
    let mut best: Option<BestSplit> = None;
    let mut order = idx.to_vec();
    for f in 0..WS_DIM {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let total: f64 = order.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
        let (mut ls, mut lsq) = (0.0, 0.0);
        for (pos, &i) in order.iter().enumerate().take(n - 1) {
            ls += y[i];
            lsq += y[i] * y[i];
            let nl = pos + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (a, b) = (x[i][f], x[order[pos + 1]][f]);
            if a == b {
                continue;
            }
            let rs = total - ls;
            let rsq = total_sq - lsq;
            let child = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
            let gain = parent - child;
            if gain > floor && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: 0.5 * (a + b),
                    gain,
                });
            }
        }
    }
    best
}

impl RegressionTree {
    pub fn fit(x: &[Point], y: &[f64], params: TreeParams) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            gains: [0.0; WS_DIM],
        };
        let idx: Vec<usize> = (0..x.len()).collect();
        if !idx.is_empty() {
            tree.grow(x, y, &idx, 0, params);
        }
        tree
    }

    fn grow(&mut self, x: &[Point], y: &[f64], idx: &[usize], depth: usize, p: TreeParams) -> usize {
        let id = self.nodes.len();
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf {
            value: mean,
            n: idx.len(),
        });
        if depth >= p.max_depth {
            return id;
        }
        let Some(split) = best_split(x, y, idx, p.min_leaf) else {
            return id;
        };
        self.gains[split.feature] += split.gain;
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| x[i][split.feature] <= split.threshold);
        let left = self.grow(x, y, &l, depth + 1, p);
        let right = self.grow(x, y, &r, depth + 1, p);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    pub fn predict(&self, p: &Point) -> Option<f64> {
        let mut at = 0;
        loop {
            match self.nodes.get(at)? {
                Node::Leaf { value, .. } => return Some(*value),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if p[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(&self.nodes, 0)
        }
    }

    /// Importances normalized to sum to one, or `None` if the tree never split.
    pub fn importances(&self) -> Option<[f64; WS_DIM]> {
        let total: f64 = self.gains.iter().sum();
        (total > 0.0).then(|| self.gains.map(|g| g / total))
    }
}
