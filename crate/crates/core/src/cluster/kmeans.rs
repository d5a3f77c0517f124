//! Lloyd's k-means with k-means++ seeding over 5-dimensional states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::state::WS_DIM;

pub type Point = [f64; WS_DIM];

pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance statistics of one cluster's members to its centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub size: usize,
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
    /// Outlier threshold `mu + 3 * sigma`.
    pub threshold: f64,
}

impl ClusterStats {
    pub fn from_distances(d: &[f64]) -> Self {
        if d.is_empty() {
            return Self {
                size: 0,
                mu: 0.0,
                sigma: 0.0,
                threshold: 0.0,
            };
        }
        let n = d.len() as f64;
        let mu = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        Self {
            size: d.len(),
            mu,
            sigma,
            threshold: mu + 3.0 * sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Point>,
    pub assignments: Vec<usize>,
    pub stats: Vec<ClusterStats>,
    pub wcss: f64,
}

impl KMeansModel {
    /// Nearest non-empty cluster and the unweighted distance to its centroid.
    /// Ties go to the lower cluster id.
    pub fn nearest(&self, p: &Point) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (c, centroid) in self.centroids.iter().enumerate() {
            if self.stats[c].size == 0 {
                continue;
            }
            let d = sq_dist(p, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        (best.0, best.1.sqrt())
    }
}

/// One Lloyd run: final centroids, assignments, WCSS after every iteration.
pub(crate) struct LloydRun {
    pub centroids: Vec<Point>,
    pub assignments: Vec<usize>,
    pub trace: Vec<f64>,
}

fn assign(points: &[Point], centroids: &[Point]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, m) in centroids.iter().enumerate() {
                let d = sq_dist(p, m);
                if d < best.1 {
                    best = (c, d);
                }
            }
            wcss += best.1;
            best.0
        })
        .collect();
    (a, wcss)
}

fn plus_plus(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Reseeds every empty cluster with the point farthest from its current
/// centroid (lowest index on ties), one cluster at a time.
fn repair_empty(points: &[Point], centroids: &mut [Point], assignments: &mut [usize]) -> bool {
    let mut repaired = false;
    loop {
        let mut sizes = vec![0usize; centroids.len()];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return repaired;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assignments[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        // fewer distinct donors than clusters: leave the rest empty
        let Some(i) = far else {
            return repaired;
        };
        centroids[empty] = points[i];
        assignments[i] = empty;
        repaired = true;
    }
}

fn means(points: &[Point], assignments: &[usize], old: &[Point]) -> Vec<Point> {
    let k = old.len();
    let mut sums = vec![[0.0; WS_DIM]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    (0..k)
        .map(|c| {
            if counts[c] == 0 {
                old[c]
            } else {
                sums[c].map(|s| s / counts[c] as f64)
            }
        })
        .collect()
}

pub(crate) fn lloyd(points: &[Point], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> LloydRun {
    let mut centroids = plus_plus(points, k, rng);
    let (mut assignments, w) = assign(points, &centroids);
    let mut trace = vec![w];
    for _ in 0..max_iter {
        repair_empty(points, &mut centroids, &mut assignments);
        centroids = means(points, &assignments, &centroids);
        let (next, w) = assign(points, &centroids);
        trace.push(w);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    LloydRun {
        centroids,
        assignments,
        trace,
    }
}

pub(crate) fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// k-means over `points`, best of `restarts` runs by WCSS (earliest restart
/// on ties). Restarts run in parallel; the result does not depend on
/// scheduling.
pub fn fit_kmeans(
    points: &[Point],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> Result<KMeansModel, ClusterError> {
    if k == 0 {
        return Err(ClusterError::Config("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(ClusterError::TooFewPoints {
            k,
            points: points.len(),
        });
    }
    let runs: Vec<LloydRun> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(points, k, max_iter, &mut restart_rng(seed, r)))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| {
            if b.trace.last() < a.trace.last() {
                b
            } else {
                a
            }
        })
        .expect("at least one restart");
    Ok(finish(points, best.centroids, best.assignments))
}

fn finish(points: &[Point], centroids: Vec<Point>, assignments: Vec<usize>) -> KMeansModel {
    let k = centroids.len();
    let mut dists = vec![Vec::new(); k];
    let mut wcss = 0.0;
    for (p, &a) in points.iter().zip(&assignments) {
        let d2 = sq_dist(p, &centroids[a]);
        wcss += d2;
        dists[a].push(d2.sqrt());
    }
    KMeansModel {
        k,
        stats: dists.iter().map(|d| ClusterStats::from_distances(d)).collect(),
        centroids,
        assignments,
        wcss,
    }
}
