//! The offline model: k-means over database states, per-cluster outlier
//! thresholds and feature weights, and the weighted K-NN lookup.

mod kmeans;
mod tree;

pub use kmeans::{fit_kmeans, ClusterStats, KMeansModel, Point};
pub use tree::{Node, RegressionTree, TreeParams};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{check_version, read_json, write_json, ArtifactError, SCHEMA_VERSION};
use crate::db::{DataPoint, PerfDatabase};
use crate::space::{ParamConfig, ParamSpace};
use crate::state::{weighted_distance, FeatureWeights, WorkloadState};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("k = {k} exceeds the {points} available points")]
    TooFewPoints { k: usize, points: usize },
    #[error("invalid clustering config: {0}")]
    Config(String),
    #[error("database is empty")]
    EmptyDatabase,
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub elbow_drop_threshold: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub knn_k: usize,
    pub tree_max_depth: usize,
    pub tree_min_leaf: usize,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 10,
            elbow_drop_threshold: 0.10,
            restarts: 8,
            max_iter: 100,
            knn_k: 25,
            tree_max_depth: 5,
            tree_min_leaf: 10,
            seed: 0,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: &str| Err(ClusterError::Config(m.to_string()));
        if self.k_min < 1 || self.k_max < self.k_min {
            return bad("k range must satisfy 1 <= k_min <= k_max");
        }
        if !(self.elbow_drop_threshold > 0.0 && self.elbow_drop_threshold < 1.0) {
            return bad("elbow_drop_threshold must lie in (0, 1)");
        }
        if self.restarts < 1 || self.max_iter < 1 || self.knn_k < 1 {
            return bad("restarts, max_iter and knn_k must be positive");
        }
        if self.tree_max_depth < 1 || self.tree_min_leaf < 1 {
            return bad("tree limits must be positive");
        }
        Ok(())
    }

    fn tree(&self) -> TreeParams {
        TreeParams {
            max_depth: self.tree_max_depth,
            min_leaf: self.tree_min_leaf,
        }
    }
}

/// WCSS of the best k-means fit for each `k` in the configured range that
/// does not exceed the point count.
pub fn wcss_curve(points: &[Point], cfg: &ClusteringConfig) -> Result<Vec<(usize, f64)>, ClusterError> {
    (cfg.k_min..=cfg.k_max.min(points.len()))
        .map(|k| Ok((k, fit_kmeans(points, k, cfg.seed, cfg.restarts, cfg.max_iter)?.wcss)))
        .collect()
}

/// Elbow rule: the smallest `k` whose step to `k + 1` lowers WCSS by less
/// than `elbow_drop_threshold` of WCSS(k); the top of the range otherwise.
/// All-identical points give 1.
pub fn select_k_elbow(points: &[Point], cfg: &ClusteringConfig) -> Result<usize, ClusterError> {
    cfg.validate()?;
    if points.is_empty() {
        return Err(ClusterError::EmptyDatabase);
    }
    if points.iter().all(|p| p == &points[0]) {
        return Ok(1);
    }
    let curve = wcss_curve(points, cfg)?;
    for w in curve.windows(2) {
        let ((k, a), (_, b)) = (w[0], w[1]);
        if a <= 0.0 || (a - b) / a < cfg.elbow_drop_threshold {
            return Ok(k);
        }
    }
    Ok(curve.last().map_or(1, |c| c.0))
}

/// Feature weights from a regression tree on `(ws -> ipc)`.
///
/// The second value is true when the weights fell back to uniform because
/// there were too few members to split.
pub fn fit_feature_weights(members: &[DataPoint], cfg: &ClusteringConfig) -> (FeatureWeights, RegressionTree, bool) {
    let x: Vec<Point> = members.iter().map(|p| p.ws.to_array()).collect();
    let y: Vec<f64> = members.iter().map(|p| p.ipc).collect();
    let tree = RegressionTree::fit(&x, &y, cfg.tree());
    let too_few = members.len() < 2 * cfg.tree_min_leaf;
    let w = tree
        .importances()
        .and_then(|w| FeatureWeights::new(w).ok())
        .unwrap_or_else(FeatureWeights::uniform);
    (w, tree, too_few)
}

/// Members, weights and tree of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndex {
    /// Database indices, ascending.
    pub members: Vec<usize>,
    pub weights: FeatureWeights,
    pub weights_fallback: bool,
    pub tree: RegressionTree,
}

/// Identity of the database a model was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbRef {
    pub points: usize,
    pub seed: u64,
    pub ipc_min: f64,
    pub ipc_max: f64,
    pub space: ParamSpace,
}

impl DbRef {
    fn of(db: &PerfDatabase) -> Self {
        let (ipc_min, ipc_max) = db.ipc_range().unwrap_or((0.0, 0.0));
        Self {
            points: db.len(),
            seed: db.seed,
            ipc_min,
            ipc_max,
            space: db.space.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierCheck {
    pub cluster: usize,
    pub distance: f64,
    pub is_outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnAnswer {
    pub config: ParamConfig,
    pub predicted_ipc: f64,
    pub cluster: usize,
    /// Database index of the chosen neighbor.
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub kind: String,
    pub version: u32,
    pub config: ClusteringConfig,
    pub kmeans: KMeansModel,
    pub clusters: Vec<ClusterIndex>,
    pub db: DbRef,
}

const MODEL_KIND: &str = "cluster-model";

impl ClusterModel {
    /// Fits the full model. `k = None` selects k by the elbow rule.
    pub fn fit(db: &PerfDatabase, k: Option<usize>, cfg: &ClusteringConfig) -> Result<Self, ClusterError> {
        cfg.validate()?;
        if db.is_empty() {
            return Err(ClusterError::EmptyDatabase);
        }
        let points: Vec<Point> = db.points().iter().map(|p| p.ws.to_array()).collect();
        let k = match k {
            Some(k) => k,
            None => select_k_elbow(&points, cfg)?,
        };
        let kmeans = fit_kmeans(&points, k, cfg.seed, cfg.restarts, cfg.max_iter)?;
        let clusters = (0..k)
            .map(|c| {
                let members: Vec<usize> = (0..points.len()).filter(|&i| kmeans.assignments[i] == c).collect();
                let data: Vec<DataPoint> = members.iter().map(|&i| db.points()[i].clone()).collect();
                let (weights, tree, weights_fallback) = fit_feature_weights(&data, cfg);
                if weights_fallback && !members.is_empty() {
                    log::warn!(
                        "cluster {c} has {} members; feature weights fall back to uniform",
                        members.len()
                    );
                }
                ClusterIndex {
                    members,
                    weights,
                    weights_fallback,
                    tree,
                }
            })
            .collect();
        Ok(Self {
            kind: MODEL_KIND.to_string(),
            version: SCHEMA_VERSION,
            config: cfg.clone(),
            kmeans,
            clusters,
            db: DbRef::of(db),
        })
    }

    pub fn k(&self) -> usize {
        self.kmeans.k
    }

    pub fn outlier_check(&self, ws: &WorkloadState) -> OutlierCheck {
        let (cluster, distance) = self.kmeans.nearest(&ws.to_array());
        OutlierCheck {
            cluster,
            distance,
            is_outlier: distance > self.kmeans.stats[cluster].threshold,
        }
    }

    /// Largest outlier threshold over all clusters.
    pub fn max_threshold(&self) -> f64 {
        self.kmeans.stats.iter().map(|s| s.threshold).fold(0.0, f64::max)
    }

    /// Weighted K-NN inside the nearest cluster: among the `knn_k` members
    /// closest under the cluster's weights, the one with the highest IPC.
    /// Ties go to the closer member, then to the smaller config.
    pub fn knn_query(&self, db: &PerfDatabase, ws: &WorkloadState, knn_k: usize) -> KnnAnswer {
        let (cluster, _) = self.kmeans.nearest(&ws.to_array());
        let idx = &self.clusters[cluster];
        let pts = db.points();
        let mut near: Vec<(f64, usize)> = idx
            .members
            .iter()
            .map(|&i| (weighted_distance(ws, &pts[i].ws, &idx.weights), i))
            .collect();
        let k = knn_k.max(1).min(near.len());
        if k < near.len() {
            near.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(k);
        }
        let &(_, best) = near
            .iter()
            .min_by(|a, b| {
                let (pa, pb) = (&pts[a.1], &pts[b.1]);
                pb.ipc
                    .total_cmp(&pa.ipc)
                    .then(a.0.total_cmp(&b.0))
                    .then(pa.config.cmp(&pb.config))
                    .then(a.1.cmp(&b.1))
            })
            .expect("clusters used for queries are non-empty");
        KnnAnswer {
            config: pts[best].config.clone(),
            predicted_ipc: pts[best].ipc,
            cluster,
            point: best,
        }
    }

    /// Fails unless `db` is the database this model was fit on.
    pub fn check_db(&self, db: &PerfDatabase) -> Result<(), ArtifactError> {
        let here = DbRef::of(db);
        if here != self.db {
            return Err(ArtifactError::Mismatch(format!(
                "model was fit on a {}-point {} database (seed {}), got {} points of {} (seed {})",
                self.db.points, self.db.space.solution, self.db.seed, here.points, here.space.solution, here.seed
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ArtifactError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, ArtifactError> {
        let m: ClusterModel = read_json(path)?;
        if m.kind != MODEL_KIND {
            return Err(ArtifactError::invalid(path, format!("not a {MODEL_KIND} file")));
        }
        check_version(path, m.version)?;
        let n = m.db.points;
        let k = m.kmeans.k;
        let consistent = m.kmeans.centroids.len() == k
            && m.kmeans.stats.len() == k
            && m.clusters.len() == k
            && m.kmeans.assignments.len() == n
            && m.clusters.iter().enumerate().all(|(c, idx)| {
                idx.members.iter().all(|&i| i < n && m.kmeans.assignments[i] == c)
                    && idx.members.len() == m.kmeans.stats[c].size
            });
        if !consistent {
            return Err(ArtifactError::invalid(path, "cluster model is internally inconsistent"));
        }
        Ok(m)
    }
}
