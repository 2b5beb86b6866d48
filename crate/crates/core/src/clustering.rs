//! Two-step (global then local) and one-step clustering of embeddings.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{assign_from_gamma, fit_best_k, ClusterState, EmOptions, GmmError, GmmModel};
use crate::reduction::{fit_reducer, ReduceError, ReducerModel, MAX_TARGET_DIM};
use crate::seed::mix_seed;

/// Groups smaller than this are not reduced or fitted; they form one cluster.
pub const MIN_FIT_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least 2 points to cluster, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMode {
    #[default]
    TwoStep,
    OneStep,
}

impl std::str::FromStr for ClusteringMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_step" | "two-step" => Ok(ClusteringMode::TwoStep),
            "one_step" | "one-step" => Ok(ClusteringMode::OneStep),
            other => Err(format!("unknown clustering mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub mode: ClusteringMode,
    pub target_dim: usize,
    pub local_neighbors: usize,
    /// Lower bound of the upper end of the K scan (`max(k_cap, ⌈√n⌉)`).
    pub k_cap: usize,
    pub assign_threshold: f64,
    pub em: EmOptions,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            mode: ClusteringMode::TwoStep,
            target_dim: MAX_TARGET_DIM,
            local_neighbors: 10,
            k_cap: 50,
            assign_threshold: 0.1,
            em: EmOptions::default(),
        }
    }
}

impl ClusteringConfig {
    pub fn one_step() -> Self {
        Self { mode: ClusteringMode::OneStep, ..Self::default() }
    }

    /// Upper end of the K scan for `n` points: `min(n, max(k_cap, ⌈√n⌉))`.
    pub fn k_max(&self, n: usize) -> usize {
        let root = (n as f64).sqrt().ceil() as usize;
        self.k_cap.max(root).min(n)
    }
}

/// Neighbour count of the global reducer: `√n` rounded to the nearest integer.
pub fn global_neighbors(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalClustering {
    pub reducer: ReducerModel,
    pub model: GmmModel,
}

/// The clustering of one global cluster. `members` index the input points;
/// `state.points[i]` is the reduced position of `members[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalClustering {
    pub members: Vec<usize>,
    pub reducer: Option<ReducerModel>,
    pub state: Option<ClusterState>,
}

impl LocalClustering {
    /// Clusters of this local group as sets of input indices, one per
    /// component (or a single cluster when no model was fitted).
    pub fn clusters(&self) -> Vec<BTreeSet<usize>> {
        match &self.state {
            None => vec![self.members.iter().copied().collect()],
            Some(st) => st
                .members()
                .into_iter()
                .map(|m| m.into_iter().map(|i| self.members[i]).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    /// Non-empty clusters, ordered by (local, component).
    pub clusters: Vec<BTreeSet<usize>>,
    /// `(local index, component index)` of each entry of `clusters`.
    pub keys: Vec<(usize, usize)>,
    pub global: Option<GlobalClustering>,
    /// One entry per global component (two-step) or exactly one (one-step).
    pub locals: Vec<LocalClustering>,
}

fn fit_local(points: &[Vec<f64>], members: Vec<usize>, cfg: &ClusteringConfig, seed: u64) -> Result<LocalClustering, ClusterError> {
    if members.len() < MIN_FIT_SIZE {
        return Ok(LocalClustering { members, reducer: None, state: None });
    }
    let high: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
    let reducer = fit_reducer(&high, cfg.local_neighbors, cfg.target_dim)?;
    let low = reducer.train_low.clone();
    let best = fit_best_k(&low, 1, cfg.k_max(low.len()), &cfg.em, seed)?;
    let assignments = best
        .model
        .predict_proba(&low)?
        .iter()
        .map(|g| assign_from_gamma(g, cfg.assign_threshold))
        .collect();
    Ok(LocalClustering {
        members,
        reducer: Some(reducer),
        state: Some(ClusterState { model: best.model, points: low, assignments }),
    })
}

fn assemble(global: Option<GlobalClustering>, locals: Vec<LocalClustering>) -> ClusteringResult {
    let mut clusters = Vec::new();
    let mut keys = Vec::new();
    for (l, local) in locals.iter().enumerate() {
        if local.members.is_empty() {
            continue;
        }
        for (c, members) in local.clusters().into_iter().enumerate() {
            if !members.is_empty() {
                clusters.push(members);
                keys.push((l, c));
            }
        }
    }
    ClusteringResult { clusters, keys, global, locals }
}

/// Global reduction and mixture over all points, then a local reduction and
/// mixture inside every global cluster. Points may land in several clusters.
pub fn cluster_two_step(points: &[Vec<f64>], cfg: &ClusteringConfig, seed: u64) -> Result<ClusteringResult, ClusterError> {
    let n = points.len();
    if n < 2 {
        return Err(ClusterError::TooFewPoints(n));
    }
    if n < MIN_FIT_SIZE {
        let local = LocalClustering { members: (0..n).collect(), reducer: None, state: None };
        return Ok(assemble(None, vec![local]));
    }
    let reducer = fit_reducer(points, global_neighbors(n), cfg.target_dim)?;
    let low = &reducer.train_low;
    let best = fit_best_k(low, 1, cfg.k_max(n), &cfg.em, mix_seed(seed, 1))?;
    let model = best.model;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); model.k];
    for (i, g) in model.predict_proba(low)?.iter().enumerate() {
        for c in assign_from_gamma(g, cfg.assign_threshold) {
            groups[c].push(i);
        }
    }
    let locals = groups
        .into_par_iter()
        .enumerate()
        .map(|(g, members)| fit_local(points, members, cfg, mix_seed(seed, 100 + g as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(Some(GlobalClustering { reducer, model }), locals))
}

/// A single local-style reduction and mixture over all points.
pub fn cluster_one_step(points: &[Vec<f64>], cfg: &ClusteringConfig, seed: u64) -> Result<ClusteringResult, ClusterError> {
    let n = points.len();
    if n < 2 {
        return Err(ClusterError::TooFewPoints(n));
    }
    let local = fit_local(points, (0..n).collect(), cfg, mix_seed(seed, 100))?;
    Ok(assemble(None, vec![local]))
}

pub fn cluster(points: &[Vec<f64>], cfg: &ClusteringConfig, seed: u64) -> Result<ClusteringResult, ClusterError> {
    match cfg.mode {
        ClusteringMode::TwoStep => cluster_two_step(points, cfg, seed),
        ClusteringMode::OneStep => cluster_one_step(points, cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(k: usize, per: usize, dim: usize, sep: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        (0..k)
            .flat_map(|c| {
                let mut center = vec![0.0; dim];
                center[c % dim] = sep;
                (0..per).map(|_| center.iter().map(|m| m + noise.sample(&mut rng)).collect()).collect::<Vec<_>>()
            })
            .collect()
    }

    fn covered(r: &ClusteringResult, n: usize) -> bool {
        let all: BTreeSet<usize> = r.clusters.iter().flatten().copied().collect();
        all == (0..n).collect()
    }

    #[test]
    fn k_max_rule() {
        let c = ClusteringConfig::default();
        assert_eq!(c.k_max(4), 4);
        assert_eq!(c.k_max(200), 50);
        assert_eq!(c.k_max(3600), 60);
        assert_eq!(c.k_max(2501), 51);
        assert_eq!(global_neighbors(200), 14);
    }

    #[test]
    fn two_points_form_one_cluster() {
        let r = cluster_two_step(&[vec![1.0, 0.0], vec![0.99, 0.01]], &ClusteringConfig::default(), 0).unwrap();
        assert_eq!(r.clusters, vec![BTreeSet::from([0, 1])]);
    }

    #[test]
    fn one_point_is_rejected() {
        assert!(matches!(cluster_two_step(&[vec![1.0]], &ClusteringConfig::default(), 0), Err(ClusterError::TooFewPoints(1))));
    }

    #[test]
    fn three_blobs_two_step() {
        let pts = blobs(3, 30, 12, 50.0, 4);
        let r = cluster_two_step(&pts, &ClusteringConfig::default(), 1).unwrap();
        assert!(covered(&r, 90));
        assert!(r.clusters.len() >= 3);
        assert!(r.global.is_some());
        // no cluster mixes blobs
        for c in &r.clusters {
            let blob: BTreeSet<usize> = c.iter().map(|i| i / 30).collect();
            assert_eq!(blob.len(), 1, "{c:?}");
        }
    }

    #[test]
    fn one_step_identical_points() {
        let pts = vec![vec![0.5, 0.5, 0.5]; 8];
        let r = cluster_one_step(&pts, &ClusteringConfig::one_step(), 0).unwrap();
        assert_eq!(r.clusters.len(), 1);
        assert!(r.global.is_none());
    }

    #[test]
    fn one_step_two_blobs() {
        let pts = blobs(2, 25, 6, 50.0, 9);
        let r = cluster_one_step(&pts, &ClusteringConfig::one_step(), 2).unwrap();
        assert!(covered(&r, 50));
        assert!(r.clusters.len() >= 2);
        assert!(r.global.is_none() && r.locals.len() == 1);
    }

    #[test]
    fn reproducible() {
        let pts = blobs(3, 15, 8, 20.0, 5);
        let a = cluster_two_step(&pts, &ClusteringConfig::default(), 3).unwrap();
        let b = cluster_two_step(&pts, &ClusteringConfig::default(), 3).unwrap();
        assert_eq!(a, b);
    }
}
