//! Dimensionality reduction of embeddings plus out-of-sample transforms by
//! nearest-neighbour interpolation.
//!
//! The reference reducer projects onto principal components. Externally
//! fitted embeddings (e.g. from UMAP) can be imported as (high-d, low-d)
//! training pairs; both kinds transform new points the same way, by
//! inverse-distance interpolation of the stored low-d positions of the
//! nearest training points.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the reduced dimension.
pub const MAX_TARGET_DIM: usize = 10;

/// Distances below this count as coincident with a training point.
const COINCIDENT: f64 = 1e-12;

/// Relative eigenvalue floor below which a direction is treated as having no variance.
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("need at least 2 points to fit a reducer, got {0}")]
    TooFewPoints(usize),
    #[error("inconsistent point dimensions")]
    RaggedInput,
    #[error("invalid reducer model: {0}")]
    Invalid(String),
    #[error("reading reducer file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing reducer file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    ReferenceLinear,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducerModel {
    pub kind: ReducerKind,
    pub n_neighbors: usize,
    pub target_dim: usize,
    pub train_high: Vec<Vec<f64>>,
    pub train_low: Vec<Vec<f64>>,
    /// Row-major `target_dim × D` projection; empty for imported models.
    #[serde(default)]
    pub linear_map: Vec<f64>,
    #[serde(default)]
    pub mean: Vec<f64>,
}

impl ReducerModel {
    pub fn input_dim(&self) -> usize {
        self.train_high.first().map_or(0, |v| v.len())
    }

    /// Applies the stored linear projection directly. Only meaningful for
    /// the reference kind; used to cross-check the interpolating transform.
    pub fn project_linear(&self, v: &[f64]) -> Option<Vec<f64>> {
        if self.kind != ReducerKind::ReferenceLinear {
            return None;
        }
        Some(project(&self.linear_map, &self.mean, self.target_dim, v))
    }

    /// Reduces a new point: inverse-distance-weighted average of the low-d
    /// positions of its `n_neighbors` nearest training points. A point that
    /// coincides with a training point gets that point's position exactly.
    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        knn_transform(self, v)
    }

    pub fn validate(&self) -> Result<(), ReduceError> {
        if self.train_high.is_empty() || self.train_high.len() != self.train_low.len() {
            return Err(ReduceError::Invalid("train_high and train_low must be non-empty and equally long".into()));
        }
        let d = self.input_dim();
        if self.train_high.iter().any(|v| v.len() != d) {
            return Err(ReduceError::Invalid("ragged train_high".into()));
        }
        if self.train_low.iter().any(|v| v.len() != self.target_dim) {
            return Err(ReduceError::Invalid("train_low rows must have target_dim entries".into()));
        }
        if self.target_dim > MAX_TARGET_DIM || self.target_dim > d {
            return Err(ReduceError::Invalid(format!("target_dim {} exceeds limits", self.target_dim)));
        }
        if self.n_neighbors == 0 {
            return Err(ReduceError::Invalid("n_neighbors must be positive".into()));
        }
        if self.kind == ReducerKind::ReferenceLinear
            && (self.linear_map.len() != self.target_dim * d || self.mean.len() != d)
        {
            return Err(ReduceError::Invalid("linear map shape".into()));
        }
        Ok(())
    }
}

/// On-disk form of an externally fitted reduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImportedFile {
    kind: String,
    n_neighbors: usize,
    target_dim: usize,
    train_high: Vec<Vec<f64>>,
    train_low: Vec<Vec<f64>>,
}

/// Loads an imported reducer from its JSON file.
pub fn load_imported(path: &Path) -> Result<ReducerModel, ReduceError> {
    let raw = std::fs::read_to_string(path)?;
    parse_imported(&raw)
}

pub fn parse_imported(json: &str) -> Result<ReducerModel, ReduceError> {
    let f: ImportedFile = serde_json::from_str(json)?;
    if f.kind != "imported" {
        return Err(ReduceError::Invalid(format!("expected kind \"imported\", got {:?}", f.kind)));
    }
    let model = ReducerModel {
        kind: ReducerKind::Imported,
        n_neighbors: f.n_neighbors,
        target_dim: f.target_dim,
        train_high: f.train_high,
        train_low: f.train_low,
        linear_map: Vec::new(),
        mean: Vec::new(),
    };
    model.validate()?;
    Ok(model)
}

fn project(map: &[f64], mean: &[f64], t: usize, v: &[f64]) -> Vec<f64> {
    let d = mean.len();
    (0..t)
        .map(|r| {
            let row = &map[r * d..(r + 1) * d];
            row.iter().zip(v.iter().zip(mean)).map(|(w, (x, m))| w * (x - m)).sum()
        })
        .collect()
}

/// Fits the principal-component reducer.
///
/// Effective target dimension is `min(target_dim, 10, D, n-1)`; effective
/// neighbour count is `n_neighbors` clamped to `[2, n-1]`. Eigenvector signs
/// are fixed so the largest-magnitude entry is positive; directions without
/// variance map to zero.
pub fn fit_reducer(points: &[Vec<f64>], n_neighbors: usize, target_dim: usize) -> Result<ReducerModel, ReduceError> {
    let n = points.len();
    if n < 2 {
        return Err(ReduceError::TooFewPoints(n));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(ReduceError::RaggedInput);
    }
    let t = target_dim.min(MAX_TARGET_DIM).min(d).min(n - 1).max(1);
    let k = n_neighbors.max(2).min(n - 1).max(1);

    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);

    let directions = principal_directions(&centered, t);
    let mut linear_map = vec![0.0; t * d];
    for (r, dir) in directions.iter().enumerate() {
        if let Some(dir) = dir {
            linear_map[r * d..(r + 1) * d].copy_from_slice(dir);
        }
    }
    let train_low = points.iter().map(|p| project(&linear_map, &mean, t, p)).collect();
    Ok(ReducerModel {
        kind: ReducerKind::ReferenceLinear,
        n_neighbors: k,
        target_dim: t,
        train_high: points.to_vec(),
        train_low,
        linear_map,
        mean,
    })
}

/// Top-`t` unit eigenvectors of the covariance of the (already centered) rows
/// of `x`, sorted by decreasing eigenvalue. `None` marks a direction without variance.
fn principal_directions(x: &DMatrix<f64>, t: usize) -> Vec<Option<Vec<f64>>> {
    let (n, d) = x.shape();
    // decompose whichever Gram matrix is smaller
    let use_rows = n < d;
    let gram = if use_rows { x * x.transpose() } else { x.transpose() * x };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let scale_floor = VARIANCE_FLOOR * top.max(f64::MIN_POSITIVE);
    order
        .into_iter()
        .take(t)
        .map(|i| {
            let lambda = eig.eigenvalues[i];
            if lambda <= scale_floor || lambda <= 0.0 {
                return None;
            }
            let u = eig.eigenvectors.column(i);
            let mut dir: Vec<f64> = if use_rows {
                // w = Xᵀu / ‖Xᵀu‖
                let w = x.transpose() * u;
                let norm = w.norm();
                w.iter().map(|v| v / norm).collect()
            } else {
                u.iter().copied().collect()
            };
            let (mut best, mut best_abs) = (0usize, -1.0f64);
            for (j, v) in dir.iter().enumerate() {
                if v.abs() > best_abs + 1e-15 {
                    best = j;
                    best_abs = v.abs();
                }
            }
            if dir[best] < 0.0 {
                dir.iter_mut().for_each(|v| *v = -*v);
            }
            Some(dir)
        })
        .collect()
}

pub fn knn_transform(model: &ReducerModel, v: &[f64]) -> Vec<f64> {
    let mut dists: Vec<(f64, usize)> = model
        .train_high
        .iter()
        .enumerate()
        .map(|(i, t)| (t.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(), i))
        .collect();
    let k = model.n_neighbors.min(dists.len()).max(1);
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if dists[0].0 < COINCIDENT {
        return model.train_low[dists[0].1].clone();
    }
    let mut out = vec![0.0; model.target_dim];
    let mut total = 0.0;
    for &(dist, i) in &dists[..k] {
        let w = 1.0 / dist;
        total += w;
        for (o, y) in out.iter_mut().zip(&model.train_low[i]) {
            *o += w * y;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_keeps_one_direction() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let m = fit_reducer(&pts, 5, 10).unwrap();
        assert_eq!(m.target_dim, 2);
        // second direction has no variance
        assert_eq!(&m.linear_map[2..], &[0.0, 0.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.linear_map[0] - s).abs() < 1e-12 && (m.linear_map[1] - s).abs() < 1e-12);
        for (p, low) in pts.iter().zip(&m.train_low) {
            let expect = (p[0] + p[1]) * s - 2.5 * 2.0 * s;
            assert!((low[0] - expect).abs() < 1e-12);
            assert_eq!(low[1], 0.0);
        }
    }

    #[test]
    fn identical_points_map_to_origin() {
        let pts = vec![vec![0.5, -1.0, 2.0]; 5];
        let m = fit_reducer(&pts, 10, 10).unwrap();
        assert!(m.train_low.iter().flatten().all(|v| *v == 0.0));
        assert!(m.transform(&[9.0, 9.0, 9.0]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clamps_dimension_and_neighbours() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..100).map(|_| (0..64).map(|_| rng.random::<f64>()).collect()).collect();
        let m = fit_reducer(&pts, 10, 10).unwrap();
        assert_eq!(m.target_dim, 10);
        assert_eq!(m.n_neighbors, 10);
        let few = fit_reducer(&pts[..4], 10, 10).unwrap();
        assert_eq!(few.target_dim, 3);
        assert_eq!(few.n_neighbors, 3);
        assert_eq!(fit_reducer(&pts[..5], 1, 10).unwrap().n_neighbors, 2);
        assert!(matches!(fit_reducer(&pts[..1], 2, 2), Err(ReduceError::TooFewPoints(1))));
    }

    #[test]
    fn training_points_are_fixed_points_of_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
        let m = fit_reducer(&pts, 5, 3).unwrap();
        for (p, low) in pts.iter().zip(&m.train_low) {
            assert_eq!(&m.transform(p), low);
            assert_eq!(m.transform(p).len(), 3);
        }
    }

    #[test]
    fn midpoint_is_mean_of_two_neighbours() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![50.0, 40.0]];
        let mut m = fit_reducer(&pts, 2, 2).unwrap();
        m.n_neighbors = 2;
        let out = m.transform(&[1.0, 0.0]);
        for j in 0..2 {
            assert!((out[j] - 0.5 * (m.train_low[0][j] + m.train_low[1][j])).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_projection_is_exact_on_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
        let m = fit_reducer(&pts, 19, 4).unwrap();
        for (p, low) in pts.iter().zip(&m.train_low) {
            assert_eq!(&m.project_linear(p).unwrap(), low);
        }
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        // n < D uses the row Gram matrix; compare against n > D on a padded copy
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| rng.random::<f64>()).collect()).collect();
        let small = fit_reducer(&pts, 3, 3).unwrap();
        let x = DMatrix::from_fn(6, 10, |i, j| pts[i][j] - small.mean[j]);
        let cov_dirs = {
            let gram = x.transpose() * &x;
            let eig = SymmetricEigen::new(gram);
            let mut order: Vec<usize> = (0..10).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            order.iter().take(3).map(|&i| eig.eigenvectors.column(i).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>()
        };
        for (r, dir) in cov_dirs.iter().enumerate() {
            let row = &small.linear_map[r * 10..(r + 1) * 10];
            let dot: f64 = row.iter().zip(dir).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn imported_file_round_trip() {
        let json = r#"{"kind":"imported","n_neighbors":2,"target_dim":1,
            "train_high":[[0,0],[1,0],[0,1]],"train_low":[[0],[1],[2]]}"#;
        let m = parse_imported(json).unwrap();
        assert_eq!(m.kind, ReducerKind::Imported);
        assert_eq!(m.transform(&[1.0, 0.0]), vec![1.0]);
        assert!(m.project_linear(&[1.0, 0.0]).is_none());
        let bad = r#"{"kind":"imported","n_neighbors":2,"target_dim":2,"train_high":[[0,0]],"train_low":[[0]]}"#;
        assert!(parse_imported(bad).is_err());
    }
}
