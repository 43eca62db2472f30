//! Lloyd k-means under the cosine-derived distance `sqrt(2 (1 - cos))`,
//! with D²-weighted seeding and silhouette scoring.
//!
//! Centroids are plain member means and are not projected back onto the
//! unit sphere; distances to them go through the normalizing cosine.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, norm, EmbeddedDoc};

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot cluster an empty point set")]
    EmptyInput,
    #[error("{m} clusters requested for {points} points")]
    TooManyClusters { m: usize, points: usize },
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("no centroids to assign against")]
    NoCentroids,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("silhouette is undefined for a single cluster")]
    SingleCluster,
    #[error("silhouette needs at least two points")]
    TooFewPoints,
    #[error("document {0:?} is not covered by the clustering")]
    UnknownDoc(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed clustering file: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub m: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement of an update falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            m: 8,
            seed: 0,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub doc_ids: Vec<String>,
    /// Cluster index of `doc_ids[i]`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub inertia: f64,
    /// Inertia after seeding's first assignment, then after every update step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// True when the last assignment pass changed no labels.
    pub converged: bool,
}

impl Clustering {
    pub fn m(&self) -> usize {
        self.centroids.len()
    }

    pub fn label_of(&self) -> HashMap<&str, usize> {
        self.doc_ids
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
            .collect()
    }

    /// Member positions (indices into `doc_ids`) of every cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Distance between two directions: `sqrt(2 (1 - cos))`. Equals the L2
/// distance between unit vectors. A zero-norm side counts as orthogonal.
pub fn cos_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let cos = if na < ZERO_NORM || nb < ZERO_NORM {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    };
    (2.0 * (1.0 - cos)).max(0.0).sqrt()
}

#[inline]
fn cos_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na < ZERO_NORM || nb < ZERO_NORM {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign(vec: &[f64], centroids: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let first = centroids.first().ok_or(ClusterError::NoCentroids)?;
    if first.len() != vec.len() {
        return Err(ClusterError::DimMismatch {
            expected: first.len(),
            found: vec.len(),
        });
    }
    let norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
    Ok(nearest(vec, norm(vec), centroids, &norms).0)
}

/// Returns (index, cosine) of the most similar centroid. Maximizing cosine is
/// minimizing the distance, and strict comparison keeps the lowest index on ties.
fn nearest(vec: &[f64], nv: f64, centroids: &[Vec<f64>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, (c, &nc)) in centroids.iter().zip(norms).enumerate() {
        let cos = cos_with_norms(vec, nv, c, nc);
        if cos > best.1 {
            best = (j, cos);
        }
    }
    best
}

struct Points<'a> {
    vecs: Vec<&'a [f64]>,
    norms: Vec<f64>,
    dim: usize,
}

impl<'a> Points<'a> {
    fn new(points: &'a [EmbeddedDoc]) -> Result<Self, ClusterError> {
        let dim = points.first().ok_or(ClusterError::EmptyInput)?.dim();
        let vecs: Vec<&[f64]> = points.iter().map(|p| p.vec()).collect();
        if let Some(v) = vecs.iter().find(|v| v.len() != dim) {
            return Err(ClusterError::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        let norms = vecs.iter().map(|v| norm(v)).collect();
        Ok(Self { vecs, norms, dim })
    }

    fn len(&self) -> usize {
        self.vecs.len()
    }

    fn sq_dist_to(&self, i: usize, c: &[f64], nc: f64) -> f64 {
        2.0 * (1.0 - cos_with_norms(self.vecs[i], self.norms[i], c, nc))
    }
}

fn assign_all(pts: &Points<'_>, centroids: &[Vec<f64>]) -> Vec<usize> {
    let norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
    (0..pts.len())
        .into_par_iter()
        .map(|i| nearest(pts.vecs[i], pts.norms[i], centroids, &norms).0)
        .collect()
}

fn inertia(pts: &Points<'_>, labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
    let per_point: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| pts.sq_dist_to(i, &centroids[labels[i]], norms[labels[i]]))
        .collect();
    per_point.iter().sum()
}

/// Recomputes centroids as member means, reseeding empty clusters with the
/// point farthest from its own centroid (taken from clusters with ≥ 2 members).
fn update(pts: &Points<'_>, labels: &mut [usize], m: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; pts.dim]; m];
    let mut counts = vec![0usize; m];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(pts.vecs[i]) {
            *s += x;
        }
    }
    let mean = |sum: &[f64], n: usize| -> Vec<f64> {
        if n == 0 {
            vec![0.0; sum.len()]
        } else {
            sum.iter().map(|s| s / n as f64).collect()
        }
    };
    let mut centroids: Vec<Vec<f64>> = (0..m).map(|j| mean(&sums[j], counts[j])).collect();
    for j in 0..m {
        if counts[j] > 0 {
            continue;
        }
        let norms: Vec<f64> = centroids.iter().map(|c| norm(c)).collect();
        let mut far: Option<(usize, f64)> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] < 2 {
                continue;
            }
            let d = pts.sq_dist_to(i, &centroids[l], norms[l]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("an empty cluster implies a cluster with two or more members");
        let donor = labels[i];
        counts[donor] -= 1;
        for (s, x) in sums[donor].iter_mut().zip(pts.vecs[i]) {
            *s -= x;
        }
        centroids[donor] = mean(&sums[donor], counts[donor]);
        labels[i] = j;
        counts[j] = 1;
        sums[j] = pts.vecs[i].to_vec();
        centroids[j] = pts.vecs[i].to_vec();
    }
    centroids
}

/// D²-weighted seeding under the squared cosine distance.
fn seed_centroids(pts: &Points<'_>, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![pts.vecs[first].to_vec()];
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| pts.sq_dist_to(i, pts.vecs[first], pts.norms[first]))
        .collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave the target past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = pts.vecs[pick];
        let nc = pts.norms[pick];
        d2.par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(pts.sq_dist_to(i, c, nc)));
        centroids.push(c.to_vec());
    }
    centroids
}

/// Clusters `points` into `cfg.m` groups.
pub fn kmeans(points: &[EmbeddedDoc], cfg: &KMeansConfig) -> Result<Clustering, ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if cfg.m == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if cfg.m > points.len() {
        return Err(ClusterError::TooManyClusters {
            m: cfg.m,
            points: points.len(),
        });
    }
    let pts = Points::new(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_centroids(&pts, cfg.m, &mut rng);
    let mut labels = assign_all(&pts, &centroids);
    let mut history = vec![inertia(&pts, &labels, &centroids)];
    let mut iterations = 0;
    let mut converged = false;
    loop {
        centroids = update(&pts, &mut labels, cfg.m);
        let current = inertia(&pts, &labels, &centroids);
        let previous = *history.last().unwrap();
        history.push(current);
        iterations += 1;
        let improvement = if previous > 0.0 {
            (previous - current) / previous
        } else {
            0.0
        };
        let next = assign_all(&pts, &centroids);
        if next == labels {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters || improvement < cfg.tol {
            break;
        }
        labels = next;
    }
    let mut sizes = vec![0; cfg.m];
    for &l in &labels {
        sizes[l] += 1;
    }
    Ok(Clustering {
        doc_ids: points.iter().map(|p| p.doc_id.clone()).collect(),
        labels,
        centroids,
        sizes,
        inertia: *history.last().unwrap(),
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Mean silhouette coefficient under [`cos_distance`]. Points in singleton
/// clusters contribute 0.
pub fn silhouette(points: &[EmbeddedDoc], clustering: &Clustering) -> Result<f64, ClusterError> {
    if points.len() < 2 {
        return Err(ClusterError::TooFewPoints);
    }
    let lookup = clustering.label_of();
    let labels = points
        .iter()
        .map(|p| {
            lookup
                .get(p.doc_id.as_str())
                .copied()
                .ok_or_else(|| ClusterError::UnknownDoc(p.doc_id.clone()))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let m = clustering.m();
    let mut counts = vec![0usize; m];
    for &l in &labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let pts = Points::new(points)?;
    let s: Vec<f64> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if counts[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; m];
            for j in 0..pts.len() {
                if j != i {
                    let cos = cos_with_norms(pts.vecs[i], pts.norms[i], pts.vecs[j], pts.norms[j]);
                    sums[labels[j]] += (2.0 * (1.0 - cos)).max(0.0).sqrt();
                }
            }
            let a = sums[own] / (counts[own] - 1) as f64;
            let b = (0..m)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ClusteringLine {
    Meta {
        m: usize,
        dim: usize,
        inertia: f64,
        iterations: usize,
        converged: bool,
    },
    Centroid {
        cluster: usize,
        size: usize,
        vec: Vec<f64>,
    },
    Assignments {
        doc_ids: Vec<String>,
        clusters: Vec<usize>,
    },
}

/// Writes a clustering as JSONL: a meta line, one centroid per line, then an
/// assignment block.
pub fn write_clustering<W: Write>(w: &mut W, c: &Clustering) -> std::io::Result<()> {
    let mut line = |rec: &ClusteringLine| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")
    };
    line(&ClusteringLine::Meta {
        m: c.m(),
        dim: c.centroids.first().map_or(0, Vec::len),
        inertia: c.inertia,
        iterations: c.iterations,
        converged: c.converged,
    })?;
    for (j, centroid) in c.centroids.iter().enumerate() {
        line(&ClusteringLine::Centroid {
            cluster: j,
            size: c.sizes[j],
            vec: centroid.clone(),
        })?;
    }
    line(&ClusteringLine::Assignments {
        doc_ids: c.doc_ids.clone(),
        clusters: c.labels.clone(),
    })
}

pub fn read_clustering(path: &Path) -> Result<Clustering, ClusterError> {
    let file = File::open(path).map_err(|source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |line: usize, reason: String| ClusterError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut meta = None;
    let mut centroids: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut assignments = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ClusterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| malformed(idx + 1, e.to_string()))? {
            ClusteringLine::Meta {
                m,
                inertia,
                iterations,
                converged,
                ..
            } => meta = Some((m, inertia, iterations, converged)),
            ClusteringLine::Centroid { cluster, size, vec } => centroids.push((cluster, size, vec)),
            ClusteringLine::Assignments { doc_ids, clusters } => {
                assignments = Some((doc_ids, clusters))
            }
        }
    }
    let (m, inertia, iterations, converged) =
        meta.ok_or_else(|| malformed(1, "missing meta line".into()))?;
    let (doc_ids, labels) =
        assignments.ok_or_else(|| malformed(0, "missing assignment block".into()))?;
    centroids.sort_by_key(|c| c.0);
    if centroids.len() != m || centroids.iter().enumerate().any(|(j, c)| c.0 != j) {
        return Err(malformed(0, "centroid records do not cover 0..m".into()));
    }
    if doc_ids.len() != labels.len() || labels.iter().any(|&l| l >= m) {
        return Err(malformed(0, "assignment block is inconsistent".into()));
    }
    let mut sizes = vec![0; m];
    for &l in &labels {
        sizes[l] += 1;
    }
    if centroids.iter().zip(&sizes).any(|(c, &s)| c.1 != s) {
        return Err(malformed(
            0,
            "centroid sizes disagree with assignments".into(),
        ));
    }
    Ok(Clustering {
        doc_ids,
        labels,
        centroids: centroids.into_iter().map(|c| c.2).collect(),
        sizes,
        inertia,
        inertia_history: vec![inertia],
        iterations,
        converged,
    })
}
