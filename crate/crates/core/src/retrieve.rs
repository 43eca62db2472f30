//! Query-time retrieval: the sigmoid relevance gate, cluster probing, and the
//! full-scan baseline.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::Clustering;
use crate::embed::{dot, norm, QueryVec};
use crate::hhindex::Snapshot;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("gate alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("probe count {k_probe} outside 1..={m}")]
    BadProbeCount { k_probe: usize, m: usize },
    #[error("clustering does not cover the snapshot's documents: {0}")]
    MismatchedClustering(String),
    #[error("dimension mismatch: index has {expected}, query has {found}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 5.0,
        }
    }
}

impl GateParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, RetrieveError> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RetrieveError> {
        if self.alpha > 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(RetrieveError::BadAlpha(self.alpha))
        }
    }

    fn gate(&self, cos: f64) -> f64 {
        1.0 / (1.0 + (-(self.alpha * cos - self.beta)).exp())
    }
}

/// Sigmoid gate `1 / (1 + exp(-(alpha * cos - beta)))`.
pub fn p_hh(cos: f64, params: &GateParams) -> Result<f64, RetrieveError> {
    params.validate()?;
    Ok(params.gate(cos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub cos: f64,
    pub p_hh: f64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Best first: cosine descending, ties by doc id ascending.
    pub hits: Vec<Hit>,
    pub candidates_scanned: usize,
    pub clusters_probed: Vec<usize>,
    pub elapsed: Duration,
}

impl RetrievalResult {
    pub fn doc_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.doc_id.clone()).collect()
    }
}

#[derive(Serialize)]
struct RankedHit<'a> {
    rank: usize,
    doc_id: &'a str,
    cos: f64,
    p_hh: f64,
    cluster: Option<usize>,
}

#[derive(Serialize)]
struct ResultRecord<'a> {
    query_id: &'a str,
    results: Vec<RankedHit<'a>>,
    candidates_scanned: usize,
    clusters_probed: &'a [usize],
    elapsed_us: f64,
}

/// One JSON object per result, ranks starting at 1.
pub fn write_result_jsonl<W: std::io::Write>(
    w: &mut W,
    r: &RetrievalResult,
) -> std::io::Result<()> {
    let rec = ResultRecord {
        query_id: &r.query_id,
        results: r
            .hits
            .iter()
            .enumerate()
            .map(|(i, h)| RankedHit {
                rank: i + 1,
                doc_id: &h.doc_id,
                cos: h.cos,
                p_hh: h.p_hh,
                cluster: h.cluster,
            })
            .collect(),
        candidates_scanned: r.candidates_scanned,
        clusters_probed: &r.clusters_probed,
        elapsed_us: r.elapsed.as_secs_f64() * 1e6,
    };
    serde_json::to_writer(&mut *w, &rec)?;
    w.write_all(b"\n")
}

#[inline]
fn cosine(q: &[f64], qn: f64, d: &[f64]) -> f64 {
    let (mut ab, mut bb) = (0.0, 0.0);
    for (x, y) in q.iter().zip(d) {
        ab += x * y;
        bb += y * y;
    }
    let denom = qn * bb.sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        (ab / denom).clamp(-1.0, 1.0)
    }
}

fn better(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Keeps the `k` best `(position, cos)` candidates in ranked order.
fn top_k(snapshot: &Snapshot, mut cands: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        better(
            (a.1, &snapshot[a.0].doc.doc_id),
            (b.1, &snapshot[b.0].doc.doc_id),
        )
    };
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_unstable_by(cmp);
    cands
}

fn check_dim(snapshot: &Snapshot, q: &QueryVec) -> Result<(), RetrieveError> {
    match snapshot.dim() {
        Some(d) if d != q.vec().len() => Err(RetrieveError::DimMismatch {
            expected: d,
            found: q.vec().len(),
        }),
        _ => Ok(()),
    }
}

/// Ranks every snapshot document against `q` and returns the best `k`.
pub fn naive_retrieve(
    q: &QueryVec,
    snapshot: &Snapshot,
    k: usize,
    params: &GateParams,
) -> Result<RetrievalResult, RetrieveError> {
    params.validate()?;
    check_dim(snapshot, q)?;
    let start = Instant::now();
    let qv = q.vec();
    let qn = norm(qv);
    let cands: Vec<(usize, f64)> = snapshot
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(qv, qn, e.doc.vec())))
        .collect();
    let best = top_k(snapshot, cands, k);
    let hits = best
        .into_iter()
        .map(|(i, cos)| Hit {
            doc_id: snapshot[i].doc.doc_id.clone(),
            cos,
            p_hh: params.gate(cos),
            cluster: None,
        })
        .collect();
    Ok(RetrievalResult {
        query_id: q.query_id.clone(),
        hits,
        candidates_scanned: snapshot.len(),
        clusters_probed: Vec::new(),
        elapsed: start.elapsed(),
    })
}

fn rank_clusters(qv: &[f64], centroids: &[Vec<f64>], norms: &[f64], k_probe: usize) -> Vec<usize> {
    let qn = norm(qv);
    let mut sims: Vec<(usize, f64)> = centroids
        .iter()
        .zip(norms)
        .enumerate()
        .map(|(j, (c, &nc))| {
            let denom = qn * nc;
            let cos = if denom < 1e-12 {
                0.0
            } else {
                (dot(qv, c) / denom).clamp(-1.0, 1.0)
            };
            (j, cos)
        })
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k_probe < sims.len() {
        sims.select_nth_unstable_by(k_probe - 1, cmp);
        sims.truncate(k_probe);
    }
    sims.sort_unstable_by(cmp);
    sims.into_iter().map(|(j, _)| j).collect()
}

/// The `k_probe` clusters whose centroids are most cosine-similar to `q`,
/// best first, ties by lower index.
pub fn select_clusters(
    q: &QueryVec,
    clustering: &Clustering,
    k_probe: usize,
) -> Result<Vec<usize>, RetrieveError> {
    let m = clustering.m();
    if k_probe == 0 || k_probe > m {
        return Err(RetrieveError::BadProbeCount { k_probe, m });
    }
    let norms: Vec<f64> = clustering.centroids.iter().map(|c| norm(c)).collect();
    Ok(rank_clusters(
        q.vec(),
        &clustering.centroids,
        &norms,
        k_probe,
    ))
}

/// A snapshot joined with a clustering of exactly its documents, with
/// per-cluster member lists precomputed.
#[derive(Debug, Clone)]
pub struct ClusteredSnapshot {
    snapshot: Snapshot,
    clustering: Clustering,
    members: Vec<Vec<usize>>,
    cluster_of: Vec<usize>,
    centroid_norms: Vec<f64>,
}

impl ClusteredSnapshot {
    pub fn new(snapshot: Snapshot, clustering: Clustering) -> Result<Self, RetrieveError> {
        if clustering.doc_ids.len() != snapshot.len() {
            return Err(RetrieveError::MismatchedClustering(format!(
                "clustering has {} documents, snapshot has {}",
                clustering.doc_ids.len(),
                snapshot.len()
            )));
        }
        let lookup: HashMap<&str, usize> = clustering.label_of();
        let mut cluster_of = Vec::with_capacity(snapshot.len());
        for id in snapshot.doc_ids() {
            let l = lookup.get(id).copied().ok_or_else(|| {
                RetrieveError::MismatchedClustering(format!("document {id:?} has no cluster"))
            })?;
            cluster_of.push(l);
        }
        let mut members = vec![Vec::new(); clustering.m()];
        for (i, &l) in cluster_of.iter().enumerate() {
            members[l].push(i);
        }
        let centroid_norms = clustering.centroids.iter().map(|c| norm(c)).collect();
        Ok(Self {
            snapshot,
            clustering,
            members,
            cluster_of,
            centroid_norms,
        })
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Scans the members of the `k_probe` nearest clusters and returns the
    /// best `k`. `candidates_scanned` counts members plus the `m` centroid
    /// comparisons.
    pub fn retrieve(
        &self,
        q: &QueryVec,
        k_probe: usize,
        k: usize,
        params: &GateParams,
    ) -> Result<RetrievalResult, RetrieveError> {
        params.validate()?;
        check_dim(&self.snapshot, q)?;
        let m = self.clustering.m();
        if k_probe == 0 || k_probe > m {
            return Err(RetrieveError::BadProbeCount { k_probe, m });
        }
        let start = Instant::now();
        let qv = q.vec();
        let qn = norm(qv);
        let probed = rank_clusters(
            qv,
            &self.clustering.centroids,
            &self.centroid_norms,
            k_probe,
        );
        let cands: Vec<(usize, f64)> = probed
            .iter()
            .flat_map(|&j| self.members[j].iter())
            .map(|&i| (i, cosine(qv, qn, self.snapshot[i].doc.vec())))
            .collect();
        let scanned = cands.len() + m;
        let best = top_k(&self.snapshot, cands, k);
        let hits = best
            .into_iter()
            .map(|(i, cos)| Hit {
                doc_id: self.snapshot[i].doc.doc_id.clone(),
                cos,
                p_hh: params.gate(cos),
                cluster: Some(self.cluster_of[i]),
            })
            .collect();
        Ok(RetrievalResult {
            query_id: q.query_id.clone(),
            hits,
            candidates_scanned: scanned,
            clusters_probed: probed,
            elapsed: start.elapsed(),
        })
    }
}

/// One-shot clustered retrieval; prefer [`ClusteredSnapshot`] for many queries.
pub fn clustered_retrieve(
    q: &QueryVec,
    snapshot: &Snapshot,
    clustering: &Clustering,
    k_probe: usize,
    k: usize,
    params: &GateParams,
) -> Result<RetrievalResult, RetrieveError> {
    ClusteredSnapshot::new(snapshot.clone(), clustering.clone())?.retrieve(q, k_probe, k, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{kmeans, KMeansConfig};
    use crate::embed::EmbeddedDoc;
    use crate::hhindex::IndexEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_values() {
        let p = GateParams::default();
        assert!((p_hh(0.5, &p).unwrap() - 0.5).abs() < 1e-15);
        let p = GateParams::new(1.0, 0.0).unwrap();
        // 1 / (1 + e^-1) = 0.7310585786
        assert!((p_hh(1.0, &p).unwrap() - 0.73106).abs() < 1e-5);
        assert!((p_hh(-1.0, &p).unwrap() - 0.26894).abs() < 1e-5);
        assert!(matches!(
            GateParams::new(0.0, 1.0),
            Err(RetrieveError::BadAlpha(_))
        ));
        assert!(matches!(
            p_hh(
                0.3,
                &GateParams {
                    alpha: -2.0,
                    beta: 0.0
                }
            ),
            Err(RetrieveError::BadAlpha(_))
        ));
    }

    fn snapshot_of(docs: Vec<EmbeddedDoc>) -> Snapshot {
        Snapshot::from_entries(
            docs.into_iter()
                .enumerate()
                .map(|(i, doc)| IndexEntry {
                    doc,
                    score: 0.0,
                    arrival_seq: i as u64,
                })
                .collect(),
        )
    }

    fn random_docs(n: usize, dim: usize, seed: u64) -> Vec<EmbeddedDoc> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                EmbeddedDoc::new(
                    format!("d{i:04}"),
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn random_query(dim: usize, seed: u64) -> QueryVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QueryVec::new("q", (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn naive_edge_cases() {
        let snap = snapshot_of(random_docs(1, 4, 1));
        let q = random_query(4, 2);
        let p = GateParams::default();
        let r = naive_retrieve(&q, &snap, 1, &p).unwrap();
        assert_eq!(r.doc_ids(), vec!["d0000"]);
        assert!(naive_retrieve(&q, &snap, 0, &p).unwrap().hits.is_empty());
        let empty = snapshot_of(vec![]);
        let r = naive_retrieve(&q, &empty, 5, &p).unwrap();
        assert!(r.hits.is_empty());
        assert_eq!(r.candidates_scanned, 0);
    }

    #[test]
    fn naive_matches_full_sort() {
        let docs = random_docs(500, 16, 3);
        let snap = snapshot_of(docs.clone());
        let q = random_query(16, 4);
        let r = naive_retrieve(&q, &snap, 25, &GateParams::default()).unwrap();
        let mut oracle: Vec<(f64, String)> = docs
            .iter()
            .map(|d| {
                let c: f64 = q.vec().iter().zip(d.vec()).map(|(a, b)| a * b).sum();
                (c, d.doc_id.clone())
            })
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<String> = oracle.into_iter().take(25).map(|x| x.1).collect();
        assert_eq!(r.doc_ids(), expected);
        assert_eq!(r.candidates_scanned, 500);
        assert!(r.hits.windows(2).all(|w| w[0].p_hh >= w[1].p_hh));
    }

    fn orthogonal_clustering(m: usize) -> Clustering {
        let centroids: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..m).map(|d| if d == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Clustering {
            doc_ids: vec![],
            labels: vec![],
            sizes: vec![0; m],
            centroids,
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn select_clusters_cases() {
        let c = orthogonal_clustering(5);
        let q = QueryVec::new("q", vec![0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(select_clusters(&q, &c, 1).unwrap(), vec![3]);
        let one = orthogonal_clustering(1);
        let q1 = QueryVec::new("q", vec![0.2]).unwrap();
        assert_eq!(select_clusters(&q1, &one, 1).unwrap(), vec![0]);
        assert!(matches!(
            select_clusters(&q, &c, 6),
            Err(RetrieveError::BadProbeCount { k_probe: 6, m: 5 })
        ));
        assert!(select_clusters(&q, &c, 0).is_err());

        // full sort oracle over centroid similarities
        let q = QueryVec::new("q", vec![0.1, 0.5, -0.3, 0.5, 0.2]).unwrap();
        let mut sims: Vec<(usize, f64)> = (0..5).map(|j| (j, q.vec()[j])).collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expected: Vec<usize> = sims.into_iter().map(|s| s.0).collect();
        assert_eq!(select_clusters(&q, &c, 5).unwrap(), expected);
        assert_eq!(expected, vec![1, 3, 4, 0, 2]);
    }

    #[test]
    fn single_cluster_equals_naive() {
        let docs = random_docs(80, 8, 5);
        let snap = snapshot_of(docs.clone());
        let c = kmeans(
            &docs,
            &KMeansConfig {
                m: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let q = random_query(8, 6);
        let p = GateParams::default();
        let a = clustered_retrieve(&q, &snap, &c, 1, 10, &p).unwrap();
        let b = naive_retrieve(&q, &snap, 10, &p).unwrap();
        assert_eq!(a.doc_ids(), b.doc_ids());
        assert_eq!(a.candidates_scanned, 81);
        let all = clustered_retrieve(&q, &snap, &c, 1, 500, &p).unwrap();
        assert_eq!(all.hits.len(), 80);
        assert!(all.hits.windows(2).all(|w| w[0].cos >= w[1].cos));
    }

    #[test]
    fn probed_top_k_matches_restricted_oracle() {
        // 10 well-separated groups of 10 around the first 10 axes
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let docs: Vec<EmbeddedDoc> = (0..100)
            .map(|i| {
                let g = i / 10;
                let v = (0..12)
                    .map(|d| if d == g { 1.0 } else { 0.0 } + rng.gen_range(-0.1..0.1))
                    .collect();
                EmbeddedDoc::new(format!("d{i:03}"), v).unwrap()
            })
            .collect();
        let snap = snapshot_of(docs.clone());
        let c = kmeans(
            &docs,
            &KMeansConfig {
                m: 10,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(c.sizes.iter().all(|&s| s == 10));
        let q = random_query(12, 8);
        let r = clustered_retrieve(&q, &snap, &c, 2, 5, &GateParams::default()).unwrap();
        assert_eq!(r.candidates_scanned, 20 + 10);
        let probed: Vec<usize> = r.clusters_probed.clone();
        let labels = c.label_of();
        let mut oracle: Vec<(f64, String)> = docs
            .iter()
            .filter(|d| probed.contains(&labels[d.doc_id.as_str()]))
            .map(|d| {
                (
                    crate::embed::cos_sim(q.vec(), d.vec()).unwrap(),
                    d.doc_id.clone(),
                )
            })
            .collect();
        assert_eq!(oracle.len(), 20);
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<String> = oracle.into_iter().take(5).map(|x| x.1).collect();
        assert_eq!(r.doc_ids(), expected);
    }

    #[test]
    fn mismatched_clustering_rejected() {
        let docs = random_docs(20, 4, 9);
        let c = kmeans(
            &docs[..19],
            &KMeansConfig {
                m: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let snap = snapshot_of(docs);
        let q = random_query(4, 1);
        assert!(matches!(
            clustered_retrieve(&q, &snap, &c, 1, 3, &GateParams::default()),
            Err(RetrieveError::MismatchedClustering(_))
        ));
    }

    #[test]
    fn result_jsonl_has_one_based_ranks() {
        let snap = snapshot_of(random_docs(3, 4, 10));
        let r = naive_retrieve(&random_query(4, 11), &snap, 2, &GateParams::default()).unwrap();
        let mut buf = Vec::new();
        write_result_jsonl(&mut buf, &r).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v["results"][0]["rank"], 1);
        assert_eq!(v["results"][1]["rank"], 2);
        assert_eq!(v["candidates_scanned"], 3);
    }
}
