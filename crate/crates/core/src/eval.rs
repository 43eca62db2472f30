//! Evaluation harness: precision/recall/F1 against qrels, the four ablation
//! pipelines, cluster-count sweeps, silhouette before/after filtering, and
//! the clustered-vs-full-scan latency benchmark.
//!
//! "Accuracy" in reports and plot data is precision@K.

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{self, kmeans, ClusterError, KMeansConfig};
use crate::corpus::{chunk_stream, CorpusError, Document, QrelSet, Query};
use crate::embed::{embed_doc, EmbedError, EmbeddedDoc, EmbeddingConfig, QueryVec};
use crate::hhindex::{
    build_from_stream, memory_ratio, profile_score, Aggregation, IndexEntry, IndexError, IndexMode,
    RetrievalProfile, Snapshot,
};
use crate::retrieve::{
    naive_retrieve, ClusteredSnapshot, GateParams, RetrievalResult, RetrieveError,
};

pub const METRICS_SCHEMA: &str = "sakr-metrics/1";
pub const ACCURACY_METRIC: &str = "precision@K";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0:?} has no relevant documents but retrieval returned some")]
    DegenerateQrels(String),
    #[error("retrieval depth K must be at least 1 and cover the retrieved list (K = {k}, retrieved {retrieved})")]
    BadDepth { k: usize, retrieved: usize },
    #[error("no relevance judgments for query {0:?}")]
    MissingQrels(String),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Set-based precision, recall and F1 of a ranked list cut at depth `k`.
///
/// A query with no relevant documents scores (1, 1, 1) when nothing was
/// retrieved and is rejected as degenerate otherwise.
pub fn precision_recall_f1<S: AsRef<str>>(
    retrieved: &[S],
    qrels: &QrelSet,
    k: usize,
) -> Result<Prf, EvalError> {
    if k == 0 || retrieved.len() > k {
        return Err(EvalError::BadDepth {
            k,
            retrieved: retrieved.len(),
        });
    }
    if qrels.relevant.is_empty() {
        if retrieved.is_empty() {
            return Ok(Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            });
        }
        return Err(EvalError::DegenerateQrels(qrels.query_id.clone()));
    }
    let unique: HashSet<&str> = retrieved.iter().map(AsRef::as_ref).collect();
    let hits = unique.iter().filter(|d| qrels.is_relevant(d)).count() as f64;
    let precision = if retrieved.is_empty() {
        0.0
    } else {
        hits / retrieved.len() as f64
    };
    let recall = hits / qrels.relevant.len() as f64;
    Ok(Prf {
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// An absolute count or a percentage of some total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amount {
    Count(usize),
    Percent(f64),
}

impl Amount {
    /// Rounds percentages to the nearest count, never below 1.
    pub fn resolve(&self, total: usize) -> usize {
        match *self {
            Amount::Count(n) => n,
            Amount::Percent(p) => ((p / 100.0 * total as f64).round() as usize).max(1),
        }
    }
}

/// Everything a pipeline run needs besides its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub embedding: EmbeddingConfig,
    pub capacity: Amount,
    pub chunk_size: usize,
    pub index_mode: IndexMode,
    pub aggregation: Aggregation,
    pub clusters: Amount,
    pub kmeans_seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub k_probe: usize,
    pub k: usize,
    pub gate: GateParams,
    /// Silhouette is O(n²); skip it above this many clustered points.
    pub silhouette_max_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            capacity: Amount::Percent(10.0),
            chunk_size: 64,
            index_mode: IndexMode::PerDoc,
            aggregation: Aggregation::Max,
            clusters: Amount::Percent(5.0),
            kmeans_seed: 0,
            max_iters: 100,
            tol: 1e-4,
            k_probe: 3,
            k: 50,
            gate: GateParams::default(),
            silhouette_max_points: 5000,
        }
    }
}

impl PipelineConfig {
    pub fn kmeans_config(&self, m: usize) -> KMeansConfig {
        KMeansConfig {
            m,
            seed: self.kmeans_seed,
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Streaming filter, then clustered retrieval.
    Sakr,
    /// Whole corpus, full scan.
    Naive,
    /// Streaming filter, full scan of what was retained.
    StreamingOnly,
    /// Whole corpus, clustered retrieval.
    ClusteringOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Sakr,
        Mode::Naive,
        Mode::StreamingOnly,
        Mode::ClusteringOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sakr => "sakr",
            Mode::Naive => "naive",
            Mode::StreamingOnly => "streaming_only",
            Mode::ClusteringOnly => "clustering_only",
        }
    }

    /// Row label used by the published comparison tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Mode::Sakr => "SAKR",
            Mode::Naive => "Naive RAG",
            Mode::StreamingOnly => "SAKR - Clustering",
            Mode::ClusteringOnly => "SAKR-streaming",
        }
    }

    pub fn streams(self) -> bool {
        matches!(self, Mode::Sakr | Mode::StreamingOnly)
    }

    pub fn clusters(self) -> bool {
        matches!(self, Mode::Sakr | Mode::ClusteringOnly)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// A corpus with its embeddings computed once.
#[derive(Debug, Clone)]
pub struct PreparedCorpus {
    pub docs: Vec<Document>,
    pub embedded: Vec<EmbeddedDoc>,
}

impl PreparedCorpus {
    pub fn new(docs: Vec<Document>, cfg: &EmbeddingConfig) -> Result<Self, EvalError> {
        let embedded = docs
            .iter()
            .map(|d| embed_doc(&d.doc_id, &d.combined_text, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { docs, embedded })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

pub fn embed_queries(queries: &[Query], cfg: &EmbeddingConfig) -> Result<Vec<QueryVec>, EvalError> {
    queries
        .iter()
        .map(|q| QueryVec::from_text(&q.query_id, &q.text, cfg).map_err(EvalError::from))
        .collect()
}

/// Streams the corpus through a heavy-hitter index of the configured capacity.
pub fn retain(
    prepared: &PreparedCorpus,
    profile: &RetrievalProfile,
    cfg: &PipelineConfig,
) -> Result<(Snapshot, usize), EvalError> {
    let capacity = cfg.capacity.resolve(prepared.len());
    let chunks = chunk_stream(&prepared.embedded, cfg.chunk_size)?;
    let index = build_from_stream(
        profile.clone(),
        chunks.into_iter().map(|c| c.docs),
        capacity,
        cfg.index_mode,
    )?;
    Ok((index.snapshot(), capacity))
}

/// The whole corpus as a snapshot, scored against the profile.
pub fn full_snapshot(
    prepared: &PreparedCorpus,
    profile: &RetrievalProfile,
) -> Result<Snapshot, EvalError> {
    let entries = prepared
        .embedded
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            Ok(IndexEntry {
                score: profile_score(profile, doc.vec())?,
                doc: doc.clone(),
                arrival_seq: i as u64,
            })
        })
        .collect::<Result<Vec<_>, IndexError>>()?;
    Ok(Snapshot::from_entries(entries))
}

/// Snapshot documents in stream-arrival order.
pub fn arrival_order(snapshot: &Snapshot) -> Vec<EmbeddedDoc> {
    let mut entries: Vec<&IndexEntry> = snapshot.iter().collect();
    entries.sort_by_key(|e| e.arrival_seq);
    entries.into_iter().map(|e| e.doc.clone()).collect()
}

/// A built retrieval pipeline for one mode.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub mode: Mode,
    pub corpus_size: usize,
    /// Configured capacity for streaming modes, the corpus size otherwise.
    pub capacity: usize,
    pub retained: Snapshot,
    pub clustered: Option<ClusteredSnapshot>,
    pub k_probe: usize,
    pub index_build: Duration,
    pub cluster_build: Duration,
}

impl Pipeline {
    pub fn build(
        mode: Mode,
        prepared: &PreparedCorpus,
        profile: &RetrievalProfile,
        cfg: &PipelineConfig,
    ) -> Result<Self, EvalError> {
        let start = Instant::now();
        let (retained, capacity) = if mode.streams() {
            retain(prepared, profile, cfg)?
        } else {
            (full_snapshot(prepared, profile)?, prepared.len())
        };
        let index_build = start.elapsed();
        Self::from_retained(
            mode,
            retained,
            capacity,
            prepared.len(),
            index_build,
            cfg,
            None,
        )
    }

    /// Finishes a pipeline over an already retained snapshot; `m` overrides
    /// the configured cluster count.
    pub fn from_retained(
        mode: Mode,
        retained: Snapshot,
        capacity: usize,
        corpus_size: usize,
        index_build: Duration,
        cfg: &PipelineConfig,
        m: Option<usize>,
    ) -> Result<Self, EvalError> {
        let mut k_probe = 0;
        let mut cluster_build = Duration::ZERO;
        let clustered = if mode.clusters() {
            if retained.is_empty() {
                return Err(ClusterError::EmptyInput.into());
            }
            let m = m.unwrap_or_else(|| cfg.clusters.resolve(retained.len()));
            let m = m.clamp(1, retained.len());
            k_probe = cfg.k_probe.clamp(1, m);
            let start = Instant::now();
            let clustering = kmeans(&arrival_order(&retained), &cfg.kmeans_config(m))?;
            cluster_build = start.elapsed();
            Some(ClusteredSnapshot::new(retained.clone(), clustering)?)
        } else {
            None
        };
        Ok(Self {
            mode,
            corpus_size,
            capacity,
            retained,
            clustered,
            k_probe,
            index_build,
            cluster_build,
        })
    }

    pub fn m(&self) -> Option<usize> {
        self.clustered.as_ref().map(|c| c.clustering().m())
    }

    pub fn query(
        &self,
        q: &QueryVec,
        k: usize,
        gate: &GateParams,
    ) -> Result<RetrievalResult, EvalError> {
        Ok(match &self.clustered {
            Some(c) => c.retrieve(q, self.k_probe, k, gate)?,
            None => naive_retrieve(q, &self.retained, k, gate)?,
        })
    }

    pub fn memory_ratio_pct(&self) -> Result<f64, EvalError> {
        if self.mode.streams() {
            Ok(memory_ratio(self.capacity, self.corpus_size)?)
        } else {
            Ok(100.0)
        }
    }

    /// Silhouette of the pipeline's clustering, when it has one with at
    /// least two clusters and no more than `max_points` members.
    pub fn silhouette(&self, max_points: usize) -> Result<Option<f64>, EvalError> {
        let Some(c) = &self.clustered else {
            return Ok(None);
        };
        if c.clustering().m() < 2 || self.retained.len() > max_points {
            return Ok(None);
        }
        Ok(Some(cluster::silhouette(
            &arrival_order(&self.retained),
            c.clustering(),
        )?))
    }
}

/// Per-query aggregates of one pipeline at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryStats {
    pub prf: Prf,
    pub mean_candidates_scanned: f64,
    pub latencies: Vec<Duration>,
}

/// Runs every query at depth `k` and macro-averages precision and recall;
/// F1 is taken from the averaged pair.
pub fn evaluate(
    pipeline: &Pipeline,
    queries: &[QueryVec],
    qrels: &BTreeMap<String, QrelSet>,
    k: usize,
    gate: &GateParams,
) -> Result<QueryStats, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::InvalidConfig("no queries to evaluate".into()));
    }
    let (mut p, mut r, mut scanned) = (0.0, 0.0, 0.0);
    let mut latencies = Vec::with_capacity(queries.len());
    for q in queries {
        let judged = qrels
            .get(&q.query_id)
            .ok_or_else(|| EvalError::MissingQrels(q.query_id.clone()))?;
        let result = pipeline.query(q, k, gate)?;
        let prf = precision_recall_f1(&result.doc_ids(), judged, k)?;
        p += prf.precision;
        r += prf.recall;
        scanned += result.candidates_scanned as f64;
        latencies.push(result.elapsed);
    }
    let n = queries.len() as f64;
    let (precision, recall) = (p / n, r / n);
    Ok(QueryStats {
        prf: Prf {
            precision,
            recall,
            f1: f1_score(precision, recall),
        },
        mean_candidates_scanned: scanned / n,
        latencies,
    })
}

pub fn median(values: &[Duration]) -> Duration {
    if values.is_empty() {
        return Duration::ZERO;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2
    }
}

fn mean(values: &[Duration]) -> Duration {
    if values.is_empty() {
        Duration::ZERO
    } else {
        values.iter().sum::<Duration>() / values.len() as u32
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_latency_us: f64,
    pub median_latency_us: f64,
    pub index_build_ms: f64,
    pub cluster_build_ms: f64,
}

/// Metrics of one (mode, K, m) cell. Timing is kept out of the serialized
/// form so that reports are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: String,
    pub mode: Mode,
    pub label: String,
    pub k: usize,
    pub m: Option<usize>,
    pub k_probe: Option<usize>,
    pub corpus_size: usize,
    pub capacity: usize,
    pub retained: usize,
    pub queries: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub memory_ratio_pct: f64,
    pub silhouette: Option<f64>,
    pub mean_candidates_scanned: f64,
    #[serde(skip)]
    pub timing: Timing,
}

impl MetricsReport {
    fn new(
        pipeline: &Pipeline,
        k: usize,
        stats: &QueryStats,
        silhouette: Option<f64>,
    ) -> Result<Self, EvalError> {
        let m = pipeline.m();
        let cell = match m {
            Some(m) => format!("{}/K={k}/m={m}", pipeline.mode.name()),
            None => format!("{}/K={k}", pipeline.mode.name()),
        };
        Ok(Self {
            cell,
            mode: pipeline.mode,
            label: pipeline.mode.table_label().to_string(),
            k,
            m,
            k_probe: m.map(|_| pipeline.k_probe),
            corpus_size: pipeline.corpus_size,
            capacity: pipeline.capacity,
            retained: pipeline.retained.len(),
            queries: stats.latencies.len(),
            precision: stats.prf.precision,
            recall: stats.prf.recall,
            f1: stats.prf.f1,
            accuracy: stats.prf.precision,
            memory_ratio_pct: pipeline.memory_ratio_pct()?,
            silhouette,
            mean_candidates_scanned: stats.mean_candidates_scanned,
            timing: Timing {
                mean_latency_us: micros(mean(&stats.latencies)),
                median_latency_us: micros(median(&stats.latencies)),
                index_build_ms: pipeline.index_build.as_secs_f64() * 1e3,
                cluster_build_ms: pipeline.cluster_build.as_secs_f64() * 1e3,
            },
        })
    }
}

/// Versioned container for a set of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema: String,
    pub accuracy_metric: String,
    pub reports: Vec<MetricsReport>,
}

impl MetricsDocument {
    pub fn new(reports: Vec<MetricsReport>) -> Self {
        Self {
            schema: METRICS_SCHEMA.to_string(),
            accuracy_metric: ACCURACY_METRIC.to_string(),
            reports,
        }
    }

    /// Timing of every cell, keyed by cell id.
    pub fn timings(&self) -> BTreeMap<String, Timing> {
        self.reports
            .iter()
            .map(|r| (r.cell.clone(), r.timing.clone()))
            .collect()
    }
}

pub fn build_profile(
    queries: &[QueryVec],
    aggregation: Aggregation,
) -> Result<RetrievalProfile, EvalError> {
    Ok(RetrievalProfile::new(queries.to_vec(), aggregation)?)
}

/// Builds and evaluates one mode at the configured depth.
pub fn run_mode(
    mode: Mode,
    prepared: &PreparedCorpus,
    qrels: &BTreeMap<String, QrelSet>,
    queries: &[QueryVec],
    cfg: &PipelineConfig,
) -> Result<MetricsReport, EvalError> {
    let profile = build_profile(queries, cfg.aggregation)?;
    let pipeline = Pipeline::build(mode, prepared, &profile, cfg)?;
    let stats = evaluate(&pipeline, queries, qrels, cfg.k, &cfg.gate)?;
    let sil = pipeline.silhouette(cfg.silhouette_max_points)?;
    MetricsReport::new(&pipeline, cfg.k, &stats, sil)
}

/// Accuracy of each mode at each depth, plus one report per (mode, K) cell.
#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub modes: Vec<Mode>,
    pub rows: Vec<(usize, Vec<f64>)>,
    pub reports: Vec<MetricsReport>,
}

/// Builds each mode's pipeline once and evaluates it at every depth in `ks`.
pub fn ablation_grid(
    modes: &[Mode],
    ks: &[usize],
    prepared: &PreparedCorpus,
    qrels: &BTreeMap<String, QrelSet>,
    queries: &[QueryVec],
    cfg: &PipelineConfig,
) -> Result<AblationGrid, EvalError> {
    let profile = build_profile(queries, cfg.aggregation)?;
    let mut reports = Vec::new();
    let mut acc = vec![vec![0.0; modes.len()]; ks.len()];
    for (mi, &mode) in modes.iter().enumerate() {
        let pipeline = Pipeline::build(mode, prepared, &profile, cfg)?;
        let sil = pipeline.silhouette(cfg.silhouette_max_points)?;
        for (ki, &k) in ks.iter().enumerate() {
            let stats = evaluate(&pipeline, queries, qrels, k, &cfg.gate)?;
            acc[ki][mi] = stats.prf.precision;
            reports.push(MetricsReport::new(&pipeline, k, &stats, sil)?);
        }
    }
    Ok(AblationGrid {
        modes: modes.to_vec(),
        rows: ks.iter().copied().zip(acc).collect(),
        reports,
    })
}

pub fn write_grid_csv<W: std::io::Write>(w: W, grid: &AblationGrid) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string()];
    header.extend(grid.modes.iter().map(|m| format!("accuracy_{}", m.name())));
    out.write_record(&header)?;
    for (k, accs) in &grid.rows {
        let mut rec = vec![k.to_string()];
        rec.extend(accs.iter().map(|a| format!("{a:.6}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub m: usize,
    pub k_probe: usize,
    pub accuracy: f64,
    pub silhouette: Option<f64>,
    pub median_latency_us: f64,
    pub candidates_scanned: f64,
}

/// Runs the full pipeline once per cluster count over a shared retained snapshot.
pub fn sweep_clusters(
    m_values: &[usize],
    prepared: &PreparedCorpus,
    qrels: &BTreeMap<String, QrelSet>,
    queries: &[QueryVec],
    cfg: &PipelineConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    let profile = build_profile(queries, cfg.aggregation)?;
    let start = Instant::now();
    let (retained, capacity) = retain(prepared, &profile, cfg)?;
    let index_build = start.elapsed();
    m_values
        .iter()
        .map(|&m| {
            if m == 0 || m > retained.len() {
                return Err(EvalError::InvalidConfig(format!(
                    "cluster count {m} outside 1..={}",
                    retained.len()
                )));
            }
            let pipeline = Pipeline::from_retained(
                Mode::Sakr,
                retained.clone(),
                capacity,
                prepared.len(),
                index_build,
                cfg,
                Some(m),
            )?;
            let stats = evaluate(&pipeline, queries, qrels, cfg.k, &cfg.gate)?;
            Ok(SweepRow {
                m,
                k_probe: pipeline.k_probe,
                accuracy: stats.prf.precision,
                silhouette: pipeline.silhouette(cfg.silhouette_max_points)?,
                median_latency_us: micros(median(&stats.latencies)),
                candidates_scanned: stats.mean_candidates_scanned,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "m",
        "accuracy",
        "silhouette",
        "median_latency_us",
        "candidates_scanned",
    ])?;
    for r in rows {
        out.write_record([
            r.m.to_string(),
            format!("{:.6}", r.accuracy),
            r.silhouette.map(|s| format!("{s:.7}")).unwrap_or_default(),
            format!("{:.3}", r.median_latency_us),
            format!("{:.3}", r.candidates_scanned),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Silhouette of clustering the whole corpus versus only the documents the
/// streaming filter retains, with the same cluster count and seed. The
/// count resolves against the retained set.
pub fn silhouette_compare(
    prepared: &PreparedCorpus,
    queries: &[QueryVec],
    cfg: &PipelineConfig,
) -> Result<(f64, f64), EvalError> {
    let profile = build_profile(queries, cfg.aggregation)?;
    let (retained, _) = retain(prepared, &profile, cfg)?;
    let kept: HashSet<&str> = retained.doc_ids().collect();
    let subset: Vec<EmbeddedDoc> = prepared
        .embedded
        .iter()
        .filter(|d| kept.contains(d.doc_id.as_str()))
        .cloned()
        .collect();
    let m = cfg.clusters.resolve(subset.len()).clamp(1, subset.len());
    let km = cfg.kmeans_config(m);
    let before = cluster::silhouette(&prepared.embedded, &kmeans(&prepared.embedded, &km)?)?;
    let after = cluster::silhouette(&subset, &kmeans(&subset, &km)?)?;
    Ok((before, after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub corpus_size: usize,
    pub relevant_fraction: f64,
    /// Number of irrelevant topics.
    pub topics: usize,
    /// Probability that any token is drawn from the shared background vocabulary.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            corpus_size: 2000,
            relevant_fraction: 0.1,
            topics: 20,
            noise: 0.2,
            seed: 0,
        }
    }
}

const WORDS_PER_TOPIC: usize = 24;
const BACKGROUND_WORDS: usize = 400;
const QUERY_WORDS: usize = 8;
const HEADLINE_TOKENS: usize = 6;
const KEYWORD_COUNT: usize = 3;
const ABSTRACT_TOKENS: usize = 18;

/// Topic id of the relevant topic; irrelevant topics are `1..=topics`.
const RELEVANT_TOPIC: usize = 0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: &str| Err(EvalError::InvalidSpec(msg.to_string()));
        if !(self.relevant_fraction > 0.0 && self.relevant_fraction < 1.0) {
            return bad("relevant_fraction must lie strictly between 0 and 1");
        }
        if self.topics == 0 {
            return bad("topics must be at least 1");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1)");
        }
        let r = self.relevant_count();
        if r == 0 || r >= self.corpus_size {
            return bad("corpus too small for the relevant fraction");
        }
        Ok(())
    }

    pub fn relevant_count(&self) -> usize {
        (self.relevant_fraction * self.corpus_size as f64).round() as usize
    }
}

fn topic_word(topic: usize, w: usize) -> String {
    if topic == RELEVANT_TOPIC {
        format!("rel{w}")
    } else {
        format!("t{topic}w{w}")
    }
}

fn draw_tokens(rng: &mut ChaCha8Rng, topic: usize, n: usize, noise: f64) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < noise {
                format!("bg{}", rng.gen_range(0..BACKGROUND_WORDS))
            } else {
                topic_word(topic, rng.gen_range(0..WORDS_PER_TOPIC))
            }
        })
        .collect()
}

/// A generated corpus with its judgments and the query they answer.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub docs: Vec<Document>,
    pub qrels: QrelSet,
    pub query: Query,
    /// Topic of every document, 0 being the relevant topic.
    pub topics: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn qrels_map(&self) -> BTreeMap<String, QrelSet> {
        BTreeMap::from([(self.qrels.query_id.clone(), self.qrels.clone())])
    }

    /// Extra queries, each built from one uniformly chosen topic's vocabulary.
    pub fn topic_queries(&self, n: usize, seed: u64) -> Vec<Query> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let topic = rng.gen_range(0..=self.spec.topics);
                Query {
                    query_id: format!("tq{i}"),
                    text: draw_tokens(&mut rng, topic, QUERY_WORDS, 0.0).join(" "),
                }
            })
            .collect()
    }
}

/// Generates a labeled corpus: relevant documents speak the query's topic
/// vocabulary, every other document one of `topics` disjoint vocabularies,
/// and each token is replaced by background noise with probability `noise`.
/// Irrelevant documents are spread round-robin over their topics.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.corpus_size;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut topics = vec![0usize; n];
    for (rank, &pos) in order.iter().enumerate().skip(spec.relevant_count()) {
        topics[pos] = 1 + (rank - spec.relevant_count()) % spec.topics;
    }
    let mut qrels = QrelSet::new("q0");
    let docs = topics
        .iter()
        .enumerate()
        .map(|(i, &topic)| {
            let id = format!("doc{i:06}");
            qrels.insert(id.clone(), topic == RELEVANT_TOPIC);
            let headline = draw_tokens(&mut rng, topic, HEADLINE_TOKENS, spec.noise).join(" ");
            let keywords = draw_tokens(&mut rng, topic, KEYWORD_COUNT, spec.noise);
            let abstract_text = draw_tokens(&mut rng, topic, ABSTRACT_TOKENS, spec.noise).join(" ");
            Document::new(id, headline, keywords, abstract_text)
        })
        .collect();
    let query = Query {
        query_id: "q0".into(),
        text: (0..QUERY_WORDS)
            .map(|w| topic_word(RELEVANT_TOPIC, w))
            .collect::<Vec<_>>()
            .join(" "),
    };
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        docs,
        qrels,
        query,
        topics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub n_queries: usize,
    pub topics: usize,
    pub noise: f64,
    pub seed: u64,
    /// Cluster count; `None` uses round(sqrt(size)).
    pub m: Option<usize>,
    pub k_probe: usize,
    pub k: usize,
    pub embedding: EmbeddingConfig,
    pub kmeans_seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            n_queries: 100,
            topics: 64,
            noise: 0.2,
            seed: 0,
            m: None,
            k_probe: 3,
            k: 50,
            embedding: EmbeddingConfig {
                dim: 64,
                ..EmbeddingConfig::default()
            },
            kmeans_seed: 0,
            max_iters: 10,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Clustered,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub method: BenchMethod,
    pub median_elapsed_us: f64,
    pub candidates_scanned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchBuild {
    pub size: usize,
    pub m: usize,
    pub index_build_ms: f64,
    pub cluster_build_ms: f64,
    /// Clustering time spread over the benchmark's queries.
    pub cluster_ms_per_query: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub builds: Vec<BenchBuild>,
    /// Per-query candidate counts of the clustered method, by size.
    pub clustered_candidates: Vec<(usize, Vec<usize>)>,
}

fn median_usize(values: &[usize]) -> usize {
    if values.is_empty() {
        return 0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times clustered and full-scan retrieval over identical snapshots of
/// synthetic corpora of increasing size.
pub fn bench_latency(cfg: &BenchConfig) -> Result<BenchReport, EvalError> {
    if cfg.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::InvalidConfig(
            "bench sizes must be ascending".into(),
        ));
    }
    let gate = GateParams::default();
    let mut report = BenchReport {
        rows: Vec::new(),
        builds: Vec::new(),
        clustered_candidates: Vec::new(),
    };
    for &size in &cfg.sizes {
        let corpus = gen_synthetic(&SyntheticSpec {
            corpus_size: size,
            relevant_fraction: 0.1,
            topics: cfg.topics,
            noise: cfg.noise,
            seed: cfg.seed,
        })?;
        let prepared = PreparedCorpus::new(corpus.docs.clone(), &cfg.embedding)?;
        let profile = RetrievalProfile::single(QueryVec::from_text(
            &corpus.query.query_id,
            &corpus.query.text,
            &cfg.embedding,
        )?);
        let start = Instant::now();
        let snapshot = build_from_stream(
            profile,
            std::iter::once(prepared.embedded.clone()),
            size,
            IndexMode::PerDoc,
        )?
        .snapshot();
        let index_build = start.elapsed();
        let m = cfg
            .m
            .unwrap_or_else(|| (size as f64).sqrt().round() as usize)
            .clamp(1, size);
        let start = Instant::now();
        let clustering = kmeans(
            &arrival_order(&snapshot),
            &KMeansConfig {
                m,
                seed: cfg.kmeans_seed,
                max_iters: cfg.max_iters,
                tol: cfg.tol,
            },
        )?;
        let cluster_build = start.elapsed();
        let clustered = ClusteredSnapshot::new(snapshot.clone(), clustering)?;
        let k_probe = cfg.k_probe.clamp(1, m);
        let queries = embed_queries(
            &corpus.topic_queries(cfg.n_queries, cfg.seed ^ 0x5eed),
            &cfg.embedding,
        )?;
        let (mut ct, mut cc, mut nt, mut nc) = (vec![], vec![], vec![], vec![]);
        for q in &queries {
            let r = clustered.retrieve(q, k_probe, cfg.k, &gate)?;
            ct.push(r.elapsed);
            cc.push(r.candidates_scanned);
            let r = naive_retrieve(q, &snapshot, cfg.k, &gate)?;
            nt.push(r.elapsed);
            nc.push(r.candidates_scanned);
        }
        report.builds.push(BenchBuild {
            size,
            m,
            index_build_ms: index_build.as_secs_f64() * 1e3,
            cluster_build_ms: cluster_build.as_secs_f64() * 1e3,
            cluster_ms_per_query: (!queries.is_empty())
                .then(|| cluster_build.as_secs_f64() * 1e3 / queries.len() as f64),
        });
        if !queries.is_empty() {
            report.rows.push(BenchRow {
                size,
                method: BenchMethod::Clustered,
                median_elapsed_us: micros(median(&ct)),
                candidates_scanned: median_usize(&cc),
            });
            report.rows.push(BenchRow {
                size,
                method: BenchMethod::Naive,
                median_elapsed_us: micros(median(&nt)),
                candidates_scanned: median_usize(&nc),
            });
        }
        report.clustered_candidates.push((size, cc));
    }
    Ok(report)
}

pub fn write_bench_csv<W: std::io::Write>(w: W, report: &BenchReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["size", "method", "median_elapsed_us", "candidates_scanned"])?;
    for r in &report.rows {
        let method = match r.method {
            BenchMethod::Clustered => "clustered",
            BenchMethod::Naive => "naive",
        };
        out.write_record([
            r.size.to_string(),
            method.to_string(),
            format!("{:.3}", r.median_elapsed_us),
            r.candidates_scanned.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_bench_build_csv<W: std::io::Write>(w: W, report: &BenchReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "size",
        "m",
        "index_build_ms",
        "cluster_build_ms",
        "cluster_ms_per_query",
    ])?;
    for b in &report.builds {
        out.write_record([
            b.size.to_string(),
            b.m.to_string(),
            format!("{:.3}", b.index_build_ms),
            format!("{:.3}", b.cluster_build_ms),
            b.cluster_ms_per_query
                .map(|x| format!("{x:.3}"))
                .unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cos_sim;

    fn qrels(relevant: &[&str], judged: &[&str]) -> QrelSet {
        let mut q = QrelSet::new("q");
        for d in judged {
            q.insert(*d, relevant.contains(d));
        }
        q
    }

    #[test]
    fn f1_from_reported_pairs() {
        // 2 * 0.72 / 1.72 = 0.837209...
        assert!((f1_score(0.720, 1.000) - 0.8372).abs() < 1e-4);
        // 2 * 0.84 / 1.84 = 0.913043...
        assert!((f1_score(0.840, 1.000) - 0.9130).abs() < 1e-4);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn prf_cases() {
        let q = qrels(&["a", "b"], &["a", "b", "c", "d"]);
        let p = precision_recall_f1(&["a", "b"], &q, 2).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = precision_recall_f1(&["a", "c", "x", "d"], &q, 5).unwrap();
        assert_eq!(p.precision, 0.25);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 2.0 * 0.25 * 0.5 / 0.75).abs() < 1e-12);
        assert!(matches!(
            precision_recall_f1(&["a", "b", "c"], &q, 2),
            Err(EvalError::BadDepth { .. })
        ));
        assert!(matches!(
            precision_recall_f1::<&str>(&[], &q, 0),
            Err(EvalError::BadDepth { .. })
        ));
        let empty = qrels(&[], &["a"]);
        assert!(matches!(
            precision_recall_f1(&["a"], &empty, 3),
            Err(EvalError::DegenerateQrels(_))
        ));
        let p = precision_recall_f1::<&str>(&[], &empty, 3).unwrap();
        assert_eq!(p.recall, 1.0);
    }

    #[test]
    fn amounts_resolve() {
        assert_eq!(Amount::Percent(10.0).resolve(16000), 1600);
        assert_eq!(Amount::Percent(0.001).resolve(10), 1);
        assert_eq!(Amount::Count(7).resolve(10), 7);
    }

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            corpus_size: 1000,
            relevant_fraction: 0.1,
            topics: 10,
            noise: 0.1,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic_with_exact_relevant_count() {
        let a = gen_synthetic(&small_spec(3)).unwrap();
        let b = gen_synthetic(&small_spec(3)).unwrap();
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.qrels, b.qrels);
        assert_eq!(a.qrels.relevant.len(), 100);
        assert_eq!(a.qrels.judged.len(), 1000);
        let c = gen_synthetic(&small_spec(4)).unwrap();
        assert_ne!(a.docs, c.docs);
    }

    #[test]
    fn synthetic_relevant_docs_are_closer_to_query() {
        let corpus = gen_synthetic(&small_spec(5)).unwrap();
        let cfg = EmbeddingConfig::default();
        let q = QueryVec::from_text("q0", &corpus.query.text, &cfg).unwrap();
        let prepared = PreparedCorpus::new(corpus.docs.clone(), &cfg).unwrap();
        let (mut rel, mut irr) = (vec![], vec![]);
        for d in &prepared.embedded {
            let c = cos_sim(q.vec(), d.vec()).unwrap();
            if corpus.qrels.is_relevant(&d.doc_id) {
                rel.push(c);
            } else {
                irr.push(c);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&rel) > mean(&irr) + 0.2,
            "{} vs {}",
            mean(&rel),
            mean(&irr)
        );
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec {
                relevant_fraction: 0.0,
                ..small_spec(0)
            },
            SyntheticSpec {
                relevant_fraction: 1.0,
                ..small_spec(0)
            },
            SyntheticSpec {
                topics: 0,
                ..small_spec(0)
            },
            SyntheticSpec {
                noise: 1.0,
                ..small_spec(0)
            },
            SyntheticSpec {
                corpus_size: 3,
                ..small_spec(0)
            },
        ] {
            assert!(matches!(
                gen_synthetic(&spec),
                Err(EvalError::InvalidSpec(_))
            ));
        }
    }

    #[test]
    fn median_of_durations() {
        let ms = |x| Duration::from_millis(x);
        assert_eq!(median(&[ms(3), ms(1), ms(2)]), ms(2));
        assert_eq!(
            median(&[ms(4), ms(1), ms(2), ms(3)]),
            Duration::from_micros(2500)
        );
        assert_eq!(median(&[]), Duration::ZERO);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!(Mode::StreamingOnly.table_label(), "SAKR - Clustering");
    }
}
