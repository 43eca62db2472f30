//! Command-line front end: `build`, `query`, `eval`, `sweep`, `bench`, `gen`.
//!
//! Every command reads a [`RunConfig`] (file plus `--section.key value`
//! overrides) and writes its outputs atomically into `paths.output_dir`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{read_clustering, write_clustering, ClusterError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    load_corpus, load_qrels, load_queries, write_corpus_jsonl, write_qrels, write_queries_jsonl,
    CorpusError, CorpusFormat, Query,
};
use crate::embed::{EmbedError, QueryVec};
use crate::eval::{
    ablation_grid, bench_latency, build_profile, embed_queries, gen_synthetic, sweep_clusters,
    write_bench_build_csv, write_bench_csv, write_grid_csv, write_sweep_csv, EvalError,
    MetricsDocument, Mode, Pipeline, PreparedCorpus,
};
use crate::hhindex::{read_index, write_index, IndexError, IndexMeta};
use crate::retrieve::{naive_retrieve, write_result_jsonl, ClusteredSnapshot, RetrieveError};

pub const INDEX_FILE: &str = "index.sakv";
pub const CLUSTERING_FILE: &str = "clustering.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const GRID_FILE: &str = "grid.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_BUILD_FILE: &str = "bench_build.csv";
pub const DEFAULT_OUTPUT_DIR: &str = "sakr-out";
pub const MANIFEST_SCHEMA: &str = "sakr-manifest/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing build artifact {0} (run `sakr build` first)")]
    ArtifactMissing(PathBuf),
    #[error("artifact schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
}

impl CliError {
    /// 2 for usage and input problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::ArtifactMissing(_)
            | CliError::SchemaMismatch(_)
            | CliError::Config(_)
            | CliError::Corpus(_) => 2,
            CliError::Eval(
                EvalError::Corpus(_)
                | EvalError::InvalidSpec(_)
                | EvalError::InvalidConfig(_)
                | EvalError::MissingQrels(_)
                | EvalError::DegenerateQrels(_)
                | EvalError::BadDepth { .. },
            ) => 2,
            CliError::Index(IndexError::Malformed { .. })
            | CliError::Cluster(ClusterError::Malformed { .. })
            | CliError::Embed(EmbedError::Malformed { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sakr",
    version,
    about = "Streaming heavy-hitter retrieval with clustered search"
)]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream the corpus into the index, cluster it, and persist both.
    Build,
    /// Answer queries against built artifacts.
    Query(QueryArgs),
    /// Evaluate the ablation modes against qrels.
    Eval,
    /// Evaluate the full pipeline over a list of cluster counts.
    Sweep,
    /// Time clustered against full-scan retrieval on synthetic corpora.
    Bench,
    /// Write a synthetic corpus, qrels and query.
    Gen,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Query text.
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    pub text: Option<String>,
    /// JSONL file of `{"id", "text"}` queries.
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// Full scan of the retained index instead of cluster probing.
    #[arg(long)]
    pub naive: bool,
    /// Write results here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Dotted-key overrides in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Splits `--section.key value` / `--section.key=value` overrides out of argv.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg
            .strip_prefix("--")
            .filter(|b| b.contains('.') && !b.starts_with('.'))
        else {
            rest.push(arg);
            continue;
        };
        if let Some((key, value)) = body.split_once('=') {
            overrides.push((key.to_string(), value.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("override --{body} needs a value")))?;
            overrides.push((body.to_string(), value));
        }
    }
    Ok((rest, overrides))
}

/// Applies `SAKR_THREADS` (0 or unset = automatic) to the global thread pool.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SAKR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "SAKR_THREADS must be a non-negative integer, got {raw:?}"
        ))
    })?;
    if n > 0 {
        // Fails only if a pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = load_config(&cli, overrides)?;
    match cli.command {
        Command::Build => cmd_build(&cfg),
        Command::Query(args) => cmd_query(&cfg, &args),
        Command::Eval => cmd_eval(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Bench => cmd_bench(&cfg),
        Command::Gen => cmd_gen(&cfg),
    }
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    let path = path
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("paths.{key} is not set")))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "paths.{key}: {} is not a readable file",
            path.display()
        )));
    }
    Ok(path)
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let wrap = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(wrap)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(wrap)?;
        w.flush().map_err(wrap)?;
    }
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn load_query_vecs(cfg: &RunConfig) -> Result<Vec<QueryVec>, CliError> {
    let path = required(&cfg.paths.queries, "queries")?;
    let queries = load_queries(path)?;
    if queries.is_empty() {
        return Err(CliError::Usage(format!(
            "{} contains no queries",
            path.display()
        )));
    }
    Ok(embed_queries(&queries, &cfg.embedding)?)
}

fn load_prepared(cfg: &RunConfig) -> Result<PreparedCorpus, CliError> {
    let path = required(&cfg.paths.corpus, "corpus")?;
    let docs = load_corpus(path, CorpusFormat::from_path(path))?;
    Ok(PreparedCorpus::new(docs, &cfg.embedding)?)
}

#[derive(Debug, Serialize)]
struct Manifest {
    schema: &'static str,
    config_hash: String,
    corpus_sha256: String,
    queries_sha256: String,
    config: RunConfig,
    corpus_size: usize,
    capacity: usize,
    retained: usize,
    m: usize,
    k_probe: usize,
    dim: usize,
    memory_ratio_pct: f64,
    index_file: &'static str,
    clustering_file: &'static str,
    timings_ms: ManifestTimings,
}

#[derive(Debug, Serialize)]
struct ManifestTimings {
    embed: f64,
    index_build: f64,
    cluster_build: f64,
}

pub fn cmd_build(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus_path = required(&cfg.paths.corpus, "corpus")?;
    let queries_path = required(&cfg.paths.queries, "queries")?;
    let start = Instant::now();
    let prepared = load_prepared(cfg)?;
    if prepared.is_empty() {
        return Err(CliError::Usage(format!(
            "{} contains no documents",
            corpus_path.display()
        )));
    }
    let queries = load_query_vecs(cfg)?;
    let embed_ms = start.elapsed().as_secs_f64() * 1e3;
    let pcfg = cfg.pipeline();
    let profile = build_profile(&queries, pcfg.aggregation)?;
    let pipeline = Pipeline::build(Mode::Sakr, &prepared, &profile, &pcfg)?;
    let clustered = pipeline.clustered.as_ref().expect("full pipeline clusters");
    let meta = IndexMeta {
        capacity: pipeline.capacity,
        mode: pcfg.index_mode,
        query_ids: queries.iter().map(|q| q.query_id.clone()).collect(),
        aggregation: pcfg.aggregation,
    };
    let dir = output_dir(cfg);
    write_atomic(&dir.join(INDEX_FILE), |mut w| {
        write_index(&mut w, &pipeline.retained, &meta)
    })?;
    write_atomic(&dir.join(CLUSTERING_FILE), |mut w| {
        write_clustering(&mut w, clustered.clustering())
    })?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        config_hash: cfg.hash(),
        corpus_sha256: sha256_file(corpus_path)?,
        queries_sha256: sha256_file(queries_path)?,
        config: cfg.clone(),
        corpus_size: prepared.len(),
        capacity: pipeline.capacity,
        retained: pipeline.retained.len(),
        m: clustered.clustering().m(),
        k_probe: pipeline.k_probe,
        dim: cfg.embedding.dim,
        memory_ratio_pct: pipeline.memory_ratio_pct()?,
        index_file: INDEX_FILE,
        clustering_file: CLUSTERING_FILE,
        timings_ms: ManifestTimings {
            embed: embed_ms,
            index_build: pipeline.index_build.as_secs_f64() * 1e3,
            cluster_build: pipeline.cluster_build.as_secs_f64() * 1e3,
        },
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    eprintln!(
        "built {}: {} of {} docs retained (capacity {}), {} clusters",
        dir.display(),
        manifest.retained,
        manifest.corpus_size,
        manifest.capacity,
        manifest.m
    );
    Ok(())
}

pub fn cmd_query(cfg: &RunConfig, args: &QueryArgs) -> Result<(), CliError> {
    let dir = output_dir(cfg);
    let index_path = dir.join(INDEX_FILE);
    let clustering_path = dir.join(CLUSTERING_FILE);
    for p in [&index_path, &clustering_path] {
        if !p.is_file() {
            return Err(CliError::ArtifactMissing(p.clone()));
        }
    }
    let (snapshot, _) = read_index(&index_path)?;
    if let Some(dim) = snapshot.dim() {
        if dim != cfg.embedding.dim {
            return Err(CliError::SchemaMismatch(format!(
                "index vectors have dim {dim}, config embedding.dim is {}",
                cfg.embedding.dim
            )));
        }
    }
    let clustering = read_clustering(&clustering_path)?;
    let clustered = ClusteredSnapshot::new(snapshot, clustering)
        .map_err(|e| CliError::SchemaMismatch(e.to_string()))?;
    let queries = match (&args.text, &args.file) {
        (Some(text), _) => vec![Query {
            query_id: "query".into(),
            text: text.clone(),
        }],
        (None, Some(path)) => load_queries(path)?,
        (None, None) => return Err(CliError::Usage("pass --text or --file".into())),
    };
    let qvecs = embed_queries(&queries, &cfg.embedding)?;
    let gate = cfg.gate();
    let k_probe = cfg.retrieve.k_probe.min(clustered.clustering().m());
    let mut results = Vec::with_capacity(qvecs.len());
    for q in &qvecs {
        results.push(if args.naive {
            naive_retrieve(q, clustered.snapshot(), cfg.retrieve.k, &gate)?
        } else {
            clustered.retrieve(q, k_probe, cfg.retrieve.k, &gate)?
        });
    }
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        for r in &results {
            write_result_jsonl(&mut &mut *w, r)?;
        }
        Ok(())
    };
    match &args.out {
        Some(path) => write_atomic(path, emit),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            emit(&mut lock).map_err(|source| CliError::Write {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = load_prepared(cfg)?;
    let qrels = load_qrels(required(&cfg.paths.qrels, "qrels")?)?;
    let queries = load_query_vecs(cfg)?;
    let ks = if cfg.eval.ks.is_empty() {
        vec![cfg.retrieve.k]
    } else {
        cfg.eval.ks.clone()
    };
    let grid = ablation_grid(
        &cfg.eval.modes,
        &ks,
        &prepared,
        &qrels,
        &queries,
        &cfg.pipeline(),
    )?;
    let doc = MetricsDocument::new(grid.reports.clone());
    let dir = output_dir(cfg);
    write_json(&dir.join(METRICS_FILE), &doc)?;
    write_json(&dir.join(TIMINGS_FILE), &doc.timings())?;
    write_atomic(&dir.join(GRID_FILE), |w| Ok(write_grid_csv(w, &grid)?))?;
    for r in &doc.reports {
        eprintln!(
            "{:<18} K={:<4} P={:.3} R={:.3} F1={:.3} memory={:.0}%",
            r.label, r.k, r.precision, r.recall, r.f1, r.memory_ratio_pct
        );
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let prepared = load_prepared(cfg)?;
    let qrels = load_qrels(required(&cfg.paths.qrels, "qrels")?)?;
    let queries = load_query_vecs(cfg)?;
    let rows = sweep_clusters(
        &cfg.sweep.m_values,
        &prepared,
        &qrels,
        &queries,
        &cfg.pipeline(),
    )?;
    let dir = output_dir(cfg);
    write_atomic(&dir.join(SWEEP_FILE), |w| Ok(write_sweep_csv(w, &rows)?))?;
    for r in &rows {
        eprintln!(
            "m={:<5} accuracy={:.3} candidates={:.1}",
            r.m, r.accuracy, r.candidates_scanned
        );
    }
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let report = bench_latency(&cfg.bench)?;
    let dir = output_dir(cfg);
    write_atomic(&dir.join(BENCH_FILE), |w| Ok(write_bench_csv(w, &report)?))?;
    write_atomic(&dir.join(BENCH_BUILD_FILE), |w| {
        Ok(write_bench_build_csv(w, &report)?)
    })?;
    for r in &report.rows {
        eprintln!(
            "size={:<8} {:?} median={:.1}us candidates={}",
            r.size, r.method, r.median_elapsed_us, r.candidates_scanned
        );
    }
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = gen_synthetic(&cfg.synthetic)?;
    let dir = output_dir(cfg);
    write_atomic(&dir.join("corpus.jsonl"), |w| {
        write_corpus_jsonl(w, &corpus.docs)
    })?;
    write_atomic(&dir.join("qrels.tsv"), |w| {
        write_qrels(w, &corpus.qrels_map())
    })?;
    write_atomic(&dir.join("queries.jsonl"), |w| {
        write_queries_jsonl(w, std::slice::from_ref(&corpus.query))
    })?;
    eprintln!(
        "wrote {} docs ({} relevant) to {}",
        corpus.docs.len(),
        corpus.qrels.relevant.len(),
        dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_split_from_args() {
        let (rest, ov) = split_overrides(strings(&[
            "sakr",
            "eval",
            "--retrieve.K",
            "50",
            "--config",
            "c.json",
            "--cluster.m=8",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["sakr", "eval", "--config", "c.json"]));
        assert_eq!(
            ov,
            vec![
                ("retrieve.K".into(), "50".into()),
                ("cluster.m".into(), "8".into())
            ]
        );
        assert!(matches!(
            split_overrides(strings(&["sakr", "--retrieve.K"])),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::ArtifactMissing("a".into()).exit_code(), 2);
        assert_eq!(CliError::Cluster(ClusterError::EmptyInput).exit_code(), 1);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, |w| w.write_all(b"one")).unwrap();
        write_atomic(&p, |w| w.write_all(b"two")).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
