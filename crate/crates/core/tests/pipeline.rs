use sakr::embed::{cos_sim, EmbeddingConfig, QueryVec};
use sakr::eval::{
    bench_latency, embed_queries, gen_synthetic, run_mode, silhouette_compare, sweep_clusters,
    Amount, BenchConfig, BenchMethod, Mode, PipelineConfig, PreparedCorpus, SyntheticCorpus,
    SyntheticSpec,
};

fn separable(size: usize, seed: u64) -> SyntheticCorpus {
    gen_synthetic(&SyntheticSpec {
        corpus_size: size,
        relevant_fraction: 0.1,
        topics: 12,
        noise: 0.0,
        seed,
    })
    .unwrap()
}

fn prepare(corpus: &SyntheticCorpus, cfg: &PipelineConfig) -> (PreparedCorpus, Vec<QueryVec>) {
    let prepared = PreparedCorpus::new(corpus.docs.clone(), &cfg.embedding).unwrap();
    let queries = embed_queries(std::slice::from_ref(&corpus.query), &cfg.embedding).unwrap();
    (prepared, queries)
}

#[test]
fn naive_is_perfect_on_separable_data() {
    let corpus = separable(1000, 1);
    let relevant = corpus.qrels.relevant.len();
    // wide enough that hashed vocabularies do not collide
    let cfg = PipelineConfig {
        k: relevant,
        embedding: EmbeddingConfig {
            dim: 1024,
            ..EmbeddingConfig::default()
        },
        ..PipelineConfig::default()
    };
    let (prepared, queries) = prepare(&corpus, &cfg);

    let mut scored: Vec<(f64, &str)> = prepared
        .embedded
        .iter()
        .map(|d| {
            (
                cos_sim(queries[0].vec(), d.vec()).unwrap(),
                d.doc_id.as_str(),
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    assert!(scored[..relevant]
        .iter()
        .all(|(_, id)| corpus.qrels.is_relevant(id)));

    let r = run_mode(Mode::Naive, &prepared, &corpus.qrels_map(), &queries, &cfg).unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    assert_eq!(r.memory_ratio_pct, 100.0);
    assert_eq!(r.m, None);
}

#[test]
fn full_probe_matches_streaming_only() {
    let corpus = gen_synthetic(&SyntheticSpec {
        corpus_size: 1500,
        seed: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let base = PipelineConfig {
        k: 40,
        ..PipelineConfig::default()
    };
    let (prepared, queries) = prepare(&corpus, &base);
    let qrels = corpus.qrels_map();
    let cfg = PipelineConfig {
        clusters: Amount::Count(6),
        k_probe: 6,
        ..base
    };
    let sakr = run_mode(Mode::Sakr, &prepared, &qrels, &queries, &cfg).unwrap();
    let stream = run_mode(Mode::StreamingOnly, &prepared, &qrels, &queries, &cfg).unwrap();
    assert_eq!(
        (sakr.precision, sakr.recall, sakr.f1),
        (stream.precision, stream.recall, stream.f1)
    );
    assert_eq!(sakr.memory_ratio_pct, 10.0);
    let clus = run_mode(Mode::ClusteringOnly, &prepared, &qrels, &queries, &cfg).unwrap();
    assert_eq!(clus.memory_ratio_pct, 100.0);
    assert_eq!(clus.label, "SAKR-streaming");
    assert_eq!(stream.label, "SAKR - Clustering");
}

#[test]
fn sweep_degenerates_to_full_scan() {
    let corpus = separable(800, 3);
    let cfg = PipelineConfig {
        capacity: Amount::Count(40),
        ..PipelineConfig::default()
    };
    let (prepared, queries) = prepare(&corpus, &cfg);
    let qrels = corpus.qrels_map();
    let stream = run_mode(Mode::StreamingOnly, &prepared, &qrels, &queries, &cfg).unwrap();
    let full = PipelineConfig {
        k_probe: 40,
        ..cfg.clone()
    };
    let rows = sweep_clusters(&[1, 40], &prepared, &qrels, &queries, &full).unwrap();
    assert_eq!(rows[0].accuracy, stream.precision);
    assert_eq!(rows[1].k_probe, 40);
    assert_eq!(rows[1].accuracy, stream.precision);
    assert!(sweep_clusters(&[41], &prepared, &qrels, &queries, &cfg).is_err());
}

#[test]
fn silhouette_equal_when_nothing_is_filtered() {
    let corpus = gen_synthetic(&SyntheticSpec {
        corpus_size: 400,
        seed: 4,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = PipelineConfig {
        capacity: Amount::Percent(100.0),
        clusters: Amount::Count(5),
        ..PipelineConfig::default()
    };
    let (prepared, queries) = prepare(&corpus, &cfg);
    let (before, after) = silhouette_compare(&prepared, &queries, &cfg).unwrap();
    assert_eq!(before, after);
}

#[test]
fn bench_rows_and_work_bound() {
    let cfg = BenchConfig {
        sizes: vec![500, 2000],
        n_queries: 10,
        ..BenchConfig::default()
    };
    let report = bench_latency(&cfg).unwrap();
    assert_eq!(report.rows.len(), 4);
    for pair in report.rows.chunks(2) {
        assert_eq!(pair[0].method, BenchMethod::Clustered);
        assert_eq!(pair[1].method, BenchMethod::Naive);
        assert_eq!(pair[1].candidates_scanned, pair[0].size);
        assert!(pair[0].candidates_scanned < pair[1].candidates_scanned);
    }
    for (size, per_query) in &report.clustered_candidates {
        assert!(per_query.iter().all(|c| c < size));
    }

    let empty = bench_latency(&BenchConfig {
        n_queries: 0,
        sizes: vec![300],
        ..BenchConfig::default()
    })
    .unwrap();
    assert!(empty.rows.is_empty());
    assert_eq!(empty.builds.len(), 1);
    assert_eq!(empty.builds[0].cluster_ms_per_query, None);

    assert!(bench_latency(&BenchConfig {
        sizes: vec![1000, 500],
        ..BenchConfig::default()
    })
    .is_err());
}
