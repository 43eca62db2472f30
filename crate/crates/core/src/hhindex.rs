//! Similarity heavy-hitter index.
//!
//! A fixed-capacity buffer that keeps the stream documents most similar to a
//! retrieval profile. The first `capacity` documents are admitted
//! unconditionally; afterwards a candidate replaces the current minimum only
//! when it ranks strictly above it, so the retained minimum never decreases.
//!
//! Two update modes exist. [`IndexMode::ChunkMax`] offers one candidate per
//! chunk (the chunk's best document). [`IndexMode::PerDoc`] offers every
//! document, which makes the final contents the exact top-`capacity` of the
//! stream regardless of how it was chunked.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, cos_sim, EmbedError, EmbeddedDoc, QueryVec};

pub const FOOTER_MAGIC: &[u8; 4] = b"SAKF";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index capacity must be at least 1")]
    ZeroCapacity,
    #[error("retrieval profile needs at least one query")]
    EmptyProfile,
    #[error("dimension mismatch: profile has {expected}, vector has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("offer_chunk called before init_fill")]
    NotInitialized,
    #[error("init_fill called on an index that already holds documents")]
    AlreadyInitialized,
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed index file: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    ChunkMax,
    #[default]
    PerDoc,
}

/// The query vectors stream documents are scored against.
#[derive(Debug, Clone)]
pub struct RetrievalProfile {
    queries: Vec<QueryVec>,
    aggregation: Aggregation,
}

impl RetrievalProfile {
    pub fn new(queries: Vec<QueryVec>, aggregation: Aggregation) -> Result<Self, IndexError> {
        let first = queries.first().ok_or(IndexError::EmptyProfile)?;
        let dim = first.vec().len();
        if let Some(q) = queries.iter().find(|q| q.vec().len() != dim) {
            return Err(IndexError::DimMismatch {
                expected: dim,
                found: q.vec().len(),
            });
        }
        Ok(Self {
            queries,
            aggregation,
        })
    }

    pub fn single(query: QueryVec) -> Self {
        Self {
            queries: vec![query],
            aggregation: Aggregation::Max,
        }
    }

    pub fn queries(&self) -> &[QueryVec] {
        &self.queries
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn dim(&self) -> usize {
        self.queries[0].vec().len()
    }
}

/// Aggregated cosine similarity of `vec` to the profile's queries.
pub fn profile_score(profile: &RetrievalProfile, vec: &[f64]) -> Result<f64, IndexError> {
    if vec.len() != profile.dim() {
        return Err(IndexError::DimMismatch {
            expected: profile.dim(),
            found: vec.len(),
        });
    }
    let mut best = f64::NEG_INFINITY;
    let mut total = 0.0;
    for q in &profile.queries {
        let s = cos_sim(q.vec(), vec)?;
        best = best.max(s);
        total += s;
    }
    Ok(match profile.aggregation {
        Aggregation::Max => best,
        Aggregation::Mean => total / profile.queries.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc: EmbeddedDoc,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub doc: EmbeddedDoc,
    pub score: f64,
    pub arrival_seq: u64,
}

/// Retention order: higher score first, equal scores broken by smaller doc id.
pub fn rank_cmp(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_a.total_cmp(&score_b).then_with(|| id_b.cmp(id_a))
}

struct Ranked(IndexEntry);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(
            self.0.score,
            &self.0.doc.doc_id,
            other.0.score,
            &other.0.doc.doc_id,
        )
    }
}

pub struct HhIndex {
    capacity: usize,
    mode: IndexMode,
    profile: RetrievalProfile,
    // min-heap on retention order: the eviction candidate sits on top
    heap: BinaryHeap<Reverse<Ranked>>,
    ids: HashSet<String>,
    next_seq: u64,
    initialized: bool,
}

impl std::fmt::Debug for HhIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HhIndex")
            .field("capacity", &self.capacity)
            .field("mode", &self.mode)
            .field("len", &self.heap.len())
            .field("initialized", &self.initialized)
            .finish()
    }
}

impl HhIndex {
    pub fn new(
        profile: RetrievalProfile,
        capacity: usize,
        mode: IndexMode,
    ) -> Result<Self, IndexError> {
        if capacity == 0 {
            return Err(IndexError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            mode,
            profile,
            heap: BinaryHeap::with_capacity(capacity.min(1 << 20)),
            ids: HashSet::with_capacity(capacity.min(1 << 20)),
            next_seq: 0,
            initialized: false,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn profile(&self) -> &RetrievalProfile {
        &self.profile
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.capacity
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn min_score(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse(r)| r.0.score)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.ids.contains(doc_id)
    }

    pub fn score(&self, doc: EmbeddedDoc) -> Result<ScoredDoc, IndexError> {
        let score = profile_score(&self.profile, doc.vec())?;
        Ok(ScoredDoc { doc, score })
    }

    pub fn score_chunk(&self, docs: Vec<EmbeddedDoc>) -> Result<Vec<ScoredDoc>, IndexError> {
        docs.into_iter().map(|d| self.score(d)).collect()
    }

    fn push(&mut self, sd: ScoredDoc) {
        self.ids.insert(sd.doc.doc_id.clone());
        let entry = IndexEntry {
            doc: sd.doc,
            score: sd.score,
            arrival_seq: self.next_seq,
        };
        self.next_seq += 1;
        self.heap.push(Reverse(Ranked(entry)));
    }

    /// Inserts `sd` if there is room, or replaces the minimum if `sd` ranks
    /// above it. Returns whether the index changed.
    fn offer(&mut self, sd: ScoredDoc) -> bool {
        if self.ids.contains(&sd.doc.doc_id) {
            return false;
        }
        if !self.is_full() {
            self.push(sd);
            return true;
        }
        let mut top = self.heap.peek_mut().expect("full index is non-empty");
        let min = &top.0 .0;
        if rank_cmp(sd.score, &sd.doc.doc_id, min.score, &min.doc.doc_id) != Ordering::Greater {
            return false;
        }
        self.ids.remove(&min.doc.doc_id);
        self.ids.insert(sd.doc.doc_id.clone());
        *top = Reverse(Ranked(IndexEntry {
            doc: sd.doc,
            score: sd.score,
            arrival_seq: self.next_seq,
        }));
        drop(top);
        self.next_seq += 1;
        true
    }

    /// Admits stream documents unconditionally until the index is full.
    ///
    /// Returns the unconsumed part of the stream; when filling stops inside a
    /// chunk, that chunk's remainder comes back as its own leading chunk.
    pub fn init_fill<I>(&mut self, chunks: I) -> Result<Vec<Vec<ScoredDoc>>, IndexError>
    where
        I: IntoIterator<Item = Vec<ScoredDoc>>,
    {
        if self.initialized || !self.heap.is_empty() {
            return Err(IndexError::AlreadyInitialized);
        }
        self.initialized = true;
        let mut rest = Vec::new();
        for chunk in chunks {
            if self.is_full() {
                rest.push(chunk);
                continue;
            }
            let mut docs = chunk.into_iter();
            while !self.is_full() {
                let Some(sd) = docs.next() else { break };
                if !self.ids.contains(&sd.doc.doc_id) {
                    self.push(sd);
                }
            }
            let remainder: Vec<ScoredDoc> = docs.collect();
            if !remainder.is_empty() {
                rest.push(remainder);
            }
        }
        Ok(rest)
    }

    /// Applies one chunk of scored documents. Returns the number of documents
    /// that entered the index.
    pub fn offer_chunk(&mut self, chunk: Vec<ScoredDoc>) -> Result<usize, IndexError> {
        if !self.initialized {
            return Err(IndexError::NotInitialized);
        }
        let mut admitted = 0;
        match self.mode {
            IndexMode::PerDoc => {
                for sd in chunk {
                    admitted += usize::from(self.offer(sd));
                }
            }
            IndexMode::ChunkMax => {
                let mut docs = chunk.into_iter();
                // an underfull index keeps filling before chunk maxima apply
                while !self.is_full() {
                    let Some(sd) = docs.next() else { break };
                    admitted += usize::from(self.offer(sd));
                }
                let best =
                    docs.max_by(|a, b| rank_cmp(a.score, &a.doc.doc_id, b.score, &b.doc.doc_id));
                if let Some(sd) = best {
                    admitted += usize::from(self.offer(sd));
                }
            }
        }
        Ok(admitted)
    }

    /// Entries in descending score order, ties by doc id ascending.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot::from_entries(self.heap.iter().map(|Reverse(r)| r.0.clone()).collect())
    }
}

/// Fills and then streams every chunk through a fresh index.
pub fn build_from_stream<I>(
    profile: RetrievalProfile,
    chunks: I,
    capacity: usize,
    mode: IndexMode,
) -> Result<HhIndex, IndexError>
where
    I: IntoIterator<Item = Vec<EmbeddedDoc>>,
{
    let mut index = HhIndex::new(profile, capacity, mode)?;
    let mut chunks = chunks.into_iter();
    // Score lazily so only the filling prefix is materialized at once.
    let mut prefix = Vec::new();
    let mut seen = 0usize;
    for chunk in chunks.by_ref() {
        seen += chunk.len();
        prefix.push(index.score_chunk(chunk)?);
        if seen >= capacity {
            break;
        }
    }
    for rest in index.init_fill(prefix)? {
        index.offer_chunk(rest)?;
    }
    for chunk in chunks {
        let scored = index.score_chunk(chunk)?;
        index.offer_chunk(scored)?;
    }
    Ok(index)
}

/// Immutable, score-ordered view of an index.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    entries: Arc<[IndexEntry]>,
}

impl Snapshot {
    pub fn from_entries(mut entries: Vec<IndexEntry>) -> Self {
        entries.sort_by(|a, b| rank_cmp(b.score, &b.doc.doc_id, a.score, &a.doc.doc_id));
        Self {
            entries: entries.into(),
        }
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.doc.dim())
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc.doc_id.as_str())
    }

    pub fn docs(&self) -> Vec<EmbeddedDoc> {
        self.entries.iter().map(|e| e.doc.clone()).collect()
    }
}

impl Deref for Snapshot {
    type Target = [IndexEntry];

    fn deref(&self) -> &[IndexEntry] {
        &self.entries
    }
}

/// Retained share of the corpus, in percent.
pub fn memory_ratio(index_capacity: usize, corpus_size: usize) -> Result<f64, IndexError> {
    if corpus_size == 0 {
        return Err(IndexError::EmptyCorpus);
    }
    Ok(100.0 * index_capacity as f64 / corpus_size as f64)
}

/// Metadata persisted in the index file footer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMeta {
    pub capacity: usize,
    pub mode: IndexMode,
    pub query_ids: Vec<String>,
    pub aggregation: Aggregation,
}

impl IndexMeta {
    pub fn of(index: &HhIndex) -> Self {
        Self {
            capacity: index.capacity,
            mode: index.mode,
            query_ids: index
                .profile
                .queries
                .iter()
                .map(|q| q.query_id.clone())
                .collect(),
            aggregation: index.profile.aggregation,
        }
    }
}

/// Writes a snapshot as a binary vector file followed by a footer:
/// `SAKF`, u64 capacity, u8 mode, u8 aggregation, u32 query count, each query
/// id as u16 length + bytes, u64 entry count, then per entry an f64 score and
/// a u64 arrival sequence number, all little-endian and in snapshot order.
pub fn write_index<W: Write>(
    w: &mut W,
    snapshot: &Snapshot,
    meta: &IndexMeta,
) -> std::io::Result<()> {
    let dim = snapshot.dim().unwrap_or(0);
    embed::write_vectors_binary(w, dim, snapshot.iter().map(|e| &e.doc))?;
    w.write_all(FOOTER_MAGIC)?;
    w.write_all(&(meta.capacity as u64).to_le_bytes())?;
    w.write_all(&[mode_byte(meta.mode), aggregation_byte(meta.aggregation)])?;
    w.write_all(&(meta.query_ids.len() as u32).to_le_bytes())?;
    for id in &meta.query_ids {
        let len = u16::try_from(id.len()).map_err(|_| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "query id longer than 65535 bytes",
            )
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    w.write_all(&(snapshot.len() as u64).to_le_bytes())?;
    for e in snapshot.iter() {
        w.write_all(&e.score.to_le_bytes())?;
        w.write_all(&e.arrival_seq.to_le_bytes())?;
    }
    Ok(())
}

fn mode_byte(mode: IndexMode) -> u8 {
    match mode {
        IndexMode::ChunkMax => 0,
        IndexMode::PerDoc => 1,
    }
}

fn aggregation_byte(agg: Aggregation) -> u8 {
    match agg {
        Aggregation::Max => 0,
        Aggregation::Mean => 1,
    }
}

/// Reads an index file written by [`write_index`].
pub fn read_index(path: &Path) -> Result<(Snapshot, IndexMeta), IndexError> {
    let malformed = |reason: &str| IndexError::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|source| IndexError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if cur.take(4) != Some(embed::VECTOR_MAGIC.as_slice()) {
        return Err(malformed("missing SAKV header"));
    }
    let dim = cur.u32().ok_or_else(|| malformed("truncated header"))? as usize;
    let count = cur.u64().ok_or_else(|| malformed("truncated header"))? as usize;
    let mut docs = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = cur.u16().ok_or_else(|| malformed("truncated record"))? as usize;
        let id = cur.take(len).ok_or_else(|| malformed("truncated record"))?;
        let id = std::str::from_utf8(id)
            .map_err(|_| malformed("id is not UTF-8"))?
            .to_string();
        let raw = cur
            .take(dim * 4)
            .ok_or_else(|| malformed("truncated record"))?;
        let vec = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        docs.push(EmbeddedDoc::new(id, vec)?);
    }
    if cur.take(4) != Some(FOOTER_MAGIC.as_slice()) {
        return Err(malformed("missing SAKF footer"));
    }
    let capacity = cur.u64().ok_or_else(|| malformed("truncated footer"))? as usize;
    let mode = match cur.take(1).map(|b| b[0]) {
        Some(0) => IndexMode::ChunkMax,
        Some(1) => IndexMode::PerDoc,
        _ => return Err(malformed("bad mode byte")),
    };
    let aggregation = match cur.take(1).map(|b| b[0]) {
        Some(0) => Aggregation::Max,
        Some(1) => Aggregation::Mean,
        _ => return Err(malformed("bad aggregation byte")),
    };
    let nq = cur.u32().ok_or_else(|| malformed("truncated footer"))? as usize;
    let mut query_ids = Vec::with_capacity(nq.min(1 << 16));
    for _ in 0..nq {
        let len = cur.u16().ok_or_else(|| malformed("truncated footer"))? as usize;
        let id = cur.take(len).ok_or_else(|| malformed("truncated footer"))?;
        query_ids.push(
            std::str::from_utf8(id)
                .map_err(|_| malformed("query id is not UTF-8"))?
                .to_string(),
        );
    }
    let n = cur.u64().ok_or_else(|| malformed("truncated footer"))? as usize;
    if n != docs.len() {
        return Err(malformed("footer entry count does not match records"));
    }
    let mut entries = Vec::with_capacity(n);
    for doc in docs {
        let score = cur.f64().ok_or_else(|| malformed("truncated scores"))?;
        let arrival_seq = cur.u64().ok_or_else(|| malformed("truncated scores"))?;
        entries.push(IndexEntry {
            doc,
            score,
            arrival_seq,
        });
    }
    let meta = IndexMeta {
        capacity,
        mode,
        query_ids,
        aggregation,
    };
    Ok((Snapshot::from_entries(entries), meta))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
