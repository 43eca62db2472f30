//! Document streams: loading corpora and relevance judgments, and cutting
//! an ordered document list into fixed-size chunks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: record has no id")]
    MissingId { path: PathBuf, line: usize },
    #[error("{path}:{line}: duplicate document id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: label {label:?} is not 0 or 1")]
    BadLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{path}:{line}: expected `query_id<TAB>doc_id<TAB>label`")]
    MalformedLine { path: PathBuf, line: usize },
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
}

/// A corpus record with its three text fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub headline: String,
    pub keywords: Vec<String>,
    pub abstract_text: String,
    pub combined_text: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        headline: impl Into<String>,
        keywords: Vec<String>,
        abstract_text: impl Into<String>,
    ) -> Self {
        let headline = headline.into();
        let abstract_text = abstract_text.into();
        let combined_text = combine_fields(&headline, &keywords, &abstract_text);
        Self {
            doc_id: doc_id.into(),
            headline,
            keywords,
            abstract_text,
            combined_text,
        }
    }
}

/// Joins headline, keywords and abstract with single spaces, skipping empty parts.
pub fn combine_fields(headline: &str, keywords: &[String], abstract_text: &str) -> String {
    std::iter::once(headline.trim())
        .chain(keywords.iter().map(|k| k.trim()))
        .chain(std::iter::once(abstract_text.trim()))
        .filter(|part| !part.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl CorpusFormat {
    /// Guesses the format from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CorpusFormat::Csv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    headline: Option<String>,
    #[serde(default)]
    keywords: Option<Vec<String>>,
    #[serde(default, rename = "abstract")]
    abstract_text: Option<String>,
}

#[derive(Deserialize)]
struct CsvRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    headline: Option<String>,
    #[serde(default)]
    keywords: Option<String>,
    #[serde(default, rename = "abstract")]
    abstract_text: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a corpus in file order.
///
/// JSONL records carry `id`, `headline`, `keywords` (array) and `abstract`.
/// CSV files need a header row with the same column names; the keywords cell
/// is split on `;`. Line numbers in errors are 1-based physical lines.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Document>, CorpusError> {
    let raw = match format {
        CorpusFormat::Jsonl => read_jsonl_records(path)?,
        CorpusFormat::Csv => read_csv_records(path)?,
    };
    let mut seen = HashSet::with_capacity(raw.len());
    let mut docs = Vec::with_capacity(raw.len());
    for (line, id, headline, keywords, abstract_text) in raw {
        let id = match id.map(|s| s.trim().to_string()) {
            Some(id) if !id.is_empty() => id,
            _ => {
                return Err(CorpusError::MissingId {
                    path: path.to_path_buf(),
                    line,
                })
            }
        };
        let doc = Document::new(id, headline, keywords, abstract_text);
        if doc.combined_text.is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line,
                reason: "all text fields are empty".into(),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id: doc.doc_id,
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

type RawRecord = (usize, Option<String>, String, Vec<String>, String);

fn read_jsonl_records(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                reason: e.to_string(),
            })?;
        out.push((
            line_no,
            rec.id,
            rec.headline.unwrap_or_default(),
            rec.keywords.unwrap_or_default(),
            rec.abstract_text.unwrap_or_default(),
        ));
    }
    Ok(out)
}

fn read_csv_records(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedRecord {
            path: path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for row in reader.records() {
        let malformed = |e: csv::Error| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or_default();
            CorpusError::MalformedRecord {
                path: path.to_path_buf(),
                line,
                reason: e.to_string(),
            }
        };
        let row = row.map_err(malformed)?;
        let line = row
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or_default();
        let rec: CsvRecord =
            row.deserialize(Some(&headers))
                .map_err(|e| CorpusError::MalformedRecord {
                    path: path.to_path_buf(),
                    line,
                    reason: e.to_string(),
                })?;
        let keywords = rec
            .keywords
            .unwrap_or_default()
            .split(';')
            .map(|k| k.trim().to_string())
            .filter(|k| !k.is_empty())
            .collect();
        out.push((
            line,
            rec.id,
            rec.headline.unwrap_or_default(),
            keywords,
            rec.abstract_text.unwrap_or_default(),
        ));
    }
    Ok(out)
}

/// Binary relevance judgments for one query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QrelSet {
    pub query_id: String,
    pub relevant: BTreeSet<String>,
    pub judged: BTreeSet<String>,
}

impl QrelSet {
    pub fn new(query_id: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            ..Default::default()
        }
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, relevant: bool) {
        let doc_id = doc_id.into();
        if relevant {
            self.relevant.insert(doc_id.clone());
        }
        self.judged.insert(doc_id);
    }

    /// Documents missing from the judgments count as not relevant.
    pub fn is_relevant(&self, doc_id: &str) -> bool {
        self.relevant.contains(doc_id)
    }
}

/// Parses a `query_id<TAB>doc_id<TAB>label` file into one [`QrelSet`] per query.
pub fn load_qrels(path: &Path) -> Result<BTreeMap<String, QrelSet>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out: BTreeMap<String, QrelSet> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
            });
        }
        let relevant = match fields[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(CorpusError::BadLabel {
                    path: path.to_path_buf(),
                    line: line_no,
                    label: other.to_string(),
                })
            }
        };
        out.entry(fields[0].to_string())
            .or_insert_with(|| QrelSet::new(fields[0]))
            .insert(fields[1], relevant);
    }
    Ok(out)
}

/// Serializes judgments back into the TSV format, queries and docs in sorted order.
pub fn write_qrels<W: std::io::Write>(
    mut w: W,
    qrels: &BTreeMap<String, QrelSet>,
) -> std::io::Result<()> {
    for set in qrels.values() {
        for doc in &set.judged {
            let label = u8::from(set.relevant.contains(doc));
            writeln!(w, "{}\t{}\t{}", set.query_id, doc, label)?;
        }
    }
    Ok(())
}

/// Writes documents as corpus JSONL.
pub fn write_corpus_jsonl<W: std::io::Write>(mut w: W, docs: &[Document]) -> std::io::Result<()> {
    for doc in docs {
        let rec = serde_json::json!({
            "id": doc.doc_id,
            "headline": doc.headline,
            "keywords": doc.keywords,
            "abstract": doc.abstract_text,
        });
        writeln!(w, "{rec}")?;
    }
    Ok(())
}

/// A query as read from a query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

/// Reads `{"query_id": ..., "text": ...}` lines.
pub fn load_queries(path: &Path) -> Result<Vec<Query>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if q.query_id.is_empty() {
            return Err(CorpusError::MissingId {
                path: path.to_path_buf(),
                line: idx + 1,
            });
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                line: idx + 1,
                id: q.query_id,
            });
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries_jsonl<W: std::io::Write>(mut w: W, queries: &[Query]) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamChunk<T> {
    pub seq_no: usize,
    pub docs: Vec<T>,
}

/// Splits an ordered list into consecutive chunks of `chunk_size` (the last may be short).
pub fn chunk_stream<T: Clone>(
    docs: &[T],
    chunk_size: usize,
) -> Result<Vec<StreamChunk<T>>, CorpusError> {
    if chunk_size == 0 {
        return Err(CorpusError::ZeroChunkSize);
    }
    Ok(docs
        .chunks(chunk_size)
        .enumerate()
        .map(|(seq_no, c)| StreamChunk {
            seq_no,
            docs: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn combined_text_joins_all_fields() {
        let f = write_tmp(
            r#"{"id":"a","headline":"X","keywords":["y","z"],"abstract":"W"}"#,
            ".jsonl",
        );
        let docs = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(docs[0].combined_text, "X y z W");
    }

    #[test]
    fn combined_text_skips_empty_fields() {
        let f = write_tmp(
            r#"{"id":"b","headline":"X","keywords":[],"abstract":""}"#,
            ".jsonl",
        );
        let docs = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(docs[0].combined_text, "X");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp(
            "{\"id\":\"a\",\"headline\":\"X\"}\n{\"id\":\"a\",\"headline\":\"Y\"}\n",
            ".jsonl",
        );
        match load_corpus(f.path(), CorpusFormat::Jsonl) {
            Err(CorpusError::DuplicateId { line: 2, id, .. }) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_id_and_malformed_lines() {
        let f = write_tmp("{\"headline\":\"X\"}\n", ".jsonl");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(CorpusError::MissingId { line: 1, .. })
        ));
        let f = write_tmp("{\"id\":\"a\",\"headline\":\"X\"}\nnot json\n", ".jsonl");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(CorpusError::MalformedRecord { line: 2, .. })
        ));
        let f = write_tmp("{\"id\":\"a\",\"headline\":\"\"}\n", ".jsonl");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(CorpusError::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn csv_keywords_split_on_semicolon() {
        let f = write_tmp(
            "id,headline,keywords,abstract\nc1,Vote count,election; senate,Polls closed\n",
            ".csv",
        );
        let docs = load_corpus(f.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(docs[0].keywords, vec!["election", "senate"]);
        assert_eq!(
            docs[0].combined_text,
            "Vote count election senate Polls closed"
        );
        assert_eq!(CorpusFormat::from_path(f.path()), CorpusFormat::Csv);
    }

    #[test]
    fn qrels_parse() {
        let f = write_tmp("q1\td1\t1\nq1\td2\t0\n", ".tsv");
        let q = load_qrels(f.path()).unwrap();
        let set = &q["q1"];
        assert_eq!(set.relevant.iter().collect::<Vec<_>>(), vec!["d1"]);
        assert_eq!(set.judged.len(), 2);
        assert!(!set.is_relevant("d3"));
    }

    #[test]
    fn qrels_empty_and_errors() {
        let f = write_tmp("", ".tsv");
        assert!(load_qrels(f.path()).unwrap().is_empty());
        let f = write_tmp("q1\td1\t2\n", ".tsv");
        assert!(matches!(
            load_qrels(f.path()),
            Err(CorpusError::BadLabel { line: 1, .. })
        ));
        let f = write_tmp("q1 d1 1\n", ".tsv");
        assert!(matches!(
            load_qrels(f.path()),
            Err(CorpusError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn chunk_sizes() {
        let docs: Vec<u32> = (0..5).collect();
        let sizes: Vec<usize> = chunk_stream(&docs, 2)
            .unwrap()
            .iter()
            .map(|c| c.docs.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(chunk_stream(&docs[..4], 4).unwrap().len(), 1);
        assert!(chunk_stream::<u32>(&[], 3).unwrap().is_empty());
        assert!(matches!(
            chunk_stream(&docs, 0),
            Err(CorpusError::ZeroChunkSize)
        ));
    }

    proptest::proptest! {
        #[test]
        fn chunking_round_trips(len in 0usize..200, size in 1usize..50) {
            let docs: Vec<usize> = (0..len).collect();
            let chunks = chunk_stream(&docs, size).unwrap();
            proptest::prop_assert_eq!(chunks.len(), len.div_ceil(size));
            for (i, c) in chunks.iter().enumerate() {
                proptest::prop_assert_eq!(c.seq_no, i);
                if i + 1 < chunks.len() {
                    proptest::prop_assert_eq!(c.docs.len(), size);
                }
            }
            let flat: Vec<usize> = chunks.into_iter().flat_map(|c| c.docs).collect();
            proptest::prop_assert_eq!(flat, docs);
        }
    }
}
