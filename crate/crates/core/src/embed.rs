//! Feature-hashing text embedder, vector file formats, and the cosine kernel.

use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes opening a binary vector file.
pub const VECTOR_MAGIC: &[u8; 4] = b"SAKV";

const LOAD_TOLERANCE: f64 = 1e-3;
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vector {id:?} has a non-finite component")]
    NonFiniteComponent { id: String },
    #[error("vector {id:?} has zero norm")]
    NotNormalizable { id: String },
    #[error("vector {id:?} has norm {norm}, too far from 1 to renormalize")]
    NotUnitNorm { id: String, norm: f64 },
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("embedding dimension must be at least 2, got {0}")]
    BadDim(usize),
    #[error("{path}: malformed vector file: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub hash_seed: u64,
    pub lowercase: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            hash_seed: 0,
            lowercase: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2 {
            return Err(EmbedError::BadDim(self.dim));
        }
        Ok(())
    }
}

/// A document id paired with its unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDoc {
    pub doc_id: String,
    vec: Vec<f64>,
}

impl EmbeddedDoc {
    /// Wraps a vector, normalizing it to unit length.
    pub fn new(doc_id: impl Into<String>, vec: Vec<f64>) -> Result<Self, EmbedError> {
        let doc_id = doc_id.into();
        let vec = normalized(vec, &doc_id)?;
        Ok(Self { doc_id, vec })
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// An embedded query. Same invariants as [`EmbeddedDoc`].
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVec {
    pub query_id: String,
    vec: Vec<f64>,
}

impl QueryVec {
    pub fn new(query_id: impl Into<String>, vec: Vec<f64>) -> Result<Self, EmbedError> {
        let query_id = query_id.into();
        let vec = normalized(vec, &query_id)?;
        Ok(Self { query_id, vec })
    }

    pub fn from_text(
        query_id: impl Into<String>,
        text: &str,
        cfg: &EmbeddingConfig,
    ) -> Result<Self, EmbedError> {
        Ok(Self {
            query_id: query_id.into(),
            vec: embed_text(text, cfg)?,
        })
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }
}

fn normalized(mut vec: Vec<f64>, id: &str) -> Result<Vec<f64>, EmbedError> {
    if vec.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFiniteComponent { id: id.to_string() });
    }
    let n = norm(&vec);
    if n < ZERO_NORM {
        return Err(EmbedError::NotNormalizable { id: id.to_string() });
    }
    if n != 1.0 {
        vec.iter_mut().for_each(|x| *x /= n);
    }
    Ok(vec)
}

/// Splits on runs of non-alphanumeric characters, dropping empty tokens.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            if lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed);
    h.write(token.as_bytes());
    h.finish()
}

/// Embeds text as a signed, hashed term-frequency vector of unit length.
///
/// Each token lands in bucket `hash mod dim` with sign taken from the parity
/// of the hash's set bits. Text without tokens maps to `e0`.
pub fn embed_text(text: &str, cfg: &EmbeddingConfig) -> Result<Vec<f64>, EmbedError> {
    cfg.validate()?;
    let mut acc = vec![0.0f64; cfg.dim];
    for token in tokenize(text, cfg.lowercase) {
        let h = token_hash(&token, cfg.hash_seed);
        let bucket = (h % cfg.dim as u64) as usize;
        let sign = if h.count_ones().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        acc[bucket] += sign;
    }
    let n = norm(&acc);
    if n == 0.0 {
        acc[0] = 1.0;
    } else {
        acc.iter_mut().for_each(|x| *x /= n);
    }
    Ok(acc)
}

pub fn embed_doc(
    doc_id: &str,
    text: &str,
    cfg: &EmbeddingConfig,
) -> Result<EmbeddedDoc, EmbedError> {
    Ok(EmbeddedDoc {
        doc_id: doc_id.to_string(),
        vec: embed_text(text, cfg)?,
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, normalizing both sides and clamping into `[-1, 1]`.
pub fn cos_sim(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    id: String,
    vec: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> EmbedError {
    EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a binary (`SAKV`) or JSONL vector file, sniffing the magic bytes.
///
/// Vectors within 1e-3 of unit norm are renormalized; others are rejected.
/// Trailing bytes after the last binary record are ignored, so index files
/// load here as plain vector files.
pub fn load_vectors(path: &Path) -> Result<Vec<EmbeddedDoc>, EmbedError> {
    let mut file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let head = file.fill_buf().map_err(|e| io_err(path, e))?;
    let raw = if head.starts_with(VECTOR_MAGIC) {
        read_binary_records(&mut file, path)?
    } else {
        read_jsonl_records(file, path)?
    };
    let mut dim = None;
    raw.into_iter()
        .map(|(id, vec)| {
            let expected = *dim.get_or_insert(vec.len());
            if vec.len() != expected {
                return Err(EmbedError::DimMismatch {
                    expected,
                    found: vec.len(),
                });
            }
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::NonFiniteComponent { id });
            }
            let n = norm(&vec);
            if n < ZERO_NORM {
                return Err(EmbedError::NotNormalizable { id });
            }
            if (n - 1.0).abs() > LOAD_TOLERANCE {
                return Err(EmbedError::NotUnitNorm { id, norm: n });
            }
            let vec = vec.into_iter().map(|x| x / n).collect();
            Ok(EmbeddedDoc { doc_id: id, vec })
        })
        .collect()
}

fn read_jsonl_records<R: BufRead>(
    r: R,
    path: &Path,
) -> Result<Vec<(String, Vec<f64>)>, EmbedError> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VectorRecord = serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", idx + 1),
        })?;
        out.push((rec.id, rec.vec));
    }
    Ok(out)
}

pub(crate) fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &Path,
) -> Result<(), EmbedError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => EmbedError::Malformed {
            path: path.to_path_buf(),
            reason: "truncated file".into(),
        },
        _ => io_err(path, e),
    })
}

fn read_binary_records<R: Read>(
    r: &mut R,
    path: &Path,
) -> Result<Vec<(String, Vec<f64>)>, EmbedError> {
    let mut header = [0u8; 16];
    read_exact_or(r, &mut header, path)?;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    let mut floats = vec![0u8; dim * 4];
    for _ in 0..count {
        let mut len = [0u8; 2];
        read_exact_or(r, &mut len, path)?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(r, &mut id, path)?;
        let id = String::from_utf8(id).map_err(|_| EmbedError::Malformed {
            path: path.to_path_buf(),
            reason: "id is not UTF-8".into(),
        })?;
        read_exact_or(r, &mut floats, path)?;
        let vec = floats
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((id, vec));
    }
    Ok(out)
}

/// Writes the binary vector format: `SAKV`, u32 dim, u64 count, then per
/// record a u16 id length, the id bytes and `dim` little-endian f32s.
pub fn write_vectors_binary<'a, W, I>(w: &mut W, dim: usize, docs: I) -> std::io::Result<()>
where
    W: Write,
    I: ExactSizeIterator<Item = &'a EmbeddedDoc>,
{
    w.write_all(VECTOR_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(docs.len() as u64).to_le_bytes())?;
    for doc in docs {
        let id = doc.doc_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "document id longer than 65535 bytes",
            )
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        for &x in &doc.vec {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_vectors_jsonl<W: Write>(w: &mut W, docs: &[EmbeddedDoc]) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    for doc in docs {
        let rec = VectorRecord {
            id: doc.doc_id.clone(),
            vec: doc.vec.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Biden, 2020!", true), vec!["biden", "2020"]);
        assert!(tokenize("", true).is_empty());
        assert_eq!(tokenize("A-a", true), vec!["a", "a"]);
        assert_eq!(tokenize("A-a", false), vec!["A", "a"]);
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let cfg = EmbeddingConfig::default();
        let a = embed_text("streaming data", &cfg).unwrap();
        let b = embed_text("streaming data", &cfg).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!((norm(&a) - 1.0).abs() <= 1e-6);
        assert_eq!(a.len(), 256);
    }

    #[test]
    fn empty_text_falls_back_to_e0() {
        let cfg = EmbeddingConfig {
            dim: 8,
            ..Default::default()
        };
        let v = embed_text("", &cfg).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let v = embed_text("!!! ...", &cfg).unwrap();
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn bad_dim_rejected() {
        let cfg = EmbeddingConfig {
            dim: 1,
            ..Default::default()
        };
        assert!(matches!(embed_text("x", &cfg), Err(EmbedError::BadDim(1))));
    }

    #[test]
    fn seed_changes_embedding() {
        let a = embed_text("alpha beta gamma", &EmbeddingConfig::default()).unwrap();
        let b = embed_text(
            "alpha beta gamma",
            &EmbeddingConfig {
                hash_seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cos_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cos_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        // (1,1)/sqrt2 . (1,0) = 1/sqrt2 = 0.70711
        assert!(
            (cos_sim(&[s, s], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs()
                < 1e-12
        );
        assert!(matches!(
            cos_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(EmbedError::ZeroNorm)
        ));
        assert!(matches!(
            cos_sim(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(EmbedError::DimMismatch { .. })
        ));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 8).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(a in vec_strategy(), b in vec_strategy()) {
            let ab = cos_sim(&a, &b).unwrap();
            let ba = cos_sim(&b, &a).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn cosine_scale_invariant(a in vec_strategy(), b in vec_strategy()) {
            let b3: Vec<f64> = b.iter().map(|x| 3.0 * x).collect();
            prop_assert!((cos_sim(&a, &b).unwrap() - cos_sim(&a, &b3).unwrap()).abs() < 1e-9);
        }
    }

    fn write_tmp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn binary_vectors_load() {
        let cfg = EmbeddingConfig::default();
        let docs: Vec<EmbeddedDoc> = ["one", "two", "three"]
            .iter()
            .map(|t| embed_doc(t, t, &cfg).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_vectors_binary(&mut buf, 256, docs.iter()).unwrap();
        buf.extend_from_slice(b"trailing footer bytes");
        let f = write_tmp(&buf);
        let loaded = load_vectors(f.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&docs) {
            assert_eq!(a.doc_id, b.doc_id);
            assert!((norm(a.vec()) - 1.0).abs() < 1e-12);
            assert!(cos_sim(a.vec(), b.vec()).unwrap() > 1.0 - 1e-6);
        }
    }

    #[test]
    fn jsonl_vector_errors() {
        let f =
            write_tmp(b"{\"id\":\"a\",\"vec\":[1.0,0.0]}\n{\"id\":\"b\",\"vec\":[1.0,0.0,0.0]}\n");
        assert!(matches!(
            load_vectors(f.path()),
            Err(EmbedError::DimMismatch { .. })
        ));
        let f = write_tmp(b"{\"id\":\"z\",\"vec\":[0.0,0.0]}\n");
        assert!(matches!(
            load_vectors(f.path()),
            Err(EmbedError::NotNormalizable { .. })
        ));
        let f = write_tmp(b"{\"id\":\"big\",\"vec\":[3.0,0.0]}\n");
        assert!(matches!(
            load_vectors(f.path()),
            Err(EmbedError::NotUnitNorm { .. })
        ));
        let f = write_tmp(b"{\"id\":\"ok\",\"vec\":[0.6,0.8004]}\n");
        let v = load_vectors(f.path()).unwrap();
        assert!((norm(v[0].vec()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_non_finite_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(VECTOR_MAGIC);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.push(b'n');
        buf.extend_from_slice(&f32::NAN.to_le_bytes());
        buf.extend_from_slice(&1f32.to_le_bytes());
        let f = write_tmp(&buf);
        assert!(matches!(
            load_vectors(f.path()),
            Err(EmbedError::NonFiniteComponent { .. })
        ));
    }
}
