//! Document ingestion, chunking and BM25 retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{sha256_hex, ChunkRef, Query};

pub const DEFAULT_CHUNK_SIZE: usize = 1200;
pub const DEFAULT_CHUNK_OVERLAP: usize = 200;
pub const DEFAULT_SAMPLE_SIZE: usize = 12;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const INDEX_FILE: &str = "index.json";
const MANIFEST_FILE: &str = "corpus_manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate doc_id {0}")]
    DuplicateDoc(String),
    #[error("overlap {overlap} must be smaller than chunk size {size}")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("empty query")]
    EmptyQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index manifest invalidated: {0}")]
    ManifestMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed index artifact: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub location: ChunkRef,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingParams {
    pub size: usize,
    pub overlap: usize,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        Self {
            size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    #[default]
    Biased,
    Uniform,
}

/// Byte offset of every char boundary, plus the end of the string.
fn char_boundaries(text: &str) -> Vec<usize> {
    text.char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect()
}

/// Slices `text` by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    let bounds = char_boundaries(text);
    if start > end || end >= bounds.len() {
        return None;
    }
    text.get(bounds[start]..bounds[end])
}

/// Splits a document into windows of at most `size` characters, each
/// starting `size - overlap` characters after the previous one.
pub fn chunk_document(doc: &Document, size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    if size == 0 || overlap >= size {
        return Err(CorpusError::InvalidChunking { size, overlap });
    }
    let bounds = char_boundaries(&doc.text);
    let len = bounds.len() - 1;
    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + size).min(len);
        chunks.push(Chunk {
            location: ChunkRef {
                doc_id: doc.doc_id.clone(),
                chunk_index: chunks.len(),
                char_span: (start, end),
            },
            text: doc.text[bounds[start]..bounds[end]].to_string(),
        });
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Lowercases, splits on non-alphanumerics and drops one-character tokens.
pub fn normalize_terms(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() > 1)
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk: usize,
    pub tf: u32,
}

/// Inverted index over chunk terms with BM25 statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LexicalIndex {
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub chunk_lengths: Vec<u32>,
    pub average_length: f64,
}

impl LexicalIndex {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut chunk_lengths = Vec::new();
        for (chunk, text) in texts.into_iter().enumerate() {
            let terms = normalize_terms(text);
            chunk_lengths.push(terms.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { chunk, tf });
            }
        }
        let total: u64 = chunk_lengths.iter().map(|&l| l as u64).sum();
        let average_length = if chunk_lengths.is_empty() {
            0.0
        } else {
            total as f64 / chunk_lengths.len() as f64
        };
        Self {
            postings,
            chunk_lengths,
            average_length,
        }
    }

    pub fn chunk_count(&self) -> usize {
        self.chunk_lengths.len()
    }

    /// Non-negative BM25 idf, `ln(1 + (N - n + 0.5) / (n + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.chunk_count() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// BM25 score of every chunk for the given (deduplicated) query terms.
    pub fn scores(&self, terms: &BTreeSet<String>) -> Vec<f64> {
        let mut scores = vec![0.0; self.chunk_count()];
        for term in terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in postings {
                let len = self.chunk_lengths[p.chunk] as f64;
                scores[p.chunk] += idf * bm25_tf(p.tf as f64, len, self.average_length);
            }
        }
        scores
    }
}

/// Saturated term-frequency component of BM25.
pub fn bm25_tf(tf: f64, chunk_len: f64, average_len: f64) -> f64 {
    let norm = if average_len > 0.0 {
        1.0 - BM25_B + BM25_B * chunk_len / average_len
    } else {
        1.0
    };
    tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub docs: usize,
    pub chunks: usize,
}

/// Ingested documents, their chunks, and the lexical index. Read-only once
/// built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub params: ChunkingParams,
    pub documents: Vec<Document>,
    pub chunks: Vec<Chunk>,
    pub index: LexicalIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub documents: usize,
    pub chunks: usize,
    pub content_digest: String,
}

impl Corpus {
    pub fn from_documents(mut documents: Vec<Document>, params: ChunkingParams) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for d in &documents {
            if !seen.insert(d.doc_id.clone()) {
                return Err(CorpusError::DuplicateDoc(d.doc_id.clone()));
            }
        }
        documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let mut chunks = Vec::new();
        for d in &documents {
            chunks.extend(chunk_document(d, params.size, params.overlap)?);
        }
        let index = LexicalIndex::build(chunks.iter().map(|c| c.text.as_str()));
        Ok(Self {
            params,
            documents,
            chunks,
            index,
        })
    }

    /// Reads JSONL with one `{doc_id, title, text}` object per line.
    pub fn ingest_jsonl<R: BufRead>(reader: R, params: ChunkingParams) -> Result<Self, CorpusError> {
        let mut documents = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| CorpusError::Line {
                line: line_no,
                message,
            };
            let json: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| err(format!("invalid JSON: {e}")))?;
            let field = |name: &str| -> Result<String, CorpusError> {
                match json.get(name) {
                    None | Some(serde_json::Value::Null) => Err(err(format!("missing field {name}"))),
                    Some(serde_json::Value::String(s)) => Ok(s.clone()),
                    Some(_) => Err(err(format!("field {name} must be a string"))),
                }
            };
            let doc = Document {
                doc_id: field("doc_id")?,
                title: field("title")?,
                text: field("text")?,
            };
            if doc.text.is_empty() {
                return Err(err("field text is empty".into()));
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(CorpusError::DuplicateDoc(doc.doc_id));
            }
            documents.push(doc);
        }
        Self::from_documents(documents, params)
    }

    pub fn ingest_path(path: &Path, params: ChunkingParams) -> Result<Self, CorpusError> {
        let file = fs::File::open(path)?;
        Self::ingest_jsonl(std::io::BufReader::new(file), params)
    }

    pub fn counts(&self) -> IngestCounts {
        IngestCounts {
            docs: self.documents.len(),
            chunks: self.chunks.len(),
        }
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .ok()
            .map(|i| &self.documents[i])
    }

    pub fn chunk(&self, location: &ChunkRef) -> Option<&Chunk> {
        self.chunks.iter().find(|c| {
            c.location.doc_id == location.doc_id && c.location.chunk_index == location.chunk_index
        })
    }

    /// Original document text at a span, if the span is in range.
    pub fn resolve_span(&self, location: &ChunkRef) -> Option<&str> {
        let doc = self.document(&location.doc_id)?;
        char_slice(&doc.text, location.char_span.0, location.char_span.1)
    }

    /// Top-`k` chunks by BM25, ties broken by `(doc_id, chunk_index)`.
    pub fn retrieve(&self, query_text: &str, k: usize) -> Result<Vec<(&Chunk, f64)>, CorpusError> {
        if k == 0 {
            return Err(CorpusError::ZeroK);
        }
        let terms: BTreeSet<String> = normalize_terms(query_text).into_iter().collect();
        if terms.is_empty() {
            return Err(CorpusError::EmptyQuery);
        }
        let scores = self.index.scores(&terms);
        // chunks are stored in (doc_id, chunk_index) order, so a stable sort
        // on score alone applies the tie-break
        let mut order: Vec<usize> = (0..self.chunks.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| (&self.chunks[i], scores[i]))
            .collect())
    }

    /// The chunk sample that seeds the initial schema hypothesis.
    pub fn sample_for_discovery(&self, k: usize, query: &Query, mode: SampleMode) -> Result<Vec<&Chunk>, CorpusError> {
        match mode {
            SampleMode::Biased => Ok(self.retrieve(&query.text, k)?.into_iter().map(|(c, _)| c).collect()),
            SampleMode::Uniform => {
                if k == 0 {
                    return Err(CorpusError::ZeroK);
                }
                if normalize_terms(&query.text).is_empty() {
                    return Err(CorpusError::EmptyQuery);
                }
                let digest = sha256_hex(query.text.as_bytes());
                let seed = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = self.chunks.len();
                let mut picked = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
                picked.sort_unstable();
                Ok(picked.into_iter().map(|i| &self.chunks[i]).collect())
            }
        }
    }

    pub fn manifest(&self) -> CorpusManifest {
        let body = serde_json::to_string(&self.documents).expect("documents serialize");
        CorpusManifest {
            chunk_size: self.params.size,
            chunk_overlap: self.params.overlap,
            documents: self.documents.len(),
            chunks: self.chunks.len(),
            content_digest: sha256_hex(body.as_bytes()),
        }
    }

    /// Writes the index artifact and its manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let index = serde_json::to_string(self).map_err(|e| CorpusError::Format(e.to_string()))?;
        fs::write(dir.join(INDEX_FILE), index)?;
        let manifest =
            serde_json::to_string_pretty(&self.manifest()).map_err(|e| CorpusError::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    /// Loads a saved index. When `expected` is given, a manifest recorded
    /// with different chunking parameters is rejected.
    pub fn load(dir: &Path, expected: Option<ChunkingParams>) -> Result<Self, CorpusError> {
        let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
            .map_err(|e| CorpusError::Format(e.to_string()))?;
        if let Some(p) = expected {
            if p.size != manifest.chunk_size || p.overlap != manifest.chunk_overlap {
                return Err(CorpusError::ManifestMismatch(format!(
                    "index built with size {} overlap {}, requested size {} overlap {}",
                    manifest.chunk_size, manifest.chunk_overlap, p.size, p.overlap
                )));
            }
        }
        let corpus: Corpus = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)
            .map_err(|e| CorpusError::Format(e.to_string()))?;
        if corpus.manifest() != manifest {
            return Err(CorpusError::ManifestMismatch("index content does not match manifest".into()));
        }
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            title: id.to_uppercase(),
            text: text.into(),
        }
    }

    fn spans(chunks: &[Chunk]) -> Vec<(usize, usize)> {
        chunks.iter().map(|c| c.location.char_span).collect()
    }

    #[test]
    fn stride_three_cover() {
        let chunks = chunk_document(&doc("d", "abcdefghij"), 4, 1).unwrap();
        assert_eq!(spans(&chunks), vec![(0, 4), (3, 7), (6, 10)]);
        assert_eq!(chunks[1].text, "defg");
    }

    #[test]
    fn short_text_single_chunk() {
        let chunks = chunk_document(&doc("d", "abc"), 10, 2).unwrap();
        assert_eq!(spans(&chunks), vec![(0, 3)]);
    }

    #[test]
    fn overlap_must_be_smaller() {
        assert!(matches!(
            chunk_document(&doc("d", "abc"), 4, 4),
            Err(CorpusError::InvalidChunking { .. })
        ));
    }

    #[test]
    fn ingest_counts_and_errors() {
        let ok = "{\"doc_id\":\"a\",\"title\":\"A\",\"text\":\"alpha beta\"}\n\
                  {\"doc_id\":\"b\",\"title\":\"B\",\"text\":\"gamma\"}\n\
                  {\"doc_id\":\"c\",\"title\":\"C\",\"text\":\"delta\"}\n";
        let corpus = Corpus::ingest_jsonl(ok.as_bytes(), ChunkingParams::default()).unwrap();
        assert_eq!(corpus.counts(), IngestCounts { docs: 3, chunks: 3 });

        let missing = "{\"doc_id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\n{\"doc_id\":\"b\",\"title\":\"B\"}\n";
        let e = Corpus::ingest_jsonl(missing.as_bytes(), ChunkingParams::default()).unwrap_err();
        assert_eq!(e.to_string(), "line 2: missing field text");

        let dup = "{\"doc_id\":\"d1\",\"title\":\"A\",\"text\":\"x\"}\n{\"doc_id\":\"d1\",\"title\":\"B\",\"text\":\"y\"}\n";
        let e = Corpus::ingest_jsonl(dup.as_bytes(), ChunkingParams::default()).unwrap_err();
        assert!(e.to_string().contains("d1"));

        let bad = "not json\n";
        let e = Corpus::ingest_jsonl(bad.as_bytes(), ChunkingParams::default()).unwrap_err();
        assert!(e.to_string().starts_with("line 1: invalid JSON"));
    }

    #[test]
    fn unique_term_ranks_first() {
        // two chunks of equal length; "zebra" only in a
        // idf = ln(1 + (2 - 1 + 0.5)/(1 + 0.5)) = ln 2, tf part = 2.2/2.2 = 1
        let corpus = Corpus::from_documents(
            vec![doc("a", "zebra river"), doc("b", "horse river")],
            ChunkingParams::default(),
        )
        .unwrap();
        let hits = corpus.retrieve("zebra", 2).unwrap();
        assert_eq!(hits[0].0.location.doc_id, "a");
        assert!((hits[0].1 - 2f64.ln()).abs() < 1e-12);
        assert_eq!(hits[1].1, 0.0);
    }

    #[test]
    fn clamp_and_tie_break() {
        let docs = (0..5).map(|i| doc(&format!("d{i}"), "the cat")).rev().collect();
        let corpus = Corpus::from_documents(docs, ChunkingParams::default()).unwrap();
        let hits = corpus.retrieve("the", 100).unwrap();
        assert_eq!(hits.len(), 5);
        let ids: Vec<_> = hits.iter().map(|(c, _)| c.location.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["d0", "d1", "d2", "d3", "d4"]);
        assert!(matches!(corpus.retrieve("a !", 3), Err(CorpusError::EmptyQuery)));
        assert!(matches!(corpus.retrieve("cat", 0), Err(CorpusError::ZeroK)));
    }

    #[test]
    fn sampling_modes() {
        let docs = (0..30).map(|i| doc(&format!("d{i:02}"), &format!("filler text number{i}"))).collect();
        let corpus = Corpus::from_documents(docs, ChunkingParams::default()).unwrap();
        let q = Query::from_text("number3 founding").unwrap();
        let biased = corpus.sample_for_discovery(12, &q, SampleMode::Biased).unwrap();
        assert_eq!(biased.len(), 12);
        assert_eq!(biased[0].location.doc_id, "d03");
        let uniform = corpus.sample_for_discovery(12, &q, SampleMode::Uniform).unwrap();
        assert_eq!(uniform.len(), 12);
        let again = corpus.sample_for_discovery(12, &q, SampleMode::Uniform).unwrap();
        assert_eq!(uniform, again);
        let q = Query::from_text("nothing overlapping").unwrap();
        assert_eq!(corpus.sample_for_discovery(12, &q, SampleMode::Biased).unwrap().len(), 12);
    }

    #[test]
    fn save_load_and_manifest_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = Corpus::from_documents(vec![doc("a", "some text here")], ChunkingParams { size: 5, overlap: 1 }).unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path(), Some(ChunkingParams { size: 5, overlap: 1 })).unwrap();
        assert_eq!(back, corpus);
        assert!(matches!(
            Corpus::load(dir.path(), Some(ChunkingParams::default())),
            Err(CorpusError::ManifestMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn chunking_is_lossless(text in "[a-zé ]{1,80}", size in 1usize..20, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size as f64) * overlap_frac) as usize;
            let overlap = overlap.min(size - 1);
            let d = doc("d", &text);
            let chunks = chunk_document(&d, size, overlap).unwrap();
            let mut rebuilt = String::new();
            let mut covered = 0;
            for (i, c) in chunks.iter().enumerate() {
                let (s, e) = c.location.char_span;
                prop_assert!(e - s <= size);
                prop_assert_eq!(char_slice(&text, s, e).unwrap(), c.text.as_str());
                if i + 1 < chunks.len() {
                    prop_assert_eq!(chunks[i + 1].location.char_span.0, e - overlap);
                }
                rebuilt.push_str(char_slice(&text, covered.max(s), e).unwrap());
                covered = e;
            }
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn extra_occurrence_never_lowers_score(tf in 1u32..20, len in 20u32..60, avg in 5.0f64..80.0) {
            let before = bm25_tf(tf as f64, len as f64, avg);
            let after = bm25_tf(tf as f64 + 1.0, len as f64, avg);
            prop_assert!(after >= before);
        }
    }
}
