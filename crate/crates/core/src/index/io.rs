//! Binary index container.
//!
//! ```text
//! header  magic[8] version:u32 entities:u64 items:u64 conversations:u64
//!         config_hash[32] payload_len:u64 checksum[32]
//! payload adjacency (CSR), frequency matrix (CSC), config JSON,
//!         catalog text, linked corpus JSONL
//! ```
//!
//! All integers are little-endian. The checksum is SHA-256 over the payload;
//! the config hash is SHA-256 over the config section bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{FrequencyMatrix, Index, IndexConfig, InteractionGraph};
use crate::corpus::{corpus_to_jsonl, parse_corpus, CorpusOptions};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::sparse::CsrMatrix;

pub const INDEX_MAGIC: &[u8; 8] = b"CVGRAPH\0";
pub const INDEX_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8 * 3 + 32 + 8 + 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::IndexFormat("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::IndexFormat(format!("length {v} exceeds file size")))
    }

    fn array<T, const N: usize>(&mut self, count: usize, f: impl Fn([u8; N]) -> T) -> Result<Vec<T>> {
        let bytes = self.take(
            count
                .checked_mul(N)
                .ok_or_else(|| Error::IndexFormat("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(N)
            .map(|c| f(c.try_into().expect("chunk size")))
            .collect())
    }

    fn usizes(&mut self, count: usize) -> Result<Vec<usize>> {
        let raw = self.array(count, u64::from_le_bytes)?;
        raw.into_iter()
            .map(|v| usize::try_from(v).map_err(|_| Error::IndexFormat("offset overflow".into())))
            .collect()
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::IndexFormat(format!("invalid UTF-8 section: {e}")))
    }
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

fn config_json(config: &IndexConfig) -> String {
    serde_json::to_string(config).expect("index config serializes")
}

/// Serializes an index to bytes. Output depends only on the index contents.
pub fn write_index_bytes(index: &Index) -> Vec<u8> {
    let mut p = Writer(Vec::new());
    let a = index.graph.adjacency();
    p.u64(a.dim());
    p.u64(a.nnz());
    for &v in a.indptr() {
        p.u64(v);
    }
    for &c in a.indices() {
        p.0.extend_from_slice(&c.to_le_bytes());
    }
    for &w in a.values() {
        p.0.extend_from_slice(&w.to_le_bytes());
    }
    p.0.extend_from_slice(a.tags());

    let f = &index.frequency;
    p.u64(f.rows());
    p.u64(f.cols());
    p.u64(f.nnz());
    for &v in f.colptr() {
        p.u64(v);
    }
    for &r in f.row_indices() {
        p.0.extend_from_slice(&r.to_le_bytes());
    }
    for &c in f.counts() {
        p.0.extend_from_slice(&c.to_le_bytes());
    }

    let config = config_json(&index.config);
    p.bytes(config.as_bytes());
    p.bytes(index.kg.to_text().as_bytes());
    p.bytes(corpus_to_jsonl(&index.corpus, &index.kg).as_bytes());
    let payload = p.0;

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    for n in [index.kg.entity_count(), index.kg.item_count(), index.corpus.len()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&sha256(config.as_bytes()));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&sha256(&payload));
    out.extend_from_slice(&payload);
    out
}

pub fn save_index(index: &Index, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_index_bytes(index)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<Index> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_index_bytes(&bytes)
}

/// Parses and fully validates an index container.
pub fn read_index_bytes(bytes: &[u8]) -> Result<Index> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)
        .map_err(|_| Error::IndexFormat("file too short for header".into()))?
        != INDEX_MAGIC
    {
        return Err(Error::IndexFormat("bad magic; not an index file".into()));
    }
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::IndexVersion {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let n_entities = r.u64()? as usize;
    let n_items = r.u64()? as usize;
    let n_conversations = r.u64()? as usize;
    let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let payload_len = r.u64()?;
    let checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let payload = &bytes[r.pos..];
    if (payload.len() as u64) < payload_len {
        return Err(Error::IndexFormat(format!(
            "truncated file: payload has {} of {payload_len} bytes",
            payload.len()
        )));
    }
    if payload.len() as u64 > payload_len {
        return Err(Error::IndexFormat("trailing bytes after payload".into()));
    }
    if sha256(payload) != checksum {
        return Err(Error::IndexChecksum);
    }

    let mut r = Reader { buf: payload, pos: 0 };
    let n = r.len()?;
    let nnz = r.len()?;
    let indptr = r.usizes(n + 1)?;
    let indices = r.array(nnz, u32::from_le_bytes)?;
    let values = r.array(nnz, f64::from_le_bytes)?;
    let tags = r.take(nnz)?.to_vec();
    let adjacency = CsrMatrix::from_parts(n, indptr, indices, values, tags).map_err(Error::IndexFormat)?;

    let rows = r.len()?;
    let cols = r.len()?;
    let fnnz = r.len()?;
    let colptr = r.usizes(cols + 1)?;
    let row_idx = r.array(fnnz, u32::from_le_bytes)?;
    let counts = r.array(fnnz, u32::from_le_bytes)?;
    let frequency = FrequencyMatrix::from_parts(rows, colptr, row_idx, counts)?;

    let config_text = r.text()?;
    if sha256(config_text.as_bytes()) != config_hash {
        return Err(Error::IndexFormat("config hash does not match config section".into()));
    }
    let config: IndexConfig =
        serde_json::from_str(config_text).map_err(|e| Error::IndexFormat(format!("config section: {e}")))?;
    let kg = KnowledgeGraph::parse(r.text()?, "<index catalog>", config.kg)?;
    let corpus = parse_corpus(r.text()?, "<index corpus>", &kg, CorpusOptions { strict: true })?;
    if r.pos != payload.len() {
        return Err(Error::IndexFormat("unconsumed payload bytes".into()));
    }

    if kg.entity_count() != n_entities || kg.item_count() != n_items || corpus.len() != n_conversations {
        return Err(Error::IndexFormat("header counts disagree with payload".into()));
    }
    let graph = InteractionGraph::new(n_entities, n_items, n_conversations, adjacency)?;
    let index = Index::from_parts(kg, corpus, frequency, graph, config);
    index.validate()?;
    Ok(index)
}
