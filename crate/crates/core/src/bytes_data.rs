//! Byte vocabulary, corpus ingestion and chunking.
//!
//! Vocabulary layout: `PAD = 0`, `BOS = 1`, raw byte `b` maps to `b + 2`,
//! for 258 ids in total. Every document is prefixed with `BOS` and cut into
//! windows of `chunk_len` ids; a window never spans two documents.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::stream_seed;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SPECIALS_OFFSET: TokenId = 2;
pub const VOCAB_SIZE: usize = 258;

/// Label used for "outside any entity" in byte tagging data.
pub const NON_ENTITY: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Utf8Policy {
    #[default]
    Strict,
    /// Accept arbitrary bytes.
    Permissive,
}

pub fn encode_bytes(text: &[u8], policy: Utf8Policy) -> Result<Vec<TokenId>> {
    if policy == Utf8Policy::Strict {
        if let Err(e) = std::str::from_utf8(text) {
            return Err(Error::InvalidUtf8 {
                offset: e.valid_up_to(),
            });
        }
    }
    Ok(text
        .iter()
        .map(|&b| b as TokenId + SPECIALS_OFFSET)
        .collect())
}

/// Inverse of [`encode_bytes`]; special ids are dropped.
pub fn decode_ids(ids: &[TokenId]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| is_raw_byte(id))
        .map(|&id| (id - SPECIALS_OFFSET) as u8)
        .collect()
}

pub fn is_raw_byte(id: TokenId) -> bool {
    id >= SPECIALS_OFFSET && (id as usize) < VOCAB_SIZE
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub lang: String,
}

/// Ordered set of language codes declared for a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageSet {
    codes: Vec<String>,
}

impl LanguageSet {
    pub fn new<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        for (i, c) in codes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Config("empty language code".into()));
            }
            if codes[..i].contains(c) {
                return Err(Error::Config(format!("duplicate language code `{c}`")));
            }
        }
        Ok(Self { codes })
    }

    /// Languages in order of first appearance.
    pub fn from_documents<'a, I: IntoIterator<Item = &'a Document>>(docs: I) -> Self {
        let mut codes: Vec<String> = Vec::new();
        for d in docs {
            if !codes.contains(&d.lang) {
                codes.push(d.lang.clone());
            }
        }
        Self { codes }
    }

    pub fn index(&self, code: &str) -> Result<usize> {
        self.codes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    pub fn code(&self, id: usize) -> &str {
        &self.codes[id]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }
}

/// A fixed-length window of token ids from a single document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteChunk {
    /// Always `chunk_len` long; positions past `valid_len` hold `PAD`.
    pub ids: Vec<TokenId>,
    pub valid_len: usize,
    pub language_id: usize,
}

impl ByteChunk {
    pub fn valid_ids(&self) -> &[TokenId] {
        &self.ids[..self.valid_len]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Chunker {
    pub chunk_len: usize,
    /// Documents with more bytes than this are truncated.
    pub max_doc_bytes: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct ChunkedCorpus {
    pub chunks: Vec<ByteChunk>,
    pub truncated_docs: usize,
}

impl Chunker {
    pub fn new(chunk_len: usize) -> Result<Self> {
        if chunk_len < 2 {
            return Err(Error::Config(format!("chunk length {chunk_len} < 2")));
        }
        Ok(Self {
            chunk_len,
            max_doc_bytes: None,
        })
    }

    pub fn with_max_doc_bytes(mut self, max: usize) -> Self {
        self.max_doc_bytes = Some(max);
        self
    }

    pub fn chunk<'a, I>(&self, docs: I, langs: &LanguageSet) -> Result<ChunkedCorpus>
    where
        I: IntoIterator<Item = &'a Document>,
    {
        let mut out = ChunkedCorpus::default();
        for doc in docs {
            let language_id = langs.index(&doc.lang)?;
            let mut bytes = doc.text.as_bytes();
            if let Some(max) = self.max_doc_bytes {
                if bytes.len() > max {
                    bytes = &bytes[..max];
                    out.truncated_docs += 1;
                }
            }
            let mut stream = Vec::with_capacity(bytes.len() + 1);
            stream.push(BOS);
            stream.extend(bytes.iter().map(|&b| b as TokenId + SPECIALS_OFFSET));
            for window in stream.chunks(self.chunk_len) {
                let mut ids = window.to_vec();
                ids.resize(self.chunk_len, PAD);
                out.chunks.push(ByteChunk {
                    ids,
                    valid_len: window.len(),
                    language_id,
                });
            }
        }
        if out.truncated_docs > 0 {
            log::warn!(
                "truncated {} documents to {:?} bytes",
                out.truncated_docs,
                self.max_doc_bytes
            );
        }
        Ok(out)
    }
}

pub fn chunk_documents<'a, I>(
    docs: I,
    chunk_len: usize,
    langs: &LanguageSet,
) -> Result<Vec<ByteChunk>>
where
    I: IntoIterator<Item = &'a Document>,
{
    Ok(Chunker::new(chunk_len)?.chunk(docs, langs)?.chunks)
}

/// Deterministic permutation of `0..n`, keyed by `seed` and each element index.
pub fn shuffle_order(n: usize, seed: u64) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (stream_seed(seed, i as u64), i)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: {e}", line_no + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads `{"text": .., "lang": ..}` records, one per line.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    read_jsonl(path.as_ref())
}

pub fn parse_documents(text: &str) -> Result<Vec<Document>> {
    parse_jsonl(text)
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let mut s = String::new();
    for d in docs {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceClassification,
    ByteTagging,
}

/// Raw labeled record as stored on disk. Exactly one of `label` or `tags`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub text: String,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    /// One tag per id, including the leading `BOS`.
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub ids: Vec<TokenId>,
    pub valid_len: usize,
    pub language_id: usize,
    pub label: Label,
    /// Raw text bytes covered by `ids` (after truncation).
    pub text: Vec<u8>,
}

pub fn load_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledRecord>> {
    read_jsonl(path.as_ref())
}

pub fn write_labeled(path: impl AsRef<Path>, records: &[LabeledRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Encodes labeled records as `BOS + bytes`, truncated to `max_len` ids.
///
/// Tagging records must carry one tag per text byte. Whitespace bytes are
/// relabeled [`NON_ENTITY`] and the `BOS` position is tagged [`NON_ENTITY`].
pub fn build_labeled(
    records: &[LabeledRecord],
    kind: TaskKind,
    max_len: usize,
    langs: &LanguageSet,
) -> Result<Vec<LabeledExample>> {
    if max_len < 2 {
        return Err(Error::Config(format!("sequence length {max_len} < 2")));
    }
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let language_id = langs.index(&rec.lang)?;
            let bytes = rec.text.as_bytes();
            let kept = bytes.len().min(max_len - 1);
            let mut ids = Vec::with_capacity(kept + 1);
            ids.push(BOS);
            ids.extend(
                bytes[..kept]
                    .iter()
                    .map(|&b| b as TokenId + SPECIALS_OFFSET),
            );
            let label = match (kind, rec.label, &rec.tags) {
                (TaskKind::SequenceClassification, Some(c), None) => Label::Class(c),
                (TaskKind::ByteTagging, None, Some(tags)) => {
                    if tags.len() != bytes.len() {
                        return Err(Error::Data(format!(
                            "record {i}: {} tags for {} text bytes",
                            tags.len(),
                            bytes.len()
                        )));
                    }
                    let mut aligned = Vec::with_capacity(kept + 1);
                    aligned.push(NON_ENTITY);
                    for (&b, &t) in bytes[..kept].iter().zip(tags) {
                        aligned.push(if b.is_ascii_whitespace() {
                            NON_ENTITY
                        } else {
                            t
                        });
                    }
                    Label::Tags(aligned)
                }
                (TaskKind::SequenceClassification, _, _) => {
                    return Err(Error::Data(format!(
                        "record {i}: classification data needs `label` and no `tags`"
                    )))
                }
                (TaskKind::ByteTagging, _, _) => {
                    return Err(Error::Data(format!(
                        "record {i}: tagging data needs `tags` and no `label`"
                    )))
                }
            };
            let valid_len = ids.len();
            Ok(LabeledExample {
                ids,
                valid_len,
                language_id,
                label,
                text: bytes[..kept].to_vec(),
            })
        })
        .collect()
}

/// An n-way parallel corpus: one column per language, one aligned sentence
/// per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub languages: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ParallelCorpus {
    /// Parses tab-separated text whose header row holds the language codes.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or(Error::Empty("parallel corpus has no header"))?;
        let languages: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
        LanguageSet::new(languages.iter().cloned())?;
        let mut rows = Vec::new();
        for (row, line) in lines.enumerate() {
            let cols: Vec<String> = line.split('\t').map(str::to_string).collect();
            if cols.len() != languages.len() || cols.iter().any(|c| c.is_empty()) {
                let found = cols.iter().filter(|c| !c.is_empty()).count();
                return Err(Error::RaggedRow {
                    row,
                    found,
                    expected: languages.len(),
                });
            }
            rows.push(cols);
        }
        Ok(Self { languages, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self.languages.join("\t");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn sentences(&self, lang: &str) -> Result<Vec<&str>> {
        let col = self
            .languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        Ok(self.rows.iter().map(|r| r[col].as_str()).collect())
    }

    /// UTF-8 byte length of every aligned sentence, per language.
    pub fn byte_lengths(&self) -> BTreeMap<String, Vec<usize>> {
        self.languages
            .iter()
            .enumerate()
            .map(|(col, lang)| {
                (
                    lang.clone(),
                    self.rows.iter().map(|r| r[col].len()).collect(),
                )
            })
            .collect()
    }
}

pub fn load_parallel_corpus(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<usize>>> {
    Ok(ParallelCorpus::load(path)?.byte_lengths())
}

/// Counts documents per language; handy for logging.
pub fn language_histogram(docs: &[Document]) -> HashMap<&str, usize> {
    let mut h = HashMap::new();
    for d in docs {
        *h.entry(d.lang.as_str()).or_insert(0) += 1;
    }
    h
}
