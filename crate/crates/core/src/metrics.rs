//! Evaluation: bits per byte, compression statistics, tokens per sample,
//! task metrics, segmentation inspection and the BPE comparator.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes_data::{
    is_raw_byte, ByteChunk, Label, LabeledExample, ParallelCorpus, TaskKind, TokenId, BOS,
    NON_ENTITY, SPECIALS_OFFSET,
};
use crate::calibration::{mean, population_std};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Hourglass};
use crate::parallel::map_indexed;

/// Summed next-byte NLL; sums from disjoint corpora add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BpbReport {
    pub nll_bits: f64,
    pub n_bytes: usize,
}

impl BpbReport {
    pub fn bpb(&self) -> f64 {
        self.nll_bits / self.n_bytes as f64
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            nll_bits: self.nll_bits + other.nll_bits,
            n_bytes: self.n_bytes + other.n_bytes,
        }
    }
}

/// Deterministic-mode bits per byte over raw-byte targets.
pub fn bits_per_byte(model: &Hourglass, chunks: &[ByteChunk]) -> Result<BpbReport> {
    let parts = map_indexed(chunks, |_, chunk| -> Result<BpbReport> {
        let ids = chunk.valid_ids();
        if ids.len() < 2 {
            return Ok(BpbReport::default());
        }
        let out = model.forward(ids, &ForwardOptions::deterministic())?;
        let mut report = BpbReport::default();
        for (t, &target) in ids[1..].iter().enumerate() {
            if !is_raw_byte(target) {
                continue;
            }
            let row = out.logits.row(t);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            report.nll_bits += (lse - row[target as usize]) / std::f64::consts::LN_2;
            report.n_bytes += 1;
        }
        Ok(report)
    });
    let mut total = BpbReport::default();
    for p in parts {
        total = total.merge(p?);
    }
    if total.n_bytes == 0 {
        return Err(Error::Empty("no raw-byte targets to score"));
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub language: String,
    /// Mean of per-sequence `valid_len / k`.
    pub mean_rate: f64,
    pub std_rate: f64,
    pub n_sequences: usize,
}

impl CompressionStats {
    pub fn from_rates(language: &str, rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Empty("no sequences for compression statistics"));
        }
        Ok(Self {
            language: language.to_string(),
            mean_rate: mean(rates),
            std_rate: population_std(rates),
            n_sequences: rates.len(),
        })
    }
}

/// `(k, valid_len)` of every chunk under deterministic boundaries.
pub fn boundary_counts(model: &Hourglass, chunks: &[ByteChunk]) -> Result<Vec<(usize, usize)>> {
    map_indexed(chunks, |_, chunk| -> Result<(usize, usize)> {
        let out = model.forward(chunk.valid_ids(), &ForwardOptions::deterministic())?;
        Ok((out.mask.k(), chunk.valid_len))
    })
    .into_iter()
    .collect()
}

/// Compression statistics over the chunks of `language_id`.
pub fn compression_stats(
    model: &Hourglass,
    chunks: &[ByteChunk],
    language_id: usize,
    language: &str,
) -> Result<CompressionStats> {
    let own: Vec<ByteChunk> = chunks
        .iter()
        .filter(|c| c.language_id == language_id)
        .cloned()
        .collect();
    let rates: Vec<f64> = boundary_counts(model, &own)?
        .into_iter()
        .map(|(k, n)| n as f64 / k as f64)
        .collect();
    CompressionStats::from_rates(language, &rates)
}

/// Boundary decisions over `BOS + bytes`, in windows of the model's
/// `max_len` (each window restarts with `BOS`).
fn window_masks(model: &Hourglass, bytes: &[u8]) -> Result<Vec<Vec<bool>>> {
    let width = model.config().max_len - 1;
    if width == 0 {
        return Err(Error::Config(
            "max_len must exceed 1 to segment text".into(),
        ));
    }
    let mut windows: Vec<&[u8]> = bytes.chunks(width).collect();
    if windows.is_empty() {
        windows.push(&[]);
    }
    windows
        .into_iter()
        .map(|w| {
            let mut ids = Vec::with_capacity(w.len() + 1);
            ids.push(BOS);
            ids.extend(w.iter().map(|&b| b as TokenId + SPECIALS_OFFSET));
            Ok(model
                .forward(&ids, &ForwardOptions::deterministic())?
                .mask
                .hard)
        })
        .collect()
}

/// Learned segmentation of a text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Byte spans of the segments; they partition `[0, text.len())`.
    pub spans: Vec<Range<usize>>,
    /// Number of text segments (`spans.len()`).
    pub count: usize,
    /// Compression `N / k` over the `BOS`-prefixed ids.
    pub rate: f64,
}

impl Segmentation {
    /// Builds the segmentation from per-window masks over `BOS + bytes`.
    /// Each window's `BOS` joins its first segment; a segment holding only
    /// `BOS` contributes no text span.
    pub fn from_masks(text_len: usize, masks: &[Vec<bool>]) -> Self {
        let mut spans = Vec::new();
        let (mut k, mut n) = (0, 0);
        let mut offset = 0;
        for mask in masks {
            let mut start = 0;
            for (t, &b) in mask.iter().enumerate() {
                let forced = t + 1 == mask.len();
                if b || forced {
                    k += 1;
                    let (s, e) = (start.max(1) - 1, t);
                    if e > s {
                        spans.push(offset + s..offset + e);
                    }
                    start = t + 1;
                }
            }
            n += mask.len();
            offset += mask.len() - 1;
        }
        debug_assert_eq!(offset, text_len);
        let count = spans.len();
        Self {
            spans,
            count,
            rate: if k == 0 { 0.0 } else { n as f64 / k as f64 },
        }
    }

    /// Text with U+2502 between segments. Separators falling inside a
    /// multi-byte character move to the next character boundary.
    pub fn render(&self, text: &[u8]) -> String {
        let s = String::from_utf8_lossy(text);
        if s.len() != text.len() {
            return self.render_lossy(text);
        }
        let mut out = String::with_capacity(text.len() + 3 * self.spans.len());
        let mut last = 0;
        for span in &self.spans {
            let mut cut = span.end;
            while cut < s.len() && !s.is_char_boundary(cut) {
                cut += 1;
            }
            if cut <= last {
                continue;
            }
            out.push_str(&s[last..cut]);
            if cut < s.len() {
                out.push('\u{2502}');
            }
            last = cut;
        }
        out.push_str(&s[last..]);
        out
    }

    fn render_lossy(&self, text: &[u8]) -> String {
        let parts: Vec<String> = self
            .spans
            .iter()
            .map(|r| String::from_utf8_lossy(&text[r.clone()]).into_owned())
            .collect();
        parts.join("\u{2502}")
    }
}

/// Deterministic segmentation of `text` by `model`.
pub fn inspect_tokenization(model: &Hourglass, text: &[u8]) -> Result<Segmentation> {
    Ok(Segmentation::from_masks(
        text.len(),
        &window_masks(model, text)?,
    ))
}

/// Number of segments (boundaries, `BOS` included) the model emits for a
/// sentence.
pub fn model_token_count(model: &Hourglass, text: &[u8]) -> Result<usize> {
    Ok(window_masks(model, text)?
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count())
        .sum())
}

#[derive(Clone, Copy, Debug)]
pub enum Tokenizer<'a> {
    Model(&'a Hourglass),
    Bpe(&'a BpeModel),
}

/// Mean token count per aligned sentence, per language.
pub fn tokens_per_sample(
    tokenizer: Tokenizer<'_>,
    corpus: &ParallelCorpus,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for lang in &corpus.languages {
        let sentences = corpus.sentences(lang)?;
        let counts = map_indexed(&sentences, |_, s| -> Result<usize> {
            match tokenizer {
                Tokenizer::Model(m) => model_token_count(m, s.as_bytes()),
                Tokenizer::Bpe(b) => Ok(b.encode(s.as_bytes()).tokens.len()),
            }
        });
        let counts = counts.into_iter().collect::<Result<Vec<_>>>()?;
        let n = counts.len().max(1) as f64;
        out.insert(lang.clone(), counts.iter().sum::<usize>() as f64 / n);
    }
    Ok(out)
}

/// Byte-level BPE. Ids `0..256` are bytes; id `256 + i` is merge `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    pub merges: Vec<(u32, u32)>,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeEncoding {
    pub tokens: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

/// Splits text before every space that follows a non-space byte, so merges
/// never cross a word boundary (the space stays with the next word).
fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let mut start = 0;
    for t in 1..text.len() {
        if text[t] == b' ' && text[t - 1] != b' ' {
            pieces.push(&text[start..t]);
            start = t;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

fn merge_pair(symbols: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy pair-merge training. Each round merges the most frequent adjacent
/// pair (ties go to the pair seen first); training stops early once no pair
/// occurs twice.
pub fn bpe_train<T: AsRef<[u8]>>(corpus: &[T], vocab_size: usize) -> Result<BpeModel> {
    if vocab_size <= 256 {
        return Err(Error::Config(format!(
            "BPE vocab size {vocab_size} must exceed 256"
        )));
    }
    let mut index: HashMap<&[u8], usize> = HashMap::new();
    let mut pieces: Vec<(Vec<u32>, usize)> = Vec::new();
    for text in corpus {
        for piece in pretokenize(text.as_ref()) {
            let slot = *index.entry(piece).or_insert_with(|| {
                pieces.push((piece.iter().map(|&b| b as u32).collect(), 0));
                pieces.len() - 1
            });
            pieces[slot].1 += 1;
        }
    }
    let mut merges = Vec::new();
    while 256 + merges.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), (usize, usize)> = HashMap::new();
        let mut seen = 0;
        for (symbols, freq) in &pieces {
            for w in symbols.windows(2) {
                let e = counts.entry((w[0], w[1])).or_insert((0, seen));
                e.0 += freq;
                seen += 1;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)));
        let Some((pair, (count, _))) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let id = (256 + merges.len()) as u32;
        for (symbols, _) in &mut pieces {
            merge_pair(symbols, pair, id);
        }
        merges.push(pair);
    }
    Ok(BpeModel { merges, vocab_size })
}

impl BpeModel {
    pub fn encode(&self, text: &[u8]) -> BpeEncoding {
        let ranks: HashMap<(u32, u32), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i))
            .collect();
        let mut tokens = Vec::new();
        for piece in pretokenize(text) {
            let mut symbols: Vec<u32> = piece.iter().map(|&b| b as u32).collect();
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| ranks.get(&(w[0], w[1])))
                    .min()
                    .copied();
                let Some(rank) = best else { break };
                merge_pair(&mut symbols, self.merges[rank], (256 + rank) as u32);
            }
            tokens.extend(symbols);
        }
        let mut spans = Vec::with_capacity(tokens.len());
        let mut at = 0;
        for &t in &tokens {
            let len = self.token_bytes(t).len();
            spans.push(at..at + len);
            at += len;
        }
        BpeEncoding { tokens, spans }
    }

    pub fn token_bytes(&self, token: u32) -> Vec<u8> {
        if token < 256 {
            return vec![token as u8];
        }
        let (a, b) = self.merges[token as usize - 256];
        let mut out = self.token_bytes(a);
        out.extend(self.token_bytes(b));
        out
    }

    pub fn decode(&self, tokens: &[u32]) -> Vec<u8> {
        tokens.iter().flat_map(|&t| self.token_bytes(t)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.merges
            .iter()
            .enumerate()
            .any(|(i, &(a, b))| a as usize >= 256 + i || b as usize >= 256 + i)
        {
            return Err(Error::Data("BPE merge refers to a later token".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no labels to score"));
    }
    Ok(pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64)
}

/// Entity spans `(start, end, class)` of a BIO sequence where tag `0` is
/// outside, `2c + 1` begins class `c` and `2c + 2` continues it. A stray
/// continuation tag opens a new span.
pub fn bio_spans(tags: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (t, &tag) in tags.iter().enumerate() {
        let class = (tag > 0).then(|| (tag - 1) / 2);
        let begins = tag > 0 && tag % 2 == 1;
        match (open, class) {
            (Some((_, c)), Some(k)) if !begins && c == k => continue,
            _ => {
                if let Some((s, c)) = open.take() {
                    spans.push((s, t, c));
                }
                open = class.map(|k| (t, k));
            }
        }
    }
    if let Some((s, c)) = open {
        spans.push((s, tags.len(), c));
    }
    spans
}

/// Micro-averaged exact-match span F1 across sequences.
pub fn span_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predicted sequences for {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "sequence {i}: {} predicted tags for {} gold",
                p.len(),
                g.len()
            )));
        }
        let ps = bio_spans(p);
        let gs = bio_spans(g);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    if n_pred + n_gold == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (n_pred + n_gold) as f64)
}

/// Accuracy for classification, span F1 for tagging.
pub fn task_metrics(pred: &[Label], gold: &[Label], kind: TaskKind) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    match kind {
        TaskKind::SequenceClassification => {
            let unwrap = |ls: &[Label]| -> Result<Vec<usize>> {
                ls.iter()
                    .map(|l| match l {
                        Label::Class(c) => Ok(*c),
                        Label::Tags(_) => Err(Error::Data(
                            "tag sequence where a class was expected".into(),
                        )),
                    })
                    .collect()
            };
            accuracy(&unwrap(pred)?, &unwrap(gold)?)
        }
        TaskKind::ByteTagging => {
            let unwrap = |ls: &[Label]| -> Result<Vec<Vec<usize>>> {
                ls.iter()
                    .map(|l| match l {
                        Label::Tags(t) => Ok(t.clone()),
                        Label::Class(_) => Err(Error::Data(
                            "class where a tag sequence was expected".into(),
                        )),
                    })
                    .collect()
            };
            span_f1(&unwrap(pred)?, &unwrap(gold)?)
        }
    }
}

/// Tag of the first byte of every whitespace-separated word.
pub fn word_level_tags(text: &[u8], byte_tags: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (t, &b) in text.iter().enumerate() {
        let starts = !b.is_ascii_whitespace() && (t == 0 || text[t - 1].is_ascii_whitespace());
        if starts {
            out.push(byte_tags.get(t).copied().unwrap_or(NON_ENTITY));
        }
    }
    out
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Deterministic head predictions, one label per example.
pub fn predict(model: &Hourglass, examples: &[LabeledExample]) -> Result<Vec<Label>> {
    let head = *model
        .head()
        .ok_or_else(|| Error::Config("model has no task head".into()))?;
    map_indexed(examples, |_, ex| -> Result<Label> {
        let out = model.forward(&ex.ids[..ex.valid_len], &ForwardOptions::deterministic())?;
        let logits = model.head_logits(&out)?;
        Ok(match head.kind {
            TaskKind::SequenceClassification => Label::Class(argmax(logits.row(0))),
            TaskKind::ByteTagging => Label::Tags(logits.rows().into_iter().map(argmax).collect()),
        })
    })
    .into_iter()
    .collect()
}

/// Accuracy, or word-level span F1 for byte tagging (each word takes the tag
/// of its first byte).
pub fn evaluate_task(model: &Hourglass, examples: &[LabeledExample]) -> Result<f64> {
    let kind = model
        .head()
        .ok_or_else(|| Error::Config("model has no task head".into()))?
        .kind;
    let pred = predict(model, examples)?;
    let gold: Vec<Label> = examples.iter().map(|e| e.label.clone()).collect();
    if kind == TaskKind::SequenceClassification {
        return task_metrics(&pred, &gold, kind);
    }
    let words = |labels: &[Label]| -> Vec<Label> {
        labels
            .iter()
            .zip(examples)
            .map(|(l, ex)| match l {
                Label::Tags(t) => Label::Tags(word_level_tags(&ex.text, &t[1..])),
                Label::Class(c) => Label::Class(*c),
            })
            .collect()
    };
    task_metrics(&words(&pred), &words(&gold), kind)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageReport {
    pub mean_rate: f64,
    pub std_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_sample: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bpb: Option<f64>,
    pub per_language: BTreeMap<String, LanguageReport>,
    pub task: BTreeMap<String, f64>,
}
