//! Deterministic synthetic corpora.
//!
//! Words are concatenations of morphemes from a small inventory, and
//! sentences are drawn from a Zipf-weighted word lexicon. Text is rendered
//! in one of two scripts: [`Script::Latin`] (one byte per letter) or
//! [`Script::Telugu`] (one three-byte character per letter). Rows of a
//! parallel corpus are the same sentence in every script.

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::bytes_data::{Document, LabeledRecord, ParallelCorpus, NON_ENTITY};
use crate::error::{Error, Result};

pub const ALPHABET: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    Latin,
    Telugu,
}

impl Script {
    pub fn render_letter(self, letter: u8, out: &mut String) {
        debug_assert!((letter as usize) < ALPHABET);
        match self {
            Script::Latin => out.push((b'a' + letter) as char),
            Script::Telugu => {
                out.push(char::from_u32(0x0C15 + letter as u32).expect("assigned code point"))
            }
        }
    }

    pub fn bytes_per_letter(self) -> usize {
        match self {
            Script::Latin => 1,
            Script::Telugu => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Size of the morpheme inventory.
    pub morphemes: usize,
    /// Morpheme lengths, drawn uniformly from this bag.
    pub morph_lens: Vec<usize>,
    pub min_morphs_per_word: usize,
    pub max_morphs_per_word: usize,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Zipf exponent of word frequencies.
    pub zipf_s: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    /// About 2 morphemes of 2.75 letters per word.
    fn default() -> Self {
        Self {
            morphemes: 80,
            morph_lens: vec![2, 3, 3, 3],
            min_morphs_per_word: 1,
            max_morphs_per_word: 3,
            lexicon_size: 400,
            min_words: 6,
            max_words: 14,
            zipf_s: 1.1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// Two long morphemes (5 to 7 letters) per word.
    pub fn long_words(seed: u64) -> Self {
        Self {
            morph_lens: vec![5, 6, 7],
            min_morphs_per_word: 2,
            max_morphs_per_word: 2,
            min_words: 4,
            max_words: 9,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.morphemes == 0
            || self.lexicon_size == 0
            || self.min_words == 0
            || self.min_morphs_per_word == 0
        {
            return Err(Error::Config(
                "inventory, lexicon and sentence sizes must be positive".into(),
            ));
        }
        if self.morph_lens.is_empty() || self.morph_lens.contains(&0) {
            return Err(Error::Config("morpheme lengths must be positive".into()));
        }
        if self.min_words > self.max_words || self.min_morphs_per_word > self.max_morphs_per_word {
            return Err(Error::Config("inverted range in corpus spec".into()));
        }
        Ok(())
    }
}

/// A sentence as letter indices, one vector per word.
pub type Sentence = Vec<Vec<u8>>;

pub struct Generator {
    spec: CorpusSpec,
    lexicon: Vec<Vec<u8>>,
    zipf: Zipf<f64>,
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let letter = Uniform::new(0, ALPHABET as u8).expect("non-empty alphabet");
        let mut inventory: Vec<Vec<u8>> = Vec::with_capacity(spec.morphemes);
        while inventory.len() < spec.morphemes {
            let len = spec.morph_lens[rng.random_range(0..spec.morph_lens.len())];
            let m: Vec<u8> = (0..len).map(|_| letter.sample(&mut rng)).collect();
            if !inventory.contains(&m) {
                inventory.push(m);
            }
        }
        let mut lexicon: Vec<Vec<u8>> = Vec::with_capacity(spec.lexicon_size);
        let mut attempts = 0;
        while lexicon.len() < spec.lexicon_size {
            let parts = rng.random_range(spec.min_morphs_per_word..=spec.max_morphs_per_word);
            let word: Vec<u8> = (0..parts)
                .flat_map(|_| inventory[rng.random_range(0..inventory.len())].clone())
                .collect();
            attempts += 1;
            if !lexicon.contains(&word) {
                lexicon.push(word);
            } else if attempts > 100 * spec.lexicon_size {
                return Err(Error::Config(
                    "morpheme inventory too small for the requested lexicon".into(),
                ));
            }
        }
        let zipf = Zipf::new(spec.lexicon_size as f64, spec.zipf_s)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            spec,
            lexicon,
            zipf,
            rng,
        })
    }

    pub fn lexicon(&self) -> &[Vec<u8>] {
        &self.lexicon
    }

    fn word_index(&mut self) -> usize {
        self.zipf.sample(&mut self.rng) as usize - 1
    }

    pub fn sentence(&mut self) -> Sentence {
        let n = self
            .rng
            .random_range(self.spec.min_words..=self.spec.max_words);
        (0..n)
            .map(|_| {
                let i = self.word_index();
                self.lexicon[i].clone()
            })
            .collect()
    }

    /// Sentence whose words come from a topic's slice of the lexicon with
    /// probability `purity`, otherwise from the whole lexicon.
    fn topical_sentence(&mut self, topic: usize, n_topics: usize, purity: f64) -> Sentence {
        let per = self.lexicon.len() / n_topics;
        let n = self
            .rng
            .random_range(self.spec.min_words..=self.spec.max_words);
        (0..n)
            .map(|_| {
                let i = if self.rng.random_bool(purity) {
                    topic * per + self.word_index() % per
                } else {
                    self.word_index()
                };
                self.lexicon[i].clone()
            })
            .collect()
    }
}

pub fn render(sentence: &Sentence, script: Script) -> String {
    let mut out = String::new();
    for (i, word) in sentence.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        for &l in word {
            script.render_letter(l, &mut out);
        }
    }
    out.push('.');
    out
}

/// `n` aligned sentences rendered in each `(code, script)` column.
pub fn parallel_corpus(
    spec: &CorpusSpec,
    languages: &[(&str, Script)],
    n: usize,
) -> Result<ParallelCorpus> {
    let mut gen = Generator::new(spec.clone())?;
    let rows = (0..n)
        .map(|_| {
            let s = gen.sentence();
            languages
                .iter()
                .map(|&(_, script)| render(&s, script))
                .collect()
        })
        .collect();
    Ok(ParallelCorpus {
        languages: languages.iter().map(|(c, _)| c.to_string()).collect(),
        rows,
    })
}

/// Monolingual documents of `sentences_per_doc` sentences each. Every
/// language gets its own sentence stream; a different `stream` gives fresh
/// sentences over the same lexicon (e.g. for held-out data).
pub fn documents(
    spec: &CorpusSpec,
    languages: &[(&str, Script)],
    docs_per_language: usize,
    sentences_per_doc: usize,
    stream: u64,
) -> Result<Vec<Document>> {
    let mut out = Vec::with_capacity(docs_per_language * languages.len());
    for (li, &(code, script)) in languages.iter().enumerate() {
        let mut gen = Generator::new(spec.clone())?;
        // same lexicon, different sentence stream per language
        let key = crate::parallel::stream_seed(spec.seed, stream);
        gen.rng = ChaCha8Rng::seed_from_u64(crate::parallel::stream_seed(key, li as u64 + 1));
        for _ in 0..docs_per_language {
            let text: Vec<String> = (0..sentences_per_doc)
                .map(|_| render(&gen.sentence(), script))
                .collect();
            out.push(Document {
                text: text.join(" "),
                lang: code.to_string(),
            });
        }
    }
    Ok(out)
}

/// Topic classification: each sentence leans on one of `n_classes` lexicon
/// slices and is labeled with it.
pub fn classification_records(
    spec: &CorpusSpec,
    languages: &[(&str, Script)],
    n: usize,
    n_classes: usize,
) -> Result<Vec<LabeledRecord>> {
    if n_classes < 2 || n_classes > spec.lexicon_size {
        return Err(Error::Config(format!(
            "cannot split a lexicon of {} into {n_classes} topics",
            spec.lexicon_size
        )));
    }
    let mut gen = Generator::new(spec.clone())?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = gen.rng.random_range(0..n_classes);
        let (code, script) = languages[i % languages.len()];
        let s = gen.topical_sentence(label, n_classes, 0.7);
        out.push(LabeledRecord {
            text: render(&s, script),
            lang: code.to_string(),
            label: Some(label),
            tags: None,
        });
    }
    Ok(out)
}

/// Entity tagging: the first `n_classes * 8` lexicon words are entity names
/// of class `index % n_classes`. Tags follow BIO per byte (`2c + 1` on the
/// first byte of an entity word, `2c + 2` on the rest).
pub fn tagging_records(
    spec: &CorpusSpec,
    languages: &[(&str, Script)],
    n: usize,
    n_classes: usize,
) -> Result<Vec<LabeledRecord>> {
    let names = n_classes * 8;
    if n_classes == 0 || names >= spec.lexicon_size {
        return Err(Error::Config(format!(
            "lexicon of {} too small for {n_classes} entity classes",
            spec.lexicon_size
        )));
    }
    let mut gen = Generator::new(spec.clone())?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (code, script) = languages[i % languages.len()];
        let n_words = gen.rng.random_range(spec.min_words..=spec.max_words);
        let mut text = String::new();
        let mut tags = Vec::new();
        for w in 0..n_words {
            if w > 0 {
                text.push(' ');
                tags.push(NON_ENTITY);
            }
            let idx = if gen.rng.random_bool(0.25) {
                gen.rng.random_range(0..names)
            } else {
                gen.word_index()
            };
            let class = (idx < names).then_some(idx % n_classes);
            for (j, &l) in gen.lexicon[idx].clone().iter().enumerate() {
                let before = text.len();
                script.render_letter(l, &mut text);
                let tag = match class {
                    None => NON_ENTITY,
                    Some(c) if j == 0 => 2 * c + 1,
                    Some(c) => 2 * c + 2,
                };
                tags.push(tag);
                // continuation bytes of a multi-byte letter are inside the entity
                for _ in 1..text.len() - before {
                    tags.push(class.map_or(NON_ENTITY, |c| 2 * c + 2));
                }
            }
        }
        text.push('.');
        tags.push(NON_ENTITY);
        out.push(LabeledRecord {
            text,
            lang: code.to_string(),
            label: None,
            tags: Some(tags),
        });
    }
    Ok(out)
}
