//! Property bodies and desk-scale fixtures shared by the property suite and
//! the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use flexitok::boundary::{rate, sample_from_logits, sample_hard, BoundaryProbs, SampleMode};
use flexitok::bytes_data::{
    chunk_documents, decode_ids, encode_bytes, ByteChunk, Document, LanguageSet, TokenId,
    Utf8Policy, BOS, PAD, SPECIALS_OFFSET,
};
use flexitok::calibration::{derive_sigma, RateSpec};
use flexitok::checkpoint::Checkpoint;
use flexitok::metrics::{bits_per_byte, bpe_train, inspect_tokenization, CompressionStats};
use flexitok::model::{ForwardOptions, Hourglass, HourglassConfig};
use flexitok::objectives::flexitokens_loss;
use flexitok::synthetic::Script;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type PropResult = Result<(), TestCaseError>;

pub const LANGS: [(&str, Script); 2] = [("en", Script::Latin), ("te", Script::Telugu)];

/// Table 1, 3x row: `(alpha, sigma)` for en and te.
pub const TABLE1_EN: (f64, f64) = (0.333, 0.023);
pub const TABLE1_TE: (f64, f64) = (0.124, 0.008);

pub fn table1_specs() -> BTreeMap<String, RateSpec> {
    let mut specs = BTreeMap::new();
    for (code, (alpha, sigma)) in [("en", TABLE1_EN), ("te", TABLE1_TE)] {
        specs.insert(
            code.to_string(),
            RateSpec::new(alpha, sigma, 3.0, 0.005).unwrap(),
        );
    }
    specs
}

pub fn languages() -> LanguageSet {
    LanguageSet::new(LANGS.iter().map(|l| l.0)).unwrap()
}

/// Small model shared by the model-level properties.
pub fn tiny_model() -> &'static Hourglass {
    static MODEL: OnceLock<Hourglass> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut cfg = HourglassConfig::desk(16, (1, 1, 1), 32);
        cfg.init_std = 0.3;
        Hourglass::new(cfg, None, 17).unwrap()
    })
}

pub fn byte_ids(bytes: &[u8]) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(bytes.iter().map(|&b| b as TokenId + SPECIALS_OFFSET));
    ids
}

fn chunk_of(bytes: &[u8], language_id: usize) -> ByteChunk {
    let ids = byte_ids(bytes);
    ByteChunk {
        valid_len: ids.len(),
        ids,
        language_id,
    }
}

pub fn bytes_strategy(max: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), 0..max)
}

pub fn text_strategy() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(prop_oneof![Just(b' '), 97u8..105], 1..31)
}

pub fn prop_round_trip(bytes: Vec<u8>) -> PropResult {
    let ids = encode_bytes(&bytes, Utf8Policy::Permissive).map_err(fail)?;
    prop_assert_eq!(ids.len(), bytes.len());
    prop_assert_eq!(decode_ids(&ids), bytes.clone());
    if let Ok(s) = std::str::from_utf8(&bytes) {
        let strict = encode_bytes(s.as_bytes(), Utf8Policy::Strict).map_err(fail)?;
        prop_assert_eq!(strict, ids);
    }
    Ok(())
}

pub fn prop_chunk_concatenation(texts: Vec<String>, chunk_len: usize) -> PropResult {
    let docs: Vec<Document> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Document {
            text: t.clone(),
            lang: LANGS[i % 2].0.to_string(),
        })
        .collect();
    let chunks = chunk_documents(&docs, chunk_len, &languages()).map_err(fail)?;
    let mut rebuilt: Vec<Vec<u8>> = Vec::new();
    for c in &chunks {
        prop_assert_eq!(c.ids.len(), chunk_len);
        prop_assert!(c.ids[c.valid_len..].iter().all(|&i| i == PAD));
        if c.ids[0] == BOS {
            rebuilt.push(Vec::new());
        }
        let body: Vec<TokenId> = c
            .valid_ids()
            .iter()
            .copied()
            .filter(|&i| i != BOS)
            .collect();
        rebuilt.last_mut().unwrap().extend(decode_ids(&body));
    }
    let expected: Vec<Vec<u8>> = texts.iter().map(|t| t.as_bytes().to_vec()).collect();
    prop_assert_eq!(rebuilt, expected);
    Ok(())
}

/// Model segments partition the valid positions, in order, for any mask.
pub fn prop_segment_partition(mut bits: Vec<bool>) -> PropResult {
    let model = tiny_model();
    let n = bits.len();
    let ids: Vec<TokenId> = (0..n)
        .map(|t| if t == 0 { BOS } else { 99 + (t % 7) as TokenId })
        .collect();
    bits[n - 1] = false;
    let out = model
        .forward(&ids, &ForwardOptions::deterministic().with_mask(&bits))
        .map_err(fail)?;
    let mut next = 0;
    for r in &out.segments {
        prop_assert_eq!(r.start, next);
        prop_assert!(r.end > r.start);
        prop_assert!(out.mask.hard[r.end - 1]);
        next = r.end;
    }
    prop_assert_eq!(next, n);
    prop_assert_eq!(out.segments.len(), out.mask.k());
    prop_assert_eq!(out.segment_hidden.nrows(), out.mask.k());
    Ok(())
}

/// The straight-through backward equals the derivative of the soft value
/// with the same noise draw.
pub fn prop_straight_through(logits: Vec<f64>, weights: Vec<f64>, seed: u64) -> PropResult {
    let n = logits.len().min(weights.len());
    let (logits, weights) = (&logits[..n], &weights[..n]);
    let draw = |z: &[f64]| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_from_logits(z, n, 1.0, SampleMode::Stochastic, &mut rng)
    };
    let mask = draw(logits);
    let analytic = mask.backward(weights);
    let h = 1e-6;
    for t in 0..n {
        let mut up = logits.to_vec();
        let mut dn = logits.to_vec();
        up[t] += h;
        dn[t] -= h;
        let f = |z: &[f64]| -> f64 { draw(z).soft.iter().zip(weights).map(|(s, w)| s * w).sum() };
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let scale = fd.abs().max(analytic[t].abs());
        prop_assert!(
            (fd - analytic[t]).abs() <= 1e-4 * scale + 1e-9,
            "t={}: fd {} vs {}",
            t,
            fd,
            analytic[t]
        );
    }
    Ok(())
}

/// Padding never changes `k` or the rate.
pub fn prop_pad_exclusion(p: Vec<f64>, pads: Vec<f64>, seed: u64, stochastic: bool) -> PropResult {
    let mode = if stochastic {
        SampleMode::Stochastic
    } else {
        SampleMode::Deterministic
    };
    let n = p.len();
    let base = sample_hard(&BoundaryProbs { p: p.clone() }, n, 1.0, mode, seed).map_err(fail)?;
    let mut padded = p;
    padded.extend(pads);
    let long = sample_hard(&BoundaryProbs { p: padded }, n, 1.0, mode, seed).map_err(fail)?;
    prop_assert_eq!(base.k(), long.k());
    prop_assert_eq!(rate(&base, n).map_err(fail)?, rate(&long, n).map_err(fail)?);
    prop_assert!(long.hard[n..].iter().all(|&b| !b));
    Ok(())
}

/// Deterministic thresholding is monotone in the probabilities.
pub fn prop_threshold_monotone(p: Vec<f64>, bump: Vec<f64>) -> PropResult {
    let n = p.len();
    let raised: Vec<f64> = p
        .iter()
        .zip(bump.iter().cycle())
        .map(|(a, b)| (a + b).min(1.0))
        .collect();
    let lo =
        sample_hard(&BoundaryProbs { p }, n, 1.0, SampleMode::Deterministic, 0).map_err(fail)?;
    let hi = sample_hard(
        &BoundaryProbs { p: raised },
        n,
        1.0,
        SampleMode::Deterministic,
        0,
    )
    .map_err(fail)?;
    for t in 0..n {
        prop_assert!(!lo.hard[t] || hi.hard[t]);
    }
    Ok(())
}

/// Scoring two corpora separately and pooling the counts equals scoring
/// their union.
pub fn prop_bpb_additive(a: Vec<Vec<u8>>, b: Vec<Vec<u8>>) -> PropResult {
    let model = tiny_model();
    let to_chunks =
        |texts: &[Vec<u8>]| -> Vec<ByteChunk> { texts.iter().map(|t| chunk_of(t, 0)).collect() };
    let (ca, cb) = (to_chunks(&a), to_chunks(&b));
    let both: Vec<ByteChunk> = ca.iter().chain(&cb).cloned().collect();
    let ra = bits_per_byte(model, &ca).map_err(fail)?;
    let rb = bits_per_byte(model, &cb).map_err(fail)?;
    let rab = bits_per_byte(model, &both).map_err(fail)?;
    let pooled = ra.merge(rb);
    prop_assert_eq!(pooled.n_bytes, rab.n_bytes);
    prop_assert!((pooled.nll_bits - rab.nll_bits).abs() <= 1e-9 * rab.nll_bits.max(1.0));
    Ok(())
}

pub fn prop_bpe_idempotent(corpus: Vec<Vec<u8>>, text: Vec<u8>, extra: usize) -> PropResult {
    let bpe = bpe_train(&corpus, 257 + extra).map_err(fail)?;
    let first = bpe.encode(&text);
    prop_assert_eq!(bpe.decode(&first.tokens), text.clone());
    let again = bpe.encode(&bpe.decode(&first.tokens));
    prop_assert_eq!(&again.tokens, &first.tokens);
    prop_assert_eq!(bpe.encode(&text), first);
    Ok(())
}

pub fn prop_checkpoint_bit_exact(values: Vec<f64>, step: usize, seed: u64) -> PropResult {
    let base = tiny_model();
    let mut params = base.params().to_vec();
    for (p, v) in params.iter_mut().zip(values.iter().cycle()) {
        *p = *v;
    }
    let model =
        Hourglass::from_params(base.config().clone(), None, params.clone()).map_err(fail)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("model.bin");
    let ckpt = Checkpoint {
        model,
        rates: table1_specs(),
        languages: languages(),
        step,
        seed,
        loss_kind: None,
    };
    ckpt.save(&path).map_err(fail)?;
    let back = Checkpoint::load(&path).map_err(fail)?;
    let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    prop_assert_eq!(bits(back.model.params()), bits(&params));
    prop_assert_eq!(back.step, step);
    prop_assert_eq!(back.seed, seed);
    prop_assert_eq!(back.rates, ckpt.rates);
    Ok(())
}

/// Segmentation spans tile the text and the rendering drops nothing.
pub fn prop_inspection_partition(text: String) -> PropResult {
    let text = text.into_bytes();
    let seg = inspect_tokenization(tiny_model(), &text).map_err(fail)?;
    let mut next = 0;
    for r in &seg.spans {
        prop_assert_eq!(r.start, next);
        prop_assert!(r.end > r.start);
        next = r.end;
    }
    prop_assert_eq!(next, text.len());
    prop_assert_eq!(seg.count, seg.spans.len());
    let plain: String = seg
        .render(&text)
        .chars()
        .filter(|&c| c != '\u{2502}')
        .collect();
    prop_assert_eq!(plain.as_bytes(), &text[..]);
    Ok(())
}

pub fn prop_band_absorption(alpha: f64, width: f64, n: usize, pos: f64) -> PropResult {
    let spec = RateSpec {
        alpha,
        beta: alpha * (1.0 - width),
        sigma: 0.0,
        lambda: 0.0,
    };
    // pick k so that k/N lies inside the band (if any integer k does)
    let lo = (spec.beta * n as f64).ceil();
    let hi = (spec.alpha * n as f64).floor();
    if lo <= hi {
        let k = lo + ((hi - lo) * pos).floor();
        prop_assert_eq!(flexitokens_loss(k, n, &spec), 0.0);
    }
    Ok(())
}

pub fn prop_sigma_permutation(lengths: Vec<usize>, seed: u64) -> PropResult {
    let mut shuffled = lengths.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    let a = derive_sigma(0.333, 40.0, &lengths).map_err(fail)?;
    let b = derive_sigma(0.333, 40.0, &shuffled).map_err(fail)?;
    prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    let sa =
        CompressionStats::from_rates("en", &lengths.iter().map(|&l| l as f64).collect::<Vec<_>>())
            .map_err(fail)?;
    let sb = CompressionStats::from_rates(
        "en",
        &shuffled.iter().map(|&l| l as f64).collect::<Vec<_>>(),
    )
    .map_err(fail)?;
    prop_assert!(
        (sa.mean_rate - sb.mean_rate).abs() <= 1e-9 && (sa.std_rate - sb.std_rate).abs() <= 1e-9
    );
    Ok(())
}

/// Changing any later byte leaves earlier deterministic logits unchanged.
pub fn prop_causal(bytes: Vec<u8>, pos: usize, replacement: u8) -> PropResult {
    let model = tiny_model();
    let ids = byte_ids(&bytes);
    let j = 1 + pos % (ids.len() - 1);
    let mut other = ids.clone();
    other[j] = replacement as TokenId + SPECIALS_OFFSET;
    let a = model
        .forward(&ids, &ForwardOptions::deterministic())
        .map_err(fail)?;
    let b = model
        .forward(&other, &ForwardOptions::deterministic())
        .map_err(fail)?;
    for t in 0..j {
        for (x, y) in a.logits.row(t).iter().zip(b.logits.row(t)) {
            prop_assert!(
                (x - y).abs() < 1e-9,
                "row {} changed after editing {}",
                t,
                j
            );
        }
    }
    Ok(())
}

pub fn fail<E: std::fmt::Display>(e: E) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

pub fn logit_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-6.0f64..6.0, 1..40)
}

pub fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, 1..60)
}

pub fn docs_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec("[a-z é]{0,40}", 1..6)
}

pub fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<u8>>> {
    proptest::collection::vec(
        proptest::collection::vec(prop_oneof![Just(b' '), 97u8..101], 0..40),
        1..6,
    )
}
