//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexitok::bytes_data::{
    build_labeled, chunk_documents, load_documents, load_labeled, write_documents, write_labeled,
    ByteChunk, LanguageSet, ParallelCorpus, TaskKind,
};
use flexitok::calibration::{calibrate as derive_rates, RateSpec};
use flexitok::checkpoint::Checkpoint;
use flexitok::metrics::{
    bits_per_byte, bpe_train as train_bpe, compression_stats, evaluate_task, inspect_tokenization,
    tokens_per_sample, BpeModel, LanguageReport, MetricsReport, Segmentation, Tokenizer,
};
use flexitok::model::{HeadPooling, Hourglass};
use flexitok::synthetic::{self, CorpusSpec, Script};
use flexitok::train::{prepare_for_task, TrainConfig, Trainer};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    load_config, rate_table, FinetuneConfig, PretrainConfig, RateTable, RatesSource, RunManifest,
};
use crate::exit::{config_error, data_error};
use crate::{
    BpeTrainArgs, CalibrateArgs, EvalArgs, FinetuneArgs, PretrainArgs, RunOverrides, SynthArgs,
    SynthKind, Task, TokenizeArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let corpus = ParallelCorpus::load(&a.parallel)
        .with_context(|| format!("parallel corpus {}", a.parallel.display()))?;
    let report = derive_rates(
        &corpus.byte_lengths(),
        &a.anchor,
        a.alpha,
        a.lambda,
        a.beta_floor,
    )?;
    if let Some(out) = &a.out {
        report.save(out)?;
        info!("wrote {}", out.display());
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn apply_overrides(train: &mut TrainConfig, o: &RunOverrides) -> BTreeMap<String, String> {
    let mut applied = BTreeMap::new();
    if let Some(s) = o.seed {
        train.seed = s;
        applied.insert("seed".into(), s.to_string());
    }
    if let Some(l) = o.loss {
        train.loss_kind = l;
        applied.insert("loss".into(), format!("{l:?}"));
    }
    if let Some(n) = o.steps {
        train.steps = n;
        applied.insert("steps".into(), n.to_string());
    }
    if let Some(l) = o.lambda {
        applied.insert("lambda".into(), l.to_string());
    }
    if let Some(a) = o.alpha {
        applied.insert("alpha".into(), a.to_string());
    }
    applied
}

fn languages_for(
    listed: &Option<Vec<String>>,
    specs: &BTreeMap<String, RateSpec>,
) -> Result<LanguageSet> {
    let langs = match listed {
        Some(codes) => LanguageSet::new(codes.iter().cloned()),
        None => LanguageSet::new(specs.keys().cloned()),
    }
    .map_err(config_error)?;
    for lang in langs.iter() {
        if !specs.contains_key(lang) {
            bail!(config_error(format!("no rate spec for language `{lang}`")));
        }
    }
    Ok(langs)
}

fn load_chunks(path: &Path, chunk_len: usize, langs: &LanguageSet) -> Result<Vec<ByteChunk>> {
    let docs = load_documents(path).with_context(|| format!("corpus {}", path.display()))?;
    if docs.is_empty() {
        bail!(data_error(format!(
            "corpus {} has no documents",
            path.display()
        )));
    }
    let chunks = chunk_documents(&docs, chunk_len, langs)
        .with_context(|| format!("corpus {}", path.display()))?;
    Ok(chunks.into_iter().filter(|c| c.valid_len >= 2).collect())
}

/// Saves the model and metrics, then surfaces any training error. A
/// non-finite loss leaves the last finite parameters on disk.
fn finish_run(
    trainer: Trainer,
    outcome: flexitok::Result<()>,
    out: &Path,
    rates: BTreeMap<String, RateSpec>,
) -> Result<()> {
    let checkpoint = Checkpoint {
        model: trainer.model().clone(),
        rates,
        languages: trainer.languages().clone(),
        step: trainer.step(),
        seed: trainer.config().seed,
        loss_kind: Some(trainer.config().loss_kind),
    };
    checkpoint.save(out.join(CHECKPOINT_FILE))?;
    trainer.write_metrics_csv(out.join(METRICS_FILE))?;
    if let Err(e) = outcome {
        return Err(anyhow::Error::new(e).context(format!(
            "saved the last finite model (step {}) to {}",
            trainer.step(),
            out.join(CHECKPOINT_FILE).display()
        )));
    }
    for (id, lang) in trainer.languages().iter().enumerate() {
        if let Some(rate) = trainer.mean_rate(id, trainer.config().eval_every) {
            info!(
                "{lang}: boundary rate {rate:.4} (compression {:.2})",
                1.0 / rate
            );
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn rates_input(source: &RatesSource) -> Option<PathBuf> {
    match source {
        RatesSource::Path(p) => Some(p.clone()),
        RatesSource::Inline(_) => None,
    }
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (mut cfg, base) = load_config::<PretrainConfig>(&a.config)?;
    cfg.rebase(&base);
    let applied = apply_overrides(&mut cfg.train, &a.overrides);
    cfg.train.validate()?;
    cfg.model.validate()?;
    if cfg.train.chunk_len > cfg.model.max_len {
        bail!(config_error(format!(
            "chunk_len {} exceeds model max_len {}",
            cfg.train.chunk_len, cfg.model.max_len
        )));
    }
    let specs = rate_table(&cfg.rates)?.resolve(a.overrides.alpha, a.overrides.lambda)?;
    let langs = languages_for(&cfg.data.languages, &specs)?;
    if cfg.train.steps > 0 && cfg.data.train.is_none() {
        bail!(config_error("data.train is required when steps > 0"));
    }

    let inputs: Vec<PathBuf> = rates_input(&cfg.rates)
        .into_iter()
        .chain(cfg.data.train.clone())
        .chain(cfg.data.heldout.clone())
        .collect();
    let manifest = RunManifest::new(
        "pretrain",
        Some(&a.config),
        cfg.train.seed,
        inputs,
        &a.out,
        applied,
    )?;
    manifest.start()?;
    info!("run {} -> {}", manifest.run_id, a.out.display());
    let mut resolved = cfg.clone();
    resolved.rates = RatesSource::Inline(specs.clone());
    fs::write(
        a.out.join(CONFIG_FILE),
        serde_json::to_string_pretty(&resolved)? + "\n",
    )?;

    let train = match &cfg.data.train {
        Some(p) => load_chunks(p, cfg.train.chunk_len, &langs)?,
        None => Vec::new(),
    };
    let heldout = cfg
        .data
        .heldout
        .as_deref()
        .map(|p| load_chunks(p, cfg.train.chunk_len, &langs))
        .transpose()?;
    if cfg.train.steps > 0 && train.is_empty() {
        bail!(data_error("training corpus has no chunk with an LM target"));
    }
    let model = Hourglass::new(cfg.model.clone(), None, cfg.train.seed)?;
    info!(
        "{} parameters, {} training chunks",
        model.num_params(),
        train.len()
    );
    let mut trainer = Trainer::new(model, cfg.train.clone(), specs.clone(), langs)?;
    let outcome = if cfg.train.steps > 0 {
        trainer.pretrain(&train, heldout.as_deref())
    } else {
        Ok(())
    };
    finish_run(trainer, outcome, &a.out, specs)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let (mut cfg, base) = load_config::<FinetuneConfig>(&a.config)?;
    cfg.rebase(&base);
    let applied = apply_overrides(&mut cfg.train, &a.overrides);
    cfg.train.validate()?;
    if let Some(task) = a.task {
        cfg.head.kind = match task {
            Task::Classification => TaskKind::SequenceClassification,
            Task::Tagging => TaskKind::ByteTagging,
        };
        if cfg.head.kind == TaskKind::ByteTagging {
            cfg.head.pooling = HeadPooling::MeanOverBytes;
        }
    }
    cfg.head.validate()?;
    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| config_error("data.train is required"))?;
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let table = match &cfg.rates {
        Some(source) => rate_table(source)?,
        None => RateTable::Specs(checkpoint.rates.clone()),
    };
    let specs = table.resolve(a.overrides.alpha, a.overrides.lambda)?;
    let langs = checkpoint.languages.clone();
    languages_for(&Some(langs.iter().map(str::to_string).collect()), &specs)?;

    let inputs: Vec<PathBuf> = [
        Some(a.checkpoint.clone()),
        Some(train_path.clone()),
        cfg.data.eval.clone(),
    ]
    .into_iter()
    .flatten()
    .chain(cfg.rates.as_ref().and_then(rates_input))
    .collect();
    let manifest = RunManifest::new(
        "finetune",
        Some(&a.config),
        cfg.train.seed,
        inputs,
        &a.out,
        applied,
    )?;
    manifest.start()?;
    info!("run {} -> {}", manifest.run_id, a.out.display());
    let mut resolved = cfg.clone();
    resolved.rates = Some(RatesSource::Inline(specs.clone()));
    fs::write(
        a.out.join(CONFIG_FILE),
        serde_json::to_string_pretty(&resolved)? + "\n",
    )?;

    let labeled = |path: &Path| -> Result<_> {
        let records =
            load_labeled(path).with_context(|| format!("labeled data {}", path.display()))?;
        if records.is_empty() {
            bail!(data_error(format!(
                "labeled data {} is empty",
                path.display()
            )));
        }
        build_labeled(&records, cfg.head.kind, cfg.train.chunk_len, &langs)
            .with_context(|| format!("labeled data {}", path.display()))
    };
    let train = labeled(&train_path)?;
    let eval = cfg.data.eval.as_deref().map(labeled).transpose()?;
    let model = prepare_for_task(
        &checkpoint.model,
        cfg.head,
        train.iter().chain(eval.iter().flatten()),
        cfg.train.seed,
    )?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), specs.clone(), langs)?;
    let outcome = if cfg.train.steps > 0 {
        trainer.finetune(&train, eval.as_deref())
    } else {
        Ok(())
    };
    finish_run(trainer, outcome, &a.out, specs)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.corpus.is_none() && a.parallel.is_none() && a.labeled.is_none() {
        bail!(config_error(
            "give at least one of --corpus, --parallel, --labeled"
        ));
    }
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let model = &checkpoint.model;
    let langs = &checkpoint.languages;
    let rates = match &a.rates {
        Some(p) => RateTable::load(p)?.resolve(None, None)?,
        None => checkpoint.rates.clone(),
    };
    let mut report = MetricsReport::default();

    if let Some(path) = &a.corpus {
        let chunks = load_chunks(path, model.config().max_len, langs)?;
        if chunks.is_empty() {
            bail!(data_error(format!(
                "corpus {} has no scorable text",
                path.display()
            )));
        }
        report.bpb = Some(bits_per_byte(model, &chunks)?.bpb());
        for (id, lang) in langs.iter().enumerate() {
            if !chunks.iter().any(|c| c.language_id == id) {
                continue;
            }
            let stats = compression_stats(model, &chunks, id, lang)?;
            if let Some(spec) = rates.get(lang) {
                let rate = 1.0 / stats.mean_rate;
                if !spec.contains(rate) {
                    warn!(
                        "{lang}: boundary rate {rate:.4} outside [{:.4}, {:.4}]",
                        spec.beta, spec.alpha
                    );
                }
            }
            report.per_language.insert(
                lang.to_string(),
                LanguageReport {
                    mean_rate: stats.mean_rate,
                    std_rate: stats.std_rate,
                    tokens_per_sample: None,
                },
            );
        }
    }
    if let Some(path) = &a.parallel {
        let corpus = ParallelCorpus::load(path)
            .with_context(|| format!("parallel corpus {}", path.display()))?;
        for (lang, tps) in tokens_per_sample(Tokenizer::Model(model), &corpus)? {
            report
                .per_language
                .entry(lang)
                .or_default()
                .tokens_per_sample = Some(tps);
        }
    }
    if let Some(path) = &a.labeled {
        let head = model
            .head()
            .ok_or_else(|| config_error("checkpoint has no task head; finetune it first"))?;
        let records =
            load_labeled(path).with_context(|| format!("labeled data {}", path.display()))?;
        if records.is_empty() {
            bail!(data_error(format!(
                "labeled data {} is empty",
                path.display()
            )));
        }
        let examples = build_labeled(&records, head.kind, model.config().max_len, langs)
            .with_context(|| format!("labeled data {}", path.display()))?;
        let name = match head.kind {
            TaskKind::SequenceClassification => "accuracy",
            TaskKind::ByteTagging => "span_f1",
        };
        report
            .task
            .insert(name.into(), evaluate_task(model, &examples)?);
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct SpanJson {
    start: usize,
    end: usize,
}

#[derive(Serialize)]
struct SegmentationJson {
    count: usize,
    compression: f64,
    spans: Vec<SpanJson>,
    rendering: String,
}

impl SegmentationJson {
    fn new(seg: &Segmentation, text: &[u8]) -> Self {
        Self {
            count: seg.count,
            compression: seg.rate,
            spans: seg
                .spans
                .iter()
                .map(|r| SpanJson {
                    start: r.start,
                    end: r.end,
                })
                .collect(),
            rendering: seg.render(text),
        }
    }
}

pub fn tokenize(a: TokenizeArgs) -> Result<()> {
    let text = match (&a.text, &a.file) {
        (Some(t), _) => t.clone().into_bytes(),
        (None, Some(p)) => fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        (None, None) => bail!(config_error("give --text or --file")),
    };
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let seg = inspect_tokenization(&checkpoint.model, &text)?;
    let bpe = a
        .compare_bpe
        .as_deref()
        .map(|p| -> Result<Segmentation> {
            let model = BpeModel::load(p).with_context(|| format!("BPE model {}", p.display()))?;
            let enc = model.encode(&text);
            let count = enc.spans.len();
            Ok(Segmentation {
                spans: enc.spans,
                count,
                rate: if count == 0 {
                    0.0
                } else {
                    text.len() as f64 / count as f64
                },
            })
        })
        .transpose()?;
    if a.json {
        let mut out =
            json!({ "bytes": text.len(), "flexitokens": SegmentationJson::new(&seg, &text) });
        if let Some(b) = &bpe {
            out["bpe"] = serde_json::to_value(SegmentationJson::new(b, &text))?;
        }
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!(
            "flexitokens: {} tokens, {:.2} bytes/token",
            seg.count, seg.rate
        );
        println!("{}", seg.render(&text));
        if let Some(b) = &bpe {
            println!("bpe: {} tokens, {:.2} bytes/token", b.count, b.rate);
            println!("{}", b.render(&text));
        }
    }
    Ok(())
}

pub fn bpe_train(a: BpeTrainArgs) -> Result<()> {
    let docs =
        load_documents(&a.corpus).with_context(|| format!("corpus {}", a.corpus.display()))?;
    let texts: Vec<&[u8]> = docs
        .iter()
        .filter(|d| a.lang.as_deref().is_none_or(|l| d.lang == l))
        .map(|d| d.text.as_bytes())
        .collect();
    if texts.is_empty() {
        bail!(data_error("no documents to train on"));
    }
    let model = train_bpe(&texts, a.vocab)?;
    if model.vocab_size < a.vocab {
        info!(
            "stopped at {} of {} entries (no pair repeats)",
            model.vocab_size, a.vocab
        );
    }
    model.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn parse_languages(spec: &str) -> Result<Vec<(String, Script)>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (code, script) = item
            .split_once(':')
            .ok_or_else(|| config_error(format!("`{item}` is not code:script")))?;
        let script: Script = serde_json::from_value(serde_json::Value::String(script.to_string()))
            .map_err(|_| config_error(format!("unknown script `{script}`")))?;
        out.push((code.to_string(), script));
    }
    if out.is_empty() {
        bail!(config_error("no languages given"));
    }
    LanguageSet::new(out.iter().map(|(c, _)| c.clone())).map_err(config_error)?;
    Ok(out)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let owned = parse_languages(&a.langs)?;
    let langs: Vec<(&str, Script)> = owned.iter().map(|(c, s)| (c.as_str(), *s)).collect();
    let spec = if a.long_words {
        CorpusSpec::long_words(a.seed)
    } else {
        CorpusSpec {
            seed: a.seed,
            ..CorpusSpec::default()
        }
    };
    match a.kind {
        SynthKind::Documents => {
            let docs = synthetic::documents(&spec, &langs, a.n, a.sentences_per_doc, a.stream)?;
            write_documents(&a.out, &docs)?;
        }
        SynthKind::Parallel => {
            fs::write(
                &a.out,
                synthetic::parallel_corpus(&spec, &langs, a.n)?.to_tsv(),
            )?;
        }
        SynthKind::Classification => {
            write_labeled(
                &a.out,
                &synthetic::classification_records(&spec, &langs, a.n, a.classes)?,
            )?;
        }
        SynthKind::Tagging => {
            write_labeled(
                &a.out,
                &synthetic::tagging_records(&spec, &langs, a.n, a.classes)?,
            )?;
        }
    }
    println!("{}", a.out.display());
    Ok(())
}
