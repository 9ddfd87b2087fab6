//! Pretraining and finetuning loops.
//!
//! Each step runs the per-sequence forward passes through
//! [`crate::parallel::map_indexed`], scores the batch with
//! [`total_objective`], runs the backward passes the same way and sums the
//! per-sequence gradients in batch order, so results do not depend on the
//! thread count.

mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, global_norm, Adam};
pub use schedule::lr_schedule;

use crate::bytes_data::{shuffle_order, ByteChunk, Label, LabeledExample, LanguageSet};
use crate::calibration::RateSpec;
use crate::error::{Error, Result};
use crate::metrics::{bits_per_byte, evaluate_task};
use crate::model::{
    BackwardSeeds, ForwardOptions, ForwardOutput, HeadConfig, Hourglass, HourglassConfig,
};
use crate::objectives::{
    class_cross_entropy, lm_cross_entropy, total_objective, BoundaryLossKind, CrossEntropy,
    SequenceTerms,
};
use crate::parallel::{map_indexed, stream_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub chunk_len: usize,
    pub seed: u64,
    pub loss_kind: BoundaryLossKind,
    /// Steps between logged rows and held-out evaluations.
    pub eval_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup_steps: 100,
            max_lr: 2e-3,
            batch_size: 16,
            grad_clip: 1.0,
            chunk_len: 128,
            seed: 0,
            loss_kind: BoundaryLossKind::Flexitokens,
            eval_every: 250,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return err(format!(
                "warmup {} must be shorter than {} steps",
                self.warmup_steps, self.steps
            ));
        }
        if self.max_lr.is_nan()
            || self.max_lr <= 0.0
            || self.grad_clip.is_nan()
            || self.grad_clip <= 0.0
        {
            return err("max_lr and grad_clip must be positive".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return err("batch_size and eval_every must be >= 1".into());
        }
        if self.chunk_len < 2 {
            return err(format!("chunk_len {} < 2", self.chunk_len));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return err("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: HourglassConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
    pub rates: BTreeMap<String, RateSpec>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.train.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqRate {
    pub language_id: usize,
    /// Hard boundary rate `k / N` of the sampled mask.
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step.
    pub step: usize,
    pub lr: f64,
    /// Language-modeling loss when pretraining, task loss when finetuning.
    pub main_loss: f64,
    pub boundary_loss: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub seq_rates: Vec<SeqRate>,
}

impl StepRecord {
    /// Mean rate over this step's sequences of one language.
    pub fn language_rate(&self, language_id: usize) -> Option<f64> {
        let rates: Vec<f64> = self
            .seq_rates
            .iter()
            .filter(|r| r.language_id == language_id)
            .map(|r| r.rate)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpb: Option<f64>,
    /// Accuracy or span F1 on the evaluation set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_metric: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One aggregated row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub main_loss: f64,
    pub boundary_loss: f64,
    pub lr: f64,
    /// Per language: (mean, population std) of sequence rates in the window.
    pub rates: BTreeMap<String, (f64, f64)>,
    pub bpb: Option<f64>,
    pub task_metric: Option<f64>,
}

pub struct Trainer {
    model: Hourglass,
    cfg: TrainConfig,
    specs: BTreeMap<String, RateSpec>,
    langs: LanguageSet,
    adam: Adam,
    step: usize,
    phase: Phase,
    cursor: usize,
    epoch: u64,
    order: Vec<usize>,
    history: Vec<StepRecord>,
    evals: Vec<EvalRecord>,
}

struct SeqForward {
    out: ForwardOutput,
    ce: CrossEntropy,
    language_id: usize,
}

impl Trainer {
    pub fn new(
        model: Hourglass,
        cfg: TrainConfig,
        specs: BTreeMap<String, RateSpec>,
        langs: LanguageSet,
    ) -> Result<Self> {
        cfg.validate()?;
        for lang in langs.iter() {
            specs
                .get(lang)
                .ok_or_else(|| Error::MissingRateSpec(lang.to_string()))?
                .validate()?;
        }
        let adam = Adam::new(
            model.num_params(),
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        let phase = if model.head().is_some() {
            Phase::Finetune
        } else {
            Phase::Pretrain
        };
        Ok(Self {
            model,
            cfg,
            specs,
            langs,
            adam,
            step: 0,
            phase,
            cursor: 0,
            epoch: 0,
            order: Vec::new(),
            history: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn model(&self) -> &Hourglass {
        &self.model
    }

    pub fn into_model(self) -> Hourglass {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn languages(&self) -> &LanguageSet {
        &self.langs
    }

    pub fn specs(&self) -> &BTreeMap<String, RateSpec> {
        &self.specs
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    /// Indices of the next batch. Epoch orders are reshuffled from
    /// `(seed, epoch)`, so the stream is fixed by the seed.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size.min(n) {
            if self.cursor >= self.order.len() {
                self.order = shuffle_order(n, stream_seed(self.cfg.seed, self.epoch));
                self.epoch += 1;
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    fn step_seed(&self, step: usize) -> u64 {
        stream_seed(self.cfg.seed ^ 0x5EED_0F57_E95E_ED00, step as u64)
    }

    /// One pretraining step over `train` (chunks with fewer than two valid
    /// ids must be filtered out beforehand).
    pub fn pretrain_step(&mut self, train: &[ByteChunk]) -> Result<&StepRecord> {
        if train.is_empty() {
            return Err(Error::Empty("no training chunks"));
        }
        if let Some(c) = train.iter().find(|c| c.valid_len < 2) {
            return Err(Error::Data(format!(
                "chunk with valid_len {} has no LM target",
                c.valid_len
            )));
        }
        let batch: Vec<&ByteChunk> = self
            .next_batch(train.len())
            .into_iter()
            .map(|i| &train[i])
            .collect();
        let step = self.step + 1;
        let seed = self.step_seed(step);
        let model = &self.model;
        let forwards = map_indexed(&batch, |i, chunk| -> Result<SeqForward> {
            let ids = chunk.valid_ids();
            let opts = ForwardOptions::stochastic(stream_seed(seed, i as u64)).training();
            let out = model.forward(ids, &opts)?;
            let ce = lm_cross_entropy(out.logits.view(), &ids[1..], ids.len() - 1)?;
            Ok(SeqForward {
                out,
                ce,
                language_id: chunk.language_id,
            })
        });
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
        self.finish_step(step, forwards, |_, f, scale, _| {
            Ok(BackwardSeeds {
                d_logits: Some(&f.ce.d_logits * scale),
                ..Default::default()
            })
        })
    }

    /// One finetuning step: task cross-entropy plus the boundary loss.
    pub fn finetune_step(&mut self, train: &[LabeledExample]) -> Result<&StepRecord> {
        if train.is_empty() {
            return Err(Error::Empty("no finetuning examples"));
        }
        if self.model.head().is_none() {
            return Err(Error::Config(
                "finetuning needs a model with a task head".into(),
            ));
        }
        let batch: Vec<&LabeledExample> = self
            .next_batch(train.len())
            .into_iter()
            .map(|i| &train[i])
            .collect();
        let step = self.step + 1;
        let seed = self.step_seed(step);
        let model = &self.model;
        let forwards = map_indexed(&batch, |i, ex| -> Result<SeqForward> {
            let opts = ForwardOptions::stochastic(stream_seed(seed, i as u64)).training();
            let out = model.forward(&ex.ids[..ex.valid_len], &opts)?;
            let logits = model.head_logits(&out)?;
            let ce = match &ex.label {
                Label::Class(c) => class_cross_entropy(logits.view(), &[*c])?,
                Label::Tags(tags) => class_cross_entropy(logits.view(), &tags[..ex.valid_len])?,
            };
            Ok(SeqForward {
                out,
                ce,
                language_id: ex.language_id,
            })
        });
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
        self.finish_step(step, forwards, |model, f, scale, grads| {
            let d_head = &f.ce.d_logits * scale;
            model.head_backward(&f.out, d_head.view(), grads)
        })
    }

    /// Scores the batch, backpropagates every sequence and applies one
    /// clipped Adam update. `seed_fn` turns a forward result into backward
    /// seeds (it may accumulate head gradients itself).
    fn finish_step<F>(
        &mut self,
        step: usize,
        forwards: Vec<SeqForward>,
        seed_fn: F,
    ) -> Result<&StepRecord>
    where
        F: Fn(&Hourglass, &SeqForward, f64, &mut [f64]) -> Result<BackwardSeeds> + Sync,
    {
        let terms: Vec<SequenceTerms<'_>> = forwards
            .iter()
            .map(|f| SequenceTerms {
                lm_loss: f.ce.mean,
                k: f.out.k_value(),
                n: f.out.mask.valid_len,
                language: self.langs.code(f.language_id),
            })
            .collect();
        let (loss, d_k) = total_objective(&terms, &self.specs, self.cfg.loss_kind)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let scale = 1.0 / forwards.len() as f64;
        let n_params = self.model.num_params();
        let model = &self.model;
        let parts = map_indexed(&forwards, |i, f| -> Result<Vec<f64>> {
            let mut grads = vec![0.0; n_params];
            let mut seeds = seed_fn(model, f, scale, &mut grads)?;
            seeds.d_k = d_k[i];
            model.backward(&f.out, &seeds, &mut grads);
            Ok(grads)
        });
        let mut grads = vec![0.0; n_params];
        for part in parts {
            for (g, p) in grads.iter_mut().zip(part?) {
                *g += p;
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = lr_schedule(step, &self.cfg);
        self.adam.update(self.model.params_mut(), &grads, lr);
        self.step = step;
        let seq_rates = forwards
            .iter()
            .map(|f| SeqRate {
                language_id: f.language_id,
                rate: f.out.mask.k() as f64 / f.out.mask.valid_len as f64,
            })
            .collect();
        let record = StepRecord {
            step,
            lr,
            main_loss: loss.lm_loss,
            boundary_loss: loss.boundary_loss,
            total: loss.total,
            grad_norm,
            seq_rates,
        };
        debug!(
            "step {step} loss {:.4} boundary {:.4} lr {lr:.2e}",
            record.main_loss, record.boundary_loss
        );
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    fn due_for_eval(&self) -> bool {
        self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps
    }

    /// Runs until `cfg.steps`, evaluating held-out bits per byte every
    /// `eval_every` steps.
    pub fn pretrain(&mut self, train: &[ByteChunk], heldout: Option<&[ByteChunk]>) -> Result<()> {
        self.phase = Phase::Pretrain;
        while self.step < self.cfg.steps {
            self.pretrain_step(train)?;
            if self.due_for_eval() {
                let bpb = heldout
                    .map(|h| bits_per_byte(&self.model, h))
                    .transpose()?
                    .map(|r| r.bpb());
                self.log_progress(bpb, None);
                self.evals.push(EvalRecord {
                    step: self.step,
                    bpb,
                    task_metric: None,
                });
            }
        }
        Ok(())
    }

    /// Runs until `cfg.steps`, evaluating the task metric on `eval` every
    /// `eval_every` steps.
    pub fn finetune(
        &mut self,
        train: &[LabeledExample],
        eval: Option<&[LabeledExample]>,
    ) -> Result<()> {
        self.phase = Phase::Finetune;
        while self.step < self.cfg.steps {
            self.finetune_step(train)?;
            if self.due_for_eval() {
                let metric = eval.map(|e| evaluate_task(&self.model, e)).transpose()?;
                self.log_progress(None, metric);
                self.evals.push(EvalRecord {
                    step: self.step,
                    bpb: None,
                    task_metric: metric,
                });
            }
        }
        Ok(())
    }

    fn log_progress(&self, bpb: Option<f64>, metric: Option<f64>) {
        let last = self.history.last().expect("a step ran");
        let mut msg = format!(
            "step {} loss {:.4} boundary {:.4}",
            self.step, last.main_loss, last.boundary_loss
        );
        for (id, lang) in self.langs.iter().enumerate() {
            if let Some(r) = self.mean_rate(id, self.cfg.eval_every) {
                let _ = write!(msg, " {lang}:{r:.3}");
            }
        }
        if let Some(b) = bpb {
            let _ = write!(msg, " bpb {b:.4}");
        }
        if let Some(m) = metric {
            let _ = write!(msg, " task {m:.4}");
        }
        info!("{msg}");
    }

    /// Mean of the per-step language rates over the last `window` steps.
    pub fn mean_rate(&self, language_id: usize, window: usize) -> Option<f64> {
        let start = self.history.len().saturating_sub(window);
        let rates: Vec<f64> = self.history[start..]
            .iter()
            .filter_map(|r| r.language_rate(language_id))
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    /// History aggregated into `eval_every`-step windows.
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for window in self.history.chunks(self.cfg.eval_every) {
            let last = window.last().expect("non-empty chunk");
            let n = window.len() as f64;
            let mut rates = BTreeMap::new();
            for (id, lang) in self.langs.iter().enumerate() {
                let xs: Vec<f64> = window
                    .iter()
                    .flat_map(|r| r.seq_rates.iter())
                    .filter(|r| r.language_id == id)
                    .map(|r| r.rate)
                    .collect();
                if !xs.is_empty() {
                    rates.insert(
                        lang.to_string(),
                        (
                            crate::calibration::mean(&xs),
                            crate::calibration::population_std(&xs),
                        ),
                    );
                }
            }
            let eval = self.evals.iter().find(|e| e.step == last.step);
            rows.push(MetricsRow {
                step: last.step,
                main_loss: window.iter().map(|r| r.main_loss).sum::<f64>() / n,
                boundary_loss: window.iter().map(|r| r.boundary_loss).sum::<f64>() / n,
                lr: last.lr,
                rates,
                bpb: eval.and_then(|e| e.bpb),
                task_metric: eval.and_then(|e| e.task_metric),
            });
        }
        rows
    }

    pub fn metrics_csv(&self) -> String {
        let main = match self.phase {
            Phase::Pretrain => "lm_loss_nats",
            Phase::Finetune => "task_loss_nats",
        };
        let mut s = format!("step,{main},boundary_loss,lr");
        for lang in self.langs.iter() {
            let _ = write!(s, ",{lang}_rate_mean,{lang}_rate_std");
        }
        s.push_str(",heldout_bpb,task_metric\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in self.metrics_rows() {
            let _ = write!(
                s,
                "{},{:.6},{:.6},{:.6e}",
                row.step, row.main_loss, row.boundary_loss, row.lr
            );
            for lang in self.langs.iter() {
                match row.rates.get(lang) {
                    Some((m, sd)) => {
                        let _ = write!(s, ",{m:.6},{sd:.6}");
                    }
                    None => s.push_str(",,"),
                }
            }
            let _ = writeln!(s, ",{},{}", opt(row.bpb), opt(row.task_metric));
        }
        s
    }

    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.metrics_csv())?;
        Ok(())
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Hourglass,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub metrics_csv: String,
}

impl From<Trainer> for TrainOutcome {
    fn from(t: Trainer) -> Self {
        let metrics_csv = t.metrics_csv();
        Self {
            history: t.history,
            evals: t.evals,
            metrics_csv,
            model: t.model,
        }
    }
}

/// Pretrains `model` on chunked text. Chunks without an LM target
/// (`valid_len < 2`) are skipped.
pub fn pretrain(
    model: Hourglass,
    train: &[ByteChunk],
    heldout: Option<&[ByteChunk]>,
    cfg: TrainConfig,
    specs: BTreeMap<String, RateSpec>,
    langs: LanguageSet,
) -> Result<TrainOutcome> {
    let usable: Vec<ByteChunk> = train.iter().filter(|c| c.valid_len >= 2).cloned().collect();
    if usable.len() < train.len() {
        info!(
            "skipping {} chunks without an LM target",
            train.len() - usable.len()
        );
    }
    let mut trainer = Trainer::new(model, cfg, specs, langs)?;
    if trainer.cfg.steps > 0 {
        trainer.pretrain(&usable, heldout)?;
    }
    Ok(trainer.into())
}

/// Attaches `head` (replacing any existing head) and extends `max_len` to
/// the longest example. Returns a clone when nothing changes.
pub fn prepare_for_task<'a>(
    model: &Hourglass,
    head: HeadConfig,
    examples: impl IntoIterator<Item = &'a LabeledExample>,
    seed: u64,
) -> Result<Hourglass> {
    head.validate()?;
    let max_len = examples
        .into_iter()
        .map(|e| e.valid_len)
        .max()
        .unwrap_or(0)
        .max(model.config().max_len);
    if model.head() == Some(&head) && max_len == model.config().max_len {
        Ok(model.clone())
    } else {
        model.resized(max_len, Some(head), stream_seed(seed, u64::MAX))
    }
}

/// Attaches `head` and finetunes.
pub fn finetune(
    model: &Hourglass,
    head: HeadConfig,
    train: &[LabeledExample],
    eval: Option<&[LabeledExample]>,
    cfg: TrainConfig,
    specs: BTreeMap<String, RateSpec>,
    langs: LanguageSet,
) -> Result<TrainOutcome> {
    let tuned = prepare_for_task(
        model,
        head,
        train.iter().chain(eval.unwrap_or(&[])),
        cfg.seed,
    )?;
    let mut trainer = Trainer::new(tuned, cfg, specs, langs)?;
    if trainer.cfg.steps > 0 {
        trainer.finetune(train, eval)?;
    }
    Ok(trainer.into())
}
